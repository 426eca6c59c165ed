"""Counterfactual MSE per affinity bucket, standard training vs. BPL-Hard."""

from _common import parser, setup

from bpl.evaluation import affinity_bucket_errors, bucket_spread, write_csv
from bpl.experiments import synthetic_data
from bpl.objectives import TrainingConfig
from bpl.trainer import run_mode


def main():
    p = parser(__doc__, seeds=1)
    p.add_argument("--buckets", type=int, default=10)
    args = p.parse_args()
    out = setup(args)
    data = synthetic_data()
    cf = data.counterfactual
    rows = []
    for seed in range(args.seeds):
        cfg = TrainingConfig(seed=seed)
        bpl, _, affinity = run_mode("bpl-hard", data.train, data.validation, cfg)
        std, _, _ = run_mode("standard", data.train, data.validation, cfg)
        for mode, res in (("standard", std), ("bpl-hard", bpl)):
            buckets = affinity_bucket_errors(res.model, cf.users, cf.items, cf.ratings, affinity, args.buckets)
            rows += [{"seed": seed, "mode": mode, **b} for b in buckets]
            print(f"seed {seed} {mode:9s} spread {bucket_spread(buckets):.4f} "
                  + " ".join(f"{b['mse']:.3f}" for b in buckets), flush=True)
    write_csv(out / "bucket_errors.csv", rows)


if __name__ == "__main__":
    main()
