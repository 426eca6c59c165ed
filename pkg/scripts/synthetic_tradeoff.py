"""Factual vs. counterfactual MSE of standard training, BPL-Hard and its ablations on the synthetic world."""

from _common import parser, setup

from bpl.evaluation import harmonic_mean, paired_t, write_csv
from bpl.experiments import summarize, synthetic_data, synthetic_seed
from bpl.objectives import TrainingConfig


def main():
    args = parser(__doc__).parse_args()
    out = setup(args)
    data = synthetic_data()
    runs = [synthetic_seed(data, TrainingConfig(seed=s)) for s in range(args.seeds)]
    rows = [{"seed": s, "mode": mode, "factual_mse": r["factual_mse"], "counterfactual_mse": r["counterfactual_mse"],
             "best_epoch": r["best_epoch"]}
            for s, run in enumerate(runs) for mode, r in run.items()]
    write_csv(out / "synthetic_tradeoff.csv", rows)

    print(f"{'mode':32s} {'factual':>8s} {'counterf':>8s} {'H-mean':>8s}")
    for mode in runs[0]:
        f, c = summarize(runs, mode)
        print(f"{mode:32s} {f:8.4f} {c:8.4f} {harmonic_mean(f, c):8.4f}")
    if args.seeds > 1:
        t, p = paired_t([r["standard"]["counterfactual_mse"] for r in runs],
                        [r["bpl-hard"]["counterfactual_mse"] for r in runs])
        print(f"standard vs BPL-Hard counterfactual MSE: t={t:.2f} p={p:.3g}")


if __name__ == "__main__":
    main()
