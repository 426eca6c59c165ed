"""Grid over the adversarial weight, the distillation weight and the S01 share, selected on validation MSE."""

import itertools

from _common import parser, setup

from bpl.evaluation import mse_mae, write_csv
from bpl.experiments import synthetic_data
from bpl.objectives import TrainingConfig
from bpl.trainer import run_mode


def main():
    p = parser(__doc__, seeds=1)
    p.add_argument("--alpha", type=float, nargs="+", default=[0.5, 1.0, 2.0])
    p.add_argument("--beta", type=float, nargs="+", default=[0.5, 1.0, 2.0])
    p.add_argument("--x-percent", type=float, nargs="+", default=[10.0, 20.0, 30.0])
    args = p.parse_args()
    out = setup(args)
    data = synthetic_data()
    rows = []
    for a, b, x in itertools.product(args.alpha, args.beta, args.x_percent):
        for seed in range(args.seeds):
            cfg = TrainingConfig(alpha=a, beta=b, x_percent=x, seed=seed)
            res, _, _ = run_mode("bpl-hard", data.train, data.validation, cfg)
            rows.append({"alpha": a, "beta": b, "x_percent": x, "seed": seed, "val_mse": res.best_val_mse,
                         "factual_mse": mse_mae(res.model, data.factual)[0],
                         "counterfactual_mse": mse_mae(res.model, data.counterfactual)[0]})
            print(" ".join(f"{k}={v:.4g}" for k, v in rows[-1].items()), flush=True)
    write_csv(out / "hyperparameter_grid.csv", rows)
    best = min(rows, key=lambda r: r["val_mse"])
    print("selected on validation:", {k: best[k] for k in ("alpha", "beta", "x_percent", "counterfactual_mse")})


if __name__ == "__main__":
    main()
