"""Macro-F1 of a rating-level probe on frozen representations, standard training vs. BPL-Hard.

The probe is fitted on the randomized-exposure ratings, so it measures how
well each representation separates preference levels off the observed
distribution.
"""

import warnings

from _common import parser, setup

from bpl.evaluation import macro_f1, representation_probe, write_csv
from bpl.experiments import synthetic_data
from bpl.objectives import TrainingConfig
from bpl.trainer import run_mode

warnings.filterwarnings("ignore", module="sklearn")


def main():
    args = parser(__doc__).parse_args()
    out = setup(args)
    data = synthetic_data()
    rows = []
    for seed in range(args.seeds):
        cfg = TrainingConfig(seed=seed)
        for mode in ("standard", "bpl-hard"):
            res, _, _ = run_mode(mode, data.train, data.validation, cfg)
            per_level = representation_probe(res.model, data.counterfactual, seed=seed)
            rows.append({"seed": seed, "mode": mode, "macro_f1": macro_f1(per_level),
                         **{f"f1_{lv}": v for lv, v in per_level.items()}})
            print(f"seed {seed} {mode:9s} macro-F1 {rows[-1]['macro_f1']:.4f}", flush=True)
    write_csv(out / "representation_probe.csv", rows)


if __name__ == "__main__":
    main()
