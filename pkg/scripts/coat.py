"""Standard training, the teacher and BPL-Hard on Coat under the randomized-test protocol.

DATA is either a ``bpl prepare --protocol rct`` directory or a folder with
raw ``train.tsv`` (biased ratings) and ``test.tsv`` (randomized ratings).
"""

from pathlib import Path

import numpy as np
from _common import parser, setup

from bpl.evaluation import write_csv
from bpl.experiments import benchmark_seed, load_benchmark
from bpl.objectives import TrainingConfig


def main():
    p = parser(__doc__)
    p.add_argument("data", type=Path)
    args = p.parse_args()
    out = setup(args)
    train, val, test = load_benchmark(args.data)
    runs = [benchmark_seed(train, val, test, TrainingConfig(seed=s)) for s in range(args.seeds)]
    write_csv(out / "coat.csv", [{"seed": s, **r} for s, r in enumerate(runs)])
    for name in runs[0]:
        vals = [r[name] for r in runs]
        print(f"{name:10s} {np.mean(vals):.4f} +- {np.std(vals):.4f}")


if __name__ == "__main__":
    main()
