"""``bpl`` command line: simulate, prepare, train, evaluate, config.

Data directories hold ``train.tsv``, ``val.tsv``, ``counterfactual.tsv`` and
(unless prepared under the RCT protocol) ``factual.tsv``, plus ``dataset.txt``.
Set ``BPL_LOG_LEVEL`` (DEBUG, INFO, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .affinity import AffinityScores, estimate_affinity
from .config import ConfigError, dump_kv, from_kv, read_kv
from .data import (DataError, GeneratorConfig, RatingDataset, build_space_split, generate_synthetic, load_tsv,
                   save_reindex_maps, save_tsv, split_factual, split_validation)
from .evaluation import affinity_bucket_errors, evaluate, mse_mae, write_csv
from .model import PreferenceModel
from .numerics import load_checkpoint
from .objectives import ABLATIONS, TrainingConfig
from .trainer import TrainingDiverged, run_mode, write_run

log = logging.getLogger("bpl")

MODES = ("standard", "bpl-soft", "bpl-hard") + tuple(f"ablation:{a}" for a in ABLATIONS if a != "none")


class CommandError(RuntimeError):
    """Reported on stderr with exit status 1."""


def _mode(value: str) -> str:
    if value not in MODES:
        raise argparse.ArgumentTypeError(f"invalid mode {value!r} (choose from {', '.join(MODES)})")
    return value


# ---------------------------------------------------------------------------
# data directories


def _write_splits(out: Path, splits: dict[str, RatingDataset | None], info: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in splits.items():
        if ds is not None:
            save_tsv(ds, out / f"{name}.tsv")
    lines = [f"{k}={v}" for k, v in info.items()]
    (out / "dataset.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_data_dir(path: str | Path) -> dict[str, RatingDataset | None]:
    path = Path(path)
    info = read_kv(path / "dataset.txt") if (path / "dataset.txt").exists() else {}
    if "num_levels" not in info:
        raise CommandError(f"{path}: not a data directory (dataset.txt with num_levels missing)")
    k = int(info["num_levels"])
    out: dict[str, RatingDataset | None] = {}
    for name in ("train", "val", "factual", "counterfactual"):
        f = path / f"{name}.tsv"
        out[name] = load_tsv(f, k) if f.exists() else None
    if out["train"] is None:
        raise CommandError(f"{path}: train.tsv missing")
    return out


def cmd_simulate(args) -> None:
    values = read_kv(args.config)
    config = from_kv(GeneratorConfig, values, require_all=True,
                     **({"seed": args.seed} if args.seed is not None else {}))
    world, train_all, cf, fact = generate_synthetic(config)
    train, val = split_validation(train_all, config.val_fraction, config.seed)
    out = Path(args.out_dir)
    _write_splits(out, {"train": train, "val": val, "factual": fact, "counterfactual": cf},
                  {"source": "synthetic", "protocol": "synthetic", "num_users": config.num_users,
                   "num_items": config.num_items, "num_levels": config.num_levels})
    world.save(out)
    log.info("simulated %d train / %d val / %d factual / %d counterfactual ratings",
             len(train), len(val), len(fact), len(cf))


def cmd_prepare(args) -> None:
    full = load_tsv(args.train, args.levels)
    test = None
    if args.test:
        test = load_tsv(args.test, args.levels, user_ids=full.user_ids, item_ids=full.item_ids)
        # the test file may introduce ids; both files share one index space
        full = dataclasses.replace(full, num_users=test.num_users, num_items=test.num_items,
                                   user_ids=test.user_ids, item_ids=test.item_ids)
    if args.protocol == "rct":
        if test is None:
            raise CommandError("the rct protocol needs --test (the randomized test file)")
        fact = None
        train, val = split_validation(full, args.val_fraction, args.seed)
    else:
        rest, _, fact = split_factual(full, args.test_fraction, 0.0, args.seed)
        train, val = split_validation(rest, args.val_fraction, args.seed)
    out = Path(args.out_dir)
    _write_splits(out, {"train": train, "val": val, "factual": fact, "counterfactual": test},
                  {"source": Path(args.train).name, "protocol": args.protocol, "num_users": full.num_users,
                   "num_items": full.num_items, "num_levels": args.levels, "seed": args.seed})
    save_reindex_maps(full, out)
    log.info("prepared %d train / %d val ratings (%s protocol)", len(train), len(val), args.protocol)


# ---------------------------------------------------------------------------
# training and evaluation


def _training_config(args) -> TrainingConfig:
    values = read_kv(args.config) if args.config else {}
    overrides = {"seed": args.seed} if args.seed is not None else {}
    return from_kv(TrainingConfig, values, **overrides)


def _metrics(model, data) -> dict:
    out = {}
    fact, cf = data["factual"], data["counterfactual"]
    if fact is not None and cf is not None:
        out.update({k: v for k, v in evaluate(model, fact, cf).to_dict().items() if k not in ("buckets", "metadata")})
    else:
        for name, ds in (("factual", fact), ("counterfactual", cf)):
            if ds is not None:
                mse, mae = mse_mae(model, ds)
                out[f"{name}_mse"], out[f"{name}_mae"] = round(mse, 6), round(mae, 6)
    return out


def cmd_train(args) -> None:
    config = _training_config(args)
    data = load_data_dir(args.data_dir)
    train, val = data["train"], data["val"]
    if val is None:
        train, val = split_validation(train, config.val_fraction, config.seed)
    affinity = AffinityScores.read_tsv(args.affinity) if args.affinity else None
    try:
        result, teacher, affinity = run_mode(args.mode, train, val, config, affinity=affinity)
    except TrainingDiverged as exc:
        raise CommandError(f"training diverged: {exc}") from exc
    run_dir = Path(args.run_dir)
    write_run(run_dir, result, _metrics(result.model, data), teacher, affinity)
    meta = {"created": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "data_dir": str(Path(args.data_dir).resolve()),
            "mode": args.mode, "version": __version__}
    (run_dir / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    log.info("%s: best epoch %d, validation MSE %.4f", args.mode, result.best_epoch, result.best_val_mse)


def _load_run(run_dir: Path) -> tuple[PreferenceModel, dict]:
    ckpt = run_dir / "model.bin"
    if not ckpt.exists():
        raise CommandError(f"{run_dir}: checkpoint model.bin missing")
    info = json.loads((run_dir / "metrics.json").read_text()) if (run_dir / "metrics.json").exists() else {}
    return PreferenceModel.from_state(load_checkpoint(ckpt)), info


def cmd_evaluate(args) -> None:
    data = load_data_dir(args.data_dir)
    rows, buckets = [], []
    for rd in map(Path, args.run_dirs):
        model, info = _load_run(rd)
        row = {"run": rd.name, "mode": info.get("mode", ""), "ablation": info.get("ablation", "")}
        row.update(_metrics(model, data))
        rows.append(row)
        if args.buckets:
            cf = data["counterfactual"]
            if cf is None:
                raise CommandError("--buckets needs a counterfactual test set")
            if (rd / "affinity.tsv").exists():
                affinity = AffinityScores.read_tsv(rd / "affinity.tsv")
            else:
                config = from_kv(TrainingConfig, read_kv(rd / "config.txt")) if (rd / "config.txt").exists() \
                    else TrainingConfig()
                train = data["train"]
                affinity = estimate_affinity(train, build_space_split(train, cap=config.s0_cap), config)
            for b in affinity_bucket_errors(model, cf.users, cf.items, cf.ratings, affinity, args.num_buckets):
                buckets.append({"run": rd.name, **b})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out.with_suffix(".csv"), rows)
    payload = {"runs": rows}
    if args.buckets:
        write_csv(out.with_name(out.stem + "_buckets.csv"), buckets)
        payload["buckets"] = buckets
    out.with_suffix(".json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for row in rows:
        print("\t".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in row.values()))


def cmd_config(args) -> None:
    cls = GeneratorConfig if args.kind == "generator" else TrainingConfig
    sys.stdout.write(dump_kv(cls()))


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="draw a synthetic MNAR world and its splits")
    s.add_argument("--config", required=True, help="generator key=value file (every key required)")
    s.add_argument("--seed", type=int)
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("prepare", help="ingest TSV ratings into a data directory")
    s.add_argument("--train", required=True, help="biased (self-selected) ratings")
    s.add_argument("--test", help="randomized-exposure ratings, used as the counterfactual test")
    s.add_argument("--levels", type=int, default=5)
    s.add_argument("--protocol", choices=("main", "rct"), default="main",
                   help="main: split a factual test off the training file; rct: keep it whole")
    s.add_argument("--test-fraction", type=float, default=0.1)
    s.add_argument("--val-fraction", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train one model into a run directory")
    s.add_argument("--mode", type=_mode, required=True, metavar="MODE", help=", ".join(MODES))
    s.add_argument("--data-dir", required=True)
    s.add_argument("--run-dir", required=True)
    s.add_argument("--config", help="training key=value file; missing keys take defaults")
    s.add_argument("--seed", type=int)
    s.add_argument("--affinity", help="precomputed affinity TSV to use instead of estimating one")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="consolidate metrics over run directories")
    s.add_argument("run_dirs", nargs="+")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out", default="report", help="output path stem for .csv/.json")
    s.add_argument("--buckets", action="store_true", help="also emit per-affinity-bucket counterfactual MSE")
    s.add_argument("--num-buckets", type=int, default=10)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("config", help="print a default config file")
    s.add_argument("kind", choices=("generator", "training"))
    s.set_defaults(func=cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("BPL_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CommandError, ConfigError, DataError, FileNotFoundError, ValueError) as exc:
        print(f"bpl {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
