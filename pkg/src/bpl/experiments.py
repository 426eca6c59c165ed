"""Multi-seed experiment drivers shared by the scripts and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .affinity import estimate_affinity
from .data import (GeneratorConfig, RatingDataset, SyntheticWorld, build_space_split, generate_synthetic, load_tsv,
                   split_validation)
from .evaluation import factor_correlations, mse_mae
from .objectives import TrainingConfig
from .trainer import FilterProbe, TrainResult, prepare_space, run_ablation, train_bpl, train_standard, train_teacher

log = logging.getLogger(__name__)

ABLATION_MODES = ("no_confidence_penalty", "no_sd", "no_pd")


@dataclass
class SyntheticData:
    world: SyntheticWorld
    train: RatingDataset
    validation: RatingDataset
    factual: RatingDataset
    counterfactual: RatingDataset


def synthetic_data(config: GeneratorConfig | None = None) -> SyntheticData:
    """The generated world with the same validation hold-out as ``bpl simulate``."""
    config = config or GeneratorConfig()
    world, train_all, cf, fact = generate_synthetic(config)
    train, val = split_validation(train_all, config.val_fraction, config.seed)
    return SyntheticData(world, train, val, fact, cf)


def _scores(result: TrainResult, data: SyntheticData) -> dict:
    return {
        "factual_mse": mse_mae(result.model, data.factual)[0],
        "counterfactual_mse": mse_mae(result.model, data.counterfactual)[0],
        "best_epoch": result.best_epoch,
        "history": result.history,
    }


def tune_max_probability(data: SyntheticData, teacher, affinity, config: TrainingConfig, split,
                         grid=(0.3, 0.5, 0.7, 0.9), probe: FilterProbe | None = None) -> tuple[float, TrainResult]:
    """BPL-Hard with the max-probability filter, threshold picked on validation MSE."""
    best = None
    for m in grid:
        res = train_bpl(data.train, data.validation, teacher, affinity,
                        config.with_(filter_mode="max_probability", m=m), split,
                        probe=FilterProbe(probe.users, probe.items, probe.ratings, m) if probe else None)
        if best is None or res.best_val_mse < best[1].best_val_mse:
            best = (m, res)
    return best


def synthetic_seed(data: SyntheticData, config: TrainingConfig, ablations=ABLATION_MODES,
                   filter_grid=None) -> dict[str, dict]:
    """Standard training, BPL-Hard, the given ablations and optionally the max-probability variant, one seed."""
    out = {"standard": _scores(train_standard(data.train, data.validation, config), data)}
    teacher = train_teacher(data.train, data.validation, config)
    out["teacher"] = _scores(teacher.result, data)
    split, affinity = prepare_space(data.train, config.with_(combination_mode="hard"))
    probe = FilterProbe.from_world(data.world, split, seed=config.seed, m=config.m)
    hard = config.with_(combination_mode="hard", ablation="none")
    out["bpl-hard"] = _scores(train_bpl(data.train, data.validation, teacher, affinity, hard, split, probe), data)
    for name in ablations:
        out[f"ablation:{name}"] = _scores(run_ablation(name, data.train, data.validation, teacher, affinity, hard,
                                                       split), data)
    if filter_grid:
        m, res = tune_max_probability(data, teacher, affinity, hard, split, filter_grid, probe)
        out["bpl-hard:max_probability"] = {**_scores(res, data), "m": m}
    log.info("seed %d: %s", config.seed,
             {k: round(v["counterfactual_mse"], 4) for k, v in out.items()})
    return out


def affinity_correlations(config: GeneratorConfig, training: TrainingConfig | None = None
                          ) -> tuple[float, float, float]:
    """Affinity-vs-factor Spearman correlations on a generated world.

    The estimator is fitted on one half of the training ratings and the
    factor statistics come from the other half, so the estimator's own
    sampling noise cannot manufacture a correlation.
    """
    training = training or TrainingConfig()
    _, train, _, _ = generate_synthetic(config)
    fit, reference = split_validation(train, 0.5, config.seed)
    affinity = estimate_affinity(fit, build_space_split(fit), training)
    return factor_correlations(fit, affinity, reference=reference)


def summarize(seeds: list[dict[str, dict]], mode: str) -> tuple[float, float]:
    f = np.mean([s[mode]["factual_mse"] for s in seeds])
    c = np.mean([s[mode]["counterfactual_mse"] for s in seeds])
    return float(f), float(c)


def load_benchmark(directory, num_levels: int = 5, val_fraction: float = 0.1, seed: int = 0
                   ) -> tuple[RatingDataset, RatingDataset, RatingDataset]:
    """(train, validation, randomized test) from a benchmark directory under the RCT protocol.

    Accepts either a directory written by ``bpl prepare --protocol rct``
    (``train.tsv``, ``val.tsv``, ``counterfactual.tsv``) or raw triples
    ``train.tsv`` + ``test.tsv``, where the whole biased file is used for
    training apart from the validation hold-out.
    """
    d = Path(directory)
    if (d / "counterfactual.tsv").exists():
        train, test = load_tsv(d / "train.tsv", num_levels), load_tsv(d / "counterfactual.tsv", num_levels)
        val = load_tsv(d / "val.tsv", num_levels)
        return train, val, test
    full = load_tsv(d / "train.tsv", num_levels)
    test = load_tsv(d / "test.tsv", num_levels, user_ids=full.user_ids, item_ids=full.item_ids)
    full = full.with_shape(test.num_users, test.num_items)
    train, val = split_validation(full, val_fraction, seed)
    return train, val, test


def benchmark_seed(train: RatingDataset, val: RatingDataset, test: RatingDataset, config: TrainingConfig) -> dict:
    """Counterfactual MSE of standard training, the teacher and BPL-Hard for one seed."""
    std = train_standard(train, val, config)
    teacher = train_teacher(train, val, config)
    split, affinity = prepare_space(train, config.with_(combination_mode="hard"))
    bpl = train_bpl(train, val, teacher, affinity, config.with_(combination_mode="hard", ablation="none"), split)
    return {name: mse_mae(r.model, test)[0] for name, r in (("standard", std), ("teacher", teacher.result),
                                                            ("bpl-hard", bpl))}
