"""Training pipelines: standard training, the biased teacher, BPL and its ablations."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .affinity import AffinityScores, estimate_affinity
from .config import dump_kv
from .data import RatingDataset, SpaceSplit, build_space_split, mark_s01, unpack_keys
from .evaluation import mse_mae, write_csv
from .model import Discriminator, PreferenceModel, TeacherPredictions, TemporalEnsemble, is_reliable, max_prob_filter
from .numerics import Adam, NonFiniteError, export_tsv, save_checkpoint
from .objectives import ABLATIONS, Batches, TrainingConfig, loss_total

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class FilterProbe:
    """Unrated pairs with known true ratings, for per-epoch filter diagnostics."""

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    m: float = 0.5

    @classmethod
    def from_world(cls, world, split: SpaceSplit, n: int = 5000, seed: int = 0, m: float = 0.5) -> "FilterProbe":
        rng = np.random.default_rng([seed, 99])
        keys = split.s0_pool if split.enumerated else split.sample_unrated(rng, n)
        keys = np.sort(rng.choice(keys, size=min(n, len(keys)), replace=False))
        u, i = unpack_keys(keys, split.num_items)
        return cls(u, i, world.true_rating(u, i).astype(np.float64), m)

    def measure(self, model: PreferenceModel, ensemble: TemporalEnsemble | None) -> dict:
        p = model.predict_distribution(self.users, self.items)
        levels = np.arange(1, p.shape[1] + 1)
        err = np.abs(p @ levels - self.ratings)
        base = err.mean()
        out = {}
        mp = max_prob_filter(p, self.m)
        out["mp_fraction"] = float(mp.mean())
        out["mp_ratio"] = float(err[mp].mean() / base) if mp.any() else float("nan")
        if ensemble is not None:
            tc = is_reliable(ensemble.predict_distribution(self.users, self.items), p)
            out["tc_fraction"] = float(tc.mean())
            out["tc_ratio"] = float(err[tc].mean() / base) if tc.any() else float("nan")
        return out


@dataclass
class TrainResult:
    model: PreferenceModel
    mode: str
    config: TrainingConfig
    best_epoch: int
    best_val_mse: float
    history: list[dict] = field(default_factory=list)
    ensemble: TemporalEnsemble | None = None
    discriminator: Discriminator | None = None
    final_model: PreferenceModel | None = None


def _fit(train: RatingDataset, validation: RatingDataset, config: TrainingConfig, mode: str,
         split: SpaceSplit | None = None, teacher: TeacherPredictions | None = None,
         affinity: AffinityScores | None = None, probe: FilterProbe | None = None) -> TrainResult:
    seed = config.seed
    model = PreferenceModel(train.num_users, train.num_items, train.num_levels, config.embedding_dim,
                            rng=np.random.default_rng(seed), init_std=config.init_std)
    opt = Adam(model.blocks, lr=config.lr, weight_decay=config.weight_decay)
    batch_rng = np.random.default_rng([seed, 1])
    aux_rng = np.random.default_rng([seed, 2])

    bpl = mode != "standard"
    use_t2 = bpl and config.use_t2
    use_t3 = bpl and config.use_t3
    disc = disc_opt = ensemble = None
    if use_t2:
        disc = Discriminator(config.embedding_dim, config.disc_layers, config.disc_hidden,
                             rng=np.random.default_rng([seed, 3]))
        disc_opt = Adam(disc.blocks, lr=config.disc_lr, weight_decay=config.disc_weight_decay)
    if use_t3 or probe is not None:
        ensemble = TemporalEnsemble(model, config.tau)
    if bpl and split is None:
        raise ValueError("BPL training needs a space split")

    rated_weights_all = None
    if bpl and config.ablation == "affinity_as_propensity":
        a = affinity.lookup(train.users, train.items)
        rated_weights_all = 1.0 / np.maximum(a, config.propensity_floor)

    users, items, labels = train.users, train.items, train.ratings
    n = len(train)
    best = (math.inf, 0, model.copy())
    history: list[dict] = []
    bad = 0
    for epoch in range(1, config.epochs + 1):
        t3_active = use_t3 and epoch > config.warmup_epochs
        sums = {"t1": 0.0, "t2": 0.0, "t3": 0.0, "reliable": 0.0}
        steps = 0
        perm = batch_rng.permutation(n)
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            b = Batches(users[idx], items[idx], labels[idx])
            if rated_weights_all is not None:
                b.rated_weights = rated_weights_all[idx]
            if use_t2:
                pos = split.expanded[aux_rng.integers(0, len(split.expanded), len(idx))]
                if split.enumerated:
                    neg = split.s0_rest[aux_rng.integers(0, len(split.s0_rest), len(idx))]
                else:
                    neg = split.sample_unrated(aux_rng, 2 * len(idx))
                    neg = neg[~split.in_s01(neg)][: len(idx)]
                b.pos_users, b.pos_items = unpack_keys(pos, split.num_items)
                b.neg_users, b.neg_items = unpack_keys(neg, split.num_items)
            if t3_active:
                unl = split.sample_unrated(aux_rng, config.unrated_batch_size)
                b.unrated_users, b.unrated_items = unpack_keys(unl, split.num_items)
            out = loss_total(model, disc, ensemble, teacher, b, config if bpl else _STANDARD,
                             affinity=affinity, split=split, t3_active=t3_active)
            if not math.isfinite(out.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            try:
                opt.step()
                if disc_opt is not None:
                    disc_opt.step()
            except NonFiniteError as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}, step {step}") from exc
            if ensemble is not None:
                ensemble.update(model)
            sums["t1"] += out.t1
            sums["t2"] += out.t2
            sums["t3"] += out.t3
            sums["reliable"] += out.stats.get("reliable_fraction", 0.0)
            steps += 1

        val_mse, _ = mse_mae(model, validation)
        row = {
            "epoch": epoch,
            "L_T1": sums["t1"] / steps,
            "L_T2": sums["t2"] / steps,
            "L_T3": sums["t3"] / steps,
            "reliable_fraction": sums["reliable"] / steps if t3_active else float("nan"),
            "val_mse": val_mse,
        }
        if probe is not None:
            row.update(probe.measure(model, ensemble))
        history.append(row)
        log.debug("%s epoch %d: %s", mode, epoch, row)
        if val_mse < best[0]:
            best = (val_mse, epoch, model.copy())
            bad = 0
        else:
            bad += 1
            # no stopping before the distillation terms have had a chance to act
            if bad >= config.patience and epoch > config.warmup_epochs + config.patience:
                break
    return TrainResult(best[2], mode, config, best[1], best[0], history, ensemble, disc, final_model=model)


_STANDARD = TrainingConfig(alpha=0.0, beta=0.0)


def train_standard(train: RatingDataset, validation: RatingDataset, config: TrainingConfig,
                   probe: FilterProbe | None = None) -> TrainResult:
    """Supervised cross-entropy only, early-stopped on validation MSE."""
    return _fit(train, validation, config, "standard", probe=probe)


def train_teacher(train: RatingDataset, validation: RatingDataset, config: TrainingConfig) -> TeacherPredictions:
    """Standard training under the teacher seed; its expected ratings are cached and frozen."""
    res = train_standard(train, validation, config.with_(seed=config.seed + config.teacher_seed_offset))
    teacher = TeacherPredictions.from_model(res.model) if train.num_pairs <= config.s0_cap \
        else TeacherPredictions.from_model(res.model, keys=np.empty(0, dtype=np.int64))
    teacher.result = res
    return teacher


def prepare_space(train: RatingDataset, config: TrainingConfig, affinity: AffinityScores | None = None
                  ) -> tuple[SpaceSplit, AffinityScores]:
    """Space split with S01 marked from (freshly estimated, unless given) affinity."""
    split = build_space_split(train, cap=config.s0_cap, sample_multiple=config.s0_multiple, seed=config.seed)
    if affinity is None:
        affinity = estimate_affinity(train, split, config)
    return mark_s01(split, affinity, config.x_percent), affinity


def train_bpl(train: RatingDataset, validation: RatingDataset, teacher: TeacherPredictions,
              affinity: AffinityScores, config: TrainingConfig, split: SpaceSplit | None = None,
              probe: FilterProbe | None = None) -> TrainResult:
    """Joint training on L_T1 + alpha L_T2 + beta L_T3 with frozen teacher and affinity."""
    if split is None:
        split, _ = prepare_space(train, config, affinity)
    elif len(split.s01) == 0:
        split = mark_s01(split, affinity, config.x_percent)
    mode = f"bpl-{config.combination_mode}"
    if config.ablation != "none":
        mode = f"ablation:{config.ablation}"
    return _fit(train, validation, config, mode, split, teacher, affinity, probe)


def run_ablation(name: str, train: RatingDataset, validation: RatingDataset, teacher: TeacherPredictions,
                 affinity: AffinityScores, config: TrainingConfig, split: SpaceSplit | None = None,
                 probe: FilterProbe | None = None) -> TrainResult:
    """BPL-Hard with one component removed or replaced."""
    if name not in ABLATIONS or name == "none":
        raise ValueError(f"unknown ablation {name!r}")
    return train_bpl(train, validation, teacher, affinity,
                     config.with_(ablation=name, combination_mode="hard"), split, probe)


def run_mode(mode: str, train: RatingDataset, validation: RatingDataset, config: TrainingConfig,
             teacher: TeacherPredictions | None = None, affinity: AffinityScores | None = None,
             probe_world=None) -> tuple[TrainResult, TeacherPredictions | None, AffinityScores | None]:
    """Dispatch a CLI-style mode string: standard, bpl-soft, bpl-hard or ablation:<name>."""
    if mode == "standard":
        return train_standard(train, validation, config), None, None
    if mode in ("bpl-soft", "bpl-hard"):
        config = config.with_(combination_mode=mode.split("-")[1], ablation="none")
    elif mode.startswith("ablation:"):
        name = mode.split(":", 1)[1]
        if name not in ABLATIONS or name == "none":
            raise ValueError(f"unknown ablation {name!r}")
        config = config.with_(combination_mode="hard", ablation=name)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if teacher is None:
        teacher = train_teacher(train, validation, config)
    split, affinity = prepare_space(train, config, affinity)
    probe = FilterProbe.from_world(probe_world, split, seed=config.seed, m=config.m) if probe_world else None
    return train_bpl(train, validation, teacher, affinity, config, split, probe), teacher, affinity


def write_run(run_dir: str | Path, result: TrainResult, metrics: dict | None = None,
              teacher: TeacherPredictions | None = None, affinity: AffinityScores | None = None) -> None:
    """Config echo, per-epoch loss CSV, checkpoint (binary + TSV) and metrics JSON."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(dump_kv(result.config), encoding="utf-8")
    write_csv(run_dir / "losses.csv", result.history)
    save_checkpoint(run_dir / "model.bin", result.model.blocks)
    export_tsv(run_dir / "model.tsv", result.model.blocks)
    if teacher is not None:
        teacher.to_tsv(run_dir / "teacher.tsv")
    if affinity is not None:
        affinity.to_tsv(run_dir / "affinity.tsv")
    info = {
        "mode": result.mode,
        "ablation": result.config.ablation,
        "best_epoch": result.best_epoch,
        "best_val_mse": round(result.best_val_mse, 6),
        "epochs_run": len(result.history),
        "shape": [result.model.num_users, result.model.num_items, result.model.num_levels,
                  result.model.embedding_dim],
    }
    if metrics:
        info.update(metrics)
    (run_dir / "metrics.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
