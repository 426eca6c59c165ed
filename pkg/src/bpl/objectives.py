"""Loss terms with analytic gradients.

Every loss returns its (unweighted) scalar value and accumulates
``weight * d(value)/d(params)`` into the parameter blocks. Sums over spaces
are realized as per-batch means.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .model import (
    Discriminator,
    PreferenceModel,
    TemporalEnsemble,
    entropy,
    expected_rating,
    is_reliable,
    max_prob_filter,
)

ABLATIONS = (
    "none",
    "no_T2",
    "no_sd",
    "no_pd",
    "no_T2_T3",
    "no_confidence_penalty",
    "affinity_as_propensity",
)


@dataclass(frozen=True)
class TrainingConfig:
    # objective
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 1.0
    tau: float = 0.999
    x_percent: float = 20.0
    m: float = 0.5
    combination_mode: str = "hard"
    filter_mode: str = "temporal_consistency"
    ablation: str = "none"
    reversal: float = 1.0
    propensity_floor: float = 0.05
    # preference model
    embedding_dim: int = 16
    init_std: float = 0.01
    lr: float = 0.003
    weight_decay: float = 1.0
    batch_size: int = 256
    unrated_batch_size: int = 256
    epochs: int = 80
    patience: int = 10
    warmup_epochs: int = 5
    val_fraction: float = 0.1
    # discriminator
    disc_layers: int = 1
    disc_hidden: int = 32
    disc_lr: float = 0.01
    disc_weight_decay: float = 0.0
    # affinity estimator
    affinity_dim: int = 16
    affinity_layers: int = 1
    affinity_hidden: int = 32
    affinity_lr: float = 0.01
    affinity_weight_decay: float = 0.0
    affinity_epochs: int = 30
    affinity_patience: int = 3
    affinity_batch_size: int = 512
    affinity_neg_ratio: float = 1.0
    affinity_seed: int = 0
    # teacher
    teacher_seed_offset: int = 1000
    # unrated space
    s0_cap: int = 10**7
    s0_multiple: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.lam < 0:
            raise ValueError("alpha, beta and lam must be non-negative")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if not 0.0 < self.x_percent < 100.0:
            raise ValueError("x_percent must lie in (0, 100)")
        if self.combination_mode not in ("soft", "hard"):
            raise ValueError(f"unknown combination_mode {self.combination_mode!r}")
        if self.filter_mode not in ("temporal_consistency", "max_probability"):
            raise ValueError(f"unknown filter_mode {self.filter_mode!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {', '.join(ABLATIONS)}")

    # ablation switches
    @property
    def use_t2(self) -> bool:
        return self.alpha > 0 and self.ablation not in ("no_T2", "no_T2_T3", "affinity_as_propensity")

    @property
    def use_t3(self) -> bool:
        return self.beta > 0 and self.ablation not in ("no_T2_T3", "affinity_as_propensity")

    @property
    def use_sd(self) -> bool:
        return self.ablation != "no_sd"

    @property
    def use_pd(self) -> bool:
        return self.ablation != "no_pd"

    @property
    def confidence_penalty(self) -> bool:
        return self.ablation != "no_confidence_penalty"

    def with_(self, **changes) -> "TrainingConfig":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# per-pair pieces, each returning (value, d value / d logits)


def _per_pair_entropy(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = entropy(p)
    logp = np.log(np.where(p > 0, p, 1.0))
    return h, -p * (logp + h[:, None])


def _per_pair_expectation(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    levels = np.arange(1, p.shape[1] + 1, dtype=np.float64)
    e = expected_rating(p)
    return e, p * (levels[None, :] - e[:, None])


def _per_pair_pd(p: np.ndarray, t: np.ndarray, lam: float, penalty: bool) -> tuple[np.ndarray, np.ndarray]:
    e, de = _per_pair_expectation(p)
    diff = e - t
    value = lam * diff**2
    grad = (2.0 * lam * diff)[:, None] * de
    if penalty:
        h, dh = _per_pair_entropy(p)
        value = value - h
        grad = grad - dh
    return value, grad


def _reliability(model_p: np.ndarray, ensemble: TemporalEnsemble | None, users, items,
                 filter_mode: str, m: float) -> np.ndarray:
    if filter_mode == "max_probability":
        return max_prob_filter(model_p, m)
    if ensemble is None:
        raise ValueError("temporal-consistency filtering needs a temporal ensemble")
    return is_reliable(ensemble.predict_distribution(users, items), model_p)


def _per_pair_sd(p, ensemble, users, items, filter_mode, m):
    mask = _reliability(p, ensemble, users, items, filter_mode, m).astype(np.float64)
    h, dh = _per_pair_entropy(p)
    return mask * h, mask[:, None] * dh, mask


# ---------------------------------------------------------------------------
# losses


def loss_t1(model: PreferenceModel, users, items, labels, weight: float = 1.0, sample_weights=None) -> float:
    """Mean cross-entropy of the rating head on rated pairs.

    ``sample_weights`` turns it into a weighted mean of per-pair losses
    (used by the inverse-affinity reweighting ablation).
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ValueError("empty batch")
    if labels.min() < 1 or labels.max() > model.num_levels:
        raise ValueError("labels must lie in 1..K")
    z, p = model.forward(users, items)
    rows = np.arange(n)
    nll = -np.log(np.maximum(p[rows, labels - 1], 1e-300))
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    value = float((w * nll).mean())
    if weight:
        dlogits = p.copy()
        dlogits[rows, labels - 1] -= 1.0
        dlogits *= (weight * w / n)[:, None]
        model.backward(users, items, z, dlogits)
    return value


def loss_t2(model: PreferenceModel, disc: Discriminator, pos_users, pos_items, neg_users, neg_items,
            weight: float = 1.0, reversal: float = 1.0) -> float:
    """Discriminator log-likelihood: expanded rated side vs. remaining unrated side.

    The discriminator ascends the returned objective (its blocks receive
    ``-weight * dJ``); the encoder descends it through ``z`` with the
    reversal coefficient (``+weight * reversal * dJ``). The predictor head
    gets nothing from this term.
    """
    n_pos, n_neg = len(pos_users), len(neg_users)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both sides of the alignment objective need pairs")
    z_pos = model.encode(pos_users, pos_items)
    z_neg = model.encode(neg_users, neg_items)
    s_pos, acts_pos = disc.forward(z_pos)
    s_neg, acts_neg = disc.forward(z_neg)
    # log sigmoid(s) = -softplus(-s); log(1 - sigmoid(s)) = -softplus(s)
    value = float(-np.logaddexp(0.0, -s_pos).mean() - np.logaddexp(0.0, s_neg).mean())
    if weight:
        ds_pos = (1.0 - expit(s_pos)) / n_pos
        ds_neg = -expit(s_neg) / n_neg
        # discriminator: descend -J
        dz_pos = disc.backward(acts_pos, -weight * ds_pos)
        dz_neg = disc.backward(acts_neg, -weight * ds_neg)
        # encoder: descend +J, i.e. the reversed discriminator signal
        scale = -reversal
        model.backward_z(pos_users, pos_items, scale * dz_pos)
        model.backward_z(neg_users, neg_items, scale * dz_neg)
    return value


def loss_sd(model: PreferenceModel, ensemble: TemporalEnsemble | None, users, items, weight: float = 1.0,
            filter_mode: str = "temporal_consistency", m: float = 0.5, stats: dict | None = None) -> float:
    """Mean entropy over pairs that pass the reliability filter; filtered pairs count as 0."""
    z, p = model.forward(users, items)
    value, grad, mask = _per_pair_sd(p, ensemble, users, items, filter_mode, m)
    if stats is not None:
        stats["reliable_fraction"] = float(mask.mean()) if len(mask) else 0.0
    if weight and mask.any():
        model.backward(users, items, z, grad * (weight / len(users)))
    return float(value.mean()) if len(value) else 0.0


def loss_pd(model: PreferenceModel, teacher, users, items, lam: float = 1.0, weight: float = 1.0,
            confidence_penalty: bool = True) -> float:
    """Mean of ``lam * (E[r] - t)^2 - H(p)`` against frozen teacher expectations."""
    t = teacher.lookup(users, items)
    z, p = model.forward(users, items)
    value, grad = _per_pair_pd(p, t, lam, confidence_penalty)
    if weight:
        model.backward(users, items, z, grad * (weight / len(users)))
    return float(value.mean())


def combination_weights(mode: str, users, items, affinity=None, split=None, num_items: int | None = None) -> np.ndarray:
    """Per-pair weight of the teacher-distillation branch."""
    if mode == "soft":
        if affinity is None:
            raise ValueError("soft combination needs affinity scores")
        return affinity.lookup(users, items)
    if mode == "hard":
        if split is None:
            raise ValueError("hard combination needs S01 membership")
        keys = np.asarray(users, dtype=np.int64) * split.num_items + np.asarray(items, dtype=np.int64)
        return split.in_s01(keys).astype(np.float64)
    raise ValueError(f"unknown combination mode {mode!r}")


def loss_t3(model: PreferenceModel, ensemble: TemporalEnsemble | None, teacher, users, items,
            config: TrainingConfig, affinity=None, split=None, weight: float = 1.0,
            stats: dict | None = None) -> float:
    """Affinity-balanced mix of teacher distillation and self-distillation on unrated pairs."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    n = len(users)
    if n == 0:
        return 0.0
    a = combination_weights(config.combination_mode, users, items, affinity, split)
    z, p = model.forward(users, items)
    value = np.zeros(n)
    grad = np.zeros_like(p)
    if config.use_pd:
        need = a > 0
        t = np.zeros(n)
        if need.any():
            t[need] = teacher.lookup(users[need], items[need])
        v_pd, g_pd = _per_pair_pd(p, t, config.lam, config.confidence_penalty)
        value += a * v_pd
        grad += a[:, None] * g_pd
    if config.use_sd:
        v_sd, g_sd, mask = _per_pair_sd(p, ensemble, users, items, config.filter_mode, config.m)
        value += (1.0 - a) * v_sd
        grad += (1.0 - a)[:, None] * g_sd
        if stats is not None:
            stats["reliable_fraction"] = float(mask.mean())
    if weight:
        model.backward(users, items, z, grad * (weight / n))
    return float(value.mean())


@dataclass
class Batches:
    rated_users: np.ndarray
    rated_items: np.ndarray
    labels: np.ndarray
    pos_users: np.ndarray | None = None
    pos_items: np.ndarray | None = None
    neg_users: np.ndarray | None = None
    neg_items: np.ndarray | None = None
    unrated_users: np.ndarray | None = None
    unrated_items: np.ndarray | None = None
    rated_weights: np.ndarray | None = None


@dataclass
class LossBreakdown:
    total: float
    t1: float
    t2: float = 0.0
    t3: float = 0.0
    stats: dict = field(default_factory=dict)


def loss_total(model: PreferenceModel, disc: Discriminator | None, ensemble: TemporalEnsemble | None,
               teacher, batches: Batches, config: TrainingConfig, affinity=None, split=None,
               t3_active: bool = True) -> LossBreakdown:
    """``L_T1 + alpha * L_T2 + beta * L_T3`` with gradients routed to both players.

    Disabled or zero-weighted terms are skipped entirely, so a configuration
    with ``alpha = beta = 0`` performs exactly the arithmetic of plain
    supervised training.
    """
    t1 = loss_t1(model, batches.rated_users, batches.rated_items, batches.labels,
                 sample_weights=batches.rated_weights)
    out = LossBreakdown(total=t1, t1=t1)
    if config.use_t2:
        out.t2 = loss_t2(model, disc, batches.pos_users, batches.pos_items, batches.neg_users, batches.neg_items,
                         weight=config.alpha, reversal=config.reversal)
        out.total += config.alpha * out.t2
    if config.use_t3 and t3_active:
        out.t3 = loss_t3(model, ensemble, teacher, batches.unrated_users, batches.unrated_items, config,
                         affinity=affinity, split=split, weight=config.beta, stats=out.stats)
        out.total += config.beta * out.t3
    return out
