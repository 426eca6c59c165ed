"""S1-affinity: probability that a pair belongs to the rated space.

A binary classifier over rated vs. unrated pairs, with its own embedding
tables so nothing leaks from the preference model.
"""

from __future__ import annotations

import copy

import numpy as np
from scipy.special import expit

from .data import DataError, PairTable, RatingDataset, SpaceSplit, pair_keys, unpack_keys
from .model import MLPHead
from .numerics import Adam, ParameterBlock


class AffinityModel:
    def __init__(self, num_users: int, num_items: int, dim: int = 16, layers: int = 1, hidden: int = 32,
                 rng: np.random.Generator | None = None, init_std: float = 0.01):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_users = num_users
        self.num_items = num_items
        self.layers = layers
        self.user_emb = ParameterBlock("aff_user_embeddings", rng.normal(0.0, init_std, (num_users, dim)))
        self.item_emb = ParameterBlock("aff_item_embeddings", rng.normal(0.0, init_std, (num_items, dim)))
        self.head = MLPHead(dim, layers, hidden, prefix="aff_head", rng=rng)

    @property
    def blocks(self) -> list[ParameterBlock]:
        return [self.user_emb, self.item_emb, *self.head.blocks]

    def logits(self, users, items):
        x = self.user_emb.values[users] * self.item_emb.values[items]
        logit, acts = self.head.forward(x)
        return logit, acts

    def probability(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.num_users):
            raise IndexError("user index out of range")
        if items.size and (items.min() < 0 or items.max() >= self.num_items):
            raise IndexError("item index out of range")
        return expit(self.logits(users, items)[0])

    def bce_step(self, users, items, labels) -> float:
        """Mean binary cross-entropy on a batch; accumulates gradients."""
        logit, acts = self.logits(users, items)
        y = labels.astype(np.float64)
        value = float(np.mean(np.logaddexp(0.0, logit) - y * logit))
        dlogit = (expit(logit) - y) / len(y)
        dx = self.head.backward(acts, dlogit)
        np.add.at(self.user_emb.grad, users, dx * self.item_emb.values[items])
        np.add.at(self.item_emb.grad, items, dx * self.user_emb.values[users])
        return value

    def bce(self, users, items, labels) -> float:
        logit, _ = self.logits(users, items)
        return float(np.mean(np.logaddexp(0.0, logit) - labels * logit))

    def state(self):
        return [b.values.copy() for b in self.blocks]

    def load(self, state) -> None:
        for b, v in zip(self.blocks, state):
            b.values[...] = v


class AffinityScores(PairTable):
    """Frozen affinity per pair, with the provenance of the estimator that made it."""

    label = "affinity"

    def __init__(self, num_users, num_items, keys, values, fallback=None, provenance: dict | None = None):
        super().__init__(num_users, num_items, keys, values, fallback)
        if len(self.values) and (self.values.min() < 0 or self.values.max() > 1):
            raise DataError("affinity scores must lie in [0, 1]")
        self.provenance = dict(provenance or {})


def train_affinity(dataset: RatingDataset, split: SpaceSplit, config) -> AffinityModel:
    """Fit the rated-vs-unrated classifier with Adam, early-stopped on held-out BCE.

    Each batch mixes rated pairs with uniformly drawn unrated pairs at
    ``config.affinity_neg_ratio`` negatives per positive. The held-out set is
    10% of the rated pairs plus as many fixed unrated pairs.
    """
    if len(split.s1) == 0:
        raise DataError("cannot train an affinity model without rated pairs")
    rng = np.random.default_rng([config.affinity_seed, 17])
    model = AffinityModel(split.num_users, split.num_items, config.affinity_dim, config.affinity_layers,
                          config.affinity_hidden, rng=np.random.default_rng([config.affinity_seed, 3]))
    opt = Adam(model.blocks, lr=config.affinity_lr, weight_decay=config.affinity_weight_decay)

    pos = rng.permutation(split.s1)
    n_hold = max(1, len(pos) // 10) if len(pos) >= 10 else 0
    hold_pos, train_pos = pos[:n_hold], pos[n_hold:]
    hold_neg = split.sample_unrated(rng, n_hold)
    hold_keys = np.concatenate([hold_pos, hold_neg])
    hold_y = np.concatenate([np.ones(n_hold), np.zeros(n_hold)])
    hu, hi = unpack_keys(hold_keys, split.num_items)

    ratio = config.affinity_neg_ratio
    n_pos_batch = max(1, int(round(config.affinity_batch_size / (1.0 + ratio))))
    n_neg_batch = max(1, int(round(n_pos_batch * ratio)))
    labels = np.concatenate([np.ones(n_pos_batch), np.zeros(n_neg_batch)])

    best, best_state, bad = np.inf, model.state(), 0
    for _epoch in range(config.affinity_epochs):
        order = rng.permutation(train_pos)
        for start in range(0, len(order), n_pos_batch):
            p_keys = order[start : start + n_pos_batch]
            n_keys = split.sample_unrated(rng, int(round(len(p_keys) * ratio)) or 1)
            keys = np.concatenate([p_keys, n_keys])
            y = labels if len(keys) == len(labels) else np.concatenate([np.ones(len(p_keys)), np.zeros(len(n_keys))])
            u, i = unpack_keys(keys, split.num_items)
            model.bce_step(u, i, y)
            opt.step()
        if n_hold == 0:
            best_state = model.state()
            continue
        loss = model.bce(hu, hi, hold_y)
        if loss < best:
            best, best_state, bad = loss, model.state(), 0
        else:
            bad += 1
            if bad >= config.affinity_patience:
                break
    model.load(best_state)
    model.heldout_bce = best
    model.provenance = {
        "seed": config.affinity_seed,
        "layers": config.affinity_layers,
        "epochs": config.affinity_epochs,
    }
    return model


def score_pairs(model: AffinityModel, pairs=None, users=None, items=None, batch: int = 65536) -> AffinityScores:
    """Score the given pair keys (or users/items); default is every pair of the grid.

    Pairs outside the scored set are served by a frozen copy of ``model``.
    """
    if pairs is None and users is not None:
        pairs = pair_keys(users, items, model.num_items)
    if pairs is None:
        pairs = np.arange(model.num_users * model.num_items, dtype=np.int64)
    pairs = np.unique(np.asarray(pairs, dtype=np.int64))
    frozen = copy.deepcopy(model)

    def score(keys):
        u, i = unpack_keys(keys, frozen.num_items)
        return np.concatenate([frozen.probability(u[s : s + batch], i[s : s + batch])
                               for s in range(0, len(keys), batch)]) if len(keys) else np.empty(0)

    return AffinityScores(model.num_users, model.num_items, pairs, score(pairs), fallback=score,
                          provenance=getattr(model, "provenance", {}))


def estimate_affinity(dataset: RatingDataset, split: SpaceSplit, config) -> AffinityScores:
    """Train and score in one go: every pair when enumerated, else S1 plus the unrated pool."""
    model = train_affinity(dataset, split, config)
    keys = None if split.enumerated else np.concatenate([split.s1, split.s0_pool])
    return score_pairs(model, keys)
