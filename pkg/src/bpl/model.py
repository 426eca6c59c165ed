"""ID-based preference model with a K-class rating head, plus its companions.

The encoder maps a pair to ``z = P[u] * Q[i]`` and the predictor is an affine
map to K logits. Gradients are accumulated by hand into ParameterBlocks.
"""

from __future__ import annotations

import copy
import hashlib

import numpy as np
from scipy.special import expit

from .data import PairTable, pair_keys, unpack_keys
from .numerics import ParameterBlock


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p: np.ndarray) -> np.ndarray:
    """Natural-log entropy along the last axis; 0·log 0 counts as 0."""
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


def expected_rating(p: np.ndarray) -> np.ndarray:
    levels = np.arange(1, p.shape[-1] + 1, dtype=np.float64)
    return p @ levels


def argmax_level(p: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lower level
    return np.argmax(p, axis=-1) + 1


def is_reliable(ensemble_distribution: np.ndarray, model_distribution: np.ndarray) -> np.ndarray:
    """Temporal-consistency filter: ensemble and model agree on the argmax level."""
    return argmax_level(ensemble_distribution) == argmax_level(model_distribution)


def max_prob_filter(distribution: np.ndarray, threshold: float) -> np.ndarray:
    return distribution.max(axis=-1) > threshold


class PreferenceModel:
    def __init__(self, num_users: int, num_items: int, num_levels: int, embedding_dim: int,
                 rng: np.random.Generator | None = None, init_std: float = 0.01):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_users = num_users
        self.num_items = num_items
        self.num_levels = num_levels
        self.embedding_dim = embedding_dim
        self.user_emb = ParameterBlock("user_embeddings", rng.normal(0.0, init_std, (num_users, embedding_dim)))
        self.item_emb = ParameterBlock("item_embeddings", rng.normal(0.0, init_std, (num_items, embedding_dim)))
        self.pred_w = ParameterBlock("predictor_weights", np.zeros((num_levels, embedding_dim)))
        self.pred_b = ParameterBlock("predictor_bias", np.zeros(num_levels))

    @property
    def blocks(self) -> list[ParameterBlock]:
        return [self.user_emb, self.item_emb, self.pred_w, self.pred_b]

    def _check(self, users, items):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.num_users):
            raise IndexError("user index out of range")
        if items.size and (items.min() < 0 or items.max() >= self.num_items):
            raise IndexError("item index out of range")
        return users, items

    def encode(self, users, items) -> np.ndarray:
        users, items = self._check(users, items)
        return self.user_emb.values[users] * self.item_emb.values[items]

    def logits(self, z: np.ndarray) -> np.ndarray:
        return z @ self.pred_w.values.T + self.pred_b.values

    def predict_distribution(self, users, items) -> np.ndarray:
        return softmax(self.logits(self.encode(users, items)))

    def predict(self, users, items) -> np.ndarray:
        """Expected rating per pair."""
        return expected_rating(self.predict_distribution(users, items))

    def forward(self, users, items) -> tuple[np.ndarray, np.ndarray]:
        """(z, p) for a batch; pass both back to ``backward``."""
        z = self.encode(users, items)
        return z, softmax(self.logits(z))

    def backward(self, users, items, z: np.ndarray, dlogits: np.ndarray, dz_extra: np.ndarray | None = None) -> None:
        """Accumulate gradients given d(loss)/d(logits), plus an optional direct d/dz."""
        self.pred_w.grad += dlogits.T @ z
        self.pred_b.grad += dlogits.sum(axis=0)
        dz = dlogits @ self.pred_w.values
        if dz_extra is not None:
            dz = dz + dz_extra
        self.backward_z(users, items, dz)

    def backward_z(self, users, items, dz: np.ndarray) -> None:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        np.add.at(self.user_emb.grad, users, dz * self.item_emb.values[items])
        np.add.at(self.item_emb.grad, items, dz * self.user_emb.values[users])

    def zero_grad(self) -> None:
        for b in self.blocks:
            b.zero_grad()

    def copy(self) -> "PreferenceModel":
        clone = copy.copy(self)
        for attr in ("user_emb", "item_emb", "pred_w", "pred_b"):
            setattr(clone, attr, getattr(self, attr).copy())
        return clone

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for b in self.blocks:
            if state[b.name].shape != b.values.shape:
                raise ValueError(f"shape mismatch for {b.name}")
            b.values[...] = state[b.name]

    def state(self) -> dict[str, np.ndarray]:
        return {b.name: b.values.copy() for b in self.blocks}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "PreferenceModel":
        """Rebuild a model from a checkpoint dict; shapes come from the arrays."""
        try:
            (n_u, d), (n_i, _), (k, _) = (state[n].shape for n in
                                          ("user_embeddings", "item_embeddings", "predictor_weights"))
        except KeyError as exc:
            raise ValueError(f"checkpoint lacks block {exc.args[0]}") from None
        model = cls(n_u, n_i, k, d)
        model.load_state(state)
        return model

    def checksum(self) -> str:
        h = hashlib.sha256()
        for b in self.blocks:
            h.update(b.name.encode())
            h.update(np.ascontiguousarray(b.values).tobytes())
        return h.hexdigest()


class MLPHead:
    """Scalar-output MLP: ``layers - 1`` ReLU hidden layers of ``hidden`` units, then affine.

    The final layer starts at zero, so an untrained head outputs logit 0.
    """

    def __init__(self, in_dim: int, layers: int = 1, hidden: int = 16, prefix: str = "head",
                 rng: np.random.Generator | None = None):
        if layers < 1:
            raise ValueError("layers must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.blocks: list[ParameterBlock] = []
        dim = in_dim
        for k in range(layers - 1):
            w = rng.normal(0.0, np.sqrt(2.0 / dim), (dim, hidden))
            self.blocks += [ParameterBlock(f"{prefix}_w{k}", w), ParameterBlock(f"{prefix}_b{k}", np.zeros(hidden))]
            dim = hidden
        self.blocks += [ParameterBlock(f"{prefix}_w", np.zeros(dim)), ParameterBlock(f"{prefix}_b", np.zeros(()))]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        h = x
        for k in range(0, len(self.blocks) - 2, 2):
            h = np.maximum(h @ self.blocks[k].values + self.blocks[k + 1].values, 0.0)
            acts.append(h)
        logit = h @ self.blocks[-2].values + self.blocks[-1].values
        return logit, acts

    def backward(self, acts: list[np.ndarray], dlogit: np.ndarray, accumulate: bool = True) -> np.ndarray:
        """Return d/dx; parameter gradients are accumulated unless ``accumulate`` is False."""
        w, b = self.blocks[-2], self.blocks[-1]
        if accumulate:
            w.grad += acts[-1].T @ dlogit
            b.grad += dlogit.sum()
        dh = np.outer(dlogit, w.values)
        for k in range(len(self.blocks) - 4, -2, -2):
            layer = k // 2
            dh = dh * (acts[layer + 1] > 0)
            if accumulate:
                self.blocks[k].grad += acts[layer].T @ dh
                self.blocks[k + 1].grad += dh.sum(axis=0)
            dh = dh @ self.blocks[k].values.T
        return dh

    def probability(self, x: np.ndarray) -> np.ndarray:
        return expit(self.forward(x)[0])


class Discriminator(MLPHead):
    """Domain discriminator on representations; outputs sigmoid(MLP(z))."""

    def __init__(self, embedding_dim: int, layers: int = 1, hidden: int = 16, rng=None):
        super().__init__(embedding_dim, layers, hidden, prefix="disc", rng=rng)


class TemporalEnsemble:
    """Exponential moving average of a PreferenceModel's parameters."""

    def __init__(self, model: PreferenceModel, tau: float):
        if not 0.0 <= tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        self.tau = tau
        self.shadow = model.copy()

    def update(self, model: PreferenceModel) -> None:
        for s, b in zip(self.shadow.blocks, model.blocks):
            if s.values.shape != b.values.shape:
                raise ValueError(f"shape mismatch for {b.name}")
            s.values *= self.tau
            s.values += (1.0 - self.tau) * b.values

    def predict_distribution(self, users, items) -> np.ndarray:
        return self.shadow.predict_distribution(users, items)


def ema_update(ensemble: TemporalEnsemble, model: PreferenceModel) -> TemporalEnsemble:
    ensemble.update(model)
    return ensemble


class TeacherPredictions(PairTable):
    """Frozen expected ratings of the biased teacher."""

    label = "teacher prediction"

    @classmethod
    def from_model(cls, model: PreferenceModel, keys=None, batch: int = 65536) -> "TeacherPredictions":
        """Cache expectations for ``keys`` (default: every pair); other pairs fall back to a frozen copy."""
        frozen = model.copy()

        def predict(k):
            u, i = unpack_keys(k, frozen.num_items)
            return np.concatenate([frozen.predict(u[s:s + batch], i[s:s + batch])
                                   for s in range(0, len(k), batch)]) if len(k) else np.empty(0)

        if keys is None:
            keys = np.arange(model.num_users * model.num_items, dtype=np.int64)
        keys = np.asarray(keys, dtype=np.int64)
        return cls(model.num_users, model.num_items, keys, predict(keys), fallback=predict)


__all__ = [
    "Discriminator",
    "MLPHead",
    "PreferenceModel",
    "TeacherPredictions",
    "TemporalEnsemble",
    "argmax_level",
    "ema_update",
    "entropy",
    "expected_rating",
    "is_reliable",
    "max_prob_filter",
    "pair_keys",
    "softmax",
]
