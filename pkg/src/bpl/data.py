"""Rating data: ingestion, splitting, the rated/unrated space and a synthetic MNAR world.

Pairs are addressed throughout by a linear key ``user * num_items + item``,
which makes lexicographic (user, item) order the same as key order.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .config import dump_kv

#: Spaces up to this many pairs have their unrated part enumerated exactly.
DEFAULT_ENUMERATION_CAP = 10**7


class DataError(ValueError):
    """Raised for malformed or inconsistent rating data."""


def pair_keys(users, items, num_items: int) -> np.ndarray:
    return np.asarray(users, dtype=np.int64) * num_items + np.asarray(items, dtype=np.int64)


def unpack_keys(keys, num_items: int) -> tuple[np.ndarray, np.ndarray]:
    keys = np.asarray(keys, dtype=np.int64)
    return keys // num_items, keys % num_items


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True).reshape(-1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RatingDataset:
    num_users: int
    num_items: int
    num_levels: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    user_ids: tuple[str, ...] | None = field(default=None, repr=False)
    item_ids: tuple[str, ...] | None = field(default=None, repr=False)

    def __post_init__(self):
        for name, dtype in (("users", np.int64), ("items", np.int64), ("ratings", np.int64)):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype))
        n = len(self.users)
        if len(self.items) != n or len(self.ratings) != n:
            raise DataError("users, items and ratings must have equal length")
        if self.num_users <= 0 or self.num_items <= 0 or self.num_levels <= 0:
            raise DataError("num_users, num_items and num_levels must be positive")
        if n:
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise DataError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise DataError("item index out of range")
            if self.ratings.min() < 1 or self.ratings.max() > self.num_levels:
                raise DataError("rating level out of range")
            if len(np.unique(self.keys)) != n:
                raise DataError("duplicate (user, item) pair")

    def __len__(self) -> int:
        return len(self.ratings)

    @cached_property
    def keys(self) -> np.ndarray:
        return pair_keys(self.users, self.items, self.num_items)

    @property
    def records(self) -> list[tuple[int, int, int]]:
        return list(zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()))

    @property
    def num_pairs(self) -> int:
        return self.num_users * self.num_items

    def subset(self, index) -> "RatingDataset":
        index = np.asarray(index, dtype=np.int64)
        return dataclasses.replace(
            self, users=self.users[index], items=self.items[index], ratings=self.ratings[index]
        )

    def sorted(self) -> "RatingDataset":
        return self.subset(np.argsort(self.keys, kind="stable"))

    def rating_distribution(self) -> np.ndarray:
        counts = np.bincount(self.ratings, minlength=self.num_levels + 1)[1:]
        return counts / max(counts.sum(), 1)

    def with_shape(self, num_users: int, num_items: int) -> "RatingDataset":
        return dataclasses.replace(self, num_users=num_users, num_items=num_items)


# ---------------------------------------------------------------------------
# TSV ingestion


def _parse_header(line: str) -> dict[str, int]:
    fields = {}
    for token in line.lstrip("#").split():
        if "=" not in token:
            raise DataError(f"malformed header {line!r}")
        k, v = token.split("=", 1)
        fields[k] = int(v)
    if not {"users", "items"} <= fields.keys():
        raise DataError(f"header must carry users= and items=: {line!r}")
    return fields


def _sort_ids(ids: set[str]) -> list[str]:
    try:
        return sorted(ids, key=int)
    except ValueError:
        return sorted(ids)


def load_tsv(
    path: str | Path,
    num_levels: int,
    *,
    user_ids: Sequence[str] | None = None,
    item_ids: Sequence[str] | None = None,
) -> RatingDataset:
    """Read ``user<TAB>item<TAB>rating`` lines.

    With a ``#users=.. items=.. levels=..`` header (in the file or in a
    ``<path>.header`` sidecar) ids are taken as dense indices already.
    Otherwise raw ids are reindexed densely in sorted order, extending
    ``user_ids`` / ``item_ids`` when given so several files can share one
    index space. The maps end up on the returned dataset.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    header = None
    sidecar = path.with_name(path.name + ".header")
    if lines and lines[0].startswith("#"):
        header = _parse_header(lines[0])
        body = list(enumerate(lines[1:], start=2))
    else:
        body = list(enumerate(lines, start=1))
        if sidecar.exists():
            header = _parse_header(sidecar.read_text(encoding="utf-8").strip())
    if header is not None and header.get("levels", num_levels) != num_levels:
        raise DataError(f"header declares levels={header['levels']}, expected {num_levels}")

    raw: list[tuple[str, str, int, int]] = []
    for lineno, line in body:
        if not line.strip():
            continue
        parts = line.rstrip("\r\n").split("\t")
        if len(parts) != 3:
            raise DataError(f"malformed line at line {lineno}: {line!r}")
        u, i, r = (p.strip() for p in parts)
        try:
            rating = int(r)
        except ValueError:
            raise DataError(f"malformed rating at line {lineno}: {r!r}") from None
        if not 1 <= rating <= num_levels:
            raise DataError(f"rating out of range at line {lineno}: {rating}")
        raw.append((u, i, rating, lineno))

    if header is not None:
        n_users, n_items = header["users"], header["items"]
        try:
            users = [int(u) for u, _, _, _ in raw]
            items = [int(i) for _, i, _, _ in raw]
        except ValueError:
            raise DataError("headered files must use integer indices") from None
        for (u, i, _, lineno), uu, ii in zip(raw, users, items):
            if not (0 <= uu < n_users and 0 <= ii < n_items):
                raise DataError(f"index out of range at line {lineno}")
        umap = imap = None
    else:
        if not raw and not user_ids:
            raise DataError(f"{path}: empty file and no header to infer num_users/num_items")
        umap = list(user_ids or [])
        imap = list(item_ids or [])
        known_u, known_i = set(umap), set(imap)
        umap += _sort_ids({u for u, _, _, _ in raw} - known_u)
        imap += _sort_ids({i for _, i, _, _ in raw} - known_i)
        uidx = {u: k for k, u in enumerate(umap)}
        iidx = {i: k for k, i in enumerate(imap)}
        users = [uidx[u] for u, _, _, _ in raw]
        items = [iidx[i] for _, i, _, _ in raw]
        n_users, n_items = len(umap), len(imap)

    seen: dict[tuple[int, int], int] = {}
    for (_, _, _, lineno), uu, ii in zip(raw, users, items):
        if (uu, ii) in seen:
            raise DataError(f"duplicate pair at line {lineno} (first seen at line {seen[(uu, ii)]})")
        seen[(uu, ii)] = lineno

    return RatingDataset(
        num_users=n_users,
        num_items=n_items,
        num_levels=num_levels,
        users=np.array(users, dtype=np.int64),
        items=np.array(items, dtype=np.int64),
        ratings=np.array([r for _, _, r, _ in raw], dtype=np.int64),
        user_ids=tuple(umap) if umap is not None else None,
        item_ids=tuple(imap) if imap is not None else None,
    )


def save_tsv(dataset: RatingDataset, path: str | Path) -> None:
    lines = [f"#users={dataset.num_users} items={dataset.num_items} levels={dataset.num_levels}"]
    lines += [f"{u}\t{i}\t{r}" for u, i, r in dataset.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_reindex_maps(dataset: RatingDataset, directory: str | Path) -> None:
    """Write ``users.map`` / ``items.map`` (raw id, index) when the dataset was reindexed."""
    directory = Path(directory)
    for name, ids in (("users.map", dataset.user_ids), ("items.map", dataset.item_ids)):
        if ids is not None:
            text = "".join(f"{raw}\t{k}\n" for k, raw in enumerate(ids))
            (directory / name).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# Splits


def split_factual(
    dataset: RatingDataset, test_fraction: float, val_fraction: float, seed: int
) -> tuple[RatingDataset, RatingDataset, RatingDataset]:
    """Random (train, validation, factual_test) partition of the records.

    Fractions are of the full record count; each split is returned in key order.
    """
    if not (0 < test_fraction < 1 and 0 <= val_fraction < 1 and test_fraction + val_fraction < 1):
        raise DataError("fractions must lie in (0, 1) and sum to less than 1")
    n = len(dataset)
    n_test = int(round(test_fraction * n))
    n_val = int(round(val_fraction * n))
    if n_test == 0 or (val_fraction > 0 and n_val == 0) or n - n_test - n_val <= 0:
        raise DataError(f"dataset of {n} records too small for nonempty splits")
    perm = np.random.default_rng(seed).permutation(n)
    test = dataset.subset(perm[:n_test]).sorted()
    val = dataset.subset(perm[n_test : n_test + n_val]).sorted()
    train = dataset.subset(perm[n_test + n_val :]).sorted()
    return train, val, test


def split_validation(dataset: RatingDataset, val_fraction: float, seed: int) -> tuple[RatingDataset, RatingDataset]:
    """Hold out ``val_fraction`` of the records; returns (train, validation)."""
    n = len(dataset)
    n_val = int(round(val_fraction * n))
    if not 0 < n_val < n:
        raise DataError(f"dataset of {n} records too small for a validation split")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(perm[n_val:]).sorted(), dataset.subset(perm[:n_val]).sorted()


# ---------------------------------------------------------------------------
# Rated / unrated space


def _isin_sorted(keys: np.ndarray, sorted_ref: np.ndarray) -> np.ndarray:
    if len(sorted_ref) == 0:
        return np.zeros(len(keys), dtype=bool)
    pos = np.searchsorted(sorted_ref, keys)
    pos = np.minimum(pos, len(sorted_ref) - 1)
    return sorted_ref[pos] == keys


@dataclass(frozen=True, eq=False)
class SpaceSplit:
    """Rated pairs S1, the pool of unrated pairs S0 and the high-affinity subset S01.

    ``s0_pool`` is all of S0 when the space is enumerated; above the cap it is a
    seeded uniform sample of ``sample_multiple * |S1|`` unrated pairs, and
    fresh uniform samples are drawn per epoch by rejection.
    """

    num_users: int
    num_items: int
    s1: np.ndarray
    s0_pool: np.ndarray
    s01: np.ndarray
    enumerated: bool
    seed: int = 0
    sample_multiple: float = 1.0

    @property
    def num_pairs(self) -> int:
        return self.num_users * self.num_items

    @property
    def lambda0(self) -> float:
        return 1.0 - len(self.s1) / self.num_pairs

    @cached_property
    def s0_rest(self) -> np.ndarray:
        """Pool pairs outside S01."""
        return self.s0_pool[~_isin_sorted(self.s0_pool, self.s01)]

    @cached_property
    def expanded(self) -> np.ndarray:
        """S1 and S01 together, the positive side of the alignment objective."""
        return np.concatenate([self.s1, self.s01])

    def in_s1(self, keys) -> np.ndarray:
        return _isin_sorted(np.asarray(keys, dtype=np.int64), self.s1)

    def in_s01(self, keys) -> np.ndarray:
        return _isin_sorted(np.asarray(keys, dtype=np.int64), self.s01)

    def _draw_unrated(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty(0, dtype=np.int64)
        while len(out) < n:
            cand = rng.integers(0, self.num_pairs, size=2 * (n - len(out)) + 8)
            out = np.concatenate([out, cand[~self.in_s1(cand)]])
        return out[:n]

    def sample_unrated(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` uniform draws (with replacement) from S0."""
        if self.enumerated:
            return self.s0_pool[rng.integers(0, len(self.s0_pool), size=n)]
        return self._draw_unrated(rng, n)

    def s0_sampler(self, seed: int, batch_size: int) -> Iterator[np.ndarray]:
        """Endless stream of unrated batches, identical for identical seeds."""
        rng = np.random.default_rng(seed)
        while True:
            yield self.sample_unrated(rng, batch_size)

    def with_s01(self, s01: np.ndarray) -> "SpaceSplit":
        return dataclasses.replace(self, s01=np.sort(np.asarray(s01, dtype=np.int64)))


def build_space_split(
    dataset: RatingDataset,
    *,
    cap: int = DEFAULT_ENUMERATION_CAP,
    sample_multiple: float = 1.0,
    seed: int = 0,
) -> SpaceSplit:
    if len(dataset) == 0:
        raise DataError("cannot build a space split from an empty dataset")
    s1 = np.unique(dataset.keys)
    n_pairs = dataset.num_pairs
    empty = np.empty(0, dtype=np.int64)
    if n_pairs <= cap:
        mask = np.ones(n_pairs, dtype=bool)
        mask[s1] = False
        return SpaceSplit(dataset.num_users, dataset.num_items, s1, np.flatnonzero(mask), empty, True, seed,
                          sample_multiple)
    split = SpaceSplit(dataset.num_users, dataset.num_items, s1, empty, empty, False, seed, sample_multiple)
    n_pool = max(1, int(round(sample_multiple * len(s1))))
    pool = np.unique(split._draw_unrated(np.random.default_rng(seed), n_pool))
    return dataclasses.replace(split, s0_pool=pool)


def mark_s01(split: SpaceSplit, affinity, x_percent: float) -> SpaceSplit:
    """Flag the top ``x_percent`` of the unrated pool by affinity as S01.

    Ties go to the lexicographically smaller (user, item) pair.
    """
    if not 0 < x_percent < 100:
        raise DataError(f"x_percent must lie in (0, 100), got {x_percent}")
    pool = split.s0_pool
    scores = np.asarray(affinity.lookup_keys(pool), dtype=np.float64)
    n_top = int(math.ceil(x_percent / 100.0 * len(pool) - 1e-9))
    order = np.lexsort((pool, -scores))
    return split.with_s01(pool[order[:n_top]])


# ---------------------------------------------------------------------------
# Synthetic world


@dataclass(frozen=True)
class GeneratorConfig:
    num_users: int = 300
    num_items: int = 300
    num_levels: int = 5
    latent_dim: int = 4
    density: float = 0.1
    popularity_weight: float = 2.0
    rating_weight: float = 0.5
    conformity_noise: float = 0.3
    popularity_sigma: float = 1.0
    rating_noise: float = 0.2
    user_bias_sigma: float = 0.5
    item_bias_sigma: float = 0.5
    # most true ratings are low, as in randomized-exposure surveys
    rating_marginal: tuple[float, ...] = (0.5, 0.2, 0.13, 0.1, 0.07)
    factual_fraction: float = 0.1
    counterfactual_per_user: int = 16
    val_fraction: float = 0.1  # held out of train by the simulate command
    seed: int = 0


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    true_ratings: np.ndarray
    exposure: np.ndarray
    item_log_popularity: np.ndarray
    config: GeneratorConfig

    def true_rating(self, users, items) -> np.ndarray:
        return self.true_ratings[np.asarray(users), np.asarray(items)]

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        n_u, n_i = self.true_ratings.shape
        uu, ii = np.meshgrid(np.arange(n_u), np.arange(n_i), indexing="ij")
        head = f"#users={n_u} items={n_i} levels={self.config.num_levels}"
        rows = [head] + [f"{u}\t{i}\t{r}" for u, i, r in zip(uu.ravel(), ii.ravel(), self.true_ratings.ravel())]
        (directory / "world_ratings.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        rows = [head] + [f"{u}\t{i}\t{p:.6f}" for u, i, p in zip(uu.ravel(), ii.ravel(), self.exposure.ravel())]
        (directory / "world_exposure.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        (directory / "generator_config.txt").write_text(dump_kv(self.config), encoding="utf-8")


def _quantize(scores: np.ndarray, marginal: Sequence[float]) -> np.ndarray:
    cuts = np.quantile(scores, np.cumsum(marginal)[:-1])
    return np.searchsorted(cuts, scores, side="right").astype(np.int64) + 1


def generate_synthetic(
    config: GeneratorConfig,
) -> tuple[SyntheticWorld, RatingDataset, RatingDataset, RatingDataset]:
    """Draw a world with known ratings everywhere and MNAR exposure.

    Returns ``(world, train, counterfactual_test, factual_test)``. Training
    pairs are Bernoulli draws from the exposure table; the factual test is
    drawn proportionally to exposure from the remaining pairs, the
    counterfactual test uniformly from what is left after that.
    """
    c = config
    K = c.num_levels
    if not 0 < c.density <= 0.5:
        raise DataError(f"density must lie in (0, 0.5], got {c.density}")
    if len(c.rating_marginal) != K or abs(sum(c.rating_marginal) - 1) > 1e-6:
        raise DataError("rating_marginal needs num_levels entries summing to 1")
    n_pairs = c.num_users * c.num_items
    if c.density * n_pairs < max(c.num_users, 10):
        raise DataError(f"density {c.density} infeasible for a {c.num_users}x{c.num_items} grid")

    rng = np.random.default_rng(c.seed)
    scale = 1.0 / math.sqrt(c.latent_dim)
    user_f = rng.normal(0, scale, (c.num_users, c.latent_dim))
    item_f = rng.normal(0, scale, (c.num_items, c.latent_dim))
    scores = (
        user_f @ item_f.T
        + rng.normal(0, c.user_bias_sigma, (c.num_users, 1))
        + rng.normal(0, c.item_bias_sigma, (1, c.num_items))
        + rng.normal(0, c.rating_noise, (c.num_users, c.num_items))
    )
    true = _quantize(scores, c.rating_marginal)

    log_pop = rng.normal(0, c.popularity_sigma, c.num_items)
    base = c.popularity_weight * log_pop[None, :] + c.rating_weight * (true - (K + 1) / 2.0)
    offset = brentq(lambda b: expit(base + b).mean() - c.density, -60.0, 60.0, xtol=1e-12)
    exposure = expit(base + offset)

    observed = rng.random((c.num_users, c.num_items)) < exposure
    train_keys = np.flatnonzero(observed.ravel())
    held = np.flatnonzero(~observed.ravel())
    n_fact = int(round(c.factual_fraction * len(train_keys)))
    w = exposure.ravel()[held]
    fact_keys = np.sort(rng.choice(held, size=n_fact, replace=False, p=w / w.sum())) if n_fact else held[:0]
    rest = np.setdiff1d(held, fact_keys, assume_unique=True)
    n_cf = min(c.counterfactual_per_user * c.num_users, len(rest))
    if n_cf == 0:
        raise DataError("no held-out pairs left for the counterfactual test")
    cf_keys = np.sort(rng.choice(rest, size=n_cf, replace=False))

    flat_true = true.ravel()
    obs_ratings = flat_true[train_keys].copy()
    fact_ratings = flat_true[fact_keys].copy()
    if c.conformity_noise > 0:
        items = train_keys % c.num_items
        sums = np.bincount(items, weights=obs_ratings, minlength=c.num_items)
        cnt = np.bincount(items, minlength=c.num_items)
        mean_i = np.divide(sums, cnt, out=np.zeros(c.num_items), where=cnt > 0)

        def shift(keys, r):
            it = keys % c.num_items
            target = np.where(cnt[it] > 0, mean_i[it], r)
            return np.clip(np.rint(r + c.conformity_noise * (target - r)), 1, K).astype(np.int64)

        obs_ratings, fact_ratings = shift(train_keys, obs_ratings), shift(fact_keys, fact_ratings)

    def make(keys, ratings):
        u, i = unpack_keys(keys, c.num_items)
        return RatingDataset(c.num_users, c.num_items, K, u, i, ratings)

    world = SyntheticWorld(true, exposure, log_pop, config)
    for a in (true, exposure, log_pop):
        a.setflags(write=False)
    return world, make(train_keys, obs_ratings), make(cf_keys, flat_true[cf_keys]), make(fact_keys, fact_ratings)


# ---------------------------------------------------------------------------
# Per-pair value tables


class PairTable:
    """Real values attached to (user, item) pairs, looked up by key.

    ``fallback`` (keys -> values) serves pairs not stored in the table, which
    is how spaces too large to enumerate are handled.
    """

    label = "value"

    def __init__(self, num_users: int, num_items: int, keys, values, fallback=None):
        keys = np.asarray(keys, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        order = np.argsort(keys, kind="stable")
        self.num_users = num_users
        self.num_items = num_items
        self.keys = keys[order]
        self.values = values[order]
        self.fallback = fallback
        if len(self.keys) and np.any(np.diff(self.keys) == 0):
            raise DataError(f"duplicate pair in {self.label} table")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"non-finite {self.label}")

    def __len__(self) -> int:
        return len(self.keys)

    def lookup_keys(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        if len(self.keys) == self.num_users * self.num_items:
            return self.values[keys]
        hit = _isin_sorted(keys, self.keys)
        out = np.empty(len(keys), dtype=np.float64)
        out[hit] = self.values[np.searchsorted(self.keys, keys[hit])]
        if not hit.all():
            if self.fallback is None:
                u, i = unpack_keys(keys[~hit][:1], self.num_items)
                raise KeyError(f"missing {self.label} for pair ({u[0]}, {i[0]})")
            out[~hit] = self.fallback(keys[~hit])
        return out

    def lookup(self, users, items) -> np.ndarray:
        return self.lookup_keys(pair_keys(users, items, self.num_items))

    def to_tsv(self, path: str | Path, keys=None) -> None:
        keys = self.keys if keys is None else np.asarray(keys, dtype=np.int64)
        values = self.lookup_keys(keys)
        u, i = unpack_keys(keys, self.num_items)
        lines = [f"#users={self.num_users} items={self.num_items}"]
        lines += [f"{a}\t{b}\t{v:.6f}" for a, b, v in zip(u.tolist(), i.tolist(), values.tolist())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read_tsv(cls, path: str | Path, **kwargs):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#"):
            raise DataError(f"{path}: missing #users=.. items=.. header")
        head = _parse_header(lines[0])
        users, items, values = [], [], []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"malformed line at line {lineno}: {line!r}")
            users.append(int(parts[0]))
            items.append(int(parts[1]))
            values.append(float(parts[2]))
        keys = pair_keys(users, items, head["items"])
        return cls(head["users"], head["items"], keys, values, **kwargs)
