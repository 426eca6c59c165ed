"""Metrics, error analyses and report writers."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .data import RatingDataset, pair_keys, unpack_keys


def mse_mae(model, test: RatingDataset) -> tuple[float, float]:
    if len(test) == 0:
        raise ValueError("empty test set")
    err = model.predict(test.users, test.items) - test.ratings
    return float(np.mean(err**2)), float(np.mean(np.abs(err)))


def harmonic_mean(a: float, b: float) -> float:
    if a <= 0 or b <= 0:
        raise ValueError("harmonic mean needs positive inputs")
    return 2.0 * a * b / (a + b)


@dataclass
class MetricsReport:
    factual_mse: float
    factual_mae: float
    counterfactual_mse: float
    counterfactual_mae: float
    harmonic_mean_mse: float
    harmonic_mean_mae: float
    buckets: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float):
                d[k] = round(v, 6)
        return d

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def evaluate(model, factual: RatingDataset, counterfactual: RatingDataset, **metadata) -> MetricsReport:
    f_mse, f_mae = mse_mae(model, factual)
    c_mse, c_mae = mse_mae(model, counterfactual)
    return MetricsReport(f_mse, f_mae, c_mse, c_mae, harmonic_mean(f_mse, c_mse), harmonic_mean(f_mae, c_mae),
                         metadata=dict(metadata))


def affinity_bucket_errors(model, users, items, ratings, affinity, num_buckets: int = 10) -> list[dict]:
    """Mean squared error per equal-count affinity bucket, lowest affinity first."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.float64)
    if len(users) < num_buckets:
        raise ValueError(f"{len(users)} pairs cannot fill {num_buckets} buckets")
    a = affinity.lookup(users, items)
    keys = pair_keys(users, items, affinity.num_items)
    order = np.lexsort((keys, a))
    sq = (model.predict(users, items) - ratings) ** 2
    rows = []
    for b, idx in enumerate(np.array_split(order, num_buckets)):
        rows.append({
            "bucket": b,
            "affinity_low": float(a[idx].min()),
            "affinity_high": float(a[idx].max()),
            "count": int(len(idx)),
            "mse": float(sq[idx].mean()),
        })
    return rows


def bucket_spread(rows: list[dict]) -> float:
    mses = [r["mse"] for r in rows]
    return max(mses) - min(mses)


def _spearman(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("degenerate (constant) factor or affinity")
    return float(stats.spearmanr(x, y).statistic)


def popularity_factors(reference: RatingDataset) -> tuple[np.ndarray, np.ndarray]:
    """(pop(i), pop(u)): normalized item frequency and each user's mean item popularity.

    Users without ratings get NaN.
    """
    counts = np.bincount(reference.items, minlength=reference.num_items).astype(np.float64)
    pop_i = counts / max(counts.max(), 1.0)
    sums = np.bincount(reference.users, weights=pop_i[reference.items], minlength=reference.num_users)
    n_u = np.bincount(reference.users, minlength=reference.num_users)
    pop_u = np.divide(sums, n_u, out=np.full(reference.num_users, np.nan), where=n_u > 0)
    return pop_i, pop_u


def conformity(reference: RatingDataset) -> np.ndarray:
    """``-(r_ui - mean_i)^2`` per rated pair of ``reference``."""
    sums = np.bincount(reference.items, weights=reference.ratings, minlength=reference.num_items)
    n_i = np.bincount(reference.items, minlength=reference.num_items)
    mean_i = sums / np.maximum(n_i, 1)
    return -((reference.ratings - mean_i[reference.items]) ** 2)


def factor_correlations(dataset: RatingDataset, affinity, reference: RatingDataset | None = None,
                        max_pairs: int = 200_000, seed: int = 0) -> tuple[float, float, float]:
    """Spearman correlation of affinity with popularity, popularity alignment and conformity.

    Popularity and alignment are measured over pairs unrated in ``dataset``;
    conformity over the rated pairs of ``reference``. Factor statistics come
    from ``reference`` (default: ``dataset``); passing an independent sample
    keeps sampling noise the estimator fitted from leaking into the factors.
    """
    reference = dataset if reference is None else reference
    pop_i, pop_u = popularity_factors(reference)
    mask = np.ones(dataset.num_pairs, dtype=bool)
    mask[dataset.keys] = False
    unrated = np.flatnonzero(mask)
    if len(unrated) > max_pairs:
        unrated = np.sort(np.random.default_rng(seed).choice(unrated, max_pairs, replace=False))
    u, i = unpack_keys(unrated, dataset.num_items)
    keep = ~np.isnan(pop_u[u])
    u, i = u[keep], i[keep]
    a = affinity.lookup(u, i)
    corr_pop = _spearman(pop_i[i], a)
    corr_align = _spearman(-((pop_u[u] - pop_i[i]) ** 2), a)
    corr_conf = _spearman(conformity(reference), affinity.lookup(reference.users, reference.items))
    return corr_pop, corr_align, corr_conf


def representation_probe(model, test: RatingDataset, folds: int = 5, seed: int = 0,
                         hidden: int | None = None, max_iter: int = 300) -> dict[int, float]:
    """Per-level F1 of a two-layer classifier on frozen representations, k-fold averaged.

    Levels absent from ``test`` map to NaN (undefined, not zero).
    """
    from sklearn.model_selection import StratifiedKFold
    from sklearn.metrics import f1_score
    from sklearn.neural_network import MLPClassifier
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    z = model.encode(test.users, test.items).copy()
    y = np.asarray(test.ratings)
    levels = np.arange(1, test.num_levels + 1)
    present = np.unique(y)
    counts = np.bincount(y, minlength=test.num_levels + 1)
    if counts[present].min() < folds:
        raise ValueError(f"every present rating level needs at least {folds} examples")
    hidden = hidden or 2 * z.shape[1]
    scores = np.zeros((folds, len(present)))
    cv = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    for k, (tr, te) in enumerate(cv.split(z, y)):
        clf = make_pipeline(StandardScaler(),
                            MLPClassifier(hidden_layer_sizes=(hidden,), max_iter=max_iter, random_state=seed))
        clf.fit(z[tr], y[tr])
        scores[k] = f1_score(y[te], clf.predict(z[te]), labels=present, average=None, zero_division=0)
    mean = dict(zip(present.tolist(), scores.mean(axis=0).tolist()))
    return {int(lv): mean.get(int(lv), float("nan")) for lv in levels}


def macro_f1(per_level: dict[int, float]) -> float:
    vals = [v for v in per_level.values() if not np.isnan(v)]
    return float(np.mean(vals))


def paired_t(a, b) -> tuple[float, float]:
    """Paired t statistic and two-sided p-value over matched per-run metrics."""
    res = stats.ttest_rel(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return float(res.statistic), float(res.pvalue)


def write_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
