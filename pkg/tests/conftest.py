import os
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bpl.affinity import AffinityScores
from bpl.data import RatingDataset, build_space_split, mark_s01, unpack_keys
from bpl.model import Discriminator, PreferenceModel, TeacherPredictions, TemporalEnsemble

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

N_USERS, N_ITEMS, K = 5, 6, 5


@dataclass
class Instance:
    model: PreferenceModel
    disc: Discriminator
    ensemble: TemporalEnsemble
    teacher: TeacherPredictions
    affinity: AffinityScores
    split: object
    rated: RatingDataset
    unrated_users: np.ndarray
    unrated_items: np.ndarray
    pos_users: np.ndarray
    pos_items: np.ndarray
    neg_users: np.ndarray
    neg_items: np.ndarray


def make_instance(seed: int, dim: int = 3, disc_layers: int = 1, n_rated: int = 10, x_percent: float = 30.0) -> Instance:
    """A random 5-user x 6-item problem with O(1) parameters, so no gradient is vanishingly small."""
    rng = np.random.default_rng(seed)
    model = PreferenceModel(N_USERS, N_ITEMS, K, dim, rng=rng)
    for b in model.blocks:
        b.values[...] = rng.normal(0.0, 1.0, b.shape)
    disc = Discriminator(dim, layers=disc_layers, hidden=4, rng=rng)
    for b in disc.blocks:
        b.values[...] = rng.normal(0.0, 1.0, b.shape)

    # the shadow disagrees with the model on some argmaxes
    ensemble = TemporalEnsemble(model, tau=0.9)
    for b in ensemble.shadow.blocks:
        b.values += rng.normal(0.0, 0.7, b.shape)

    n = N_USERS * N_ITEMS
    keys = np.sort(rng.choice(n, n_rated, replace=False))
    u, i = unpack_keys(keys, N_ITEMS)
    rated = RatingDataset(N_USERS, N_ITEMS, K, u, i, rng.integers(1, K + 1, n_rated))
    all_keys = np.arange(n)
    teacher = TeacherPredictions(N_USERS, N_ITEMS, all_keys, rng.uniform(1.0, K, n))
    affinity = AffinityScores(N_USERS, N_ITEMS, all_keys, rng.uniform(0.02, 0.98, n))
    split = mark_s01(build_space_split(rated), affinity, x_percent)

    uu, ui = unpack_keys(split.s0_pool, N_ITEMS)
    pu, pi = unpack_keys(split.expanded, N_ITEMS)
    nu, ni = unpack_keys(split.s0_rest, N_ITEMS)
    return Instance(model, disc, ensemble, teacher, affinity, split, rated, uu, ui, pu, pi, nu, ni)


@pytest.fixture
def instance():
    return make_instance(0)


def tiny_dataset(n_users=8, n_items=10, density=0.4, levels=5, seed=0) -> RatingDataset:
    rng = np.random.default_rng(seed)
    mask = rng.random((n_users, n_items)) < density
    keys = np.flatnonzero(mask.ravel())
    u, i = unpack_keys(keys, n_items)
    return RatingDataset(n_users, n_items, levels, u, i, rng.integers(1, levels + 1, len(keys)))


# ---------------------------------------------------------------------------
# acceptance report: one line per criterion, printed after the run

ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
