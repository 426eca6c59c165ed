import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from bpl.affinity import AffinityScores
from bpl.model import Discriminator, PreferenceModel, TemporalEnsemble, softmax
from bpl.objectives import (Batches, TrainingConfig, _per_pair_pd, combination_weights, loss_pd, loss_sd, loss_t1,
                            loss_t2, loss_t3, loss_total)

from conftest import K, make_instance


def _forced(p_rows):
    """A model whose predicted distribution for pair (0, j) is row j of ``p_rows``."""
    p_rows = np.asarray(p_rows, dtype=np.float64)
    n, k = p_rows.shape
    m = PreferenceModel(1, n, k, n)
    m.user_emb.values[...] = 1.0
    m.item_emb.values[...] = np.eye(n)
    with np.errstate(divide="ignore"):
        m.pred_w.values[...] = np.log(np.maximum(p_rows, 1e-300)).T
    return m, np.zeros(n, dtype=np.int64), np.arange(n)


class Table:
    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def lookup(self, users, items):
        return self.values[np.asarray(items)]


# ---------------------------------------------------------------------------
# closed-form values


def test_t1_uniform_is_log_k():
    m = PreferenceModel(3, 4, 5, 2)
    assert loss_t1(m, [0, 1, 2], [0, 1, 3], [1, 5, 3], weight=0) == pytest.approx(math.log(5), abs=1e-12)


def test_t1_certain_and_half():
    m, u, i = _forced([[1, 0, 0, 0, 0], [0.5, 0.5, 0, 0, 0]])
    assert loss_t1(m, u[:1], i[:1], [1], weight=0) == pytest.approx(0.0, abs=1e-12)
    assert loss_t1(m, u[1:], i[1:], [2], weight=0) == pytest.approx(math.log(2), abs=1e-12)


def test_t1_rejects_bad_labels():
    m = PreferenceModel(2, 2, 5, 2)
    with pytest.raises(ValueError):
        loss_t1(m, [], [], [])
    with pytest.raises(ValueError):
        loss_t1(m, [0], [0], [6])


def test_t1_matches_oracle():
    inst = make_instance(3)
    r = inst.rated
    assert loss_t1(inst.model, r.users, r.items, r.ratings, weight=0) == pytest.approx(
        oracles.cross_entropy(inst.model, r.users.tolist(), r.items.tolist(), r.ratings.tolist()), rel=1e-12)


def test_t2_chance_discriminator():
    inst = make_instance(1)
    for b in inst.disc.blocks:
        b.values[...] = 0.0
    v = loss_t2(inst.model, inst.disc, inst.pos_users, inst.pos_items, inst.neg_users, inst.neg_items)
    assert v == pytest.approx(2 * math.log(0.5), abs=1e-12)
    # w = 0 means no signal reaches the encoder
    assert not inst.model.user_emb.grad.any() and not inst.model.item_emb.grad.any()


def test_t2_matches_oracle():
    inst = make_instance(4)
    v = loss_t2(inst.model, inst.disc, inst.pos_users, inst.pos_items, inst.neg_users, inst.neg_items, weight=0)
    ref = oracles.alignment_objective(inst.model, inst.disc, list(zip(inst.pos_users, inst.pos_items)),
                                      list(zip(inst.neg_users, inst.neg_items)))
    assert v == pytest.approx(ref, rel=1e-12)


def test_t2_separating_discriminator_approaches_zero():
    """Positives and negatives on opposite sides of a hyperplane: J climbs toward 0 as the weights grow."""
    m = PreferenceModel(4, 4, K, 3)
    m.user_emb.values[...] = 1.0
    m.item_emb.values[:2] = 1.0
    m.item_emb.values[2:] = -1.0
    disc = Discriminator(3)
    pu, pi, nu, ni = np.array([0, 1]), np.array([0, 1]), np.array([2, 3]), np.array([2, 3])
    values = []
    for scale in (0.0, 0.5, 2.0, 8.0):
        disc.blocks[-2].values[...] = scale
        disc.blocks[-1].values[...] = 0.0
        values.append(loss_t2(m, disc, pu, pi, nu, ni, weight=0))
    assert values[0] == pytest.approx(2 * math.log(0.5))
    assert values == sorted(values) and -1e-9 < values[-1] < 0


def test_t2_reversal_sign():
    """The step the encoder takes (minus its accumulated gradient) is minus the numeric gradient of J."""
    inst = make_instance(6)
    args = (inst.model, inst.disc, inst.pos_users, inst.pos_items, inst.neg_users, inst.neg_items)
    for block in (inst.model.user_emb, inst.model.item_emb):
        flat = block.values.reshape(-1)
        numeric = np.zeros_like(flat)
        for k in range(flat.size):
            o = flat[k]
            flat[k] = o + 1e-6
            up = loss_t2(*args, weight=0)
            flat[k] = o - 1e-6
            down = loss_t2(*args, weight=0)
            flat[k] = o
            numeric[k] = (up - down) / 2e-6
        inst.model.zero_grad()
        loss_t2(*args, weight=1.0)
        np.testing.assert_allclose(-block.grad.reshape(-1), -numeric, rtol=1e-5, atol=1e-8)


def test_t2_needs_both_sides():
    inst = make_instance(0)
    with pytest.raises(ValueError):
        loss_t2(inst.model, inst.disc, inst.pos_users[:0], inst.pos_items[:0], inst.neg_users, inst.neg_items)


def test_sd_examples():
    one_hot = np.eye(K)
    m, u, i = _forced(one_hot)
    ens = TemporalEnsemble(m, 0.5)
    assert loss_sd(m, ens, u, i) == pytest.approx(0.0, abs=1e-12)

    m = PreferenceModel(1, 3, K, 2)
    ens = TemporalEnsemble(m, 0.5)
    assert loss_sd(m, ens, [0, 0, 0], [0, 1, 2]) == pytest.approx(math.log(5), abs=1e-12)


def test_sd_all_filtered_is_zero_with_zero_gradient():
    m, u, i = _forced([[0.1, 0.6, 0.1, 0.1, 0.1], [0.2, 0.2, 0.2, 0.3, 0.1]])
    other, _, _ = _forced([[0.6, 0.1, 0.1, 0.1, 0.1], [0.1, 0.1, 0.1, 0.1, 0.6]])
    ens = TemporalEnsemble(other, 0.5)
    stats = {}
    assert loss_sd(m, ens, u, i, stats=stats) == 0.0
    assert stats["reliable_fraction"] == 0.0
    assert all(not b.grad.any() for b in m.blocks)


def test_sd_filtered_pairs_contribute_nothing():
    inst = make_instance(7)
    m, ens = inst.model, inst.ensemble
    u, i = inst.unrated_users, inst.unrated_items
    p = m.predict_distribution(u, i)
    keep = np.argmax(ens.predict_distribution(u, i), 1) == np.argmax(p, 1)
    assert keep.any() and not keep.all()
    m.zero_grad()
    full = loss_sd(m, ens, u, i) * len(u)
    g_full = [b.grad.copy() for b in m.blocks]
    m.zero_grad()
    part = loss_sd(m, ens, u[keep], i[keep]) * keep.sum()
    g_part = [b.grad * keep.sum() / len(u) for b in m.blocks]
    assert full == pytest.approx(part, rel=1e-12)
    for a, b in zip(g_full, g_part):
        np.testing.assert_allclose(a, b, atol=1e-14)


def test_sd_max_probability_boundary():
    m, u, i = _forced([[0.5, 0.5, 0, 0, 0]])
    assert loss_sd(m, None, u, i, filter_mode="max_probability", m=0.5) == 0.0
    assert loss_sd(m, None, u, i, filter_mode="max_probability", m=0.45) == pytest.approx(math.log(2))


def test_sd_needs_ensemble_for_temporal_consistency():
    m = PreferenceModel(1, 1, K, 2)
    with pytest.raises(ValueError):
        loss_sd(m, None, [0], [0])


def test_pd_examples():
    m, u, i = _forced([[0, 0, 1, 0, 0], [0.2] * 5, [0, 0, 0, 0, 1]])
    assert loss_pd(m, Table([3, 3, 3]), u[:1], i[:1], weight=0) == pytest.approx(0.0, abs=1e-12)
    assert loss_pd(m, Table([3, 3, 3]), u[1:2], i[1:2], weight=0) == pytest.approx(-math.log(5), abs=1e-12)
    assert loss_pd(m, Table([3, 3, 3]), u[2:], i[2:], weight=0) == pytest.approx(4.0, abs=1e-12)


def test_pd_missing_teacher_raises():
    from bpl.model import TeacherPredictions

    teacher = TeacherPredictions(1, 3, [0, 1], [2.0, 3.0])
    m = PreferenceModel(1, 3, K, 2)
    with pytest.raises(KeyError, match="teacher"):
        loss_pd(m, teacher, [0], [2])


@given(hnp.arrays(np.float64, (K,), elements=st.floats(-8, 8)), st.floats(1, K), st.floats(0, 10))
def test_pd_lower_bound(logits, t, lam):
    p = softmax(logits[None, :])
    value, _ = _per_pair_pd(p, np.array([t]), lam, True)
    assert value[0] >= -math.log(K) - 1e-9
    assert value[0] == pytest.approx(oracles.pd_value(p[0].tolist(), t, lam), abs=1e-9)


def test_pd_bound_attained_only_at_uniform_centre():
    p = np.full((1, K), 1 / K)
    assert _per_pair_pd(p, np.array([3.0]), 1.0, True)[0][0] == pytest.approx(-math.log(K), abs=1e-12)
    assert _per_pair_pd(p, np.array([3.5]), 1.0, True)[0][0] > -math.log(K)


@given(hnp.arrays(np.float64, (6, K), elements=st.floats(-10, 10)))
def test_sd_per_pair_range(logits):
    m, u, i = _forced(softmax(logits))
    ens = TemporalEnsemble(m, 0.5)
    for j in range(len(u)):
        v = loss_sd(m, ens, u[j:j + 1], i[j:j + 1], weight=0)
        assert -1e-12 <= v <= math.log(K) + 1e-12


def test_t3_hard_and_soft_examples():
    # pair 0: one-hot on level 5 with teacher 3, so pd = 4 and sd = 0
    # pair 1: uniform with teacher 3, so pd = -ln 5 and sd = ln 5
    m, u, i = _forced([[0, 0, 0, 0, 1], [0.2] * 5])
    ens = TemporalEnsemble(m, 0.5)
    teacher = Table([3.0, 3.0])

    class Split:
        num_items = 2

        def in_s01(self, keys):
            return np.asarray(keys) == 0

    hard = TrainingConfig(combination_mode="hard")
    assert loss_t3(m, ens, teacher, u, i, hard, split=Split(), weight=0) == pytest.approx((4.0 + math.log(5)) / 2)

    soft = TrainingConfig(combination_mode="soft")
    aff = AffinityScores(1, 2, [0, 1], [0.5, 0.5])
    expected = (0.5 * 4.0 + 0.5 * (-math.log(5)) + 0.5 * math.log(5)) / 2
    assert loss_t3(m, ens, teacher, u, i, soft, affinity=aff, weight=0) == pytest.approx(expected)



def test_t3_matches_oracle():
    inst = make_instance(8)
    u, i = inst.unrated_users, inst.unrated_items
    config = TrainingConfig(combination_mode="soft")
    a = inst.affinity.lookup(u, i)
    t = inst.teacher.lookup(u, i)
    rel = np.argmax(inst.ensemble.predict_distribution(u, i), 1) == np.argmax(inst.model.predict_distribution(u, i), 1)
    ref = oracles.t3_value(inst.model, list(zip(u, i)), a, t, rel, config.lam)
    got = loss_t3(inst.model, inst.ensemble, inst.teacher, u, i, config, affinity=inst.affinity, weight=0)
    assert got == pytest.approx(ref, rel=1e-12)


def test_hard_soft_consistency():
    inst = make_instance(9)
    u, i = inst.unrated_users, inst.unrated_items
    n = inst.split.num_pairs
    keys = np.arange(n)
    indicator = AffinityScores(inst.split.num_users, inst.split.num_items, keys,
                               inst.split.in_s01(keys).astype(float))
    vals, grads = [], []
    for mode, kw in (("hard", {"split": inst.split}), ("soft", {"affinity": indicator})):
        inst.model.zero_grad()
        vals.append(loss_t3(inst.model, inst.ensemble, inst.teacher, u, i, TrainingConfig(combination_mode=mode), **kw))
        grads.append([b.grad.copy() for b in inst.model.blocks])
    assert vals[0] == pytest.approx(vals[1], abs=1e-15)
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, atol=1e-15)


def test_combination_weights_need_inputs():
    with pytest.raises(ValueError):
        combination_weights("soft", [0], [0])
    with pytest.raises(ValueError):
        combination_weights("hard", [0], [0])
    with pytest.raises(ValueError):
        combination_weights("mixed", [0], [0])


def test_total_arithmetic_and_standard_reduction():
    inst = make_instance(10)
    r = inst.rated
    b = Batches(r.users, r.items, r.ratings, inst.pos_users, inst.pos_items, inst.neg_users, inst.neg_items,
                inst.unrated_users, inst.unrated_items)
    cfg = TrainingConfig(alpha=0.5, beta=1.5, combination_mode="soft")
    out = loss_total(inst.model, inst.disc, inst.ensemble, inst.teacher, b, cfg, affinity=inst.affinity)
    assert out.total == pytest.approx(out.t1 + 0.5 * out.t2 + 1.5 * out.t3, rel=1e-14)
    assert 1.0 + 0.5 * -0.5 + 1.5 * 2.0 == 3.75

    inst.model.zero_grad()
    zero = loss_total(inst.model, None, None, None, b, TrainingConfig(alpha=0.0, beta=0.0))
    g_total = [x.grad.copy() for x in inst.model.blocks]
    inst.model.zero_grad()
    t1 = loss_t1(inst.model, r.users, r.items, r.ratings)
    assert zero.total == t1 and zero.t2 == 0.0 and zero.t3 == 0.0
    for a, x in zip(g_total, inst.model.blocks):
        assert np.array_equal(a, x.grad)


def test_config_validation():
    for bad in (dict(alpha=-1), dict(beta=-0.1), dict(lam=-1), dict(tau=1.5), dict(x_percent=0),
                dict(x_percent=100), dict(combination_mode="x"), dict(filter_mode="x"), dict(ablation="x")):
        with pytest.raises(ValueError):
            TrainingConfig(**bad)
    assert not TrainingConfig(ablation="no_T2").use_t2
    assert not TrainingConfig(ablation="no_T2_T3").use_t3
    assert not TrainingConfig(ablation="no_confidence_penalty").confidence_penalty
