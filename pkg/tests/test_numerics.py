import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from bpl.numerics import (Adam, AdamState, NonFiniteError, ParameterBlock, adam_step, export_tsv, finite_diff_check,
                          load_checkpoint, save_checkpoint)

finite = st.floats(-5, 5, allow_nan=False)


def _block(values, name="theta"):
    return ParameterBlock(name, np.array(values, dtype=np.float64))


def test_zero_gradient_no_decay_is_identity():
    b = _block([1.0, -2.0, 3.0])
    adam_step(b, AdamState.for_block(b, learning_rate=0.1))
    np.testing.assert_array_equal(b.values, [1.0, -2.0, 3.0])


@given(hnp.arrays(np.float64, 4, elements=st.floats(1e-3, 10) | st.floats(-10, -1e-3)), st.floats(1e-4, 0.5))
def test_first_step_is_sign_of_gradient(g, lr):
    b = _block(np.zeros(4))
    b.grad[...] = g
    adam_step(b, AdamState.for_block(b, learning_rate=lr))
    np.testing.assert_allclose(b.values, -lr * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(b.values, -lr * np.sign(g), rtol=2e-5)


def test_decoupled_decay_scales_values():
    b = _block([2.0, -4.0])
    adam_step(b, AdamState.for_block(b, learning_rate=0.1, weight_decay=0.5))
    np.testing.assert_allclose(b.values, [2.0 * 0.95, -4.0 * 0.95], rtol=0, atol=1e-15)


@given(st.lists(hnp.arrays(np.float64, 3, elements=finite), min_size=1, max_size=6),
       st.floats(1e-4, 0.1), st.floats(0, 1))
def test_matches_reference_adam(grads, lr, wd):
    theta0 = [0.3, -1.2, 2.0]
    opt = Adam([_block(theta0)], lr=lr, weight_decay=wd)
    for g in grads:
        opt.blocks[0].grad[...] = g
        opt.step()
    ref = oracles.adam_reference(theta0, [g.tolist() for g in grads], lr, wd=wd)
    np.testing.assert_allclose(opt.blocks[0].values, ref, rtol=1e-10, atol=1e-12)


@given(st.lists(hnp.arrays(np.float64, 3, elements=finite), min_size=1, max_size=8), st.floats(1e-4, 0.1))
def test_step_size_bounded_without_decay(grads, lr):
    b = _block(np.zeros(3))
    state = AdamState.for_block(b, learning_rate=lr)
    for g in grads:
        before = b.values.copy()
        b.grad[...] = g
        adam_step(b, state)
        # |m_hat| / sqrt(v_hat) <= sqrt(1 - b2^t) / (1 - b1^t) for Adam's defaults, which is under 3 here
        assert np.all(np.abs(b.values - before) <= 3 * lr + 1e-12)


def test_step_clears_gradient_and_counts():
    b = _block([1.0])
    b.grad[...] = 0.5
    s = AdamState.for_block(b)
    adam_step(b, s)
    adam_step(b, s)
    assert s.step_count == 2 and b.grad[0] == 0.0


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_gradient_raises_without_mutation(bad):
    b = _block([1.0, 2.0])
    b.grad[...] = [0.1, bad]
    s = AdamState.for_block(b, learning_rate=0.1)
    with pytest.raises(NonFiniteError, match="theta"):
        adam_step(b, s)
    np.testing.assert_array_equal(b.values, [1.0, 2.0])
    assert s.step_count == 0


def test_block_gradient_shape_checked():
    with pytest.raises(ValueError):
        ParameterBlock("w", np.zeros(3), grad=np.zeros(2))


def test_gradcheck_quadratic():
    b = _block(np.random.default_rng(0).normal(size=(3, 4)))

    def quad():
        b.grad += b.values
        return 0.5 * float((b.values**2).sum())

    report = finite_diff_check(quad, [b], h=1e-4)
    assert report.errors["theta"] < 1e-6
    np.testing.assert_array_equal(b.grad, b.values)


def test_gradcheck_planted_fault():
    b = _block([1.0, -2.0, 0.5])

    def doubled():
        b.grad += 2 * b.values
        return 0.5 * float((b.values**2).sum())

    report = finite_diff_check(doubled, [b])
    assert not report.ok
    assert report.errors["theta"] == pytest.approx(0.5, abs=1e-6)


def test_gradcheck_non_finite_loss():
    b = _block([0.0])
    with pytest.raises(NonFiniteError):
        finite_diff_check(lambda: float("nan"), [b])


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    blocks = [_block(rng.normal(size=(4, 3)), "a"), _block(rng.normal(size=5), "b"), _block(np.float64(2.5), "c")]
    save_checkpoint(tmp_path / "m.bin", blocks)
    state = load_checkpoint(tmp_path / "m.bin")
    assert list(state) == ["a", "b", "c"]
    for b in blocks:
        assert state[b.name].shape == b.values.shape
        np.testing.assert_array_equal(state[b.name], b.values)
    save_checkpoint(tmp_path / "m2.bin", blocks)
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(tmp_path / "x.bin")


def test_export_tsv(tmp_path):
    export_tsv(tmp_path / "p.tsv", [_block([[1.0, 2.0], [3.0, 4.0]], "w")])
    assert (tmp_path / "p.tsv").read_text() == "w\t2x2\t1.0\t2.0\t3.0\t4.0\n"
