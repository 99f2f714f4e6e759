"""Tape primitives against finite differences and hand oracles."""

import numpy as np
import pytest

from orthoclf import gradcore as gc

RNG = np.random.default_rng(7)


def _check_unary(build, shapes, n=40):
    """grad_check wrapper for a loss expressed over a list of leaf arrays."""
    params = [RNG.normal(size=s) for s in shapes]

    def fn(ps):
        tape = gc.Tape()
        nodes = [tape.leaf(p, f"p{i}") for i, p in enumerate(ps)]
        out = build(tape, nodes)
        tape.backward(out)
        return float(out.value), [tape.leaf_grad(f"p{i}") for i in range(len(ps))]

    return gc.grad_check(fn, params, n_coords=n, rng=np.random.default_rng(3))


def test_matmul_grad():
    err = _check_unary(
        lambda t, ns: gc.sum_(t, gc.matmul(t, ns[0], ns[1])), [(4, 5), (5, 3)]
    )
    assert err < 1e-6


def test_add_bias_grad():
    err = _check_unary(
        lambda t, ns: gc.sum_(t, gc.add_bias(t, ns[0], ns[1])), [(6, 4), (4,)]
    )
    assert err < 1e-6


def test_prelu_grad_away_from_kink():
    x = RNG.normal(size=(8, 5))
    x[np.abs(x) < 0.1] = 0.5  # finite differences need clearance at the kink
    slopes = RNG.uniform(0.1, 0.4, size=5)

    def fn(ps):
        tape = gc.Tape()
        xn = tape.leaf(ps[0], "x")
        sn = tape.leaf(ps[1], "s")
        out = gc.sum_(tape, gc.prelu(tape, xn, sn))
        tape.backward(out)
        return float(out.value), [tape.leaf_grad("x"), tape.leaf_grad("s")]

    err = gc.grad_check(fn, [x, slopes], n_coords=45, rng=np.random.default_rng(1))
    assert err < 1e-6


def test_prelu_kink_takes_positive_branch():
    tape = gc.Tape()
    xn = tape.leaf(np.array([[0.0, -1.0]]), "x")
    out = gc.sum_(tape, gc.prelu(tape, xn, np.array([0.25, 0.25])))
    tape.backward(out)
    assert np.array_equal(tape.leaf_grad("x"), [[1.0, 0.25]])


def test_sq_dist_grads():
    err = _check_unary(
        lambda t, ns: gc.sum_(t, gc.sq_dist(t, ns[0], ns[1])), [(5, 3), (5, 3)]
    )
    assert err < 1e-6
    err = _check_unary(
        lambda t, ns: gc.sq_dist_to_center(t, ns[0], ns[1]), [(4,), (4,)]
    )
    assert err < 1e-6


def test_softmax_ce_matches_manual_logsumexp():
    logits = RNG.normal(size=(6, 4)) * 3
    y = RNG.integers(0, 4, size=6)
    got = gc.softmax_ce(None, logits, y)
    m = logits.max(axis=1, keepdims=True)
    manual = (
        np.log(np.exp(logits - m).sum(axis=1))
        + m[:, 0]
        - logits[np.arange(6), y]
    )
    assert np.allclose(got, manual, atol=1e-12)


def test_softmax_ce_grad():
    y = np.array([0, 2, 1, 3, 3])
    err = _check_unary(
        lambda t, ns: gc.mean(t, gc.softmax_ce(t, ns[0], y)), [(5, 4)]
    )
    assert err < 1e-6


def test_softmax_ce_single_vector():
    z = np.array([1.0, 2.0, 0.5])
    got = float(gc.softmax_ce(None, z, 1))
    assert got == pytest.approx(float(np.log(np.exp(z - 2.0).sum())), abs=1e-12)


def test_pick_mean_scale_sub_grads():
    idx = np.array([2, 0, 1])
    err = _check_unary(
        lambda t, ns: gc.mean(
            t, gc.sub(t, gc.pick(t, ns[0], idx), gc.pick(t, ns[1], idx))
        ),
        [(3, 4), (3, 4)],
    )
    assert err < 1e-6
    err = _check_unary(lambda t, ns: gc.sum_(t, gc.scale(t, ns[0], -2.5)), [(7,)])
    assert err < 1e-6


def test_composite_mlp_grad():
    # two affine layers with prelu, then a center-style distance loss
    shapes = [(6, 5), (5,), (5,), (5, 3), (3,), (3,)]
    x = RNG.uniform(0.2, 0.8, size=(9, 6))
    target = RNG.normal(size=(9, 3))

    def fn(ps):
        tape = gc.Tape()
        ns = [tape.leaf(p, f"p{i}") for i, p in enumerate(ps)]
        h = gc.prelu(tape, gc.add_bias(tape, gc.matmul(tape, x, ns[0]), ns[1]), ns[2])
        f = gc.prelu(tape, gc.add_bias(tape, gc.matmul(tape, h, ns[3]), ns[4]), ns[5])
        out = gc.mean(tape, gc.sq_dist(tape, f, target))
        tape.backward(out)
        return float(out.value), [tape.leaf_grad(f"p{i}") for i in range(len(ps))]

    params = [RNG.normal(scale=0.6, size=s) for s in shapes]
    params[2] = np.abs(params[2]) + 0.1
    params[5] = np.abs(params[5]) + 0.1
    err = gc.grad_check(fn, params, n_coords=60, rng=np.random.default_rng(2))
    assert err < 1e-5


def test_constants_get_no_gradient():
    tape = gc.Tape()
    a = tape.leaf(np.ones((2, 2)), "a")
    const = np.full((2, 2), 3.0)
    out = gc.sum_(tape, gc.matmul(tape, a, const))
    tape.backward(out)
    assert np.array_equal(tape.leaf_grad("a"), np.full((2, 2), 6.0))


def test_shape_mismatches_raise():
    tape = gc.Tape()
    a = tape.leaf(np.ones((2, 3)), "a")
    with pytest.raises(ValueError, match="matmul shape mismatch"):
        gc.matmul(tape, a, np.ones((2, 2)))
    with pytest.raises(ValueError, match="add shape mismatch"):
        gc.add(tape, a, np.ones((3, 2)))
    with pytest.raises(ValueError, match="duplicate leaf name"):
        tape.leaf(np.ones(2), "a")


def test_nonfinite_rejected():
    tape = gc.Tape()
    with pytest.raises(ValueError, match="non-finite"):
        tape.leaf(np.array([np.inf]))
    big = tape.leaf(np.array([[1e308]]), "big")
    with np.errstate(over="ignore"):
        with pytest.raises(ValueError, match="non-finite"):
            gc.matmul(tape, big, np.array([[1e308]]))


def test_unused_leaf_grad_is_zero():
    tape = gc.Tape()
    a = tape.leaf(np.ones(3), "a")
    b = tape.leaf(np.ones(3), "b")
    tape.backward(gc.sum_(tape, gc.scale(tape, a, 2.0)))
    assert np.array_equal(tape.leaf_grad("b"), np.zeros(3))


def test_sgd_step_matches_manual():
    p = [np.array([1.0, 2.0])]
    g = [np.array([0.5, -0.5])]
    v = [np.array([0.0, 0.0])]
    gc.sgd_step(p, g, v, lr=0.1, momentum=0.9)
    gc.sgd_step(p, g, v, lr=0.1, momentum=0.9)
    # manual: v1 = g; p1 = p0 - lr*v1; v2 = 0.9 g + g; p2 = p1 - lr*v2
    assert np.allclose(p[0], [1.0 - 0.05 - 0.1 * 0.95, 2.0 + 0.05 + 0.1 * 0.95])


def test_decayed_lr_schedule():
    assert gc.decayed_lr(0.1, 0, (100, 150)) == 0.1
    assert gc.decayed_lr(0.1, 100, (100, 150)) == pytest.approx(0.01)
    assert gc.decayed_lr(0.1, 175, (100, 150)) == pytest.approx(0.001)
    assert gc.decayed_lr(0.1, 5, ()) == 0.1
