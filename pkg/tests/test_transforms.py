import math

import numpy as np
import pytest

from acflow import diffcore as dc
from acflow.context import Batch
from acflow.errors import NumericalError
from acflow.model import synthetic_architecture, tabular_architecture
from acflow.transforms import (
    AffineCoupling,
    ConditionalLinear,
    LeakyReLU,
    Reverse,
    RNNCoupling,
    TransformStack,
    build_transform,
)


def jitter(module, rng, scale=0.3):
    for p in module.parameters():
        p.data = p.data + rng.normal(scale=scale, size=p.shape)


def stack_for(descriptor, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    stack = TransformStack([build_transform(s, descriptor["d"], rng) for s in descriptor["layers"]])
    jitter(stack, rng, scale)
    return stack


def zero_output(mlp):
    last = mlp.dense[-1]
    last.w.data[:] = 0.0
    last.b.data[:] = 0.0
    return last


def raw_for_log_scale(log_s, clamp=5.0):
    return clamp * math.atanh(log_s / clamp)


def run(t, x, b, m=None):
    ctx = Batch(x, b, m)
    z, ld = t.forward(dc.Tensor(ctx.targets(x)), ctx)
    return ctx, z.data, ld.data


# affine coupling


def test_affine_identity_when_net_is_zero():
    t = AffineCoupling(3, (8,), np.random.default_rng(0))
    zero_output(t.net)
    x = np.array([[0.3, -1.2, 2.0]])
    _, z, ld = run(t, x, [[0, 0, 0]])
    np.testing.assert_array_equal(z, x)
    assert ld[0] == 0.0


def test_affine_hand_example():
    t = AffineCoupling(2, (8,), np.random.default_rng(0))
    last = zero_output(t.net)
    last.b.data[:2] = raw_for_log_scale(math.log(2.0))
    last.b.data[2:] = 1.0
    a, bb = 0.7, -0.4
    ctx, z, ld = run(t, np.array([[a, bb]]), [[0, 0]])
    np.testing.assert_allclose(z, [[a, 2 * bb + 1]], atol=1e-14)
    assert ld[0] == pytest.approx(math.log(2.0), abs=1e-14)
    back = t.inverse(dc.Tensor(z), ctx).data
    np.testing.assert_allclose(back, [[a, bb]], atol=1e-14)


def test_affine_single_target_is_identity():
    t = AffineCoupling(3, (8,), np.random.default_rng(1))
    jitter(t, np.random.default_rng(2))
    x = np.array([[0.3, -1.2, 2.0]])
    _, z, ld = run(t, x, [[1, 0, 1]])
    assert z[0, 0] == -1.2 and ld[0] == 0.0


# conditional linear


def test_linear_identity_and_diagonal():
    t = ConditionalLinear(2, (8,), rng=np.random.default_rng(0))
    zero_output(t.net)
    x = np.array([[1.5, -0.5]])
    _, z, ld = run(t, x, [[0, 0]])
    np.testing.assert_allclose(z, x, atol=1e-15)
    assert ld[0] == pytest.approx(0.0, abs=1e-15)
    t.base.data = np.diag([2.0, 3.0])
    ctx, z, ld = run(t, x, [[0, 0]])
    np.testing.assert_allclose(z, [[3.0, -1.5]], atol=1e-14)
    assert ld[0] == pytest.approx(math.log(6.0), abs=1e-14)
    np.testing.assert_allclose(t.inverse(dc.Tensor(z), ctx).data, x, atol=1e-14)


def test_linear_indexes_rows_then_columns():
    t = ConditionalLinear(3, (8,), rng=np.random.default_rng(0))
    zero_output(t.net)
    t.base.data = np.array([[2.0, 0.5, 0.0], [0.1, 3.0, 0.2], [0.4, 0.0, 5.0]])
    x = np.array([[1.0, 9.0, -2.0]])
    _, z, ld = run(t, x, [[0, 1, 0]])
    w = t.base.data[np.ix_([0, 2], [0, 2])]
    np.testing.assert_allclose(z[0], w @ [1.0, -2.0], atol=1e-14)
    assert ld[0] == pytest.approx(math.log(abs(np.linalg.det(w))), abs=1e-13)


def test_linear_singular_matrix_raises_with_layer_index():
    t = ConditionalLinear(2, (8,), rng=np.random.default_rng(0))
    zero_output(t.net)
    t.base.data = np.array([[1.0, 2.0], [2.0, 4.0]])
    stack = TransformStack([Reverse(), t])
    with pytest.raises(NumericalError) as info:
        run(stack, np.ones((1, 2)), [[0, 0]])
    assert info.value.layer == 1


def test_low_rank_linear_round_trip():
    d = 5
    t = ConditionalLinear(d, (16,), rank=2, rng=np.random.default_rng(3))
    jitter(t, np.random.default_rng(4), 0.2)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(20, d))
    b = (rng.random((20, d)) < 0.4).astype(np.uint8)
    ctx, z, _ = run(t, x, b)
    back = t.inverse(dc.Tensor(z), ctx).data
    np.testing.assert_allclose(back, ctx.targets(x), atol=1e-10)


# rnn coupling


def test_rnn_identity_head():
    t = RNNCoupling(3, 6, 2, np.random.default_rng(0))
    t.head.w.data[:] = 0.0
    x = np.array([[0.3, -1.2, 2.0]])
    _, z, ld = run(t, x, [[0, 0, 0]])
    np.testing.assert_array_equal(z, x)
    assert ld[0] == 0.0


def test_rnn_single_target_slope():
    t = RNNCoupling(3, 6, 2, np.random.default_rng(0))
    jitter(t, np.random.default_rng(1))
    x = np.array([[0.5, 0.0, -0.7]])
    b = [[1, 0, 1]]

    def z_of(v):
        y = x.copy()
        y[0, 1] = v
        return run(t, y, b)[1][0, 0]

    slope = (z_of(1.0) - z_of(-1.0)) / 2.0
    intercept = z_of(0.0)
    assert z_of(2.5) == pytest.approx(intercept + 2.5 * slope, abs=1e-12)
    _, _, ld = run(t, x, b)
    assert math.log(slope) == pytest.approx(ld[0], abs=1e-12)


def test_rnn_empty_target():
    t = RNNCoupling(2, 4, 1, np.random.default_rng(0))
    ctx, z, ld = run(t, np.ones((1, 2)), [[1, 1]])
    assert z.shape == (1, 0) and ld[0] == 0.0
    assert t.inverse(dc.Tensor(z), ctx).data.shape == (1, 0)


# elementwise and permutation layers


def test_leaky_relu_layer():
    t = LeakyReLU(0.1)
    ctx, z, ld = run(t, np.array([[1.0, -1.0]]), [[0, 0]])
    np.testing.assert_allclose(z, [[1.0, -0.1]])
    assert ld[0] == pytest.approx(math.log(0.1))
    np.testing.assert_allclose(t.inverse(dc.Tensor(z), ctx).data, [[1.0, -1.0]])
    _, z, ld = run(t, np.array([[1.0, 2.0]]), [[0, 0]])
    np.testing.assert_array_equal(z, [[1.0, 2.0]])
    assert ld[0] == 0.0


def test_reverse_layer():
    t = Reverse()
    ctx, z, ld = run(t, np.array([[1.0, 2.0, 3.0]]), [[0, 0, 0]])
    np.testing.assert_array_equal(z, [[3.0, 2.0, 1.0]])
    np.testing.assert_array_equal(t.forward(dc.Tensor(z), ctx)[0].data, [[1.0, 2.0, 3.0]])
    _, z, _ = run(t, np.array([[1.0, 2.0, 3.0]]), [[1, 0, 1]])
    np.testing.assert_array_equal(z, [[2.0]])


def test_reverse_respects_ragged_rows():
    t = Reverse()
    x = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    _, z, _ = run(t, x, [[0, 0, 0], [0, 1, 0]])
    np.testing.assert_array_equal(z, [[3.0, 2.0, 1.0], [6.0, 4.0, 0.0]])


# stacks


def test_empty_stack_is_identity():
    x = np.array([[0.1, 0.2]])
    _, z, ld = run(TransformStack(), x, [[0, 0]])
    np.testing.assert_array_equal(z, x)
    assert ld[0] == 0.0


def test_stack_logdets_add():
    layers = []
    for scale in (2.0, 3.0):
        t = ConditionalLinear(1, (4,), rng=np.random.default_rng(0))
        zero_output(t.net)
        t.base.data = np.array([[scale]])
        layers.append(t)
    _, z, ld = run(TransformStack(layers), np.array([[0.5]]), [[0]])
    assert z[0, 0] == pytest.approx(3.0)
    assert ld[0] == pytest.approx(math.log(6.0), abs=1e-14)


@pytest.mark.parametrize("arch", [synthetic_architecture, tabular_architecture])
def test_stack_round_trip_random_masks(arch):
    d = 6
    stack = stack_for(arch(d, hidden=16, components=3))
    rng = np.random.default_rng(1)
    x = rng.normal(size=(64, d))
    b = (rng.random((64, d)) < 0.5).astype(np.uint8)
    m = (rng.random((64, d)) < 0.9).astype(np.uint8)
    b &= m
    ctx, z, ld = run(stack, x, b, m)
    assert np.all(np.isfinite(ld))
    back = stack.inverse(dc.Tensor(z), ctx).data
    assert np.max(np.abs(back - ctx.targets(x))) < 1e-6


def fd_logdet(stack, x, b, h=1e-6):
    """log|det J| of the map x_u -> z_u from central differences."""
    ctx = Batch(x, b)
    base = ctx.targets(x)[0]
    k = base.shape[0]
    jac = np.zeros((k, k))
    with dc.no_grad():
        for j in range(k):
            hi, lo = base.copy(), base.copy()
            hi[j] += h
            lo[j] -= h
            zp = stack.forward(dc.Tensor(hi[None]), ctx)[0].data[0]
            zm = stack.forward(dc.Tensor(lo[None]), ctx)[0].data[0]
            jac[:, j] = (zp - zm) / (2 * h)
    return np.linalg.slogdet(jac)[1]


@pytest.mark.parametrize(
    "layers",
    [
        [{"type": "affine_coupling", "hidden": [12, 12]}],
        [{"type": "linear", "hidden": [12]}],
        [{"type": "rnn_coupling", "hidden": 8, "layers": 2}],
        synthetic_architecture(5, hidden=12)["layers"],
        [{"type": "affine_coupling", "hidden": [12]}, {"type": "reverse"}, {"type": "linear", "hidden": [12], "rank": 2}],
    ],
)
def test_logdet_matches_finite_difference_jacobian(layers):
    d = 5
    stack = stack_for({"d": d, "layers": layers}, seed=3)
    rng = np.random.default_rng(4)
    for _ in range(5):
        x = rng.normal(size=(1, d))
        b = (rng.random((1, d)) < 0.3).astype(np.uint8)
        if b.sum() == d:
            continue
        ctx = Batch(x, b)
        with dc.no_grad():
            ld = stack.forward(dc.Tensor(ctx.targets(x)), ctx)[1].data[0]
        assert abs(ld - fd_logdet(stack, x, b)) / max(abs(ld), 1e-7) < 1e-4


def test_missing_coordinates_are_isolated():
    d = 4
    stack = stack_for(synthetic_architecture(d, hidden=12))
    rng = np.random.default_rng(2)
    x = rng.normal(size=(8, d))
    m = np.ones((8, d), np.uint8)
    m[:, 2] = 0
    b = np.tile([1, 0, 0, 0], (8, 1)).astype(np.uint8)
    _, z1, ld1 = run(stack, x, b, m)
    x2 = x.copy()
    x2[:, 2] = rng.normal(size=8) * 100
    _, z2, ld2 = run(stack, x2, b, m)
    np.testing.assert_array_equal(z1, z2)
    np.testing.assert_array_equal(ld1, ld2)
    x3 = x.copy()
    x3[:, 2] = np.nan
    _, z3, _ = run(stack, x3, b, m)
    np.testing.assert_array_equal(z1, z3)


def test_logdet_parameter_gradients():
    d = 3
    stack = stack_for(synthetic_architecture(d, hidden=6), seed=5)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, d))
    b = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], np.uint8)
    ctx = Batch(x, b)

    def objective():
        z, ld = stack.forward(dc.Tensor(ctx.targets(x)), ctx)
        return dc.sum(ld) + dc.sum(dc.square(z)) * 0.1

    stack.zero_grad()
    dc.backward(objective())
    for p in stack.parameters():
        picks = rng.choice(p.data.size, size=min(4, p.data.size), replace=False)

        def f():
            with dc.no_grad():
                return objective().item()

        numeric = dc.finite_difference_grad(f, p.data, indices=picks)
        analytic = p.grad.reshape(-1)[picks]
        err = np.abs(numeric - analytic) / np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1e-7)
        assert np.all(err < 1e-3), p.name


def test_layer_configs_rebuild():
    desc = synthetic_architecture(3, hidden=8)
    stack = stack_for(desc)
    assert [c["type"] for c in stack.config()] == [s["type"] for s in desc["layers"]]
