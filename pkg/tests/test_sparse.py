import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from placerec.errors import (
    ChannelMismatch,
    DegenerateBatch,
    EmptyTensor,
    IncompleteTape,
    ShapeMismatch,
    StrideMismatch,
    StrideViolation,
)
from placerec.gradcheck import operator_checks, random_sparse
from placerec.sparse import (
    BatchNorm,
    GeMParams,
    Parameter,
    SparseTensor3D,
    Tape,
    Variable,
    batch_norm,
    eca,
    gem_pool,
    kernel_offsets,
    relu,
    sparse_add,
    sparse_conv,
    sparse_transposed_conv,
)

from oracles import bn_oracle, dense_conv, grid, loop_conv


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = random_sparse(rng, 20, 4)
    out = sparse_conv(x, Parameter("w", np.eye(4)[None]), 1)
    assert np.array_equal(out.features, x.features)
    assert np.array_equal(out.coords, x.coords)


def test_conv_isolated_voxel_uses_centre_tap():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(27, 2, 3))
    x = SparseTensor3D([[5, 5, 5]], [[1.5, -2.0]])
    out = sparse_conv(x, Parameter("w", w), 3)
    np.testing.assert_array_equal(out.features[0], np.array([1.5, -2.0]) @ w[13])


def test_conv_matches_dense_on_full_grid():
    rng = np.random.default_rng(2)
    n, cin, cout = 6, 3, 4
    dense = rng.normal(size=(n, n, n, cin))
    w = rng.normal(size=(27, cin, cout))
    coords = grid(n)
    x = SparseTensor3D(coords, dense.reshape(-1, cin))
    out = sparse_conv(x, Parameter("w", w), 3)
    ref = dense_conv(dense, w, 3).reshape(-1, cout)
    assert np.array_equal(out.coords, coords)
    assert np.abs(out.features - ref).max() < 1e-10


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_matches_loop_oracle_on_random_sparse(k):
    rng = np.random.default_rng(k)
    x = random_sparse(rng, 70, 3, stride=2, extent=6)
    w = rng.normal(size=(k ** 3, 3, 2))
    out = sparse_conv(x, Parameter("w", w), k)
    ref = loop_conv(x.coords, x.features, w, kernel_offsets(k), x.coords, 2)
    assert out.stride == 2
    assert np.abs(out.features - ref).max() < 1e-10


def test_stride2_conv_matches_loop_oracle():
    rng = np.random.default_rng(4)
    x = random_sparse(rng, 150, 3, stride=1, extent=8)
    w = rng.normal(size=(8, 3, 5))
    out = sparse_conv(x, Parameter("w", w), 2, stride_factor=2)
    parents = np.unique(np.floor_divide(x.coords, 2) * 2, axis=0)
    assert np.array_equal(out.coords, parents)
    assert out.stride == 2
    ref = loop_conv(x.coords, x.features, w, kernel_offsets(2), parents, 1)
    assert np.abs(out.features - ref).max() < 1e-10


def test_transposed_single_voxel_makes_eight_children():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(8, 2, 3))
    x = SparseTensor3D([[4, 0, -4]], [[1.0, 2.0]], stride=4)
    out = sparse_transposed_conv(x, Parameter("w", w))
    assert len(out) == 8 and out.stride == 2
    for row, c in enumerate(out.coords.tolist()):
        tap = ((c[0] - 4) // 2) * 4 + (c[1] // 2) * 2 + (c[2] + 4) // 2
        np.testing.assert_allclose(out.features[row], np.array([1.0, 2.0]) @ w[tap], rtol=0, atol=1e-15)


def test_transposed_matches_loop_oracle():
    rng = np.random.default_rng(6)
    x = random_sparse(rng, 40, 3, stride=4, extent=5)
    w = rng.normal(size=(8, 3, 2))
    out = sparse_transposed_conv(x, Parameter("w", w))
    # output c receives parent p = c - offset*2 via tap t when that parent exists
    ref = loop_conv(x.coords, x.features, w, -kernel_offsets(2), out.coords, 2)
    assert np.abs(out.features - ref).max() < 1e-10


def test_down_then_up_covers_original_grid():
    x = SparseTensor3D(grid(4), np.ones((64, 1)))
    w = Parameter("w", np.ones((8, 1, 1)))
    up = sparse_transposed_conv(sparse_conv(x, w, 2, 2), w)
    assert {tuple(c) for c in grid(4).tolist()} <= {tuple(c) for c in up.coords.tolist()}


def _dense_matrix(op, n_in, c_in):
    """Materialize a linear map by applying it to basis vectors."""
    cols = []
    for j in range(n_in * c_in):
        e = np.zeros(n_in * c_in)
        e[j] = 1.0
        cols.append(op(e.reshape(n_in, c_in)).ravel())
    return np.stack(cols, axis=1)


@pytest.mark.parametrize("kind", ["conv3", "down", "up"])
def test_backward_is_adjoint(kind):
    rng = np.random.default_rng(7)
    stride = 4 if kind == "up" else 1
    x = random_sparse(rng, 25, 2, stride=stride, extent=4)
    taps = 27 if kind == "conv3" else 8
    w = Parameter("w", rng.normal(size=(taps, 2, 3)))

    def apply(f, tape=None):
        xs = SparseTensor3D(x.coords, Variable(f, True), x.stride)
        if kind == "conv3":
            return sparse_conv(xs, w, 3, 1, tape)
        if kind == "down":
            return sparse_conv(xs, w, 2, 2, tape)
        return sparse_transposed_conv(xs, w, tape)

    A = _dense_matrix(lambda f: apply(f).features, len(x), 2)
    y = rng.normal(size=apply(x.features).features.shape)
    tape = Tape()
    xs = SparseTensor3D(x.coords, Variable(x.features.copy(), True), x.stride)
    if kind == "conv3":
        out = sparse_conv(xs, w, 3, 1, tape)
    elif kind == "down":
        out = sparse_conv(xs, w, 2, 2, tape)
    else:
        out = sparse_transposed_conv(xs, w, tape)
    tape.backward(out.feats, y)
    lhs = float(y.ravel() @ (A @ x.features.ravel()))
    rhs = float(x.features.ravel() @ xs.feats.grad.ravel())
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))
    np.testing.assert_allclose(xs.feats.grad.ravel(), A.T @ y.ravel(), rtol=0, atol=1e-10)


def test_conv_errors():
    rng = np.random.default_rng(0)
    x = random_sparse(rng, 5, 2)
    with pytest.raises(ShapeMismatch):
        sparse_conv(x, Parameter("w", np.zeros((27, 3, 1))), 3)
    with pytest.raises(ShapeMismatch):
        sparse_conv(x, Parameter("w", np.zeros((8, 2, 1))), 2, 1)
    with pytest.raises(StrideViolation):
        SparseTensor3D([[1, 0, 0]], [[1.0]], stride=2)
    with pytest.raises(StrideViolation):
        sparse_transposed_conv(x, Parameter("w", np.zeros((8, 2, 1))))


def test_sparse_add_cases():
    a = SparseTensor3D([[0, 0, 0], [1, 0, 0]], [[1.0], [2.0]])
    b = SparseTensor3D([[2, 0, 0]], [[5.0]])
    u = sparse_add(a, b)
    assert len(u) == 3 and u.features.ravel().tolist() == [1.0, 2.0, 5.0]
    s = sparse_add(a, a)
    assert s.features.ravel().tolist() == [2.0, 4.0]
    z = sparse_add(a, SparseTensor3D(a.coords, np.zeros((2, 1))))
    assert np.array_equal(z.features, a.features) and np.array_equal(z.coords, a.coords)
    with pytest.raises(ChannelMismatch):
        sparse_add(a, SparseTensor3D([[0, 0, 0]], [[1.0, 1.0]]))
    with pytest.raises(StrideMismatch):
        sparse_add(a, SparseTensor3D([[0, 0, 0]], [[1.0]], stride=2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 30), st.integers(1, 30))
def test_sparse_add_union_property(seed, na, nb):
    rng = np.random.default_rng(seed)
    a, b = random_sparse(rng, na, 2), random_sparse(rng, nb, 2)
    u = sparse_add(a, b)
    table = {}
    for t in (a, b):
        for c, f in zip(t.coords.tolist(), t.features):
            table[tuple(c)] = table.get(tuple(c), 0) + f
    assert [tuple(c) for c in u.coords.tolist()] == sorted(table)
    np.testing.assert_array_equal(u.features, np.array([table[k] for k in sorted(table)]))


def test_relu():
    x = SparseTensor3D([[0, 0, 0], [0, 0, 1]], [[-1.0, 2.0], [0.0, -3.0]])
    assert relu(x).features.tolist() == [[0.0, 2.0], [0.0, 0.0]]


def test_batch_norm_constant_input():
    x = SparseTensor3D(grid(2), np.full((8, 3), 4.2))
    bn = BatchNorm.create("bn", 3)
    bn.beta.value[:] = [0.1, -0.2, 0.3]
    out = batch_norm(x, bn, "train", update_stats=False)
    assert np.abs(out.features - bn.beta.value).max() < 1e-3


def test_batch_norm_normalizes():
    rng = np.random.default_rng(0)
    x = random_sparse(rng, 50, 4)
    out = batch_norm(x, BatchNorm.create("bn", 4), "train", update_stats=False).features
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=0), 1, atol=1e-3)


def test_batch_norm_matches_oracle_and_updates_stats():
    rng = np.random.default_rng(1)
    x = random_sparse(rng, 40, 3)
    bn = BatchNorm.create("bn", 3)
    bn.gamma.value[:] = rng.uniform(0.5, 2, 3)
    bn.beta.value[:] = rng.normal(size=3)
    out = batch_norm(x, bn, "train", update_stats=True).features
    assert np.abs(out - bn_oracle(x.features, bn.gamma.value, bn.beta.value)).max() < 1e-10
    v = x.features
    np.testing.assert_allclose(bn.running_mean, 0.1 * v.mean(axis=0), rtol=1e-13)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * v.var(axis=0, ddof=1), rtol=1e-13)
    ev = batch_norm(x, bn, "eval").features
    ref = (v - bn.running_mean) / np.sqrt(bn.running_var + 1e-5) * bn.gamma.value + bn.beta.value
    assert np.abs(ev - ref).max() < 1e-12


def test_batch_norm_degenerate():
    x = SparseTensor3D([[0, 0, 0]], [[1.0]])
    with pytest.raises(DegenerateBatch):
        batch_norm(x, BatchNorm.create("bn", 1), "train")
    out = batch_norm(x, BatchNorm.create("bn", 1), "eval")
    assert np.isfinite(out.features).all()


def test_eca_identity_tap_zero_means():
    v = np.array([[1.0, -2.0], [-1.0, 2.0]])
    x = SparseTensor3D([[0, 0, 0], [0, 0, 1]], v)
    out = eca(x, Parameter("k", np.array([0.0, 1.0, 0.0])))
    np.testing.assert_array_equal(out.features, v / 2)


def test_eca_single_channel():
    w = 0.7
    x = SparseTensor3D([[0, 0, 0]], [[1.3]])
    out = eca(x, Parameter("k", np.array([0.0, w, 0.0])))
    assert out.features[0, 0] == pytest.approx(1.3 / (1 + np.exp(-w * 1.3)), abs=1e-15)


def test_eca_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = random_sparse(rng, 30, 8)
    k = rng.normal(size=3)
    out = eca(x, Parameter("k", k)).features
    s = x.features.mean(axis=0)
    ref = np.empty_like(x.features)
    for c in range(8):
        z = sum(k[j] * s[c + j - 1] for j in range(3) if 0 <= c + j - 1 < 8)
        ref[:, c] = x.features[:, c] / (1 + np.exp(-z))
    assert np.abs(out - ref).max() < 1e-12


def test_gem_cases():
    x = SparseTensor3D([[0, 0, 0], [0, 0, 1]], [[2.0], [4.0]])
    assert gem_pool(x, GeMParams(Parameter("p", np.array([1.0])))).value[0] == pytest.approx(3.0, abs=1e-12)
    assert gem_pool(x, GeMParams()).value[0] == pytest.approx(36 ** (1 / 3), abs=1e-12)
    assert gem_pool(x, GeMParams()).value[0] == pytest.approx(3.30193, abs=1e-5)
    one = SparseTensor3D([[0, 0, 0]], [[0.5, 3.0, 7.0]])
    for p in (1.0, 2.5, 6.0):
        np.testing.assert_allclose(gem_pool(one, GeMParams(Parameter("p", np.array([p])))).value,
                                   [0.5, 3.0, 7.0], rtol=1e-12)
    with pytest.raises(EmptyTensor):
        gem_pool(SparseTensor3D(np.zeros((0, 3)), np.zeros((0, 1))), GeMParams())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(1.0, 6.0))
def test_gem_monotone(seed, p):
    rng = np.random.default_rng(seed)
    v = rng.uniform(0, 2, size=(10, 3))
    x = SparseTensor3D(grid(3)[:10], v)
    params = GeMParams(Parameter("p", np.array([p])))
    base = gem_pool(x, params).value
    v2 = v.copy()
    v2[rng.integers(10), rng.integers(3)] += rng.uniform(0, 1)
    assert np.all(gem_pool(SparseTensor3D(x.coords, v2), params).value >= base - 1e-12)


def test_linear_weight_grad_equals_input():
    x = SparseTensor3D([[0, 0, 0]], [[0.3, -1.2, 2.0]])
    w = Parameter("w", np.random.default_rng(0).normal(size=(1, 3, 4)))
    tape = Tape()
    out = sparse_conv(x, w, 1, tape=tape)
    tape.backward(out.feats, np.ones((1, 4)))
    np.testing.assert_array_equal(w.grad[0], np.repeat(x.features.T, 4, axis=1))


def test_two_backward_passes_double_grads():
    rng = np.random.default_rng(1)
    x = random_sparse(rng, 15, 2)
    w = Parameter("w", rng.normal(size=(27, 2, 2)))
    seed = rng.normal(size=(15, 2))
    grads = []
    for _ in range(2):
        tape = Tape()
        out = sparse_conv(x, w, 3, tape=tape)
        tape.backward(out.feats, seed)
        grads.append(w.grad.copy())
    np.testing.assert_array_equal(grads[1], 2 * grads[0])


def test_tape_is_single_use():
    x = SparseTensor3D([[0, 0, 0]], Variable(np.ones((1, 1)), True))
    w = Parameter("w", np.ones((1, 1, 1)))
    tape = Tape()
    out = sparse_conv(x, w, 1, tape=tape)
    tape.backward(out.feats, np.ones((1, 1)))
    with pytest.raises(IncompleteTape):
        tape.backward(out.feats, np.ones((1, 1)))
    with pytest.raises(IncompleteTape):
        Tape().backward(Variable(np.ones(1)), np.ones(1))


def test_operator_finite_differences():
    for r in operator_checks(seed=11):
        assert r.passed, (r.name, r.rel_error)
