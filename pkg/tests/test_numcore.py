"""Kernel contracts: hand-computed values, finite-difference gradient
verification for every kernel at every supported rank, and the rotation
algebra of the spatial operations."""

import numpy as np
import numpy.testing as npt
import pytest

import molgraph3d.numcore as nc
from molgraph3d.numcore import Parameter, Tensor


def project(t, proj):
    """Contract a tensor to a scalar with fixed weights (keeps the graph)."""
    flat = nc.reshape(t, (t.data.size, 1))
    return nc.matmul(Tensor(proj.reshape(1, -1)), flat)


def fd_check(build, params, tol=1e-5):
    """Exhaustive central-difference check of d(build())/d(params)."""
    report = nc.gradient_check(build, params, eps=1e-6, tol=tol)
    assert report.passed, f"\n{report}"
    return report


def random_rotation_matrix(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# ---------------------------------------------------------------------------
# values


class TestMatmul:
    def test_identity(self):
        m = np.arange(9.0).reshape(3, 3)
        out = nc.matmul(Tensor(np.eye(3)), Tensor(m))
        npt.assert_array_equal(out.data, m)

    def test_hand(self):
        out = nc.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        npt.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_one_by_one(self):
        out = nc.matmul(Tensor([[2.0]]), Tensor([[3.0]]))
        npt.assert_array_equal(out.data, [[6.0]])

    def test_shape_mismatch(self):
        with pytest.raises(nc.ShapeError):
            nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


class TestLinearFeature:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 5))
        out = nc.linear_feature(Tensor(np.eye(5)), None, Tensor(x))
        npt.assert_array_equal(out.data, x)

    def test_scalar_hand(self):
        out = nc.linear_feature(Tensor([[1.0, 1.0]]), Tensor([0.0]), Tensor([3.0, 4.0]))
        npt.assert_array_equal(out.data, [7.0])

    def test_vector_hand(self):
        x = Tensor([[[1.0, 0.0, 0.0]]])  # [1, 1, 3]
        w = Tensor([[2.0]])
        b = Tensor([[0.0, 0.0, 1.0]])
        out = nc.linear_feature(w, b, x, vector=True)
        npt.assert_array_equal(out.data, [[[2.0, 0.0, 1.0]]])

    def test_feature_mismatch(self):
        with pytest.raises(nc.ShapeError):
            nc.linear_feature(Tensor(np.ones((2, 4))), None, Tensor(np.ones((3, 5))))

    def test_bias_shape_enforced(self):
        with pytest.raises(nc.ShapeError):
            nc.linear_feature(Tensor(np.ones((2, 3))), Tensor(np.ones(3)),
                              Tensor(np.ones((4, 3))))


class TestActivations:
    def test_relu(self):
        out = nc.relu(Tensor([-1.0, 0.0, 2.0]))
        npt.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_tanh_sigmoid(self):
        assert nc.tanh(Tensor([0.0])).data[0] == 0.0
        assert nc.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor([0.0])
        out = nc.relu(x)
        grads = nc.backward(out, seed=np.ones(1))
        npt.assert_array_equal(grads[id(x)], [0.0])

    def test_softplus_matches_naive(self):
        x = np.array([-3.0, -0.5, 0.0, 2.0])
        npt.assert_allclose(nc.softplus(Tensor(x)).data, np.log1p(np.exp(x)), rtol=1e-14)

    def test_softplus_no_overflow(self):
        out = nc.softplus(Tensor([800.0, -800.0]))
        npt.assert_allclose(out.data, [800.0, 0.0], atol=1e-12)


class TestDot3Outer3:
    def test_orthogonal(self):
        out = nc.dot3(Tensor([[1.0, 0.0, 0.0]]), Tensor([0.0, 1.0, 0.0]))
        npt.assert_array_equal(out.data, [0.0])

    def test_hand_sum(self):
        out = nc.dot3(Tensor([[1.0, 2.0, 3.0]]), Tensor([1.0, 1.0, 1.0]))
        npt.assert_array_equal(out.data, [6.0])

    def test_zero_vector(self):
        m = np.random.default_rng(1).normal(size=(4, 5, 3))
        out = nc.dot3(Tensor(m), Tensor(np.zeros(3)))
        npt.assert_array_equal(out.data, np.zeros((4, 5)))

    def test_trailing_axis_mismatch(self):
        with pytest.raises(nc.ShapeError):
            nc.dot3(Tensor(np.ones((2, 4))), Tensor(np.ones(3)))

    def test_outer_hand(self):
        out = nc.outer3(Tensor([1.0]), Tensor([1.0, 2.0, 3.0]))
        npt.assert_array_equal(out.data, [[1.0, 2.0, 3.0]])
        out = nc.outer3(Tensor([0.0, 5.0]), Tensor([1.0, 0.0, 0.0]))
        npt.assert_array_equal(out.data, [[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])

    def test_outer_empty(self):
        out = nc.outer3(Tensor(np.zeros((0,))), Tensor([1.0, 2.0, 3.0]))
        assert out.shape == (0, 3)

    def test_pairwise_broadcast_matches_loop(self):
        rng = np.random.default_rng(2)
        m = rng.normal(size=(3, 3, 4, 3))
        r = rng.normal(size=(3, 3, 3))
        out = nc.dot3(Tensor(m), Tensor(r)).data
        for i in range(3):
            for j in range(3):
                npt.assert_allclose(out[i, j], m[i, j] @ r[i, j], atol=1e-14)


class TestConcat:
    def test_hand(self):
        out = nc.concat_features(Tensor([1.0, 2.0]), Tensor([3.0]), axis=0)
        npt.assert_array_equal(out.data, [1.0, 2.0, 3.0])

    def test_shape_law_vector_form(self):
        a = Tensor(np.zeros((4, 2, 3)))
        b = Tensor(np.zeros((4, 5, 3)))
        assert nc.concat_features(a, b, axis=-2).shape == (4, 7, 3)

    def test_empty_left(self):
        x = np.random.default_rng(0).normal(size=(3,))
        out = nc.concat_features(Tensor(np.zeros(0)), Tensor(x), axis=0)
        npt.assert_array_equal(out.data, x)

    def test_concat_then_split_identity(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(2, 5)), rng.normal(size=(2, 3))
        joined = nc.concat_features(Tensor(a), Tensor(b), axis=1)
        left, right = np.split(joined.data, [5], axis=1)
        npt.assert_array_equal(left, a)
        npt.assert_array_equal(right, b)

    def test_off_axis_mismatch(self):
        with pytest.raises(nc.ShapeError):
            nc.concat_features(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 3))), axis=1)


class TestTensorInvariants:
    def test_nan_rejected(self):
        with pytest.raises(nc.NumericError):
            Tensor([1.0, np.nan])

    def test_inf_rejected(self):
        with pytest.raises(nc.NumericError):
            Tensor([np.inf])

    def test_debug_mode_catches_kernel_overflow(self):
        x = Tensor(np.full((2, 2), 1e308))
        old = nc.DEBUG_CHECK_FINITE
        nc.DEBUG_CHECK_FINITE = True
        try:
            with pytest.raises(nc.NumericError):
                nc.matmul(x, x)
        finally:
            nc.DEBUG_CHECK_FINITE = old

    def test_parameter_grad_shape_and_zero(self):
        p = Parameter("w", np.ones((2, 3)))
        assert p.grad.shape == (2, 3)
        npt.assert_array_equal(p.grad, 0.0)

    def test_grad_accumulates_across_uses_and_calls(self):
        p = Parameter("x", np.array([2.0]))
        out = nc.add(nc.square(p.value), nc.square(p.value))  # 2 x^2
        nc.backward(out, seed=np.ones(1))
        npt.assert_allclose(p.grad, [8.0])
        nc.backward(out, seed=np.ones(1))  # accumulates until zeroed
        npt.assert_allclose(p.grad, [16.0])
        p.zero_grad()
        npt.assert_array_equal(p.grad, [0.0])


# ---------------------------------------------------------------------------
# gradients: every kernel, every supported rank


class TestGradients:
    def _check(self, rng, build_tensors, kernel, tol=1e-5):
        params = [Parameter(f"p{k}", v) for k, v in enumerate(build_tensors)]
        probe = kernel(*[p.value for p in params])
        proj = rng.normal(size=probe.data.size)
        fd_check(lambda: project(kernel(*[p.value for p in params]), proj), params, tol)

    def test_matmul(self):
        rng = np.random.default_rng(10)
        self._check(rng, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], nc.matmul)
        self._check(rng, [rng.normal(size=(3, 4)), rng.normal(size=4)], nc.matmul)

    @pytest.mark.parametrize("lead", [(), (4,), (3, 4)])
    def test_linear_feature_scalar(self, lead):
        rng = np.random.default_rng(11)
        shapes = [rng.normal(size=(2, 5)), rng.normal(size=2), rng.normal(size=lead + (5,))]
        self._check(rng, shapes, lambda w, b, x: nc.linear_feature(w, b, x))

    @pytest.mark.parametrize("lead", [(), (4,), (3, 4)])
    def test_linear_feature_vector(self, lead):
        rng = np.random.default_rng(12)
        shapes = [rng.normal(size=(2, 5)), rng.normal(size=(2, 3)),
                  rng.normal(size=lead + (5, 3))]
        self._check(rng, shapes, lambda w, b, x: nc.linear_feature(w, b, x, vector=True))

    def test_pair_linear_scalar(self):
        rng = np.random.default_rng(13)
        self._check(rng, [rng.normal(size=(3, 8)), rng.normal(size=3),
                          rng.normal(size=(4, 4))],
                    lambda w, b, x: nc.pair_linear(w, b, x))

    def test_pair_linear_vector(self):
        rng = np.random.default_rng(14)
        self._check(rng, [rng.normal(size=(3, 8)), rng.normal(size=(3, 3)),
                          rng.normal(size=(4, 4, 3))],
                    lambda w, b, x: nc.pair_linear(w, b, x, vector=True))

    def test_pair_linear_no_bias(self):
        rng = np.random.default_rng(15)
        self._check(rng, [rng.normal(size=(3, 8)), rng.normal(size=(4, 4))],
                    lambda w, x: nc.pair_linear(w, None, x))

    @pytest.mark.parametrize("op", [nc.relu, nc.tanh, nc.sigmoid, nc.softplus,
                                    nc.square, nc.flatten])
    def test_elementwise(self, op):
        rng = np.random.default_rng(16)
        self._check(rng, [rng.normal(size=(3, 5))], op)

    def test_affine(self):
        rng = np.random.default_rng(17)
        self._check(rng, [rng.normal(size=(4,))], lambda x: nc.affine(x, -2.5, 0.7))

    @pytest.mark.parametrize("rshape", [(3,), (4, 4, 3)])
    def test_dot3(self, rshape):
        rng = np.random.default_rng(18)
        self._check(rng, [rng.normal(size=(4, 4, 5, 3)), rng.normal(size=rshape)], nc.dot3)

    @pytest.mark.parametrize("rshape", [(3,), (4, 4, 3)])
    def test_outer3(self, rshape):
        rng = np.random.default_rng(19)
        self._check(rng, [rng.normal(size=(4, 4, 5)), rng.normal(size=rshape)], nc.outer3)

    @pytest.mark.parametrize("axis,shapes", [
        (-1, ((4, 4, 2), (4, 4, 3))),
        (-2, ((4, 4, 2, 3), (4, 4, 5, 3))),
        (0, ((2,), (5,))),
    ])
    def test_concat(self, axis, shapes):
        rng = np.random.default_rng(20)
        self._check(rng, [rng.normal(size=s) for s in shapes],
                    lambda a, b: nc.concat_features(a, b, axis=axis))

    def test_add(self):
        rng = np.random.default_rng(21)
        self._check(rng, [rng.normal(size=(3, 2)), rng.normal(size=(3, 2))], nc.add)

    def test_neighbor_sum(self):
        rng = np.random.default_rng(22)
        w = rng.normal(size=(4, 4))
        self._check(rng, [rng.normal(size=(4, 4, 5))], lambda u: nc.neighbor_sum(u, w))
        self._check(rng, [rng.normal(size=(4, 4, 5, 3))], lambda u: nc.neighbor_sum(u, w))

    def test_row_broadcast(self):
        rng = np.random.default_rng(23)
        w = rng.normal(size=4)
        self._check(rng, [rng.normal(size=(5,))], lambda b: nc.row_broadcast(b, w))
        self._check(rng, [rng.normal(size=(5, 3))], lambda b: nc.row_broadcast(b, w))

    def test_sum_atoms(self):
        rng = np.random.default_rng(24)
        self._check(rng, [rng.normal(size=(6, 5))], nc.sum_atoms)
        self._check(rng, [rng.normal(size=(6, 5, 3))], nc.sum_atoms)

    def test_gather_atoms(self):
        rng = np.random.default_rng(25)
        idx = rng.integers(0, 6, size=5)
        self._check(rng, [rng.normal(size=(6, 5))], lambda x: nc.gather_atoms(x, idx))
        self._check(rng, [rng.normal(size=(6, 5, 3))], lambda x: nc.gather_atoms(x, idx))


# ---------------------------------------------------------------------------
# gradient_check itself


class TestGradientCheck:
    def test_quadratic_passes(self):
        p = Parameter("theta", np.array([3.0]))
        report = nc.gradient_check(lambda: nc.square(p.value), [p])
        assert report.passed
        assert report.max_rel_err < 1e-9

    def test_corrupted_gradient_fails(self):
        p = Parameter("theta", np.array([3.0]))

        def bad_square(x):
            out = nc.square(x)
            return nc.Tensor(out.data, _parents=(x,), _vjp=lambda g: (g * 3.0 * x.data,))

        report = nc.gradient_check(lambda: bad_square(p.value), [p])
        assert not report.passed

    def test_rejects_nonscalar(self):
        p = Parameter("theta", np.array([3.0, 1.0]))
        with pytest.raises(nc.ShapeError):
            nc.gradient_check(lambda: nc.square(p.value), [p])

    def test_rejects_bad_eps(self):
        p = Parameter("theta", np.array([3.0]))
        with pytest.raises(ValueError):
            nc.gradient_check(lambda: nc.square(p.value), [p], eps=0.0)

    def test_sampling_touches_every_parameter(self):
        rng = np.random.default_rng(0)
        ps = [Parameter(f"p{k}", rng.normal(size=(4, 4))) for k in range(3)]

        def f():
            total = nc.square(nc.flatten(ps[0].value))
            for p in ps[1:]:
                total = nc.add(total, nc.square(nc.flatten(p.value)))
            return nc.matmul(Tensor(np.ones((1, 16))), nc.reshape(total, (16, 1)))

        report = nc.gradient_check(f, ps, max_entries=3)
        assert len(report.entries) == 3
        assert all(e.checked == 3 for e in report.entries)
        assert report.passed


# ---------------------------------------------------------------------------
# rotation algebra of the spatial kernels


class TestRotationAlgebra:
    def test_linear_feature_commutes_with_rotation(self):
        rng = np.random.default_rng(30)
        q = random_rotation_matrix(rng)
        w = rng.normal(size=(4, 5))
        x = rng.normal(size=(6, 5, 3))
        lhs = nc.linear_feature(Tensor(w), None, Tensor(x @ q.T), vector=True).data
        rhs = nc.linear_feature(Tensor(w), None, Tensor(x), vector=True).data @ q.T
        npt.assert_allclose(lhs, rhs, atol=1e-12)

    def test_linear_feature_commutes_with_permutation(self):
        rng = np.random.default_rng(31)
        perm = rng.permutation(3)
        w = rng.normal(size=(4, 5))
        x = rng.normal(size=(6, 5, 3))
        lhs = nc.linear_feature(Tensor(w), None, Tensor(x[..., perm]), vector=True).data
        rhs = nc.linear_feature(Tensor(w), None, Tensor(x), vector=True).data[..., perm]
        npt.assert_allclose(lhs, rhs, atol=1e-12)

    def test_dot3_invariant(self):
        rng = np.random.default_rng(32)
        q = random_rotation_matrix(rng)
        m = rng.normal(size=(6, 5, 3))
        r = rng.normal(size=3)
        lhs = nc.dot3(Tensor(m @ q.T), Tensor(q @ r)).data
        rhs = nc.dot3(Tensor(m), Tensor(r)).data
        npt.assert_allclose(lhs, rhs, atol=1e-12)

    def test_outer3_equivariant(self):
        rng = np.random.default_rng(33)
        q = random_rotation_matrix(rng)
        a = rng.normal(size=(6, 5))
        r = rng.normal(size=3)
        lhs = nc.outer3(Tensor(a), Tensor(q @ r)).data
        rhs = nc.outer3(Tensor(a), Tensor(r)).data @ q.T
        npt.assert_allclose(lhs, rhs, atol=1e-12)
