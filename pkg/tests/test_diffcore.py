import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipsysid import diffcore as dc
from conftest import central_diff, rel_err


def _orth_residual(A, B):
    return np.linalg.norm(A @ A.T + B @ B.T - np.eye(A.shape[0]))


class TestCayley:
    def test_zero_gives_identity(self):
        A, B = dc.cayley(np.zeros((1, 1)), np.zeros((1, 1)))
        assert A.tolist() == [[1.0]]
        assert B.tolist() == [[0.0]]

    def test_scalar_z_one(self):
        A, B = dc.cayley(np.zeros((1, 1)), np.ones((1, 1)))
        assert A[0, 0] == pytest.approx(0.0, abs=1e-15)
        assert B[0, 0] == pytest.approx(-1.0, abs=1e-15)
        assert A[0, 0] ** 2 + B[0, 0] ** 2 == pytest.approx(1.0)

    def test_seed0_4x4(self):
        rng = np.random.default_rng(0)
        A, B = dc.cayley(rng.standard_normal((4, 4)), rng.standard_normal((3, 4)))
        assert A.shape == (4, 4) and B.shape == (4, 3)
        assert _orth_residual(A, B) <= 1e-10

    @settings(max_examples=60, deadline=None)
    @given(
        n_out=st.integers(1, 24),
        n_in=st.integers(1, 24),
        scale=st.floats(0.01, 5.0),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_orthogonality_property(self, n_out, n_in, scale, seed):
        rng = np.random.default_rng(seed)
        A, B = dc.cayley(scale * rng.standard_normal((n_out, n_out)), scale * rng.standard_normal((n_in, n_out)))
        assert _orth_residual(A, B) <= 1e-9

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            dc.cayley(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            dc.cayley(np.zeros((2, 2)), np.zeros((2, 3)))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_overflow_raises(self):
        X = np.full((2, 2), np.inf)
        with pytest.raises(FloatingPointError):
            dc.cayley(X, np.zeros((1, 2)))

    def test_tape_matches_arrays(self, rng):
        X, Y = rng.standard_normal((3, 3)), rng.standard_normal((2, 3))
        tape = dc.Tape()
        A, B = dc.cayley(tape.watch(X), tape.watch(Y))
        A0, B0 = dc.cayley(X, Y)
        assert np.array_equal(A.value, A0) and np.array_equal(B.value, B0)


class TestCayleyAdjoint:
    def test_zero_cotangent(self, rng):
        X, Y = rng.standard_normal((3, 3)), rng.standard_normal((2, 3))
        gX, gY = dc.cayley_adjoint(X, Y, np.zeros((3, 3)), np.zeros((3, 2)))
        assert not np.any(gX) and not np.any(gY)

    def _fd_check(self, X, Y, Ab, Bb, tol):
        def f_x(x):
            A, B = dc.cayley(x, Y)
            return np.sum(A * Ab) + np.sum(B * Bb)

        def f_y(y):
            A, B = dc.cayley(X, y)
            return np.sum(A * Ab) + np.sum(B * Bb)

        gX, gY = dc.cayley_adjoint(X, Y, Ab, Bb)
        assert np.all(rel_err(gX, central_diff(f_x, X)) <= tol)
        assert np.all(rel_err(gY, central_diff(f_y, Y)) <= tol)

    def test_2x2_seed0(self):
        rng = np.random.default_rng(0)
        X, Y = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
        self._fd_check(X, Y, rng.standard_normal((2, 2)), rng.standard_normal((2, 2)), 1e-5)

    def test_scalar_case(self):
        X, Y = np.zeros((1, 1)), np.ones((1, 1))
        gX, gY = dc.cayley_adjoint(X, Y, np.ones((1, 1)), np.zeros((1, 1)))
        # A = (1 − Y²)/(1 + Y²) with X drops out of Z in 1-D
        assert gX[0, 0] == 0.0
        fd = central_diff(lambda y: dc.cayley(X, y)[0][0, 0], Y)
        assert abs(gY[0, 0] - fd[0, 0]) <= 1e-6
        assert gY[0, 0] == pytest.approx(-1.0, abs=1e-12)  # d/dy (1−y²)/(1+y²) at 1

    def test_random_suite(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n_out, n_in = rng.integers(1, 5, size=2)
            X, Y = rng.standard_normal((n_out, n_out)), rng.standard_normal((n_in, n_out))
            self._fd_check(X, Y, rng.standard_normal((n_out, n_out)), rng.standard_normal((n_out, n_in)), 1e-4)


def _grad_check(build, inputs, tol=1e-4):
    """Compare tape gradients of scalar ``build(*vars)`` with finite differences."""
    tape = dc.Tape()
    vs = [tape.watch(x) for x in inputs]
    out = build(*vs)
    grads = tape.gradient(out, vs)
    for k, x in enumerate(inputs):
        def f(z, k=k):
            args = list(inputs)
            args[k] = z
            return float(build(*args))

        fd = central_diff(f, x)
        assert np.all(rel_err(grads[k], fd, floor=1e-6) <= tol), (k, grads[k], fd)


class TestOps:
    def test_plain_arrays_record_nothing(self):
        out = dc.matmul(np.eye(2), np.ones((2, 1)))
        assert isinstance(out, np.ndarray)

    def test_matmul_suite(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            m, k, n = rng.integers(1, 5, size=3)
            a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
            w = rng.standard_normal((m, n))
            _grad_check(lambda x, y: dc.sum_all(dc.mul(dc.matmul(x, y), w)), [a, b])

    def test_solve_suite(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(1, 5))
            m = rng.standard_normal((n, n)) + 3 * np.eye(n)
            b = rng.standard_normal((n, 2))
            w = rng.standard_normal((n, 2))
            _grad_check(lambda x, y: dc.sum_all(dc.mul(dc.solve(x, y), w)), [m, b])

    def test_solve_vector_rhs(self, rng):
        m = rng.standard_normal((3, 3)) + 3 * np.eye(3)
        b = rng.standard_normal(3)
        _grad_check(lambda x, y: dc.sum_all(dc.square(dc.solve(x, y))), [m, b])

    def test_solve_singular(self):
        with pytest.raises(FloatingPointError):
            dc.solve(np.zeros((2, 2)), np.ones(2))

    def test_elementwise_suite(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            a = rng.standard_normal((3, 2))
            a[np.abs(a) < 1e-3] = 0.5  # keep away from the relu kink
            b = rng.standard_normal((1, 2))
            _grad_check(
                lambda x, y: dc.sum_all(
                    dc.add(dc.mul(dc.exp(dc.scale(x, 0.3)), dc.relu(x)), dc.sub(dc.leaky_relu(x), dc.square(y)))
                ),
                [a, b],
            )
            _grad_check(lambda x: dc.mean(dc.sqrt(dc.add(dc.square(x), 1.0))), [a])

    def test_transpose_neg_take_rows(self, rng):
        a = rng.standard_normal((4, 3))
        w = rng.standard_normal((3, 3))
        _grad_check(lambda x: dc.sum_all(dc.mul(dc.transpose(dc.neg(dc.take_rows(x, [0, 2, 2]))), w)), [a])

    def test_broadcast_adjoint_shapes(self):
        tape = dc.Tape()
        a = tape.watch(np.ones((4, 3)))
        b = tape.watch(np.ones(3))
        ga, gb = tape.gradient(dc.sum_all(dc.add(a, b)), [a, b])
        assert ga.shape == (4, 3) and gb.shape == (3,)
        assert np.all(gb == 4.0)

    def test_unused_input_gets_zeros(self):
        tape = dc.Tape()
        a, b = tape.watch(np.ones(2)), tape.watch(np.ones(3))
        ga, gb = tape.gradient(dc.sum_all(a), [a, b])
        assert np.all(ga == 1.0) and np.all(gb == 0.0)

    def test_operator_overloads(self):
        tape = dc.Tape()
        a = tape.watch(np.array([[2.0]]))
        out = dc.sum_all(((a * 3.0 + 1.0) - a) @ np.array([[2.0]]))
        (g,) = tape.gradient(out, [a])
        assert g[0, 0] == pytest.approx(4.0)

    def test_cross_tape_rejected(self):
        t1, t2 = dc.Tape(), dc.Tape()
        a = t1.watch(np.ones(1))
        with pytest.raises(ValueError):
            t2.gradient(dc.sum_all(a), [a])


class TestSpectralNorm:
    def test_diag(self):
        assert dc.spectral_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, rel=1e-9)

    def test_rotation_scaled(self):
        M = np.array([[-0.2, 2.0], [-2.0, -0.2]])
        assert dc.spectral_norm(M) == pytest.approx(np.sqrt(4.04), rel=1e-9)
        assert dc.spectral_norm(M) == pytest.approx(2.0100, abs=5e-5)

    def test_zero(self):
        assert dc.spectral_norm(np.zeros((3, 2))) == 0.0

    def test_matches_svd(self, rng):
        for _ in range(20):
            M = rng.standard_normal(tuple(rng.integers(1, 9, size=2)))
            assert dc.spectral_norm(M) == pytest.approx(np.linalg.svd(M, compute_uv=False)[0], rel=1e-6)

    def test_deterministic(self, rng):
        M = rng.standard_normal((6, 6))
        assert dc.spectral_norm(M) == dc.spectral_norm(M)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), m=st.integers(1, 10), n=st.integers(1, 10))
    def test_dominates_random_quotients(self, seed, m, n):
        rng = np.random.default_rng(seed)
        M = rng.standard_normal((m, n))
        s = dc.spectral_norm(M)
        x = rng.standard_normal((100, n))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        assert np.all(np.linalg.norm(x @ M.T, axis=1) <= s + 1e-9 * s + 1e-12)
