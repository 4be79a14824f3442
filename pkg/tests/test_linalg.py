import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdpcert import linalg
from sdpcert.errors import InvalidInputError

SQRT2_MATRIX = np.array([[0.0, 0, 1], [0, 0, 1], [1, 1, 0]])


def random_symmetric(rng, n):
    A = rng.uniform(-1, 1, size=(n, n))
    return (A + A.T) / 2


def test_diagonal():
    top = linalg.top_eigenpair(np.diag([3.0, 1.0, -2.0]))
    assert top.value == pytest.approx(3.0)
    assert abs(top.vector[0]) == pytest.approx(1.0)


def test_characteristic_polynomial_example():
    top = linalg.top_eigenpair(SQRT2_MATRIX)
    assert top.value == pytest.approx(np.sqrt(2), abs=1e-12)


def test_identity_uses_fallback_and_small_residual():
    top = linalg.top_eigenpair(np.eye(5), max_iter=50, method="lanczos")
    assert top.value == pytest.approx(1.0)
    assert top.converged
    assert top.iterations == 51
    assert np.linalg.norm(np.eye(5) @ top.vector - top.vector) <= 1e-7


@pytest.mark.parametrize("n", [3, 10, 50, 120])
@pytest.mark.parametrize("method", ["auto", "lanczos", "dense"])
def test_agrees_with_dense_oracle(n, method):
    rng = np.random.default_rng(n)
    A = random_symmetric(rng, n)
    top = linalg.top_eigenpair(A, method=method)
    oracle = np.linalg.eigvalsh(A)[-1]
    assert abs(top.value - oracle) <= 1e-8 * max(1, abs(oracle))
    assert abs(np.linalg.norm(top.vector) - 1) <= 1e-12
    assert np.linalg.norm(A @ top.vector - top.value * top.vector) <= 1e-7 * max(1, abs(top.value))


def test_hundred_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 51))
        A = random_symmetric(rng, n)
        oracle = np.linalg.eigvalsh(A)[-1]
        assert abs(linalg.top_eigenpair(A).value - oracle) <= 1e-8 * max(1, abs(oracle))


def test_iterative_path_is_deterministic():
    A = random_symmetric(np.random.default_rng(5), 200)
    a = linalg.top_eigenpair(A, method="lanczos")
    b = linalg.top_eigenpair(A, method="lanczos")
    assert a.value == b.value
    assert np.array_equal(a.vector, b.vector)
    assert a.iterations <= 20 * 200


@given(st.integers(2, 30), st.floats(-50, 50), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_shift_invariance(n, s, seed):
    A = random_symmetric(np.random.default_rng(seed), n)
    base = linalg.top_eigenpair(A).value
    shifted = linalg.top_eigenpair(A + s * np.eye(n)).value
    assert shifted == pytest.approx(base + s, abs=1e-8 * max(1, abs(base + s)))


@given(st.integers(1, 20), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_lambda_max_plus_rayleigh(n, seed):
    rng = np.random.default_rng(seed)
    A = random_symmetric(rng, n)
    value, vec = linalg.lambda_max_plus(A)
    assert value >= 0
    assert (vec is None) == (value == 0)
    for _ in range(5):
        u = rng.standard_normal(n)
        u /= np.linalg.norm(u)
        assert value >= u @ A @ u - 1e-9


def test_lambda_max_plus_examples():
    assert linalg.lambda_max_plus(np.diag([-1.0, -2.0])) == (0.0, None)
    value, vec = linalg.lambda_max_plus(np.diag([4.0, -1.0]))
    assert value == pytest.approx(4.0)
    assert abs(vec[0]) == pytest.approx(1.0)
    assert linalg.lambda_max_plus(SQRT2_MATRIX)[0] == pytest.approx(np.sqrt(2))


@pytest.mark.parametrize("bad", [
    np.zeros((0, 0)),
    np.array([[1.0, np.nan], [np.nan, 1.0]]),
    np.array([[1.0, 2.0], [0.0, 1.0]]),
    np.ones((2, 3)),
])
def test_invalid_input(bad):
    with pytest.raises(InvalidInputError):
        linalg.top_eigenpair(bad)


def test_nonpositive_tol_rejected():
    with pytest.raises(InvalidInputError):
        linalg.top_eigenpair(np.eye(3), tol=0)
