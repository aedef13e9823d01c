import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sadmm.linalg import LinalgError, SingularSystemError, as_symmatrix, as_vector, norms, solve_sym


def random_spd(rng, n, cond=1e3):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eig = np.geomspace(1.0, cond, n)
    return (Q * eig) @ Q.T


def test_identity_and_diagonal():
    assert np.array_equal(solve_sym(np.eye(2), [3.0, -1.0]), [3.0, -1.0])
    assert np.allclose(solve_sym(np.diag([2.0, 4.0]), [2.0, 4.0]), [1.0, 1.0], rtol=0, atol=1e-15)


def test_matches_dense_inverse():
    rng = np.random.default_rng(0)
    A = random_spd(rng, 5)
    b = rng.normal(size=5)
    x = solve_sym(A, b)
    ref = np.linalg.inv(A) @ b
    assert np.linalg.norm(x - ref) <= 1e-9 * np.linalg.norm(ref)


def test_residual_bound_and_no_shift_for_spd():
    rng = np.random.default_rng(1)
    A = random_spd(rng, 8)
    b = rng.normal(size=8)
    x, shift = solve_sym(A, b, return_shift=True)
    assert shift == 0.0
    assert np.max(np.abs(A @ x - b)) <= 1e-8 * (1 + np.max(np.abs(b)))


def test_indefinite_matrix_gets_shift():
    A = np.diag([1.0, -1e-3])
    b = np.array([1.0, 1.0])
    x, shift = solve_sym(A, b, return_shift=True)
    scale = 1 + np.max(np.abs(A).sum(axis=1))
    assert shift >= 1e-3
    # shifts start at 1e-8 * scale and double
    k = np.log2(shift / (1e-8 * scale))
    assert abs(k - round(k)) < 1e-9
    As = A + shift * np.eye(2)
    assert np.max(np.abs(As @ x - b)) <= 1e-8 * (1 + np.max(np.abs(b)))


def test_negative_definite_matrix_is_shifted_past_its_spectrum():
    # Gershgorin: any shift above ||A||_inf makes A positive definite, so the cap is never hit here
    A = -np.diag([5.0, 2.0])
    x, shift = solve_sym(A, np.ones(2), return_shift=True)
    assert 5.0 < shift <= 2 * 6.0
    assert np.allclose((A + shift * np.eye(2)) @ x, 1.0, rtol=0, atol=1e-12)


def test_singular_error_carries_shift():
    err = SingularSystemError("x", 3.0)
    assert isinstance(err, LinalgError) and err.shift == 3.0


def test_input_validation():
    with pytest.raises(LinalgError):
        solve_sym(np.eye(2), np.ones(3))
    with pytest.raises(LinalgError):
        solve_sym(np.array([[1.0, np.nan], [np.nan, 1.0]]), np.ones(2))
    with pytest.raises(LinalgError):
        solve_sym(np.eye(2), [np.inf, 0.0])
    with pytest.raises(LinalgError):
        as_symmatrix([[1.0, 1.0], [0.0, 1.0]])
    with pytest.raises(LinalgError):
        as_vector([])


def test_symmatrix_symmetrizes_tiny_asymmetry():
    A = as_symmatrix([[1.0, 1.0 + 1e-12], [1.0, 2.0]])
    assert np.array_equal(A, A.T)


def test_norms_survive_underflow_and_overflow():
    assert norms([3e-200, 4e-200])[0] == pytest.approx(5e-200, rel=1e-15)
    assert norms([3e200, 4e200])[0] == pytest.approx(5e200, rel=1e-15)


def test_norm_examples():
    assert norms([0.0, 0.0, 0.0]) == (0.0, 0.0)
    assert norms([3.0, 4.0]) == (5.0, 4.0)
    assert norms(np.ones(9)) == (3.0, 1.0)


@given(n=st.integers(1, 64), seed=st.integers(0, 2**32 - 1), log_cond=st.floats(0.0, 6.0))
def test_recovers_x_for_conditioned_spd(n, seed, log_cond):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, n, 10.0**log_cond)
    x = rng.normal(size=n)
    got = solve_sym(A, A @ x)
    assert np.linalg.norm(got - x) <= 1e-8 * np.linalg.norm(x)


@given(
    v=st.lists(st.floats(-1e6, 1e6).filter(lambda t: t == 0 or abs(t) > 1e-150), min_size=1, max_size=30),
    c=st.floats(-1e3, 1e3).filter(lambda t: t == 0 or abs(t) > 1e-150),
)
def test_norms_absolutely_homogeneous(v, c):
    v = np.array(v)
    two, inf = norms(v)
    two_c, inf_c = norms(c * v)
    assert two_c == pytest.approx(abs(c) * two, rel=1e-12, abs=1e-300)
    assert inf_c == pytest.approx(abs(c) * inf, rel=1e-15, abs=1e-300)
