import numpy as np
import pytest
import scipy.sparse as sp

from pshurdle.exceptions import NumericalError
from pshurdle.grid import MaternConfig, build_grid, build_precision
from pshurdle.sparse import SparseCholesky


def _spd(n=30, seed=0):
    rng = np.random.default_rng(seed)
    a = sp.random(n, n, density=0.1, random_state=rng)
    return sp.csc_matrix(a @ a.T + sp.identity(n) * n * 0.1)


def test_logdet_and_solve_match_dense():
    a = _spd()
    chol = SparseCholesky(a)
    dense = a.toarray()
    assert chol.logdet == pytest.approx(np.linalg.slogdet(dense)[1], rel=1e-12)
    b = np.arange(a.shape[0], dtype=float)
    np.testing.assert_allclose(chol.solve(b), np.linalg.solve(dense, b), rtol=1e-10)


def test_sample_has_inverse_covariance():
    a = _spd(8, 3)
    chol = SparseCholesky(a)
    # sample(white) is linear in white, so its covariance is M M^T for the map M
    m = np.column_stack([chol.sample(e) for e in np.eye(8)])
    np.testing.assert_allclose(m @ m.T, np.linalg.inv(a.toarray()), atol=1e-12)


def test_selected_inverse_on_pattern():
    q = build_precision(build_grid(8, 7), MaternConfig(5.0, 0.4)).matrix
    sel = SparseCholesky(q).selected_inverse().tocoo()
    full = np.linalg.inv(q.toarray())
    np.testing.assert_allclose(sel.data, full[sel.row, sel.col], rtol=1e-9, atol=1e-14)
    np.testing.assert_allclose(sel.diagonal(), np.diag(full), rtol=1e-10)


def test_not_positive_definite():
    with pytest.raises(NumericalError):
        SparseCholesky(sp.csc_matrix(np.diag([1.0, -1.0, 2.0])))
