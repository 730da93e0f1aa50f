import numpy as np
import pytest
import scipy.sparse as sp

from stdownscale.mesh import Mesh
from stdownscale.spacetime import (
    Ar1Params, ar1_logdet, ar1_precision, kronecker, spacetime_precision, st_index, st_unindex,
)
from stdownscale.spde import MaternParams, assemble_fem, precision_alpha2

from oracles import dense_ar1_cov


@pytest.fixture(scope="module")
def small_fem():
    # 4 x 4 grid of vertices split into right triangles
    g = np.linspace(0, 1, 4)
    v = np.array([(x, y) for y in g for x in g])
    tris = []
    for r in range(3):
        for c in range(3):
            a = 4 * r + c
            tris += [[a, a + 1, a + 5], [a, a + 5, a + 4]]
    return assemble_fem(Mesh(v, tris))


def test_ar1_small_cases():
    np.testing.assert_array_equal(ar1_precision(Ar1Params(0.7, 1)).toarray(), [[1.0]])
    np.testing.assert_allclose(
        ar1_precision(Ar1Params(0.5, 2)).toarray(), np.array([[1, -0.5], [-0.5, 1]]) / 0.75,
        rtol=1e-15)


def test_ar1_inverse_is_power_covariance():
    Q = ar1_precision(Ar1Params(0.8, 5)).toarray()
    np.testing.assert_allclose(np.linalg.inv(Q), dense_ar1_cov(0.8, 5), atol=1e-12)


def test_ar1_logdet():
    for rho, n in [(0.3, 4), (-0.9, 7), (0.0, 3)]:
        Q = ar1_precision(Ar1Params(rho, n)).toarray()
        assert ar1_logdet(Ar1Params(rho, n)) == pytest.approx(np.linalg.slogdet(Q)[1], abs=1e-12)


def test_ar1_rejects_bad_rho():
    for rho in (1.0, -1.0, 1.5):
        with pytest.raises(ValueError):
            Ar1Params(rho, 3)
    with pytest.raises(ValueError):
        Ar1Params(0.1, 0)


def test_kronecker_examples():
    B = sp.csc_matrix(np.array([[2.0, -1], [-1, 2]]))
    np.testing.assert_array_equal(kronecker(sp.identity(2), B).toarray(),
                                  sp.block_diag([B, B]).toarray())
    A = sp.csc_matrix(np.array([[1.0, -0.5], [-0.5, 1]]))
    K = kronecker(A, B).toarray()
    np.testing.assert_array_equal(K[:2, :2], [[2, -1], [-1, 2]])
    np.testing.assert_array_equal(K[:2, 2:], [[-1, 0.5], [0.5, -1]])
    assert kronecker(A, B).nnz == A.nnz * B.nnz


def test_index_round_trip():
    t, k = np.meshgrid(np.arange(4), np.arange(9), indexing="ij")
    i = st_index(t.ravel(), k.ravel(), 9)
    np.testing.assert_array_equal(i, np.arange(36))
    tt, kk = st_unindex(i, 9)
    np.testing.assert_array_equal(tt, t.ravel())
    np.testing.assert_array_equal(kk, k.ravel())


def test_spacetime_single_time_equals_space(small_fem):
    p = MaternParams(0.5, 1.2)
    f = spacetime_precision(p, Ar1Params(0.4, 1), small_fem)
    np.testing.assert_array_equal(f.Q_joint.toarray(), precision_alpha2(small_fem, p).toarray())
    assert f.dim == small_fem.n


def test_spacetime_rho_zero_block_diagonal(small_fem):
    p = MaternParams(0.5, 1.2)
    f = spacetime_precision(p, Ar1Params(0.0, 3), small_fem)
    Qs = precision_alpha2(small_fem, p)
    np.testing.assert_allclose(f.Q_joint.toarray(), sp.block_diag([Qs] * 3).toarray(), rtol=1e-15)


def test_spacetime_inverse_is_kronecker_of_inverses(small_fem):
    p = MaternParams(0.5, 1.2)
    f = spacetime_precision(p, Ar1Params(0.6, 3), small_fem)
    S_space = np.linalg.inv(precision_alpha2(small_fem, p).toarray())
    expected = np.kron(dense_ar1_cov(0.6, 3), S_space)
    got = np.linalg.inv(f.Q_joint.toarray())
    np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12 * np.abs(expected).max())
    # stationarity in time: each vertex keeps its spatial marginal variance at every time
    nv = small_fem.n
    d = np.diag(got).reshape(3, nv)
    np.testing.assert_allclose(d, np.tile(np.diag(S_space), (3, 1)), rtol=1e-8)
    # lag-1 correlation equals rho at every vertex
    lag = np.array([got[k, nv + k] / np.sqrt(got[k, k] * got[nv + k, nv + k]) for k in range(nv)])
    np.testing.assert_allclose(lag, 0.6, rtol=1e-10)
