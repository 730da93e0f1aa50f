"""SPDE/GMRF representation of a Matérn field with smoothness 1 in the plane.

Finite-element matrices on a P1 mesh, the alpha = 2 precision

    Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G)

with lumped (diagonal) mass C, and conversions between the (range, sigma)
and (kappa, tau) parameterizations.  Range is the distance at which the
correlation is about 0.1, i.e. ``range = sqrt(8 nu) / kappa``.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import kv

from .sparse import SparseCholesky, canonical, symmetrize

NU = 1.0
DIM = 2


class DegenerateTriangleError(ValueError):
    pass


@dataclass(frozen=True)
class FemMatrices:
    c_lumped: np.ndarray
    G: sp.csc_matrix

    @property
    def n(self):
        return len(self.c_lumped)


@dataclass(frozen=True)
class MaternParams:
    range: float
    sigma: float

    def __post_init__(self):
        if not (self.range > 0 and self.sigma > 0):
            raise ValueError("range and sigma must be positive")

    @property
    def kappa(self):
        return np.sqrt(8.0 * NU) / self.range

    @property
    def tau(self):
        # sigma^2 = 1 / (4 pi kappa^2 tau^2)
        return 1.0 / (2.0 * np.sqrt(np.pi) * self.kappa * self.sigma)

    @classmethod
    def from_kappa_tau(cls, kappa, tau):
        if not (kappa > 0 and tau > 0):
            raise ValueError("kappa and tau must be positive")
        sigma = 1.0 / (2.0 * np.sqrt(np.pi) * kappa * tau)
        return cls(range=np.sqrt(8.0 * NU) / kappa, sigma=sigma)


def assemble_fem(mesh, min_area=1e-14):
    """Lumped mass and stiffness matrices of the P1 element."""
    v = mesh.vertices
    t = mesh.triangles
    area = mesh.signed_areas()
    small = np.flatnonzero(area < min_area)
    if small.size:
        k = int(small[0])
        raise DegenerateTriangleError(
            f"triangle {k} {tuple(int(i) for i in t[k])} has area {area[k]:.3e}"
        )
    p = v[t]
    # edge vectors opposite each vertex
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    local = np.einsum("tid,tjd->tij", e, e) / (4.0 * area)[:, None, None]
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = len(v)
    G = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsc()
    c = np.bincount(t.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    return FemMatrices(c_lumped=c, G=symmetrize(G))


def precision_alpha2(fem, params):
    """Sparse precision of the alpha = 2 SPDE field on the mesh."""
    kappa, tau = params.kappa, params.tau
    C = sp.diags(fem.c_lumped, format="csc")
    Cinv = sp.diags(1.0 / fem.c_lumped, format="csc")
    G = fem.G
    Q = tau**2 * (kappa**4 * C + 2.0 * kappa**2 * G + G @ Cinv @ G)
    return symmetrize(Q)


def precision_parts(fem):
    """Parameter-free pieces (C, G, G C^-1 G) on one shared sparsity pattern.

    Sharing the pattern lets ``combine_precision`` work on ``.data`` only.
    """
    C = sp.diags(fem.c_lumped, format="csc")
    Cinv = sp.diags(1.0 / fem.c_lumped, format="csc")
    GCG = symmetrize(fem.G @ Cinv @ fem.G)
    S = canonical(abs(C) + abs(fem.G) + abs(GCG))
    n = S.shape[0]
    cols = np.repeat(np.arange(n), np.diff(S.indptr))
    keys = cols.astype(np.int64) * n + S.indices
    parts = []
    for M in (C, fem.G, GCG):
        M = sp.coo_matrix(M)
        data = np.zeros(S.nnz)
        pos = np.searchsorted(keys, M.col.astype(np.int64) * n + M.row)
        np.add.at(data, pos, M.data)
        parts.append(sp.csc_matrix((data, S.indices.copy(), S.indptr.copy()), shape=S.shape))
    return tuple(parts)


def combine_precision(parts, params):
    C, G, GCG = parts
    kappa, tau = params.kappa, params.tau
    t2 = tau**2
    Q = C.copy()
    Q.data = t2 * (kappa**4 * C.data + 2.0 * kappa**2 * G.data + GCG.data)
    return Q


def matern_correlation(distance, params):
    """Matérn correlation (nu = 1): x K_1(x) with x = kappa d; 1 at d = 0."""
    d = np.asarray(distance, dtype=float)
    x = params.kappa * d
    out = np.ones_like(x)
    pos = x > 0
    xs = x[pos]
    vals = np.zeros_like(xs)
    ok = xs <= 700.0
    vals[ok] = xs[ok] * kv(1, xs[ok])
    out[pos] = vals
    return out if out.ndim else float(out)


def sample_gmrf(Q, n_samples, seed):
    """Draw ``n_samples`` columns from N(0, Q^{-1}); returns (n, n_samples)."""
    fac = SparseCholesky(Q)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((Q.shape[0], n_samples))
    return fac.sample_centered(z)
