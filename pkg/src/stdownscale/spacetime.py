"""Separable space-time precision: stationary AR(1) in time (x) spatial GMRF.

Coordinates are time-major: (t, k) -> t * n_vertices + k.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .sparse import canonical
from .spde import precision_alpha2


@dataclass(frozen=True)
class Ar1Params:
    rho: float
    n_time: int

    def __post_init__(self):
        if not abs(self.rho) < 1.0:
            raise ValueError(f"AR(1) correlation must satisfy |rho| < 1, got {self.rho}")
        if self.n_time < 1:
            raise ValueError("n_time must be >= 1")


def ar1_precision(params):
    """Tridiagonal precision of a unit-variance stationary AR(1) series."""
    n, rho = params.n_time, params.rho
    if n == 1:
        return sp.csc_matrix(np.ones((1, 1)))
    diag = np.full(n, 1.0 + rho**2)
    diag[0] = diag[-1] = 1.0
    off = np.full(n - 1, -rho)
    Q = sp.diags([off, diag, off], [-1, 0, 1], format="csc") / (1.0 - rho**2)
    return canonical(Q)


def ar1_logdet(params):
    """log|Q_ar1| = -(n - 1) log(1 - rho^2)."""
    return -(params.n_time - 1) * np.log1p(-params.rho**2)


def kronecker(A, B):
    return canonical(sp.kron(sp.csc_matrix(A), sp.csc_matrix(B), format="csc"))


def st_index(t, k, n_vertices):
    return np.asarray(t) * n_vertices + np.asarray(k)


def st_unindex(i, n_vertices):
    i = np.asarray(i)
    return i // n_vertices, i % n_vertices


@dataclass(frozen=True)
class SpaceTimeField:
    matern: object
    ar1: Ar1Params
    Q_joint: sp.csc_matrix
    n_vertices: int

    @property
    def dim(self):
        return self.ar1.n_time * self.n_vertices


def spacetime_precision(matern, ar1, fem):
    Qs = precision_alpha2(fem, matern)
    Qj = kronecker(ar1_precision(ar1), Qs)
    return SpaceTimeField(matern=matern, ar1=ar1, Q_joint=Qj, n_vertices=fem.n)
