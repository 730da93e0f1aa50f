"""Penalised-complexity priors for the hyperparameters.

Standard deviations get exponential priors, ranges the 2-d Matérn PC prior
``lam r^-2 exp(-lam / r)`` and AR(1) correlations the PC prior with base
model rho = 1 (distance sqrt(1 - rho)).  All log densities are returned on
the internal scale (log sd, log range, log((1 + rho) / (1 - rho))), i.e.
with the Jacobian included.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq


@dataclass(frozen=True)
class PriorConfig:
    """Tail statements P(sd > u) = a, P(range < r0) = a, P(rho > r) = a.

    ``range_mode='kappa'`` reads the range statement as P(kappa < r0) = a with
    kappa = sqrt(8) / range, i.e. an upper-tail statement on the range.
    """

    sd_u: float = 1.0
    sd_alpha: float = 0.1
    range_r0: float = 0.1
    range_alpha: float = 0.1
    range_mode: str = "range"
    rho_r: float = 0.0
    rho_alpha: float = 0.9

    def __post_init__(self):
        if self.range_mode not in ("range", "kappa"):
            raise ValueError("range_mode must be 'range' or 'kappa'")

    @property
    def lambda_sd(self):
        return -np.log(self.sd_alpha) / self.sd_u

    @property
    def lambda_range(self):
        if self.range_mode == "range":
            # P(range < r0) = exp(-lam / r0)
            return -np.log(self.range_alpha) * self.range_r0
        # P(kappa < k0) = P(range > sqrt(8)/k0) = 1 - exp(-lam k0 / sqrt(8))
        r_hi = np.sqrt(8.0) / self.range_r0
        return -np.log1p(-self.range_alpha) * r_hi

    @property
    def lambda_rho(self):
        return ar1_lambda(self.rho_r, self.rho_alpha)


def _ar1_upper_prob(lam, r):
    # P(rho > r) under the normalized density on (-1, 1)
    return -np.expm1(-lam * np.sqrt(1.0 - r)) / -np.expm1(-lam * np.sqrt(2.0))


@lru_cache(maxsize=64)
def ar1_lambda(r, alpha):
    """Rate giving P(rho > r) = alpha for the base-model-rho=1 PC prior."""
    lo_limit = np.sqrt((1.0 - r) / 2.0)
    if not (lo_limit < alpha < 1.0):
        raise ValueError(f"P(rho > {r}) = {alpha} is not attainable (need > {lo_limit:.4f})")
    return brentq(lambda lam: _ar1_upper_prob(lam, r) - alpha, 1e-10, 1e4, xtol=1e-14, rtol=1e-15)


# -- densities on the natural scale ---------------------------------------


def sd_density(sigma, lam):
    return lam * np.exp(-lam * sigma)


def range_density(r, lam):
    return lam * r**-2.0 * np.exp(-lam / r)


def ar1_density(rho, lam):
    u = np.sqrt(1.0 - rho)
    norm = -np.expm1(-lam * np.sqrt(2.0))
    return 0.5 * lam * np.exp(-lam * u) / u / norm


# -- log densities on the internal scale --------------------------------------


def log_sd_prior_z(z, lam):
    """log prior of z = log(sigma)."""
    return np.log(lam) - lam * np.exp(z) + z


def log_range_prior_z(z, lam):
    """log prior of z = log(range)."""
    return np.log(lam) - z - lam * np.exp(-z)


def log_rho_prior_z(z, lam):
    """log prior of z = log((1 + rho) / (1 - rho))."""
    # 1 - rho = 2 / (1 + e^z) and 1 + rho = 2 e^z / (1 + e^z), kept in log space
    l1pez = np.logaddexp(0.0, z)
    log_one_minus = np.log(2.0) - l1pez
    u = np.exp(0.5 * log_one_minus)
    norm = -np.expm1(-lam * np.sqrt(2.0))
    log_dens = np.log(0.5 * lam) - lam * u - 0.5 * log_one_minus - np.log(norm)
    # d rho / d z = (1 - rho^2) / 2
    return log_dens + np.log(2.0) + z - 2.0 * l1pez
