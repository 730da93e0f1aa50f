import numpy as np
import pytest
from scipy.integrate import quad

from stdownscale.inference import FieldHyper, HyperParameters, pc_prior_logdensity
from stdownscale.priors import (
    PriorConfig, ar1_density, ar1_lambda, log_range_prior_z, log_rho_prior_z, log_sd_prior_z,
    range_density, sd_density,
)

# mpmath root of (1 - e^-l) / (1 - e^-(sqrt2 l)) = 0.9
LAMBDA_RHO = 1.72039639782897685615476073053


def test_sd_tail():
    cfg = PriorConfig()
    assert cfg.lambda_sd == pytest.approx(np.log(10), rel=1e-15)
    tail, _ = quad(sd_density, 1.0, np.inf, args=(cfg.lambda_sd,), epsabs=1e-14, epsrel=1e-13)
    assert tail == pytest.approx(0.1, abs=1e-10)


def test_range_lower_tail():
    cfg = PriorConfig()
    lam = cfg.lambda_range
    assert lam == pytest.approx(0.1 * np.log(10), rel=1e-15)
    low, _ = quad(range_density, 0.0, 0.1, args=(lam,), epsabs=1e-14, epsrel=1e-13)
    assert low == pytest.approx(0.1, abs=1e-10)
    total, _ = quad(range_density, 0.0, np.inf, args=(lam,), epsabs=1e-12, limit=200)
    assert total == pytest.approx(1.0, abs=1e-8)


def test_range_kappa_mode():
    # P(kappa < 0.1) = 0.1 with kappa = sqrt(8) / range
    cfg = PriorConfig(range_mode="kappa")
    r_hi = np.sqrt(8) / 0.1
    upper, _ = quad(range_density, r_hi, np.inf, args=(cfg.lambda_range,), epsabs=1e-14)
    assert upper == pytest.approx(0.1, abs=1e-10)


def test_ar1_calibration():
    lam = PriorConfig().lambda_rho
    assert lam == pytest.approx(LAMBDA_RHO, rel=1e-10)
    upper, _ = quad(ar1_density, 0.0, 1.0, args=(lam,), epsabs=1e-14, epsrel=1e-13)
    assert upper == pytest.approx(0.9, abs=1e-6)
    total, _ = quad(ar1_density, -1.0, 1.0, args=(lam,), epsabs=1e-14, epsrel=1e-13, points=[0.0])
    assert total == pytest.approx(1.0, abs=1e-10)


def test_ar1_unattainable_statement():
    with pytest.raises(ValueError):
        ar1_lambda(0.0, 0.5)


@pytest.mark.parametrize("logpdf,lam,lo,hi", [
    (log_sd_prior_z, np.log(10), -30, 5),
    (log_range_prior_z, 0.23, -8, 40),
    (log_rho_prior_z, LAMBDA_RHO, -40, 40),
])
def test_internal_scale_densities_normalize(logpdf, lam, lo, hi):
    total, _ = quad(lambda z: np.exp(logpdf(z, lam)), lo, hi, limit=400, epsabs=1e-12)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_internal_scale_jacobians():
    z = 0.37
    lam = 1.3
    assert np.exp(log_sd_prior_z(z, lam)) == pytest.approx(sd_density(np.exp(z), lam) * np.exp(z))
    assert np.exp(log_range_prior_z(z, lam)) == pytest.approx(range_density(np.exp(z), lam) * np.exp(z))
    rho = np.tanh(z / 2)
    assert np.exp(log_rho_prior_z(z, lam)) == pytest.approx(ar1_density(rho, lam) * (1 - rho**2) / 2)


def test_joint_prior_is_sum():
    cfg = PriorConfig()
    hp = HyperParameters(0.4, (FieldHyper(0.8, 12.0, 0.3), FieldHyper(0.1, 20.0)))
    z = hp.to_z()
    expected = (log_sd_prior_z(z[0], cfg.lambda_sd) + log_sd_prior_z(z[1], cfg.lambda_sd)
                + log_range_prior_z(z[2], cfg.lambda_range) + log_rho_prior_z(z[3], cfg.lambda_rho)
                + log_sd_prior_z(z[4], cfg.lambda_sd) + log_range_prior_z(z[5], cfg.lambda_range))
    assert pc_prior_logdensity(hp, cfg) == pytest.approx(expected, rel=1e-14)
    back = HyperParameters.from_z(z, [True, False])
    assert back.sigma_eps == pytest.approx(0.4, rel=1e-14)
    assert back.fields[0].rho == pytest.approx(0.3, rel=1e-14)
    assert back.fields[1].rho is None
