"""Posterior inference for the Gaussian-likelihood latent model.

With Gaussian observations the conditional p(theta | psi, y) is exactly
Gaussian, so the Laplace-type expression for p(psi | y) is exact up to a
constant.  The hyperparameter mode is found by BFGS on finite-difference
gradients; the posterior is then integrated over a regular lattice in the
standardized (eigen-scaled) hyperparameter space, or collapsed to the mode.
"""

import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.special import ndtri, roots_hermitenorm
from scipy.stats import norm

from . import priors as pc
from .mesh import Mesh
from .spacetime import Ar1Params, ar1_logdet, ar1_precision
from .sparse import NotPositiveDefiniteError, SparseCholesky, canonical
from .spde import FemMatrices, MaternParams, combine_precision, precision_parts

log = logging.getLogger(__name__)

FIXED_PRECISION = 1e-3  # N(0, 1000) on every fixed effect


class ConvergenceError(RuntimeError):
    def __init__(self, message, best_z=None, grad_norm=None, result=None):
        super().__init__(message)
        self.best_z = best_z
        self.grad_norm = grad_norm
        self.result = result


# -- hyperparameters ---------------------------------------------------------------


@dataclass(frozen=True)
class FieldHyper:
    sigma: float
    range: float
    rho: float = None


@dataclass(frozen=True)
class HyperParameters:
    sigma_eps: float
    fields: tuple = ()

    def __post_init__(self):
        if not self.sigma_eps > 0:
            raise ValueError("sigma_eps must be positive")
        for f in self.fields:
            if not (f.sigma > 0 and f.range > 0):
                raise ValueError("field sigma and range must be positive")
            if f.rho is not None and not abs(f.rho) < 1:
                raise ValueError("rho must lie in (-1, 1)")

    def to_z(self):
        z = [np.log(self.sigma_eps)]
        for f in self.fields:
            z += [np.log(f.sigma), np.log(f.range)]
            if f.rho is not None:
                z.append(np.log((1.0 + f.rho) / (1.0 - f.rho)))
        return np.array(z)

    @classmethod
    def from_z(cls, z, temporal):
        """Inverse of ``to_z``; ``temporal`` flags which fields carry rho."""
        z = np.asarray(z, dtype=float)
        i = 1
        fields = []
        for tflag in temporal:
            sigma, rng_ = np.exp(z[i]), np.exp(z[i + 1])
            i += 2
            rho = None
            if tflag:
                rho = float(np.tanh(0.5 * z[i]))
                i += 1
            fields.append(FieldHyper(float(sigma), float(rng_), rho))
        if i != len(z):
            raise ValueError("hyperparameter vector has the wrong length")
        return cls(float(np.exp(z[0])), tuple(fields))


def hyper_names(field_names, temporal):
    names = ["log_sigma_eps"]
    for name, tflag in zip(field_names, temporal):
        names += [f"log_sigma[{name}]", f"log_range[{name}]"]
        if tflag:
            names.append(f"logit_rho[{name}]")
    return names


def pc_prior_logdensity(hp, config=None):
    """Joint log prior of ``hp`` on the internal z scale."""
    config = config or pc.PriorConfig()
    z = hp.to_z()
    lam_sd, lam_r = config.lambda_sd, config.lambda_range
    lp = pc.log_sd_prior_z(z[0], lam_sd)
    i = 1
    for f in hp.fields:
        lp += pc.log_sd_prior_z(z[i], lam_sd) + pc.log_range_prior_z(z[i + 1], lam_r)
        i += 2
        if f.rho is not None:
            lp += pc.log_rho_prior_z(z[i], config.lambda_rho)
            i += 1
    return float(lp)


# -- the latent structure ---------------------------------------------------------------


@dataclass
class FieldPrior:
    name: str
    temporal: bool
    n_time: int
    fem: FemMatrices

    def __post_init__(self):
        self._parts = None
        self._logdet_cache = OrderedDict()

    @property
    def n_vertices(self):
        return self.fem.n

    @property
    def dim(self):
        return self.n_time * self.n_vertices if self.temporal else self.n_vertices

    def parts(self):
        if self._parts is None:
            self._parts = precision_parts(self.fem)
        return self._parts

    def spatial_precision(self, fh):
        return combine_precision(self.parts(), MaternParams(fh.range, fh.sigma))

    def precision(self, fh):
        Qs = self.spatial_precision(fh)
        if not self.temporal or self.n_time == 1:
            return Qs
        return canonical(sp.kron(ar1_precision(Ar1Params(fh.rho, self.n_time)), Qs, format="csc"))

    def logdet(self, fh):
        """log|Q_field|; the kappa-only part is cached between calls."""
        m = MaternParams(fh.range, fh.sigma)
        key = float(m.kappa)
        base = self._logdet_cache.get(key)
        if base is None:
            unit = combine_precision(self.parts(), MaternParams.from_kappa_tau(m.kappa, 1.0))
            base = SparseCholesky(unit).logdet()
            self._logdet_cache[key] = base
            if len(self._logdet_cache) > 64:
                self._logdet_cache.popitem(last=False)
        nv = self.n_vertices
        ld_space = base + nv * np.log(m.tau**2)
        if not self.temporal:
            return ld_space
        ar = Ar1Params(fh.rho, self.n_time)
        return self.n_time * ld_space + nv * ar1_logdet(ar)


class LatentModel:
    """Sufficient statistics of an assembled model for posterior work.

    Holds A'A, A'y and y'y for the joint design A = [F | V_1 | ...], plus the
    finite-element matrices for each field.
    """

    def __init__(self, AtA, Aty, yty, n_obs, n_fixed, fields, y_sd=1.0, site_diag=1.0):
        self.AtA = canonical(AtA)
        self.Aty = np.asarray(Aty, dtype=float)
        self.yty = float(yty)
        self.n_obs = int(n_obs)
        self.n_fixed = int(n_fixed)
        self.fields = list(fields)
        self.y_sd = float(y_sd)
        self.site_diag = float(site_diag)

    @classmethod
    def from_assembled(cls, model):
        cached = getattr(model, "_latent_cache", None)
        if cached is not None:
            return cached
        A = model.design()
        y = model.y
        fields = [FieldPrior(f.name, f.temporal, f.n_time, model.fem) for f in model.fields]
        locs = model.obs_locations
        if locs is not None and len(locs):
            diag = float(np.hypot(*np.ptp(locs, axis=0)))
        else:
            diag = 1.0
        lm = cls(
            (A.T @ A).tocsc(), A.T @ y, float(y @ y), len(y), model.n_fixed, fields,
            y_sd=float(np.std(y)) if len(y) > 1 else 1.0, site_diag=diag if diag > 0 else 1.0,
        )
        model._latent_cache = lm
        return lm

    @property
    def dim(self):
        return self.n_fixed + sum(f.dim for f in self.fields)

    @property
    def temporal(self):
        return [f.temporal for f in self.fields]

    @property
    def field_names(self):
        return [f.name for f in self.fields]

    def hyper_names(self):
        return hyper_names(self.field_names, self.temporal)

    def default_init(self):
        s = self.y_sd / 2.0 if self.y_sd > 0 else 1.0
        fields = tuple(
            FieldHyper(s, self.site_diag / 5.0, 0.5 if f.temporal else None) for f in self.fields
        )
        return HyperParameters(s, fields)

    def prior_precision(self, hp):
        blocks = [sp.identity(self.n_fixed, format="csc") * FIXED_PRECISION]
        blocks += [f.precision(fh) for f, fh in zip(self.fields, hp.fields)]
        return sp.block_diag(blocks, format="csc")

    def prior_logdet(self, hp):
        ld = self.n_fixed * np.log(FIXED_PRECISION)
        return ld + sum(f.logdet(fh) for f, fh in zip(self.fields, hp.fields))


def _latent(model):
    return model if isinstance(model, LatentModel) else LatentModel.from_assembled(model)


# -- conditional posterior and marginal likelihood ------------------------------------


@dataclass
class GaussianConditional:
    mean: np.ndarray
    Q: sp.csc_matrix
    factor: SparseCholesky
    b: np.ndarray

    @property
    def logdet(self):
        return self.factor.logdet()

    def sample(self, z):
        """Map standard normals (dim, m) to draws from N(mean, Q^{-1})."""
        x = self.factor.sample_centered(z)
        return x + (self.mean[:, None] if x.ndim == 2 else self.mean)


def conditional_posterior(model, hp):
    """Exact Gaussian p(theta | psi, y) via sparse factorization."""
    lm = _latent(model)
    s2 = hp.sigma_eps**2
    Q = canonical(lm.prior_precision(hp) + lm.AtA / s2)
    b = lm.Aty / s2
    fac = SparseCholesky(Q)
    mu = fac.solve(b)
    return GaussianConditional(mean=mu, Q=Q, factor=fac, b=b)


def log_marginal_likelihood(model, hp, cond=None):
    """log p(y | psi), exact for the Gaussian model."""
    lm = _latent(model)
    cond = cond or conditional_posterior(lm, hp)
    s2 = hp.sigma_eps**2
    return float(
        0.5 * lm.prior_logdet(hp)
        - 0.5 * cond.logdet
        - 0.5 * lm.n_obs * np.log(2.0 * np.pi * s2)
        - 0.5 * (lm.yty / s2 - cond.b @ cond.mean)
    )


def log_marginal_posterior(model, hp, prior=None, cond=None):
    """log p(y | psi) + log pi(psi), the latter on the internal z scale."""
    return log_marginal_likelihood(model, hp, cond) + pc_prior_logdensity(hp, prior)


# -- mode finding ---------------------------------------------------------------------------


@dataclass
class ModeResult:
    z: np.ndarray
    hp: HyperParameters
    log_post: float
    curvature: np.ndarray
    iterations: int
    evaluations: int
    grad_norm: float
    converged: bool
    stop_reason: str


class _Objective:
    def __init__(self, lm, prior):
        self.lm = lm
        self.prior = prior
        self.evaluations = 0

    def __call__(self, z):
        self.evaluations += 1
        try:
            hp = HyperParameters.from_z(z, self.lm.temporal)
            return log_marginal_posterior(self.lm, hp, self.prior)
        except (NotPositiveDefiniteError, ValueError, FloatingPointError):
            return -np.inf


def fd_gradient(f, z, rel_step=1e-4, f0=None):
    g = np.empty(len(z))
    for i in range(len(z)):
        h = rel_step * max(1.0, abs(z[i]))
        e = np.zeros(len(z))
        e[i] = h
        g[i] = (f(z + e) - f(z - e)) / (2.0 * h)
    return g


def fd_hessian(f, z, step=1e-2, f0=None):
    d = len(z)
    f0 = f(z) if f0 is None else f0
    h = step * np.maximum(1.0, np.abs(z))
    H = np.empty((d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h[i]
        H[i, i] = (f(z + ei) - 2.0 * f0 + f(z - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (
                f(z + ei + ej) - f(z + ei - ej) - f(z - ei + ej) + f(z - ei - ej)
            ) / (4.0 * h[i] * h[j])
    return H


def floor_curvature(negH, rel_floor=1e-8):
    """Symmetrize and floor eigenvalues at ``rel_floor`` times the largest."""
    S = 0.5 * (negH + negH.T)
    lam, V = np.linalg.eigh(S)
    top = max(float(np.max(np.abs(lam))), 1e-300)
    lam = np.maximum(lam, rel_floor * top)
    return (V * lam) @ V.T


def find_mode(model, init=None, prior=None, max_iter=200, gtol=1e-4, xtol=1e-6,
              fd_step=1e-4, max_step=1.0, hess_step=1e-2):
    """Maximize the log marginal posterior over the internal z vector.

    BFGS with central finite-difference gradients and Armijo backtracking.
    Stops when the gradient infinity-norm drops below ``gtol``, or when an
    accepted step is shorter than ``xtol`` (reported as ``stop_reason='step'``).
    Raises ``ConvergenceError`` after ``max_iter`` iterations.
    """
    lm = _latent(model)
    f = _Objective(lm, prior)
    z = (init or lm.default_init()).to_z()
    fz = f(z)
    if not np.isfinite(fz):
        raise ValueError("log posterior is not finite at the initial point")
    g = fd_gradient(f, z, fd_step)
    d = len(z)
    Hinv = np.eye(d)
    first = True
    it = 0
    reason = "gradient"
    while True:
        gnorm = float(np.max(np.abs(g)))
        if gnorm < gtol:
            break
        if it >= max_iter:
            raise ConvergenceError(
                f"mode search hit the iteration cap ({max_iter}); |grad|_inf = {gnorm:.3e}",
                best_z=z, grad_norm=gnorm,
            )
        it += 1
        p = Hinv @ g  # ascent direction
        if g @ p <= 0:
            Hinv = np.eye(d)
            p = g.copy()
        big = np.max(np.abs(p))
        if big > max_step:
            p *= max_step / big
        a = 1.0
        slope = g @ p
        while True:
            zn = z + a * p
            fn = f(zn)
            if np.isfinite(fn) and fn >= fz + 1e-4 * a * slope:
                break
            a *= 0.5
            if a * np.max(np.abs(p)) < 1e-12:
                break
        s = a * p
        if not (np.isfinite(fn) and fn >= fz):
            if not first and not np.allclose(Hinv, np.eye(d)):
                Hinv = np.eye(d)
                first = True
                continue
            reason = "step"
            break
        gn = fd_gradient(f, zn, fd_step)
        yv = -(gn - g)  # gradient change of the minimization objective
        sv = s
        z, fz, g = zn, fn, gn
        sy = sv @ yv
        if sy > 1e-12:
            if first:
                Hinv = np.eye(d) * (sy / (yv @ yv))
                first = False
            rho = 1.0 / sy
            I = np.eye(d)
            Hinv = (I - rho * np.outer(sv, yv)) @ Hinv @ (I - rho * np.outer(yv, sv)) + rho * np.outer(sv, sv)
        if np.max(np.abs(s)) < xtol:
            reason = "step"
            break
    gnorm = float(np.max(np.abs(g)))
    negH = -fd_hessian(f, z, hess_step, fz)
    curv = floor_curvature(negH)
    return ModeResult(
        z=z, hp=HyperParameters.from_z(z, lm.temporal), log_post=float(fz), curvature=curv,
        iterations=it, evaluations=f.evaluations, grad_norm=gnorm,
        converged=gnorm < gtol or reason == "step", stop_reason=reason,
    )


# -- integration points -------------------------------------------------------------------


@dataclass
class IntegrationPoints:
    z: np.ndarray  # (K, d)
    lattice: np.ndarray  # (K, d) integer lattice coordinates
    log_post: np.ndarray
    weights: np.ndarray
    transform: np.ndarray  # z = mode + transform @ (step * u)
    step: float
    strategy: str


def standardizing_transform(curvature):
    lam, V = np.linalg.eigh(curvature)
    return V / np.sqrt(lam)


def build_integration_points(mode, curvature, logpost, strategy="grid", step=1.0,
                             prune=5.0, max_points=5000, mode_value=None):
    """Regular-lattice integration design around ``mode``.

    ``logpost`` maps a z vector to the log posterior (``-inf`` if invalid).
    Lattice nodes are explored outward from the mode and kept while the log
    density is within ``prune`` of the mode value.  Equal cell volumes make
    the weights proportional to the density.
    """
    mode = np.asarray(mode, dtype=float)
    d = len(mode)
    T = standardizing_transform(curvature)
    lp0 = logpost(mode) if mode_value is None else mode_value
    if strategy == "eb":
        return IntegrationPoints(mode[None], np.zeros((1, d), int), np.array([lp0]),
                                 np.ones(1), T, step, "eb")
    if strategy != "grid":
        raise ValueError(f"unknown integration strategy {strategy!r}")
    origin = (0,) * d
    seen = {origin: lp0}
    frontier = [origin]
    kept = [origin]
    while frontier:
        nxt = []
        for u in frontier:
            for i in range(d):
                for sgn in (-1, 1):
                    v = list(u)
                    v[i] += sgn
                    v = tuple(v)
                    if v in seen:
                        continue
                    zv = mode + T @ (step * np.asarray(v, dtype=float))
                    val = logpost(zv)
                    seen[v] = val
                    if np.isfinite(val) and lp0 - val <= prune:
                        kept.append(v)
                        nxt.append(v)
                        if len(kept) >= max_points:
                            raise RuntimeError(
                                f"integration lattice exceeded {max_points} points; "
                                "increase the step or use strategy 'eb'"
                            )
        frontier = sorted(nxt)
    kept.sort()
    U = np.asarray(kept, dtype=int).reshape(-1, d)
    lps = np.array([seen[tuple(u)] for u in kept])
    Z = mode + (T @ (step * U.T)).T
    w = np.exp(lps - lps.max())
    w /= w.sum()
    return IntegrationPoints(Z, U, lps, w, T, step, "grid")


# -- the fitted posterior -------------------------------------------------------------------


@dataclass
class FitConfig:
    strategy: str = "grid"
    step: float = 1.0
    prune: float = 5.0
    max_iter: int = 200
    gtol: float = 1e-4
    xtol: float = 1e-6
    fd_step: float = 1e-4
    max_points: int = 5000
    prior: pc.PriorConfig = field(default_factory=pc.PriorConfig)
    init: HyperParameters = None


def _mixture_quantile(q, means, sds, weights):
    lo = float(np.min(means - 10 * sds))
    hi = float(np.max(means + 10 * sds))
    return brentq(lambda x: weights @ norm.cdf((x - means) / sds) - q, lo, hi, xtol=1e-12)


class PosteriorBundle:
    """Integration points, weights and per-point Gaussian conditionals.

    Conditionals are rebuilt on demand (and cached) from the stored
    hyperparameter points, so the bundle stays light for large lattices.
    """

    QUANTILES = (0.025, 0.5, 0.975)

    def __init__(self, latent, points, means, fixed_var, mode, config, info=None):
        self.latent = latent
        self.points = points
        self.means = np.asarray(means)
        self.fixed_var = np.asarray(fixed_var)
        self.mode = mode
        self.config = config
        self.info = dict(info or {})
        self._cache = OrderedDict()
        self.mesh = None
        self.extra_arrays = {}

    @property
    def K(self):
        return len(self.points.weights)

    @property
    def weights(self):
        return self.points.weights

    def hyper(self, k):
        return HyperParameters.from_z(self.points.z[k], self.latent.temporal)

    def conditional(self, k):
        if k not in self._cache:
            self._cache[k] = conditional_posterior(self.latent, self.hyper(k))
            if len(self._cache) > 4:
                self._cache.popitem(last=False)
        return self._cache[k]

    # -- summaries --------------------------------------------------------------

    def fixed_marginals(self):
        w = self.weights
        out = OrderedDict()
        for j, name in enumerate(self.info.get("fixed_names", [f"beta{j}" for j in range(self.latent.n_fixed)])):
            m = self.means[:, j]
            s = np.sqrt(self.fixed_var[:, j])
            mean = float(w @ m)
            var = float(w @ (s**2 + m**2) - mean**2)
            qs = [_mixture_quantile(q, m, s, w) for q in self.QUANTILES]
            out[name] = dict(mean=mean, sd=float(np.sqrt(max(var, 0.0))),
                             q025=qs[0], q50=qs[1], q975=qs[2])
        return out

    def _natural(self, Z):
        """Natural-scale hyperparameters for rows of Z, keyed by name."""
        out = OrderedDict()
        out["sigma2_eps"] = np.exp(2.0 * Z[:, 0])
        i = 1
        for f in self.latent.fields:
            out[f"sigma2[{f.name}]"] = np.exp(2.0 * Z[:, i])
            out[f"range[{f.name}]"] = np.exp(Z[:, i + 1])
            i += 2
            if f.temporal:
                out[f"rho[{f.name}]"] = np.tanh(0.5 * Z[:, i])
                i += 1
        return out

    def hyper_marginals(self, n_draws=100_000, seed=0):
        """Marginal summaries of the natural hyperparameters.

        At a single point the Gaussian approximation of z around the mode is
        used (quantiles map through the monotone transforms exactly).  On a
        lattice each node spreads its weight uniformly over its cell.
        """
        d = self.points.z.shape[1]
        Sigma = np.linalg.inv(self.mode.curvature)
        if self.points.strategy == "eb":
            x, wq = roots_hermitenorm(60)
            wq = wq / wq.sum()
            out = OrderedDict()
            zq = {q: self.mode.z + np.sqrt(np.diag(Sigma)) * ndtri(q) for q in self.QUANTILES}
            nodes = self.mode.z[None, :] + np.sqrt(np.diag(Sigma))[None, :] * x[:, None]
            nat = self._natural(nodes)
            natq = {q: self._natural(zq[q][None]) for q in self.QUANTILES}
            for name, vals in nat.items():
                mean = float(wq @ vals)
                sd = float(np.sqrt(max(wq @ vals**2 - mean**2, 0.0)))
                out[name] = dict(mean=mean, sd=sd, q025=float(natq[0.025][name][0]),
                                 q50=float(natq[0.5][name][0]), q975=float(natq[0.975][name][0]))
            return out
        rng = np.random.default_rng(seed)
        k = rng.choice(self.K, size=n_draws, p=self.weights)
        u = self.points.lattice[k] + rng.uniform(-0.5, 0.5, size=(n_draws, d))
        Z = self.mode.z + (self.points.transform @ (self.points.step * u.T)).T
        out = OrderedDict()
        for name, vals in self._natural(Z).items():
            q = np.quantile(vals, self.QUANTILES)
            out[name] = dict(mean=float(vals.mean()), sd=float(vals.std()),
                             q025=float(q[0]), q50=float(q[1]), q975=float(q[2]))
        return out

    def latent_marginal(self, idx):
        """Mixture mean and sd of latent coordinates ``idx``."""
        idx = np.atleast_1d(idx)
        w = self.weights
        mean = w @ self.means[:, idx]
        second = np.zeros(len(idx))
        for k in range(self.K):
            cond = self.conditional(k)
            var = np.diag(cond.factor.inverse_columns(idx)[idx])
            second += w[k] * (var + self.means[k, idx] ** 2)
        return mean, np.sqrt(np.maximum(second - mean**2, 0.0))

    def report(self):
        return OrderedDict(
            strategy=self.points.strategy,
            K=self.K,
            step=self.points.step,
            log_posterior_at_mode=self.mode.log_post,
            log_marginal_likelihood_at_mode=self.info.get("log_ml_mode"),
            iterations=self.mode.iterations,
            evaluations=self.mode.evaluations,
            grad_norm=self.mode.grad_norm,
            converged=self.mode.converged,
            stop_reason=self.mode.stop_reason,
            mode=dict(zip(self.latent.hyper_names(), map(float, self.mode.z))),
            hyperparameters=self.hyper_marginals(),
            fixed_effects=self.fixed_marginals(),
            settings=dict(
                prune=self.config.prune, gtol=self.config.gtol, xtol=self.config.xtol,
                fd_step=self.config.fd_step, max_iter=self.config.max_iter,
                prior=asdict(self.config.prior),
            ),
        )

    # -- persistence --------------------------------------------------------------

    def save(self, path, extra_arrays=None):
        lm = self.latent
        AtA = sp.csc_matrix(lm.AtA)
        arrays = dict(
            AtA_data=AtA.data, AtA_indices=AtA.indices, AtA_indptr=AtA.indptr,
            Aty=lm.Aty, z=self.points.z, lattice=self.points.lattice,
            log_post=self.points.log_post, weights=self.points.weights,
            transform=self.points.transform, means=self.means, fixed_var=self.fixed_var,
            mode_z=self.mode.z, curvature=self.mode.curvature,
        )
        for i, f in enumerate(lm.fields):
            G = f.fem.G
            arrays[f"fem{i}_c"] = f.fem.c_lumped
            arrays[f"fem{i}_G_data"] = G.data
            arrays[f"fem{i}_G_indices"] = G.indices
            arrays[f"fem{i}_G_indptr"] = G.indptr
        if getattr(self, "mesh", None) is not None:
            arrays["mesh_vertices"] = self.mesh.vertices
            arrays["mesh_triangles"] = self.mesh.triangles
            arrays["mesh_interior"] = self.mesh.interior_flag
        arrays.update(extra_arrays or {})
        meta = dict(
            yty=lm.yty, n_obs=lm.n_obs, n_fixed=lm.n_fixed, y_sd=lm.y_sd, site_diag=lm.site_diag,
            dim=int(AtA.shape[0]),
            fields=[dict(name=f.name, temporal=f.temporal, n_time=f.n_time) for f in lm.fields],
            step=self.points.step, strategy=self.points.strategy,
            mode=dict(log_post=self.mode.log_post, iterations=self.mode.iterations,
                      evaluations=self.mode.evaluations, grad_norm=self.mode.grad_norm,
                      converged=self.mode.converged, stop_reason=self.mode.stop_reason),
            config=dict(strategy=self.config.strategy, step=self.config.step,
                        prune=self.config.prune, max_iter=self.config.max_iter,
                        gtol=self.config.gtol, xtol=self.config.xtol,
                        fd_step=self.config.fd_step, max_points=self.config.max_points,
                        prior=asdict(self.config.prior)),
            info=self.info,
        )
        arrays["meta_json"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
        meta = json.loads(arrays.pop("meta_json").tobytes().decode())
        n = meta["dim"]
        AtA = sp.csc_matrix((arrays["AtA_data"], arrays["AtA_indices"], arrays["AtA_indptr"]), shape=(n, n))
        fields = []
        for i, fm in enumerate(meta["fields"]):
            c = arrays[f"fem{i}_c"]
            G = sp.csc_matrix((arrays[f"fem{i}_G_data"], arrays[f"fem{i}_G_indices"],
                               arrays[f"fem{i}_G_indptr"]), shape=(len(c), len(c)))
            fields.append(FieldPrior(fm["name"], fm["temporal"], fm["n_time"], FemMatrices(c, G)))
        lm = LatentModel.__new__(LatentModel)
        lm.AtA, lm.Aty, lm.yty = AtA, arrays["Aty"], meta["yty"]
        lm.n_obs, lm.n_fixed, lm.fields = meta["n_obs"], meta["n_fixed"], fields
        lm.y_sd, lm.site_diag = meta["y_sd"], meta["site_diag"]
        pts = IntegrationPoints(arrays["z"], arrays["lattice"], arrays["log_post"],
                                arrays["weights"], arrays["transform"], meta["step"], meta["strategy"])
        mm = meta["mode"]
        mode = ModeResult(arrays["mode_z"], HyperParameters.from_z(arrays["mode_z"], lm.temporal),
                          mm["log_post"], arrays["curvature"], mm["iterations"], mm["evaluations"],
                          mm["grad_norm"], mm["converged"], mm["stop_reason"])
        cfg = dict(meta["config"])
        cfg["prior"] = pc.PriorConfig(**cfg["prior"])
        bundle = cls(lm, pts, arrays["means"], arrays["fixed_var"], mode, FitConfig(**cfg), meta["info"])
        bundle.extra_arrays = {k: v for k, v in arrays.items() if k.startswith("x_")}
        bundle.mesh = None
        if "mesh_vertices" in arrays:
            bundle.mesh = Mesh(arrays["mesh_vertices"], arrays["mesh_triangles"], arrays["mesh_interior"])
        return bundle


def fit(model, config=None, info=None):
    """Mode search, integration design and per-point conditionals."""
    config = config or FitConfig()
    lm = _latent(model)
    mode = find_mode(lm, config.init, config.prior, config.max_iter, config.gtol,
                     config.xtol, config.fd_step)
    log.info("mode found after %d iterations (%d evaluations)", mode.iterations, mode.evaluations)
    objective = _Objective(lm, config.prior)
    pts = build_integration_points(mode.z, mode.curvature, objective, config.strategy,
                                   config.step, config.prune, config.max_points, mode.log_post)
    p = lm.n_fixed
    means = np.empty((len(pts.weights), lm.dim))
    fixed_var = np.empty((len(pts.weights), p))
    for k, z in enumerate(pts.z):
        cond = conditional_posterior(lm, HyperParameters.from_z(z, lm.temporal))
        means[k] = cond.mean
        fixed_var[k] = np.diag(cond.factor.inverse_columns(np.arange(p))[:p])
    info = dict(info or {})
    mesh = None
    if isinstance(model, LatentModel):
        info.setdefault("fixed_names", [f"beta{j}" for j in range(p)])
    else:
        info.setdefault("fixed_names", list(model.fixed_names))
        # what prediction needs to rebuild designs without the training data
        spec = model.spec
        info["model"] = dict(
            fixed=list(spec.fixed), varying=list(spec.varying),
            intercept_field=spec.intercept_field, varying_fields=spec.varying_fields,
            temporal=spec.temporal, n_time=int(model.n_time), transform=model.transform,
            standardization={k: list(v) for k, v in model.standardization.items()},
        )
        mesh = model.mesh
    info["log_ml_mode"] = log_marginal_likelihood(lm, mode.hp)
    bundle = PosteriorBundle(lm, pts, means, fixed_var, mode, config, info)
    bundle.mesh = mesh
    return bundle
