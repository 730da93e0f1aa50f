"""Joint posterior prediction and summaries.

Samples are drawn jointly: an integration point k is picked with probability
equal to its weight, then the full latent vector is drawn from the Gaussian
conditional at that point.  Each sample is pushed through the calibration
model at the prediction rows, so spatial and temporal dependence survive
into maps, aggregates and year differences.
"""

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import (
    AssemblyError, GridCovariate, MisalignmentError, ModelSpec, OutsideGridError, build_design,
    covariate_values, inverse_transform,
)
from .mesh import OutsideDomainError

DEFAULT_THRESHOLDS = {"no2": (40.0,), "pm25": (10.0,)}
CUBE_MAGIC = b"STCUBE1\x00"


class PredictionError(ValueError):
    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = list(indices)


@dataclass
class PredictionRequest:
    """Prediction rows are every location at every requested time.

    ``covariates`` are rasters at the prediction support; ``point_covariates``
    may give a covariate directly as an (n_locations, n_times) array.
    """

    locations: np.ndarray
    times: tuple = (0,)
    covariates: list = field(default_factory=list)
    point_covariates: dict = field(default_factory=dict)
    inverse_transform: bool = True
    thresholds: tuple = ()

    def __post_init__(self):
        self.locations = np.atleast_2d(np.asarray(self.locations, dtype=float))
        if self.locations.shape[1] != 2:
            raise PredictionError("locations must have shape (n, 2)")
        self.times = tuple(int(t) for t in np.atleast_1d(self.times))
        if not self.times or min(self.times) < 0:
            raise PredictionError("need at least one non-negative time index")
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if any(not t > 0 for t in self.thresholds):
            raise PredictionError("exceedance thresholds must be positive")

    def rows(self):
        """Time-major (location, time) rows: row = j * n_loc + i for times[j]."""
        n = len(self.locations)
        locs = np.tile(self.locations, (len(self.times), 1))
        times = np.repeat(np.asarray(self.times), n)
        return locs, times


@dataclass
class JointSamples:
    point: np.ndarray  # integration point index per sample
    theta: np.ndarray  # (n_samples, latent dim)
    sigma_eps: np.ndarray  # (n_samples,)


@dataclass
class SampleCube:
    samples: np.ndarray  # (n_samples, n_locations, n_times), original scale
    seed: int
    fingerprint: str
    times: tuple = (0,)

    def __post_init__(self):
        if self.samples.ndim != 3 or self.samples.shape[0] < 1:
            raise PredictionError("sample cube must be (n_samples >= 1, n_locations, n_times)")

    @property
    def n_samples(self):
        return self.samples.shape[0]

    def time_position(self, t):
        try:
            return self.times.index(int(t))
        except ValueError:
            raise PredictionError(f"time index {t} not in cube (has {list(self.times)})") from None


@dataclass
class SummaryRaster:
    median: np.ndarray  # (n_locations, n_times)
    mean: np.ndarray
    sd: np.ndarray
    q025: np.ndarray
    q975: np.ndarray
    exceedance: dict  # threshold -> (n_locations, n_times)

    STATISTICS = ("median", "mean", "sd", "q025", "q975")


def bundle_fingerprint(bundle):
    h = hashlib.sha256()
    for a in (bundle.points.z, bundle.points.weights, bundle.means):
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def sample_joint(bundle, n_samples, seed):
    """Joint draws of (psi, theta); deterministic per seed."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    k = rng.choice(bundle.K, size=n_samples, p=bundle.weights)
    theta = np.empty((n_samples, bundle.latent.dim))
    sigma = np.empty(n_samples)
    for kk in np.unique(k):
        sel = np.flatnonzero(k == kk)
        cond = bundle.conditional(int(kk))
        z = rng.standard_normal((bundle.latent.dim, sel.size))
        theta[sel] = cond.sample(z).T
        sigma[sel] = bundle.hyper(int(kk)).sigma_eps
    return JointSamples(k, theta, sigma)


def model_context(bundle):
    ctx = bundle.info.get("model")
    if ctx is None or getattr(bundle, "mesh", None) is None:
        raise PredictionError("bundle carries no model context; fit it from an assembled model")
    spec = ModelSpec(tuple(ctx["fixed"]), tuple(ctx["varying"]), ctx["intercept_field"],
                     ctx["varying_fields"], ctx["temporal"])
    std = {k: tuple(v) for k, v in ctx["standardization"].items()}
    return spec, std, ctx


def prediction_design(bundle, request):
    """Joint design A* = [F* | V*] for the request rows."""
    spec, std, ctx = model_context(bundle)
    n_time = ctx["n_time"]
    if spec.temporal and max(request.times) >= n_time:
        raise PredictionError(f"time index beyond the fitted range 0..{n_time - 1}")
    locs, times = request.rows()
    needed = list(spec.fixed) + list(spec.varying)
    point = {k: np.asarray(v, dtype=float).T.ravel() for k, v in request.point_covariates.items()}
    try:
        values, _ = covariate_values(locs, times, request.covariates, point, needed)
    except OutsideGridError as exc:
        idx = sorted({i % len(request.locations) for i in exc.indices})
        raise PredictionError(f"prediction locations outside covariate extent: {idx[:20]}", idx) from exc
    except AssemblyError as exc:
        raise PredictionError(str(exc)) from exc
    try:
        F, _, blocks = build_design(locs, times, values, bundle.mesh, n_time, spec, std)
    except OutsideDomainError as exc:
        idx = sorted({i % len(request.locations) for i in exc.indices})
        raise PredictionError(f"prediction locations outside the mesh: {idx[:20]}", idx) from exc
    return sp.hstack([sp.csr_matrix(F)] + [b.V for b in blocks], format="csr"), ctx["transform"]


def predict(bundle, request, n_samples=1000, seed=0, include_noise=False):
    """Posterior predictive sample cube on the original scale."""
    A, tag = prediction_design(bundle, request)
    draws = sample_joint(bundle, n_samples, seed)
    eta = np.asarray(A @ draws.theta.T)  # (rows, n_samples)
    if include_noise:
        noise_rng = np.random.default_rng([seed, 1])
        eta = eta + noise_rng.standard_normal(eta.shape) * draws.sigma_eps[None, :]
    if request.inverse_transform:
        eta = inverse_transform(eta, tag)
    n_loc, n_t = len(request.locations), len(request.times)
    cube = eta.T.reshape(n_samples, n_t, n_loc).transpose(0, 2, 1)
    if not np.all(np.isfinite(cube)):
        raise PredictionError("non-finite predictive samples")
    return SampleCube(np.ascontiguousarray(cube), int(seed), bundle_fingerprint(bundle), request.times)


def _summary(samples, thresholds):
    # samples (n_samples, ...) -> statistics over axis 0
    q = np.quantile(samples, [0.025, 0.5, 0.975], axis=0)  # linear interpolation (type 7)
    ddof = 1 if samples.shape[0] > 1 else 0
    exc = {float(t): np.mean(samples > t, axis=0) for t in thresholds}
    return SummaryRaster(q[1], samples.mean(axis=0), samples.std(axis=0, ddof=ddof), q[0], q[2], exc)


def summarize(cube, thresholds=()):
    samples = cube.samples if isinstance(cube, SampleCube) else np.asarray(cube, dtype=float)
    if samples.shape[0] < 1:
        raise PredictionError("empty sample set")
    return _summary(samples, thresholds)


@dataclass
class WeightedSeries:
    samples: np.ndarray  # (n_samples, n_times)
    median: np.ndarray
    q025: np.ndarray
    q975: np.ndarray


def population_weighted(cube, population):
    """Population-weighted mean per sample and time."""
    w = np.asarray(population, dtype=float).ravel()
    n_loc = cube.samples.shape[1]
    if w.size != n_loc:
        raise MisalignmentError(f"population has {w.size} cells but the cube has {n_loc} locations")
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise PredictionError("population weights must be finite and non-negative")
    if w.sum() <= 0:
        raise PredictionError("population weights are all zero")
    s = np.einsum("slt,l->st", cube.samples, w) / w.sum()
    q = np.quantile(s, [0.025, 0.5, 0.975], axis=0)
    return WeightedSeries(s, q[1], q[0], q[2])


@dataclass
class DifferenceResult:
    samples: np.ndarray  # (n_samples, n_locations)
    summary: SummaryRaster


def difference(cube, t_a, t_b, thresholds=()):
    """Paired within-sample change value(t_b) - value(t_a) per location."""
    a, b = cube.time_position(t_a), cube.time_position(t_b)
    d = cube.samples[:, :, b] - cube.samples[:, :, a]
    return DifferenceResult(d, _summary(d[:, :, None], thresholds))


# -- export ------------------------------------------------------------------------


def write_cube(path, cube):
    """Binary cube: magic, uint64 n_samples/n_locations/n_times, int64 seed, then
    float64 samples in C order; all little-endian."""
    s, n, t = cube.samples.shape
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<QQQq", s, n, t, cube.seed))
        fh.write(np.ascontiguousarray(cube.samples, dtype="<f8").tobytes())


def read_cube(path):
    with open(path, "rb") as fh:
        if fh.read(8) != CUBE_MAGIC:
            raise PredictionError(f"{path}: not a sample cube file")
        s, n, t, seed = struct.unpack("<QQQq", fh.read(32))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != s * n * t:
        raise PredictionError(f"{path}: truncated sample cube")
    return SampleCube(data.reshape(s, n, t).astype(float), int(seed), "", tuple(range(t)))


def summary_rasters(summary, template, times, prefix="pred"):
    """One ``GridCovariate`` per statistic per time on the template grid.

    Locations must be the template centroids in row-major order.
    """
    n_loc = summary.median.shape[0]
    if n_loc != template.nrows * template.ncols:
        raise MisalignmentError(
            f"{n_loc} locations do not fill a {template.nrows}x{template.ncols} raster")
    out = {}
    stats = {name: getattr(summary, name) for name in SummaryRaster.STATISTICS}
    for thr, arr in summary.exceedance.items():
        stats[f"exceed_{thr:g}"] = arr
    for name, arr in stats.items():
        for j, t in enumerate(times):
            grid = arr[:, j].reshape(template.nrows, template.ncols)
            key = f"{prefix}_{name}_t{t}"
            out[key] = GridCovariate(key, template.x0, template.y0, template.dx, template.dy, grid)
    return out
