"""Simulation study, model comparison, stratified cross-validation and metrics.

The synthetic scenario mimics the downscaling setting at desk scale: a
square-rooted CTM-like raster with urban hotspots, monitors placed
preferentially in polluted cells with a per-cell multiplicity profile taken
from the observed distribution of monitors per CTM cell, and responses

    Y_s = (b0 + w0(s)) + (b1 + w1(s)) X(cell(s)) + eps_s

with w0, w1 drawn from SPDE Matérn fields on a simulation mesh.
"""

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .assembly import GridCovariate, ModelSpec, ObservationTable, assemble
from .inference import ConvergenceError, FitConfig, fit
from .mesh import build_mesh
from .spacetime import Ar1Params, ar1_precision, kronecker
from .sparse import NotPositiveDefiniteError, SparseCholesky
from .spde import MaternParams, assemble_fem, precision_alpha2

log = logging.getLogger(__name__)

# monitors per occupied CTM cell: 1..7 and "8+" (counted as 8)
CELL_MULTIPLICITY = np.array([1258, 270, 98, 40, 16, 10, 6, 9], dtype=float)

TABLE2_TRUTH = dict(
    beta0=1.0, range0=10.0, sigma2_0=0.2, beta1=0.75, range1=15.0, sigma2_1=0.01, sigma2_eps=0.1
)


@dataclass
class SimulationConfig:
    ncols: int = 100
    nrows: int = 100
    cell: float = 1.0
    n_sites: int = 500
    n_hotspots: int = 40
    beta0: float = TABLE2_TRUTH["beta0"]
    beta1: float = TABLE2_TRUTH["beta1"]
    range0: float = TABLE2_TRUTH["range0"]
    sigma2_0: float = TABLE2_TRUTH["sigma2_0"]
    range1: float = TABLE2_TRUTH["range1"]
    sigma2_1: float = TABLE2_TRUTH["sigma2_1"]
    sigma2_eps: float = TABLE2_TRUTH["sigma2_eps"]
    n_datasets: int = 10
    seed: int = 2019
    sim_max_edge: float = 1.5
    sim_buffer: float = 20.0
    n_time: int = 1
    rho: float = 0.0
    covariate: GridCovariate = None
    sites: np.ndarray = None

    def __post_init__(self):
        for name in ("sigma2_0", "sigma2_1", "sigma2_eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (self.range0 > 0 and self.range1 > 0):
            raise ValueError("ranges must be positive")


def synthetic_ctm(config, rng):
    """Square root of a smooth hotspot concentration surface (ntime copies).

    With several times the level drifts down a little each step, mimicking
    improving annual averages.
    """
    W, H = config.ncols * config.cell, config.nrows * config.cell
    cx = (np.arange(config.ncols) + 0.5) * config.cell
    cy = (np.arange(config.nrows) + 0.5) * config.cell
    X, Y = np.meshgrid(cx, cy)
    base = 6.0 + 6.0 * (X / W) + 4.0 * np.sin(2 * np.pi * Y / H)
    conc = base.copy()
    for _ in range(config.n_hotspots):
        c = rng.uniform([0, 0], [W, H])
        width = rng.uniform(0.015, 0.06) * min(W, H)
        amp = rng.uniform(10.0, 50.0)
        conc += amp * np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2) / (2 * width**2))
    vals = np.stack([np.sqrt(conc * (1.0 - 0.03 * t)) for t in range(config.n_time)])
    return GridCovariate("ctm", 0.0, 0.0, config.cell, config.cell, vals, role="varying")


def synthetic_sites(config, covariate, rng):
    """Monitor locations: occupied cells drawn proportional to pollution,
    per-cell counts from the multiplicity profile, uniform within cells."""
    p_mult = CELL_MULTIPLICITY / CELL_MULTIPLICITY.sum()
    counts = []
    while sum(counts) < config.n_sites:
        counts.append(int(rng.choice(np.arange(1, 9), p=p_mult)))
    counts[-1] -= sum(counts) - config.n_sites
    weight = covariate.values[0].ravel() ** 2
    cells = rng.choice(weight.size, size=len(counts), replace=False, p=weight / weight.sum())
    rows, cols = np.divmod(cells, config.ncols)
    pts = []
    for r, c, m in zip(rows, cols, counts):
        u = rng.uniform(0.0, 1.0, size=(m, 2))
        pts.append(np.column_stack([(c + u[:, 0]) * config.cell, (r + u[:, 1]) * config.cell]))
    return np.concatenate(pts)


class Scenario:
    """Covariate, sites and simulation mesh shared by all datasets of a config."""

    def __init__(self, config):
        self.config = config
        rng = np.random.default_rng([config.seed, 0])
        self.covariate = config.covariate or synthetic_ctm(config, rng)
        self.sites = config.sites if config.sites is not None else synthetic_sites(
            config, self.covariate, rng)
        self.mesh = build_mesh(self.sites, config.sim_max_edge, 4 * config.sim_max_edge,
                               config.sim_buffer, 0.0)
        self.fem = assemble_fem(self.mesh)
        self.projector = self.mesh.projector(self.sites)

    def field_precision(self, range_, sigma2):
        Q = precision_alpha2(self.fem, MaternParams(range_, np.sqrt(sigma2)))
        if self.config.n_time > 1:
            Q = kronecker(ar1_precision(Ar1Params(self.config.rho, self.config.n_time)), Q)
        return Q


def _draw_field(scenario, range_, sigma2, rng):
    nv = scenario.mesh.n_vertices
    nt = scenario.config.n_time
    if sigma2 == 0:
        return np.zeros((nt, nv))
    Q = scenario.field_precision(range_, sigma2)
    fac = SparseCholesky(Q)
    return fac.sample_centered(rng.standard_normal(Q.shape[0])).reshape(nt, nv)


def generate_dataset(config, dataset_index, scenario=None):
    """One synthetic dataset: (ObservationTable, GridCovariate, truth dict)."""
    scenario = scenario or Scenario(config)
    rng = np.random.default_rng([config.seed, 1, dataset_index])
    w0 = _draw_field(scenario, config.range0, config.sigma2_0, rng)
    w1 = _draw_field(scenario, config.range1, config.sigma2_1, rng)
    sites = scenario.sites
    n = len(sites)
    P = scenario.projector
    cov = scenario.covariate
    ids, xs, ys, ts, vals = [], [], [], [], []
    for t in range(config.n_time):
        X = cov.sample(sites, np.full(n, t))
        eps = rng.normal(0.0, np.sqrt(config.sigma2_eps), n) if config.sigma2_eps > 0 else 0.0
        y = config.beta0 + P @ w0[t] + (config.beta1 + P @ w1[t]) * X + eps
        ids.append([f"s{i:04d}" for i in range(n)])
        xs.append(sites[:, 0])
        ys.append(sites[:, 1])
        ts.append(np.full(n, t))
        vals.append(y)
    obs = ObservationTable(
        np.concatenate(ids), np.concatenate(xs), np.concatenate(ys), np.concatenate(ts),
        np.concatenate(vals), "none",
    )
    truth = dict(beta0=config.beta0, beta1=config.beta1, range0=config.range0,
                 sigma2_0=config.sigma2_0, range1=config.range1, sigma2_1=config.sigma2_1,
                 sigma2_eps=config.sigma2_eps)
    return obs, cov, truth


# -- model comparison ------------------------------------------------------------------

MODEL_LABELS = ("i", "ii", "iii", "iv")
PARAMETERS = ("beta0", "range0", "sigma2_0", "beta1", "range1", "sigma2_1", "sigma2_eps")


@dataclass
class MeshSettings:
    max_edge_inner: float = 4.0
    max_edge_outer: float = 12.0
    buffer_width: float = 20.0
    cutoff: float = 1.0


def estimates_from_bundle(bundle, covariate_name="ctm"):
    """Posterior medians keyed like ``PARAMETERS`` (absent ones omitted)."""
    fx = bundle.fixed_marginals()
    hy = bundle.hyper_marginals()
    out = {"beta0": fx["intercept"]["q50"], "sigma2_eps": hy["sigma2_eps"]["q50"]}
    if covariate_name in fx:
        out["beta1"] = fx[covariate_name]["q50"]
    if "range[intercept]" in hy:
        out["range0"] = hy["range[intercept]"]["q50"]
        out["sigma2_0"] = hy["sigma2[intercept]"]["q50"]
    if f"range[{covariate_name}]" in hy:
        out["range1"] = hy[f"range[{covariate_name}]"]["q50"]
        out["sigma2_1"] = hy[f"sigma2[{covariate_name}]"]["q50"]
    return out


@dataclass
class BiasTable:
    truth: dict
    estimates: dict  # model -> list of per-dataset dicts
    failures: dict = field(default_factory=dict)

    def median_estimate(self, model, param):
        vals = [e[param] for e in self.estimates.get(model, []) if param in e]
        return float(np.median(vals)) if vals else np.nan

    def median_bias(self, model, param):
        vals = [e[param] - self.truth[param] for e in self.estimates.get(model, []) if param in e]
        return float(np.median(vals)) if vals else np.nan

    def rows(self):
        models = [m for m in MODEL_LABELS if m in self.estimates]
        out = []
        for p in PARAMETERS:
            row = [p, self.truth.get(p, np.nan)]
            for m in models:
                row += [self.median_estimate(m, p), self.median_bias(m, p)]
            out.append(row)
        return models, out

    def to_text(self):
        models, rows = self.rows()
        head = f"{'parameter':<12}{'true':>10}" + "".join(
            f"{'(' + m + ') est':>14}{'(' + m + ') bias':>14}" for m in models)
        lines = [head]
        for r in rows:
            cells = [f"{r[0]:<12}", f"{r[1]:>10.4g}"]
            for v in r[2:]:
                cells.append(f"{'-':>14}" if np.isnan(v) else f"{v:>14.4f}")
            lines.append("".join(cells))
        n = {m: len(v) for m, v in self.estimates.items()}
        lines.append(f"datasets per model: {n}; failures: {self.failures or 'none'}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        models, rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "true"] + [f"{m}_{k}" for m in models for k in ("estimate", "bias")])
            for r in rows:
                w.writerow([r[0]] + ["" if np.isnan(v) else f"{v:.6g}" for v in r[1:]])


def run_model_comparison(datasets, labels=("i", "ii", "iii"), mesh_settings=None,
                         fit_config=None, covariate_name="ctm", mesh=None, progress=None):
    """Fit each model preset to each dataset and tabulate median estimates/bias.

    ``datasets`` is a sequence of (ObservationTable, GridCovariate, truth).
    Fit failures are recorded per model and left out of the medians.
    """
    mesh_settings = mesh_settings or MeshSettings()
    fit_config = fit_config or FitConfig(strategy="eb")
    estimates = {m: [] for m in labels}
    failures = {}
    truth = None
    meshes = {}
    for di, (obs, cov, tr) in enumerate(datasets):
        truth = truth or tr
        n_time = int(obs.t.max()) + 1
        key = obs.locations.tobytes()
        if mesh is not None:
            m_ = mesh
        elif key in meshes:
            m_ = meshes[key]
        else:
            m_ = meshes[key] = build_mesh(
                obs.locations, mesh_settings.max_edge_inner, mesh_settings.max_edge_outer,
                mesh_settings.buffer_width, mesh_settings.cutoff)
        for label in labels:
            spec = ModelSpec.preset(label, varying=[covariate_name])
            try:
                model = assemble(obs, [cov], m_, n_time, spec)
                bundle = fit(model, fit_config)
            except (ConvergenceError, NotPositiveDefiniteError, RuntimeError, ValueError) as exc:
                failures.setdefault(label, []).append((di, str(exc)))
                log.warning("model %s failed on dataset %d: %s", label, di, exc)
                continue
            estimates[label].append(estimates_from_bundle(bundle, covariate_name))
            if progress:
                progress(di, label, estimates[label][-1])
    return BiasTable(truth or {}, estimates, failures)


# -- cross-validation -----------------------------------------------------------------------


def stratified_splits(strata, n_splits=25, train_fraction=0.8, seed=0):
    """Repeated stratified train/validation partitions.

    Validation counts per stratum are floor(q n_s) plus one for the strata
    with the largest remainders, so the overall validation size is
    round(q N) with q = 1 - train_fraction.  Singleton strata always train.
    Returns a list of (train_idx, val_idx) sorted index arrays.
    """
    labels = np.asarray([tuple(s) if isinstance(s, (list, tuple)) else s for s in strata], dtype=object)
    keys = np.array(["\x1f".join(map(str, k)) if isinstance(k, tuple) else str(k) for k in labels])
    uniq, inv = np.unique(keys, return_inverse=True)
    N = len(keys)
    q = 1.0 - train_fraction
    sizes = np.bincount(inv, minlength=len(uniq))
    single = sizes == 1
    if single.any():
        warnings.warn(f"{int(single.sum())} stratum/strata of size 1 always assigned to training")
    quota = q * sizes
    base = np.floor(quota + 1e-9).astype(int)
    frac = np.where(single, -1.0, quota - base)
    base[single] = 0
    target = int(np.floor(q * N + 0.5))
    extra = max(0, target - int(base.sum()))
    members = [np.flatnonzero(inv == s) for s in range(len(uniq))]
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_splits):
        # ties in the remainders are broken at random, per split
        order = np.lexsort((rng.permutation(len(uniq)), -frac))
        n_val = base.copy()
        eligible = [s for s in order if frac[s] > 1e-9 and n_val[s] < sizes[s] - 1 + (sizes[s] > 1)]
        for s in eligible[:extra]:
            n_val[s] += 1
        val = []
        for s, idx in enumerate(members):
            if n_val[s]:
                val.append(rng.choice(idx, size=n_val[s], replace=False))
        val = np.sort(np.concatenate(val)) if val else np.array([], dtype=int)
        mask = np.ones(N, dtype=bool)
        mask[val] = False
        out.append((np.flatnonzero(mask), val))
    return out


@dataclass
class MetricRow:
    model: str
    split: int
    sample: str  # "in" or "out"
    r2: float
    rmse: float
    pwrmse: float


def compute_metrics(predicted, observed, population=None):
    """(R^2, RMSE, PwRMSE) on the original scale.

    R^2 is the squared Pearson correlation; it is NaN when the observations
    have zero variance.
    """
    p = np.asarray(predicted, dtype=float)
    o = np.asarray(observed, dtype=float)
    if p.shape != o.shape or p.size < 2:
        raise ValueError("need equal-length vectors with at least 2 entries")
    err = p - o
    rmse = float(np.sqrt(np.mean(err**2)))
    if population is None:
        pw = rmse
    else:
        w = np.asarray(population, dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("population weights must be non-negative and not all zero")
        pw = float(np.sqrt(np.sum(w * err**2) / np.sum(w)))
    if np.ptp(o) == 0 or np.ptp(p) == 0:
        r2 = float("nan")
    else:
        r2 = float(np.corrcoef(p, o)[0, 1] ** 2)
    return r2, rmse, pw


def metric_table_text(rows):
    lines = ["R2 = squared Pearson correlation; all metrics on the original scale",
             f"{'model':<7}{'split':>6}{'sample':>8}{'R2':>10}{'RMSE':>10}{'PwRMSE':>10}"]
    for r in rows:
        r2 = "NA" if np.isnan(r.r2) else f"{r.r2:.4f}"
        lines.append(f"{r.model:<7}{r.split:>6}{r.sample:>8}{r2:>10}{r.rmse:>10.4f}{r.pwrmse:>10.4f}")
    return "\n".join(lines) + "\n"


def write_metric_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "split", "sample", "r2", "rmse", "pwrmse"])
        for r in rows:
            w.writerow([r.model, r.split, r.sample, "" if np.isnan(r.r2) else f"{r.r2:.6g}",
                        f"{r.rmse:.6g}", f"{r.pwrmse:.6g}"])


def summarize_metrics(rows):
    """Median of each metric per (model, sample) across splits."""
    out = {}
    for key in sorted({(r.model, r.sample) for r in rows}):
        sel = [r for r in rows if (r.model, r.sample) == key]
        out[key] = dict(
            r2=float(np.nanmedian([r.r2 for r in sel])) if any(np.isfinite(r.r2) for r in sel) else np.nan,
            rmse=float(np.median([r.rmse for r in sel])),
            pwrmse=float(np.median([r.pwrmse for r in sel])),
        )
    return out
