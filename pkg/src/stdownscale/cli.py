"""Command-line front end: ``stdownscale {mesh,fit,predict,cv,simstudy}``.

Every command is driven by one INI config file (see ``config.example.ini``
in the repository root for an annotated example) and copies the resolved config
into its output directory.  Exit codes: 0 success, 2 config or I/O problem,
3 non-convergence, 4 data misalignment.
"""

import argparse
import configparser
import csv
import json
import logging
import os
import sys
import warnings

import numpy as np

from .assembly import AssemblyError, GridCovariate, MisalignmentError, ModelSpec, ObservationTable, assemble
from .evaluation import (
    MeshSettings, MetricRow, Scenario, SimulationConfig, compute_metrics, generate_dataset,
    metric_table_text, run_model_comparison, stratified_splits, summarize_metrics, write_metric_csv,
)
from .inference import ConvergenceError, FitConfig, PosteriorBundle, fit, hyper_names
from .mesh import Mesh, MeshError, build_mesh
from .predict import (
    DEFAULT_THRESHOLDS, PredictionError, PredictionRequest, difference, population_weighted,
    predict, summarize, summary_rasters, write_cube,
)
from .priors import PriorConfig
from .sparse import NotPositiveDefiniteError

log = logging.getLogger("stdownscale")

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_MISALIGNED = 0, 2, 3, 4


class ConfigError(Exception):
    pass


# section -> key -> (type, default); None default means "no value"
SCHEMA = {
    "run": {"seed": (int, None), "out": (str, "out"), "pollutant": (str, "")},
    "data": {
        "observations": (str, None), "covariates": (list, []), "population": (str, None),
        "mesh": (str, None),
    },
    "model": {
        "preset": (str, "iii"), "fixed": (list, []), "varying": (list, []),
        "transform": (str, "none"),
    },
    "mesh": {
        "max_edge_inner": (float, None), "max_edge_outer": (float, None),
        "buffer_width": (float, None), "cutoff": (float, 0.0), "min_angle": (float, 21.0),
    },
    "prior": {
        "sd_u": (float, 1.0), "sd_alpha": (float, 0.1), "range_r0": (float, 0.1),
        "range_alpha": (float, 0.1), "range_mode": (str, "range"), "rho_r": (float, 0.0),
        "rho_alpha": (float, 0.9),
    },
    "inference": {
        "strategy": (str, "grid"), "step": (float, 1.0), "prune": (float, 5.0),
        "max_iter": (int, 200), "gtol": (float, 1e-4), "xtol": (float, 1e-6),
        "fd_step": (float, 1e-4), "max_points": (int, 5000),
    },
    "predict": {
        "bundle": (str, None), "grid": (str, None), "times": (list, []),
        "n_samples": (int, 1000), "thresholds": (list, None), "include_noise": (bool, False),
        "difference": (list, []), "write_cube": (bool, False),
    },
    "cv": {
        "n_splits": (int, 25), "train_fraction": (float, 0.8), "strata": (list, ["t"]),
        "models": (list, ["i", "ii", "iii"]), "population_column": (str, None),
        "n_samples": (int, 200), "include_noise": (bool, True),
    },
    "simstudy": {
        "n_datasets": (int, 10), "ncols": (int, 100), "nrows": (int, 100), "cell": (float, 1.0),
        "n_sites": (int, 500), "models": (list, ["i", "ii", "iii"]), "strategy": (str, "eb"),
        "beta0": (float, 1.0), "beta1": (float, 0.75), "range0": (float, 10.0),
        "sigma2_0": (float, 0.2), "range1": (float, 15.0), "sigma2_1": (float, 0.01),
        "sigma2_eps": (float, 0.1), "n_time": (int, 1), "rho": (float, 0.0),
        "sim_max_edge": (float, 1.5), "mesh_max_edge_inner": (float, 4.0),
        "mesh_max_edge_outer": (float, 12.0), "mesh_buffer_width": (float, 20.0),
        "mesh_cutoff": (float, 1.0),
    },
}


def _convert(section, key, kind, raw):
    try:
        if kind is list:
            return [x.strip() for x in raw.split(",") if x.strip()]
        if kind is bool:
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def load_config(path, overrides=None):
    """Parse and validate a config file into a nested dict of typed values."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    base = os.path.dirname(os.path.abspath(path))
    cfg = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key [{section}] {key}")
    for section, keys in SCHEMA.items():
        cfg[section] = {}
        for key, (kind, default) in keys.items():
            if cp.has_option(section, key):
                cfg[section][key] = _convert(section, key, kind, cp[section][key])
            else:
                cfg[section][key] = default
    for key in ("observations", "population", "mesh"):
        v = cfg["data"][key]
        if v:
            cfg["data"][key] = os.path.join(base, v)
    cfg["data"]["covariates"] = [os.path.join(base, v) for v in cfg["data"]["covariates"]]
    if cfg["predict"]["bundle"]:
        cfg["predict"]["bundle"] = os.path.join(base, cfg["predict"]["bundle"])
    for key, value in (overrides or {}).items():
        if value is not None:
            section, name = key.split(".")
            cfg[section][name] = value
    if cfg["run"]["seed"] is None:
        raise ConfigError("[run] seed is required (no silent nondeterminism)")
    if cfg["model"]["preset"] not in ("i", "ii", "iii", "iv"):
        raise ConfigError(f"[model] preset: unknown value {cfg['model']['preset']!r}")
    return cfg


def write_resolved_config(cfg, out_dir):
    cp = configparser.ConfigParser(interpolation=None)
    for section, keys in cfg.items():
        cp[section] = {}
        for key, value in keys.items():
            if value is None:
                continue
            if isinstance(value, list):
                value = ", ".join(map(str, value))
            cp[section][key] = str(value).lower() if isinstance(value, bool) else str(value)
    with open(os.path.join(out_dir, "resolved_config.ini"), "w") as fh:
        cp.write(fh)


def _require_file(path, what):
    if not path:
        raise ConfigError(f"{what} path is not configured")
    if not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


# -- loading helpers ----------------------------------------------------------------


def load_observations(cfg):
    path = _require_file(cfg["data"]["observations"], "observations")
    return ObservationTable.read_csv(path, cfg["model"]["transform"])


def load_covariates(cfg):
    roles = {n: "fixed" for n in cfg["model"]["fixed"]}
    roles.update({n: "varying" for n in cfg["model"]["varying"]})
    grids = []
    for path in cfg["data"]["covariates"]:
        g = GridCovariate.read(_require_file(path, "covariate raster"))
        g.role = roles.get(g.name, "fixed")
        grids.append(g)
    names = {g.name for g in grids}
    missing = [n for n in roles if n not in names]
    if missing:
        raise ConfigError(f"model covariates without a raster: {', '.join(missing)}")
    return grids


def unique_sites(obs):
    _, first = np.unique(obs.site_id, return_index=True)
    first = np.sort(first)
    return obs.locations[first]


def mesh_settings(cfg):
    m = cfg["mesh"]
    missing = [k for k in ("max_edge_inner", "max_edge_outer", "buffer_width") if m[k] is None]
    if missing:
        raise ConfigError(f"[mesh] missing keys: {', '.join(missing)}")
    return m


def make_mesh(cfg, obs):
    m = mesh_settings(cfg)
    return build_mesh(unique_sites(obs), m["max_edge_inner"], m["max_edge_outer"],
                      m["buffer_width"], m["cutoff"], min_angle=m["min_angle"])


def get_mesh(cfg, obs, out_dir):
    path = cfg["data"]["mesh"]
    if path and os.path.isfile(path):
        return Mesh.read(path)
    mesh = make_mesh(cfg, obs)
    mesh.write(path or os.path.join(out_dir, "mesh.txt"))
    return mesh


def fit_config(cfg):
    inf = cfg["inference"]
    if inf["strategy"] not in ("grid", "eb"):
        raise ConfigError(f"[inference] strategy: unknown value {inf['strategy']!r}")
    try:
        prior = PriorConfig(**cfg["prior"])
    except ValueError as exc:
        raise ConfigError(f"[prior] {exc}") from None
    return FitConfig(strategy=inf["strategy"], step=inf["step"], prune=inf["prune"],
                     max_iter=inf["max_iter"], gtol=inf["gtol"], xtol=inf["xtol"],
                     fd_step=inf["fd_step"], max_points=inf["max_points"], prior=prior)


def model_spec(cfg, label=None):
    m = cfg["model"]
    return ModelSpec.preset(label or m["preset"], fixed=m["fixed"], varying=m["varying"])


def n_time_of(obs, grids):
    nt = int(obs.t.max()) + 1
    return max([nt] + [g.ntime for g in grids])


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False, default=_json_default)
        fh.write("\n")


def fit_report_text(report):
    lines = [f"strategy {report['strategy']}  K {report['K']}  converged {report['converged']} "
             f"({report['stop_reason']}, {report['iterations']} iterations, "
             f"{report['evaluations']} evaluations, |grad| {report['grad_norm']:.2e})",
             f"{'parameter':<24}{'mean':>12}{'sd':>12}{'q0.025':>12}{'q0.5':>12}{'q0.975':>12}"]
    for group in ("fixed_effects", "hyperparameters"):
        for name, s in report[group].items():
            lines.append(f"{name:<24}" + "".join(
                f"{s[k]:>12.5g}" for k in ("mean", "sd", "q025", "q50", "q975")))
    return "\n".join(lines) + "\n"


# -- commands ---------------------------------------------------------------------------


def cmd_mesh(cfg, out_dir):
    obs = load_observations(cfg)
    mesh = make_mesh(cfg, obs)
    path = cfg["data"]["mesh"] or os.path.join(out_dir, "mesh.txt")
    mesh.write(path)
    q = np.quantile(mesh.edge_lengths(), [0, 0.25, 0.5, 0.75, 1.0])
    print(f"mesh: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles -> {path}")
    print("edge length quantiles (0, 25, 50, 75, 100%): " + " ".join(f"{v:.4g}" for v in q))
    return EXIT_OK


def cmd_fit(cfg, out_dir):
    obs = load_observations(cfg)
    grids = load_covariates(cfg)
    spec = model_spec(cfg)
    mesh = get_mesh(cfg, obs, out_dir)
    model = assemble(obs, grids, mesh, n_time_of(obs, grids), spec)
    fc = fit_config(cfg)
    try:
        bundle = fit(model, fc)
    except ConvergenceError as exc:
        names = hyper_names(spec.field_names, [spec.temporal] * len(spec.field_names))
        best = {}
        if exc.best_z is not None:
            best = dict(zip(names, map(float, exc.best_z)))
        write_json(os.path.join(out_dir, "fit_report.json"),
                   dict(converged=False, message=str(exc), grad_norm=exc.grad_norm, best_point_z=best))
        raise
    bundle.save(os.path.join(out_dir, "bundle.npz"))
    report = bundle.report()
    write_json(os.path.join(out_dir, "fit_report.json"), report)
    with open(os.path.join(out_dir, "fit_report.txt"), "w") as fh:
        fh.write(fit_report_text(report))
    print(fit_report_text(report), end="")
    return EXIT_OK


def _thresholds(cfg):
    if cfg["predict"]["thresholds"] is not None:
        return tuple(float(t) for t in cfg["predict"]["thresholds"])
    return DEFAULT_THRESHOLDS.get(cfg["run"]["pollutant"].lower(), ())


def cmd_predict(cfg, out_dir):
    bundle_path = _require_file(cfg["predict"]["bundle"] or os.path.join(out_dir, "bundle.npz"), "bundle")
    bundle = PosteriorBundle.load(bundle_path)
    grids = load_covariates(cfg)
    ctx = bundle.info["model"]
    template_name = cfg["predict"]["grid"] or (ctx["varying"] + ctx["fixed"] + [g.name for g in grids])[0]
    template = next((g for g in grids if g.name == template_name), None)
    if template is None:
        raise ConfigError(f"[predict] grid: no raster named {template_name!r}")
    times = [int(t) for t in cfg["predict"]["times"]] or list(range(ctx["n_time"]))
    thresholds = _thresholds(cfg)
    request = PredictionRequest(template.centroids(), times, grids, thresholds=thresholds)
    seed = cfg["run"]["seed"]
    cube = predict(bundle, request, cfg["predict"]["n_samples"], seed, cfg["predict"]["include_noise"])
    raster_dir = os.path.join(out_dir, "rasters")
    os.makedirs(raster_dir, exist_ok=True)
    summ = summarize(cube, thresholds)
    for name, g in summary_rasters(summ, template, times).items():
        g.write(os.path.join(raster_dir, f"{name}.txt"))
    if cfg["predict"]["write_cube"]:
        write_cube(os.path.join(out_dir, "samples.cube"), cube)
    if cfg["data"]["population"]:
        pop = GridCovariate.read(_require_file(cfg["data"]["population"], "population raster"))
        if not pop.same_grid(template):
            raise MisalignmentError(
                f"population raster is {pop.nrows}x{pop.ncols} (cell {pop.dx:g}x{pop.dy:g}) but the "
                f"prediction grid is {template.nrows}x{template.ncols} (cell {template.dx:g}x{template.dy:g})")
        pw = population_weighted(cube, pop.values[0].ravel())
        with open(os.path.join(out_dir, "population_weighted.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "median", "q025", "q975"])
            for j, t in enumerate(times):
                w.writerow([t, f"{pw.median[j]:.10g}", f"{pw.q025[j]:.10g}", f"{pw.q975[j]:.10g}"])
    if cfg["predict"]["difference"]:
        ta, tb = (int(v) for v in cfg["predict"]["difference"])
        diff = difference(cube, ta, tb, ())
        for name, g in summary_rasters(diff.summary, template, [tb], prefix=f"diff{ta}").items():
            g.write(os.path.join(raster_dir, f"{name}.txt"))
    print(f"predicted {len(request.locations)} cells x {len(times)} time(s), "
          f"{cube.n_samples} samples -> {raster_dir}")
    return EXIT_OK


def _stratum_labels(obs, columns):
    cols = []
    for c in columns:
        if c == "t":
            cols.append(obs.t.astype(str))
        elif c == "site_id":
            cols.append(obs.site_id)
        elif c in obs.extra:
            cols.append(obs.extra[c].astype(str))
        else:
            raise ConfigError(f"[cv] strata: no observation column {c!r}")
    return list(zip(*cols))


def predict_rows(bundle, obs, grids, n_samples, seed, include_noise):
    """Posterior predictive mean (original scale) at each observation row."""
    out = np.empty(len(obs))
    for t in np.unique(obs.t):
        rows = np.flatnonzero(obs.t == t)
        req = PredictionRequest(obs.locations[rows], (int(t),), grids)
        cube = predict(bundle, req, n_samples, seed, include_noise)
        out[rows] = cube.samples[:, :, 0].mean(axis=0)
    return out


def cmd_cv(cfg, out_dir):
    obs = load_observations(cfg)
    grids = load_covariates(cfg)
    mesh = get_mesh(cfg, obs, out_dir)
    n_time = n_time_of(obs, grids)
    c = cfg["cv"]
    seed = cfg["run"]["seed"]
    strata = _stratum_labels(obs, c["strata"])
    splits = stratified_splits(strata, c["n_splits"], c["train_fraction"], seed)
    pop = None
    if c["population_column"]:
        if c["population_column"] not in obs.extra:
            raise ConfigError(f"[cv] population_column: no column {c['population_column']!r}")
        pop = obs.extra[c["population_column"]].astype(float)
    fc = fit_config(cfg)
    rows = []
    for label in c["models"]:
        spec = model_spec(cfg, label)
        for i, (tr, va) in enumerate(splits):
            train = obs.subset(tr)
            bundle = fit(assemble(train, grids, mesh, n_time, spec), fc)
            for sample, idx in (("in", tr), ("out", va)):
                sub = obs.subset(idx)
                pred = predict_rows(bundle, sub, grids, c["n_samples"], seed + i, c["include_noise"])
                r2, rmse, pw = compute_metrics(pred, sub.value, None if pop is None else pop[idx])
                rows.append(MetricRow(label, i, sample, r2, rmse, pw))
            log.info("cv model %s split %d done", label, i)
    write_metric_csv(rows, os.path.join(out_dir, "cv_metrics.csv"))
    text = metric_table_text(rows)
    med = summarize_metrics(rows)
    text += "\nmedians across splits\n" + "".join(
        f"{m:<7}{s:>8}{v['r2']:>10.4f}{v['rmse']:>10.4f}{v['pwrmse']:>10.4f}\n" for (m, s), v in med.items())
    with open(os.path.join(out_dir, "cv_metrics.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")
    return EXIT_OK


def cmd_simstudy(cfg, out_dir):
    s = cfg["simstudy"]
    sim_keys = ("n_datasets", "ncols", "nrows", "cell", "n_sites", "beta0", "beta1", "range0",
                "sigma2_0", "range1", "sigma2_1", "sigma2_eps", "n_time", "rho", "sim_max_edge")
    try:
        sc_cfg = SimulationConfig(seed=cfg["run"]["seed"], **{k: s[k] for k in sim_keys})
    except ValueError as exc:
        raise ConfigError(f"[simstudy] {exc}") from None
    scenario = Scenario(sc_cfg)
    datasets = [generate_dataset(sc_cfg, i, scenario) for i in range(sc_cfg.n_datasets)]
    ms = MeshSettings(s["mesh_max_edge_inner"], s["mesh_max_edge_outer"], s["mesh_buffer_width"],
                      s["mesh_cutoff"])
    fc = fit_config(cfg)
    fc.strategy = s["strategy"]
    table = run_model_comparison(
        datasets, tuple(s["models"]), ms, fc,
        progress=lambda d, m, e: log.info("dataset %d model %s done", d, m))
    text = table.to_text()
    with open(os.path.join(out_dir, "bias_table.txt"), "w") as fh:
        fh.write(text)
    table.write_csv(os.path.join(out_dir, "bias_table.csv"))
    print(text, end="")
    return EXIT_OK


COMMANDS = {"mesh": cmd_mesh, "fit": cmd_fit, "predict": cmd_predict, "cv": cmd_cv,
            "simstudy": cmd_simstudy}


def build_parser():
    p = argparse.ArgumentParser(prog="stdownscale", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--out", help="output directory (overrides [run] out)")
    p.add_argument("--seed", type=int, help="random seed (overrides [run] seed)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"run.out": args.out, "run.seed": args.seed})
        out_dir = cfg["run"]["out"]
        if not os.path.isabs(out_dir) and args.out is None:
            out_dir = os.path.join(os.path.dirname(os.path.abspath(args.config)), out_dir)
        os.makedirs(out_dir, exist_ok=True)
        cfg["run"]["out"] = out_dir
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    write_resolved_config(cfg, out_dir)
    # timestamps live only in the log file
    handler = logging.FileHandler(os.path.join(out_dir, f"{args.command}.log"), mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    logging.captureWarnings(True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](cfg, out_dir)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (MisalignmentError, PredictionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISALIGNED
    except (ConfigError, OSError, AssemblyError, MeshError, NotPositiveDefiniteError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        root.removeHandler(handler)
        handler.close()


if __name__ == "__main__":
    sys.exit(main())
