"""Observation/covariate containers and assembly of the calibration model.

The response is modelled as

    y_it = b0 + sum_p b_p X_p(s_i, t) + sum_q (b_q + w_q(s_i, t)) X_q(cell(s_i), t)
           + w_0(s_i, t) + eps_it

Fixed covariates (role ``fixed``) are centred and scaled over the observation
rows; calibration covariates (role ``varying``, e.g. a CTM) are left on their
own scale so their coefficient stays a calibration slope.  Fixed parts of the
varying coefficients sit in ``F``; the zero-mean field deviations are carried
by sparse projection blocks, one per field.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import OutsideDomainError
from .spde import assemble_fem

TRANSFORMS = ("none", "sqrt", "log")
FIXED_PRIOR_VARIANCE = 1000.0
RASTER_HEADER = ["name", "x0", "y0", "dx", "dy", "ncols", "nrows", "ntime"]


class AssemblyError(ValueError):
    pass


class MisalignmentError(AssemblyError):
    """Inputs that do not line up in space or time."""


class OutsideGridError(MisalignmentError):
    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = list(indices)


# -- response transforms ------------------------------------------------------


def transform_response(values, tag):
    v = np.asarray(values, dtype=float)
    if tag == "none":
        return v.copy()
    if tag == "sqrt":
        bad = np.flatnonzero(~(v >= 0))
        if bad.size:
            raise AssemblyError(f"sqrt transform needs values >= 0; row {bad[0]} is {v[bad[0]]}")
        return np.sqrt(v)
    if tag == "log":
        bad = np.flatnonzero(~(v > 0))
        if bad.size:
            raise AssemblyError(f"log transform needs values > 0; row {bad[0]} is {v[bad[0]]}")
        return np.log(v)
    raise AssemblyError(f"unknown transform {tag!r}; expected one of {TRANSFORMS}")


def inverse_transform(values, tag):
    v = np.asarray(values, dtype=float)
    if tag == "none":
        return v.copy()
    if tag == "sqrt":
        return v * v
    if tag == "log":
        return np.exp(v)
    raise AssemblyError(f"unknown transform {tag!r}")


def altitude_transform(altitude):
    """sqrt(a / max(a)) with a = altitude - min(altitude); constant input -> 0."""
    alt = np.asarray(altitude, dtype=float)
    a = alt - alt.min()
    top = a.max()
    if top == 0:
        return np.zeros_like(a)
    return np.sqrt(a / top)


# -- observations ---------------------------------------------------------------


@dataclass
class ObservationTable:
    site_id: np.ndarray
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    value: np.ndarray
    transform: str = "none"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.site_id = np.asarray(self.site_id).astype(str)
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.t = np.asarray(self.t, dtype=int)
        self.value = np.asarray(self.value, dtype=float)
        self.extra = {k: np.asarray(v) for k, v in self.extra.items()}
        n = len(self.value)
        for name in ("site_id", "x", "y", "t"):
            if len(getattr(self, name)) != n:
                raise AssemblyError(f"column {name} has wrong length")
        if self.transform not in TRANSFORMS:
            raise AssemblyError(f"unknown transform {self.transform!r}")
        if np.any(self.t < 0):
            raise AssemblyError("time indices must be >= 0")
        transform_response(self.value, self.transform)  # domain check
        seen = set()
        for key in zip(self.site_id.tolist(), self.t.tolist()):
            if key in seen:
                raise AssemblyError(f"duplicate (site_id, time_index) = ({key[0]}, {key[1]})")
            seen.add(key)

    def __len__(self):
        return len(self.value)

    @property
    def locations(self):
        return np.column_stack([self.x, self.y])

    def subset(self, idx):
        idx = np.asarray(idx)
        return ObservationTable(
            self.site_id[idx], self.x[idx], self.y[idx], self.t[idx], self.value[idx],
            self.transform, {k: v[idx] for k, v in self.extra.items()},
        )

    def response(self):
        return transform_response(self.value, self.transform)

    @classmethod
    def read_csv(cls, path, transform="none"):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            required = ["site_id", "x", "y", "t", "value"]
            if reader.fieldnames is None or reader.fieldnames[:5] != required:
                raise AssemblyError(f"{path}: header must start with {','.join(required)}")
            rows = list(reader)
        extra_names = reader.fieldnames[5:]
        extra = {}
        for name in extra_names:
            col = [r[name] for r in rows]
            try:
                extra[name] = np.array([float(c) for c in col])
            except ValueError:
                extra[name] = np.array(col)
        return cls(
            [r["site_id"] for r in rows],
            [float(r["x"]) for r in rows],
            [float(r["y"]) for r in rows],
            [int(r["t"]) for r in rows],
            [float(r["value"]) for r in rows],
            transform,
            extra,
        )

    def write_csv(self, path):
        names = list(self.extra)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site_id", "x", "y", "t", "value"] + names)
            for i in range(len(self)):
                w.writerow(
                    [self.site_id[i], repr(float(self.x[i])), repr(float(self.y[i])),
                     int(self.t[i]), repr(float(self.value[i]))]
                    + [self.extra[k][i] for k in names]
                )


# -- gridded covariates -----------------------------------------------------------


@dataclass
class GridCovariate:
    """Regular raster; ``values[t, row, col]`` with row 0 the southmost row."""

    name: str
    x0: float
    y0: float
    dx: float
    dy: float
    values: np.ndarray
    role: str = "fixed"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 2:
            self.values = self.values[None]
        if self.values.ndim != 3:
            raise AssemblyError("raster values must be (ntime, nrows, ncols)")
        if not (self.dx > 0 and self.dy > 0):
            raise AssemblyError(f"raster {self.name}: cell sizes must be positive")
        if not np.all(np.isfinite(self.values)):
            raise AssemblyError(f"raster {self.name}: missing or non-finite cells")
        if self.role not in ("fixed", "varying"):
            raise AssemblyError(f"raster {self.name}: role must be fixed or varying")

    @property
    def ntime(self):
        return self.values.shape[0]

    @property
    def nrows(self):
        return self.values.shape[1]

    @property
    def ncols(self):
        return self.values.shape[2]

    @property
    def extent(self):
        return (self.x0, self.y0, self.x0 + self.ncols * self.dx, self.y0 + self.nrows * self.dy)

    def cells(self, points):
        """Half-open cell lookup (col, row) with the outer max edge clamped inward."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        x, y = pts[:, 0], pts[:, 1]
        xmax = self.x0 + self.ncols * self.dx
        ymax = self.y0 + self.nrows * self.dy
        col = np.floor((x - self.x0) / self.dx).astype(np.int64)
        row = np.floor((y - self.y0) / self.dy).astype(np.int64)
        tolx = 4 * np.spacing(max(abs(xmax), abs(self.x0), 1.0))
        toly = 4 * np.spacing(max(abs(ymax), abs(self.y0), 1.0))
        col = np.where((col == self.ncols) & (x <= xmax + tolx), self.ncols - 1, col)
        row = np.where((row == self.nrows) & (y <= ymax + toly), self.nrows - 1, row)
        bad = (col < 0) | (col >= self.ncols) | (row < 0) | (row >= self.nrows)
        if np.any(bad):
            idx = np.flatnonzero(bad)
            raise OutsideGridError(
                f"raster {self.name}: {idx.size} point(s) outside extent, e.g. index {idx[0]} "
                f"at ({x[idx[0]]}, {y[idx[0]]})",
                idx.tolist(),
            )
        return col, row

    def point_to_cell(self, p):
        col, row = self.cells(np.asarray(p, dtype=float).reshape(1, 2))
        return int(col[0]), int(row[0])

    def sample(self, points, times):
        col, row = self.cells(points)
        times = np.asarray(times, dtype=int)
        tt = np.zeros_like(times) if self.ntime == 1 else times
        if np.any(tt >= self.ntime):
            raise AssemblyError(f"raster {self.name}: time index beyond {self.ntime - 1}")
        return self.values[tt, row, col]

    def centroids(self):
        """Cell centres in row-major order (row 0 first)."""
        cx = self.x0 + (np.arange(self.ncols) + 0.5) * self.dx
        cy = self.y0 + (np.arange(self.nrows) + 0.5) * self.dy
        X, Y = np.meshgrid(cx, cy)
        return np.column_stack([X.ravel(), Y.ravel()])

    def same_grid(self, other):
        return (
            (self.x0, self.y0, self.dx, self.dy, self.ncols, self.nrows)
            == (other.x0, other.y0, other.dx, other.dy, other.ncols, other.nrows)
        )

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(RASTER_HEADER) + "\n")
            fh.write(
                f"{self.name},{self.x0:.17g},{self.y0:.17g},{self.dx:.17g},{self.dy:.17g},"
                f"{self.ncols},{self.nrows},{self.ntime}\n"
            )
            for t in range(self.ntime):
                for r in range(self.nrows):
                    fh.write(" ".join(f"{v:.17g}" for v in self.values[t, r]) + "\n")

    @classmethod
    def read(cls, path, role="fixed"):
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        head = [h.strip() for h in lines[0].split(",")]
        if head == RASTER_HEADER:
            lines = lines[1:]
            head = [h.strip() for h in lines[0].split(",")]
        if len(head) != 8:
            raise AssemblyError(f"{path}: raster header needs 8 fields, got {len(head)}")
        name = head[0]
        x0, y0, dx, dy = (float(h) for h in head[1:5])
        ncols, nrows, ntime = (int(h) for h in head[5:8])
        body = lines[1:]
        if len(body) != nrows * ntime:
            raise AssemblyError(f"{path}: expected {nrows * ntime} data rows, got {len(body)}")
        vals = np.array([[float(v) for v in ln.split()] for ln in body])
        if vals.shape != (nrows * ntime, ncols):
            raise AssemblyError(f"{path}: data rows must have {ncols} values")
        return cls(name, x0, y0, dx, dy, vals.reshape(ntime, nrows, ncols), role)


def point_to_cell(grid, p):
    return grid.point_to_cell(p)


# -- model specification and assembly --------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Which covariates enter and which coefficients get random fields.

    Presets: (i) fixed only, (ii) spatial intercept, (iii) spatial intercept and
    calibration slope, (iv) the same with AR(1) evolution in time.
    """

    fixed: tuple = ()
    varying: tuple = ()
    intercept_field: bool = False
    varying_fields: bool = False
    temporal: bool = False

    @classmethod
    def preset(cls, label, fixed=(), varying=()):
        flags = {
            "i": (False, False, False),
            "ii": (True, False, False),
            "iii": (True, True, False),
            "iv": (True, True, True),
        }
        if label not in flags:
            raise AssemblyError(f"unknown model preset {label!r}")
        a, b, c = flags[label]
        return cls(tuple(fixed), tuple(varying), a, b, c)

    @property
    def field_names(self):
        names = ["intercept"] if self.intercept_field else []
        if self.varying_fields:
            names += list(self.varying)
        return names


@dataclass
class FieldBlock:
    name: str
    temporal: bool
    n_time: int
    V: sp.csr_matrix

    @property
    def dim(self):
        return self.V.shape[1]


@dataclass
class AssembledModel:
    y: np.ndarray
    F: np.ndarray
    fixed_names: list
    fields: list
    mesh: object
    fem: object
    n_time: int
    spec: ModelSpec
    transform: str
    standardization: dict
    support: dict
    obs_locations: np.ndarray = None
    obs_times: np.ndarray = None

    @property
    def n_obs(self):
        return len(self.y)

    @property
    def n_fixed(self):
        return self.F.shape[1]

    @property
    def latent_dim(self):
        return self.n_fixed + sum(f.dim for f in self.fields)

    def offsets(self):
        out = [self.n_fixed]
        for f in self.fields:
            out.append(out[-1] + f.dim)
        return out

    def design(self):
        """Joint design [F | V_1 | V_2 | ...] as CSC."""
        return sp.hstack([sp.csc_matrix(self.F)] + [f.V for f in self.fields], format="csc")


def covariate_values(locations, times, covariates, point_covariates=None, names=None):
    """Values of each named covariate at (location, time) rows.

    Grid covariates are looked up by containing cell; point covariates are
    taken as given.  Returns (values dict, support dict).
    """
    point_covariates = point_covariates or {}
    grids = {g.name: g for g in covariates}
    names = list(names) if names is not None else list(grids) + list(point_covariates)
    out, support = {}, {}
    for name in names:
        if name in point_covariates:
            out[name] = np.asarray(point_covariates[name], dtype=float)
            support[name] = "point"
        elif name in grids:
            out[name] = grids[name].sample(locations, times)
            support[name] = "grid"
        else:
            raise AssemblyError(f"covariate {name!r} not provided")
    return out, support


def build_design(locations, times, values, mesh, n_time, spec, standardization):
    """Fixed design and field blocks for arbitrary (location, time) rows."""
    locations = np.asarray(locations, dtype=float)
    times = np.asarray(times, dtype=int)
    n = len(locations)
    cols = [np.ones(n)]
    names = ["intercept"]
    for name in spec.fixed:
        mean, sd = standardization[name]
        cols.append((values[name] - mean) / sd)
        names.append(name)
    for name in spec.varying:
        cols.append(np.asarray(values[name], dtype=float))
        names.append(name)
    F = np.column_stack(cols)
    if not np.all(np.isfinite(F)):
        raise AssemblyError("non-finite entries in fixed-effect design")

    blocks = []
    if spec.field_names:
        A = mesh.projector(locations).tocoo()
        nv = mesh.n_vertices
        for fname in spec.field_names:
            scale = np.ones(n) if fname == "intercept" else np.asarray(values[fname], dtype=float)
            if spec.temporal:
                col = times[A.row] * nv + A.col
                dim = n_time * nv
                nt = n_time
            else:
                col = A.col
                dim = nv
                nt = 1
            V = sp.csr_matrix((A.data * scale[A.row], (A.row, col)), shape=(n, dim))
            V.eliminate_zeros()
            V.sort_indices()
            blocks.append(FieldBlock(fname, spec.temporal, nt, V))
    return F, names, blocks


def assemble(obs, covariates, mesh, n_time, spec=None, point_covariates=None, fem=None):
    """Assemble the latent Gaussian calibration model for ``obs``.

    ``covariates`` is a list of ``GridCovariate``; names listed in ``spec``
    may instead be supplied per observation row via ``point_covariates``.
    """
    if spec is None:
        spec = ModelSpec(
            fixed=tuple(g.name for g in covariates if g.role == "fixed"),
            varying=tuple(g.name for g in covariates if g.role == "varying"),
            intercept_field=True,
            varying_fields=True,
        )
    if len(obs) == 0:
        raise AssemblyError("no observations")
    if np.any(obs.t >= n_time):
        raise AssemblyError(f"time index >= n_time ({n_time})")
    needed = list(spec.fixed) + list(spec.varying)
    grids = [g for g in covariates if g.name in needed]
    ntimes = {g.ntime for g in grids if g.ntime != 1}
    if len(ntimes) > 1 or (ntimes and ntimes != {n_time}):
        raise MisalignmentError(
            "covariate grids have differing time coverage: "
            + ", ".join(f"{g.name}={g.ntime}" for g in grids)
        )
    locs = obs.locations
    try:
        values, support = covariate_values(locs, obs.t, grids, point_covariates, needed)
    except OutsideGridError as exc:
        bad = [(str(obs.site_id[i]), int(obs.t[i])) for i in exc.indices]
        raise MisalignmentError(f"unlocatable observations (site_id, time_index): {bad}") from exc
    if spec.field_names:
        tri, _ = mesh.locate(locs)
        bad = np.flatnonzero(tri < 0)
        if bad.size:
            lst = [(str(obs.site_id[i]), int(obs.t[i])) for i in bad]
            raise MisalignmentError(f"observations outside the mesh (site_id, time_index): {lst}")

    standardization = {}
    for name in spec.fixed:
        v = values[name]
        sd = float(np.std(v))
        standardization[name] = (float(np.mean(v)), sd if sd > 0 else 1.0)

    F, names, blocks = build_design(locs, obs.t, values, mesh, n_time, spec, standardization)
    if fem is None and blocks:
        fem = assemble_fem(mesh)
    return AssembledModel(
        y=obs.response(),
        F=F,
        fixed_names=names,
        fields=blocks,
        mesh=mesh,
        fem=fem,
        n_time=n_time,
        spec=spec,
        transform=obs.transform,
        standardization=standardization,
        support=support,
        obs_locations=locs,
        obs_times=obs.t.copy(),
    )


__all__ = [
    "AssembledModel", "AssemblyError", "FieldBlock", "GridCovariate", "MisalignmentError", "ModelSpec",
    "ObservationTable", "OutsideDomainError", "OutsideGridError", "altitude_transform",
    "assemble", "build_design", "covariate_values", "inverse_transform", "point_to_cell",
    "transform_response",
]
