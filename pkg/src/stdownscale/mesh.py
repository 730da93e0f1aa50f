"""Delaunay meshes over a planar study region and P1 basis evaluation.

The mesh covers the bounding box of the sites plus a buffer.  Inside the
site box edges are refined to ``max_edge_inner``; the buffer uses the
coarser ``max_edge_outer``.  Refinement is Ruppert-style: circumcenters of
bad triangles are inserted, and boundary subsegments they encroach are
split at their midpoints instead.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay, cKDTree


class MeshError(ValueError):
    pass


class OutsideDomainError(MeshError):
    """Raised when points fall outside the mesh hull; ``indices`` lists them."""

    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = list(indices)


@dataclass(frozen=True)
class BasisEvaluation:
    triangle_index: int
    vertex_indices: tuple
    weights: tuple


def _as_points(points):
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise MeshError("points must have shape (n, 2)")
    if not np.all(np.isfinite(pts)):
        bad = np.flatnonzero(~np.all(np.isfinite(pts), axis=1))
        raise MeshError(f"non-finite coordinates at rows {bad.tolist()}")
    return pts


def merge_sites(sites, cutoff):
    """Merge sites closer than ``cutoff`` onto the first-seen representative.

    Returns ``(unique_points, site_to_unique)``.
    """
    sites = _as_points(sites)
    n = len(sites)
    owner = np.full(n, -1, dtype=int)
    reps = []
    if cutoff > 0 and n > 1:
        tree = cKDTree(sites)
        for i in range(n):
            if owner[i] >= 0:
                continue
            owner[i] = len(reps)
            reps.append(i)
            for j in tree.query_ball_point(sites[i], cutoff):
                # strict "closer than cutoff"
                if owner[j] < 0 and np.hypot(*(sites[j] - sites[i])) < cutoff:
                    owner[j] = owner[i]
    else:
        owner = np.arange(n)
        reps = list(range(n))
    return sites[np.asarray(reps, dtype=int)], owner


def _segment_hits_box(a, b, lo, hi):
    """Vectorized test: does segment a-b intersect the closed box [lo, hi]?"""
    d = b - a
    t0 = np.zeros(len(a))
    t1 = np.ones(len(a))
    hit = np.ones(len(a), dtype=bool)
    for k in range(2):
        dk = d[:, k]
        par = np.abs(dk) < 1e-300
        inside = (a[:, k] >= lo[k]) & (a[:, k] <= hi[k])
        hit &= ~par | inside
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            ta = (lo[k] - a[:, k]) / dk
            tb = (hi[k] - a[:, k]) / dk
        tmin = np.where(par, -np.inf, np.minimum(ta, tb))
        tmax = np.where(par, np.inf, np.maximum(ta, tb))
        t0 = np.maximum(t0, tmin)
        t1 = np.minimum(t1, tmax)
    return hit & (t0 <= t1)


def _triangle_geometry(pts, tris):
    p0, p1, p2 = pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]]
    e0 = p2 - p1  # opposite vertex 0
    e1 = p0 - p2
    e2 = p1 - p0
    l0 = np.hypot(e0[:, 0], e0[:, 1])
    l1 = np.hypot(e1[:, 0], e1[:, 1])
    l2 = np.hypot(e2[:, 0], e2[:, 1])
    area2 = e2[:, 0] * (-e1[:, 1]) - e2[:, 1] * (-e1[:, 0])
    # circumcenter
    ax, ay = p0[:, 0], p0[:, 1]
    bx, by = p1[:, 0] - ax, p1[:, 1] - ay
    cx, cy = p2[:, 0] - ax, p2[:, 1] - ay
    den = 2.0 * (bx * cy - by * cx)
    b2 = bx * bx + by * by
    c2 = cx * cx + cy * cy
    with np.errstate(divide="ignore", invalid="ignore"):
        ux = (cy * b2 - by * c2) / den
        uy = (bx * c2 - cx * b2) / den
    cc = np.column_stack([ax + ux, ay + uy])
    R = np.hypot(ux, uy)
    lmin = np.minimum(np.minimum(l0, l1), l2)
    with np.errstate(divide="ignore", invalid="ignore"):
        sin_min = np.clip(lmin / (2.0 * R), 0.0, 1.0)
    min_angle = np.degrees(np.arcsin(sin_min))
    edges = np.stack([l0, l1, l2], axis=1)
    return edges, area2 / 2.0, cc, R, min_angle


def _delaunay(pts):
    tri = Delaunay(pts)
    tris = tri.simplices.astype(np.int64)
    p = pts[tris]
    signed = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 1, 1] - p[:, 0, 1]
    ) * (p[:, 2, 0] - p[:, 0, 0])
    flip = signed < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    keep = np.abs(signed) > 1e-14 * max(1.0, float(np.ptp(pts, axis=0).max()) ** 2)
    return tris[keep]


def _boundary_edges(triangles):
    e = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    key = np.sort(e, axis=1)
    uniq, counts = np.unique(key, axis=0, return_counts=True)
    return uniq[counts == 1]


def build_mesh(
    sites,
    max_edge_inner,
    max_edge_outer,
    buffer_width,
    cutoff=0.0,
    min_angle=21.0,
    max_vertices=200_000,
    max_rounds=200,
):
    """Build a refined Delaunay mesh containing every (merged) site as a vertex.

    The hull is the site bounding box grown by ``buffer_width``.  Raises
    ``MeshError`` for non-finite input, three or more distinct sites that
    are all collinear, or when refinement exceeds ``max_vertices``.
    """
    sites = _as_points(sites)
    if len(sites) == 0:
        raise MeshError("at least one site is required")
    if not (0 < max_edge_inner <= max_edge_outer):
        raise MeshError("need 0 < max_edge_inner <= max_edge_outer")
    if cutoff < 0:
        raise MeshError("cutoff must be non-negative")
    if buffer_width <= 0:
        raise MeshError("buffer_width must be positive")

    uniq, owner = merge_sites(sites, cutoff)
    if len(uniq) >= 3:
        c = uniq - uniq.mean(axis=0)
        s = np.linalg.svd(c, compute_uv=False)
        if s[1] <= 1e-12 * max(s[0], 1e-300):
            raise MeshError("degenerate input: all sites are collinear")

    lo = uniq.min(axis=0)
    hi = uniq.max(axis=0)
    olo = lo - buffer_width
    ohi = hi + buffer_width

    # outer rectangle boundary, counter-clockwise, spaced <= max_edge_outer
    corners = np.array([[olo[0], olo[1]], [ohi[0], olo[1]], [ohi[0], ohi[1]], [olo[0], ohi[1]]])
    ring = []
    for a, b in zip(corners, np.roll(corners, -1, axis=0)):
        m = int(np.ceil(np.hypot(*(b - a)) / max_edge_outer - 1e-12))
        m = max(m, 1)
        t = np.arange(m) / m
        ring.append(a + t[:, None] * (b - a))
    pts = np.concatenate([uniq] + ring)
    n_fixed_sites = len(uniq)

    def on_rectangle(p):
        tol = 1e-9 * max(1.0, float(np.max(np.abs(np.concatenate([olo, ohi])))))
        return (
            (np.abs(p[:, 0] - olo[0]) <= tol)
            | (np.abs(p[:, 0] - ohi[0]) <= tol)
            | (np.abs(p[:, 1] - olo[1]) <= tol)
            | (np.abs(p[:, 1] - ohi[1]) <= tol)
        )

    for _ in range(max_rounds):
        tris = _delaunay(pts)
        edges, area, cc, R, angle = _triangle_geometry(pts, tris)
        # per-edge limit: inner if the edge touches the site box
        limits = np.empty_like(edges)
        for k, (i, j) in enumerate(((1, 2), (2, 0), (0, 1))):
            inner = _segment_hits_box(pts[tris[:, i]], pts[tris[:, j]], lo, hi)
            limits[:, k] = np.where(inner, max_edge_inner, max_edge_outer)
        ratio = (edges / limits).max(axis=1)
        too_long = ratio > 1.0 + 1e-12
        skinny = angle < min_angle
        bad = np.flatnonzero(too_long | skinny)
        if bad.size == 0:
            break
        # priority: worst size ratio first, then smallest angle; stable by index
        order = np.lexsort((bad, angle[bad], -ratio[bad]))
        bad = bad[order]

        bedges = _boundary_edges(tris)
        ba, bb = pts[bedges[:, 0]], pts[bedges[:, 1]]
        bmid = 0.5 * (ba + bb)
        brad = 0.5 * np.hypot(*(bb - ba).T)
        btree = cKDTree(bmid)
        bmax = float(brad.max())

        new_pts = []
        split = set()
        accepted = []
        accepted_r = []
        for t in bad:
            c = cc[t]
            inside = np.all(c > olo) and np.all(c < ohi)
            enc = None
            cand = btree.query_ball_point(c, bmax)
            if cand:
                cand = np.asarray(sorted(cand))
                dist = np.hypot(*(bmid[cand] - c).T)
                hit = cand[dist < brad[cand] * (1 - 1e-12)]
                if hit.size:
                    enc = int(hit[np.argmin(np.hypot(*(bmid[hit] - c).T))])
            if enc is None and not inside:
                enc = int(np.argmin(np.hypot(*(bmid - c).T)))
            if enc is not None:
                if enc not in split:
                    split.add(enc)
                    new_pts.append(bmid[enc])
                continue
            r = R[t]
            if accepted:
                d = np.hypot(*(np.asarray(accepted) - c).T)
                if np.any(d < 0.5 * np.minimum(r, np.asarray(accepted_r))):
                    continue
            accepted.append(c)
            accepted_r.append(r)
            new_pts.append(c)
        if not new_pts:
            break
        pts = np.concatenate([pts, np.asarray(new_pts)])
        if len(pts) > max_vertices:
            raise MeshError(
                f"refinement exceeded {max_vertices} vertices; loosen edge constraints"
            )
    else:
        raise MeshError("mesh refinement did not converge")

    tris = _delaunay(pts)
    interior = np.all((pts >= lo - 1e-12) & (pts <= hi + 1e-12), axis=1)
    return Mesh(
        vertices=pts,
        triangles=tris,
        interior_flag=interior,
        site_vertex=owner.copy(),
    )


class Mesh:
    """Immutable triangulation with a bucketed point locator.

    ``site_vertex`` maps each input site to its mesh vertex (sites occupy the
    first vertices, in first-seen order).
    """

    def __init__(self, vertices, triangles, interior_flag=None, site_vertex=None):
        v = np.array(vertices, dtype=float)
        t = np.array(triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 2 or t.ndim != 2 or t.shape[1] != 3:
            raise MeshError("bad mesh array shapes")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle vertex index out of range")
        if interior_flag is None:
            interior_flag = np.ones(len(v), dtype=bool)
        f = np.array(interior_flag, dtype=bool)
        for a in (v, t, f):
            a.setflags(write=False)
        self.vertices = v
        self.triangles = t
        self.interior_flag = f
        self.site_vertex = None if site_vertex is None else np.asarray(site_vertex)
        self.boundary_edges = _boundary_edges(t)
        self.boundary_edges.setflags(write=False)
        self._locator = None

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def signed_areas(self):
        p = self.vertices[self.triangles]
        return 0.5 * (
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
        )

    def area(self):
        return float(self.signed_areas().sum())

    def edges(self):
        """Unique undirected edges as sorted index pairs."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def edge_lengths(self):
        e = self.edges()
        d = self.vertices[e[:, 0]] - self.vertices[e[:, 1]]
        return np.hypot(d[:, 0], d[:, 1])

    # -- point location -------------------------------------------------

    def _build_locator(self):
        v, t = self.vertices, self.triangles
        tmin = v[t].min(axis=1)
        tmax = v[t].max(axis=1)
        lo = v.min(axis=0)
        hi = v.max(axis=0)
        nb = max(1, int(np.sqrt(len(t) / 2.0)))
        size = np.maximum((hi - lo) / nb, 1e-300)
        i0 = np.clip(((tmin - lo) / size).astype(int), 0, nb - 1)
        i1 = np.clip(((tmax - lo) / size).astype(int), 0, nb - 1)
        buckets = [[] for _ in range(nb * nb)]
        for k in range(len(t)):
            for ix in range(i0[k, 0], i1[k, 0] + 1):
                for iy in range(i0[k, 1], i1[k, 1] + 1):
                    buckets[ix * nb + iy].append(k)
        ptr = np.zeros(nb * nb + 1, dtype=np.int64)
        ptr[1:] = np.cumsum([len(b) for b in buckets])
        idx = np.fromiter((k for b in buckets for k in b), dtype=np.int64, count=ptr[-1])
        # barycentric transforms: lambda_{1,2} = T (p - v0)
        p = v[t]
        m = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        inv = np.linalg.inv(m)
        self._locator = (lo, size, nb, ptr, idx, inv)

    def locate(self, points, tol=1e-12):
        """Locate points; returns (triangle_index, weights (n,3)).

        Unlocated points get triangle index -1.  Points on shared edges go to
        the lowest-index containing triangle.
        """
        pts = _as_points(points)
        if self._locator is None:
            self._build_locator()
        lo, size, nb, ptr, idx, inv = self._locator
        cell = np.floor((pts - lo) / size).astype(np.int64)
        ok = np.all((cell >= -1) & (cell <= nb), axis=1)
        cell = np.clip(cell, 0, nb - 1)
        b = cell[:, 0] * nb + cell[:, 1]
        counts = np.where(ok, ptr[b + 1] - ptr[b], 0)
        owner = np.repeat(np.arange(len(pts)), counts)
        starts = np.repeat(ptr[b] - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
        cand = idx[np.arange(counts.sum()) + starts]
        d = pts[owner] - self.vertices[self.triangles[cand, 0]]
        l12 = np.einsum("kij,kj->ki", inv[cand], d)
        lam = np.column_stack([1.0 - l12.sum(axis=1), l12])
        inside = np.all(lam >= -tol, axis=1)
        tri = np.full(len(pts), -1, dtype=np.int64)
        if inside.any():
            o = owner[inside]
            c = cand[inside]
            # lowest triangle index per point
            order = np.lexsort((c, o))
            o, c = o[order], c[order]
            first = np.concatenate([[True], o[1:] != o[:-1]])
            tri[o[first]] = c[first]
        w = np.zeros((len(pts), 3))
        found = tri >= 0
        if found.any():
            d = pts[found] - self.vertices[self.triangles[tri[found], 0]]
            l12 = np.einsum("kij,kj->ki", inv[tri[found]], d)
            lam = np.column_stack([1.0 - l12.sum(axis=1), l12])
            lam = np.clip(lam, 0.0, None)
            w[found] = lam / lam.sum(axis=1, keepdims=True)
        return tri, w

    def locate_and_weights(self, p):
        tri, w = self.locate(np.asarray(p, dtype=float).reshape(1, 2))
        if tri[0] < 0:
            raise OutsideDomainError(f"point {tuple(np.ravel(p))} is outside the domain", [0])
        k = int(tri[0])
        return BasisEvaluation(
            triangle_index=k,
            vertex_indices=tuple(int(i) for i in self.triangles[k]),
            weights=tuple(float(x) for x in w[0]),
        )

    def projector(self, points):
        """Sparse (n_points x n_vertices) matrix of P1 basis values."""
        pts = _as_points(points)
        tri, w = self.locate(pts)
        bad = np.flatnonzero(tri < 0)
        if bad.size:
            raise OutsideDomainError(
                f"{bad.size} point(s) outside the mesh hull: indices {bad.tolist()[:20]}",
                bad.tolist(),
            )
        rows = np.repeat(np.arange(len(pts)), 3)
        cols = self.triangles[tri].ravel()
        A = sp.csr_matrix((w.ravel(), (rows, cols)), shape=(len(pts), self.n_vertices))
        A.eliminate_zeros()
        A.sort_indices()
        return A

    # -- serialization --------------------------------------------------

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(f"vertices {self.n_vertices} triangles {self.n_triangles}\n")
            for (x, y), f in zip(self.vertices, self.interior_flag):
                fh.write(f"{x:.17g} {y:.17g} {int(f)}\n")
            for i, j, k in self.triangles:
                fh.write(f"{i} {j} {k}\n")

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            head = fh.readline().split()
            if len(head) != 4 or head[0] != "vertices" or head[2] != "triangles":
                raise MeshError(f"{path}: bad mesh header")
            n, m = int(head[1]), int(head[3])
            rows = [fh.readline().split() for _ in range(n)]
            tris = [fh.readline().split() for _ in range(m)]
        v = np.array([[float(r[0]), float(r[1])] for r in rows])
        f = np.array([bool(int(r[2])) for r in rows])
        t = np.array([[int(a) for a in r] for r in tris], dtype=np.int64).reshape(m, 3)
        return cls(v, t, f)


def projector_matrix(mesh, points):
    return mesh.projector(points)


def locate_and_weights(mesh, p):
    return mesh.locate_and_weights(p)
