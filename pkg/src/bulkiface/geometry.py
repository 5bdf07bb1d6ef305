"""Two-compartment planar geometry, structured meshes and reflection maps.

Compartments are polygons in the plane. The interface ``Gamma`` is a polyline on
both compartment boundaries and the separating curve is a straight line that
contains ``Gamma`` and has the two compartments on opposite sides.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import LineString, MultiLineString, Point, Polygon

from .errors import CoverageError, DomainError, GeometryError
from .profiles import radial_bump, smoothstep

PLUS, MINUS = 1, -1
_TOL = 1e-10

TEMPLATES = {
    "flat_symmetric": {
        "compartment_plus": [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        "compartment_minus": [[-1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [-1.0, 1.0]],
        "interface": [[0.0, 0.0], [0.0, 1.0]],
        "separating_curve": [[0.0, -1.0], [0.0, 2.0]],
    },
    "triple_junction": {
        "compartment_plus": [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        "compartment_minus": [[-1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [-1.0, 1.0]],
        "interface": [[0.0, 0.0], [0.0, 0.5]],
        "separating_curve": [[0.0, -1.0], [0.0, 2.0]],
        "frames": [{"anchor": [0.0, 0.5], "axis": [1.0, 0.0]}],
    },
    # asymmetric variant: the minus boundary leaves the junction at 45 degrees,
    # so the two-step map has a non-trivial shear
    "triple_junction_skew": {
        "compartment_plus": [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        "compartment_minus": [[-1.0, 0.0], [0.0, 0.0], [0.0, 0.5], [-0.5, 1.0], [-1.0, 1.0]],
        "interface": [[0.0, 0.0], [0.0, 0.5]],
        "separating_curve": [[0.0, -1.0], [0.0, 2.0]],
        "frames": [{"anchor": [0.0, 0.5], "axis": [1.0, 0.0]}],
    },
}


@dataclass(frozen=True)
class Geometry:
    """Validated two-compartment geometry (see :func:`build_geometry`)."""

    compartment_plus: np.ndarray
    compartment_minus: np.ndarray
    interface: np.ndarray
    separating_curve: np.ndarray
    outer_boundary_plus: tuple
    outer_boundary_minus: tuple
    name: str = "custom"
    frames: tuple = ()

    @cached_property
    def polygon_plus(self) -> Polygon:
        return Polygon(self.compartment_plus)

    @cached_property
    def polygon_minus(self) -> Polygon:
        return Polygon(self.compartment_minus)

    @cached_property
    def interface_line(self) -> LineString:
        return LineString(self.interface)

    @property
    def interface_length(self) -> float:
        return float(self.interface_line.length)

    @property
    def interface_endpoints(self) -> np.ndarray:
        return np.array([self.interface[0], self.interface[-1]], dtype=float)

    @cached_property
    def outer_lines(self) -> dict:
        return {
            PLUS: MultiLineString([list(map(tuple, c)) for c in self.outer_boundary_plus]),
            MINUS: MultiLineString([list(map(tuple, c)) for c in self.outer_boundary_minus]),
        }

    def polygon(self, side: int) -> Polygon:
        return self.polygon_plus if side == PLUS else self.polygon_minus

    def area(self, side: int) -> float:
        return float(self.polygon(side).area)

    @cached_property
    def _line(self):
        p0 = np.asarray(self.separating_curve[0], dtype=float)
        d = np.asarray(self.separating_curve[-1], dtype=float) - p0
        d = d / np.linalg.norm(d)
        m = np.array([-d[1], d[0]])
        if np.mean(self.compartment_plus @ m - p0 @ m) < 0:
            m = -m
        return p0, m

    def signed_distance(self, x) -> np.ndarray:
        """Signed distance to the separating line, positive on the plus side."""
        p0, m = self._line
        return (np.atleast_2d(x) - p0) @ m

    def reflect(self, x) -> np.ndarray:
        """Orthogonal reflection at the separating line."""
        p0, m = self._line
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x - 2.0 * ((x - p0) @ m)[:, None] * m

    def frame_for(self, anchor):
        for fr in self.frames:
            if np.allclose(fr["anchor"], anchor, atol=1e-12):
                return fr
        return None

    def on_interface(self, x, tol: float = 1e-9) -> np.ndarray:
        x = np.atleast_2d(x)
        return shapely.distance(shapely.points(x), self.interface_line) <= tol


def _as_points(a, what):
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 2:
        raise GeometryError(f"{what}: expected a list of 2D points, got shape {arr.shape}")
    return arr


def _interface_from_edges(poly, edges):
    edges = [int(e) for e in edges]
    k = len(poly)
    pts = [poly[edges[0] % k]]
    for e in edges:
        if not np.allclose(poly[e % k], pts[-1]):
            raise GeometryError("interface_edges must be consecutive edges of compartment_plus")
        pts.append(poly[(e + 1) % k])
    return np.array(pts)


def build_geometry(spec) -> Geometry:
    """Validate a geometry descriptor and return a :class:`Geometry`.

    ``spec`` is a template name (``"flat_symmetric"``, ``"triple_junction"``,
    ``"triple_junction_skew"``), a dict with a ``"template"`` key, or a dict
    with vertex lists ``compartment_plus``, ``compartment_minus``, either
    ``interface`` (polyline) or ``interface_edges`` (edge indices of the plus
    polygon), ``separating_curve`` (two points on a line) and optional
    ``frames`` for two-step reflection maps.
    """
    if isinstance(spec, str):
        spec = {"template": spec}
    spec = dict(spec)
    name = "custom"
    if "template" in spec:
        name = spec.pop("template")
        if name not in TEMPLATES:
            raise GeometryError(f"unknown geometry template {name!r}; choose from {sorted(TEMPLATES)}")
        spec = {**TEMPLATES[name], **spec}

    plus = _as_points(spec["compartment_plus"], "compartment_plus")
    minus = _as_points(spec["compartment_minus"], "compartment_minus")
    if "interface" in spec:
        gamma = _as_points(spec["interface"], "interface")
    elif "interface_edges" in spec:
        gamma = _interface_from_edges(plus, spec["interface_edges"])
    else:
        raise GeometryError("descriptor needs 'interface' or 'interface_edges'")
    line = _as_points(spec.get("separating_curve", gamma[[0, -1]]), "separating_curve")

    pp, pm = Polygon(plus), Polygon(minus)
    for label, p in (("compartment_plus", pp), ("compartment_minus", pm)):
        if not p.is_valid or p.area <= _TOL:
            raise GeometryError(f"{label} is degenerate or self-intersecting")
    overlap = pp.intersection(pm).area
    if overlap > _TOL * min(pp.area, pm.area):
        raise GeometryError(f"compartments overlap (shared area {overlap:.3g})")
    gline = LineString(gamma)
    if gline.length <= _TOL:
        raise GeometryError("interface has zero length")
    for label, p in (("compartment_plus", pp), ("compartment_minus", pm)):
        if gline.difference(p.boundary.buffer(1e-9)).length > 1e-9:
            raise GeometryError(f"interface is not contained in the boundary of {label}")

    # separating line: must contain Gamma and separate the compartments
    p0 = line[0]
    d = line[-1] - p0
    if np.linalg.norm(d) <= _TOL:
        raise GeometryError("separating_curve needs two distinct points")
    d = d / np.linalg.norm(d)
    m = np.array([-d[1], d[0]])
    if np.abs((line - p0) @ m).max() > 1e-9:
        raise GeometryError("separating_curve must be a straight line")
    if np.abs((gamma - p0) @ m).max() > 1e-9:
        raise GeometryError("separating_curve does not contain the interface")
    sp, sm = (plus - p0) @ m, (minus - p0) @ m
    if not ((sp >= -1e-12).all() and (sm <= 1e-12).all() and sp.max() > 0 and sm.min() < 0) and not (
        (sp <= 1e-12).all() and (sm >= -1e-12).all() and sp.min() < 0 and sm.max() > 0
    ):
        raise GeometryError("separating_curve does not separate the compartments")

    def outer(p):
        rest = p.boundary.difference(gline)
        parts = getattr(rest, "geoms", [rest])
        return tuple(np.asarray(g.coords) for g in parts if g.length > 0)

    frames = tuple(
        {"anchor": np.asarray(f["anchor"], float), "axis": np.asarray(f["axis"], float)}
        for f in spec.get("frames", ())
    )
    return Geometry(plus, minus, gamma, line[[0, -1]], outer(pp), outer(pm), name, frames)


def load_geometry(path) -> Geometry:
    with open(path) as fh:
        return build_geometry(json.load(fh))


# --------------------------------------------------------------------------- mesh


@dataclass(frozen=True)
class Mesh:
    """Cell-centred structured mesh on both compartments.

    Faces come in three groups: ``interior_*`` (same compartment, carry
    diffusive flux), ``iface_*`` (one plus and one minus cell across Gamma) and
    ``boundary_*`` (no-flux outer boundary, including compartment walls that are
    not part of Gamma).
    """

    geometry: Geometry
    resolution: int
    h: float
    origin: np.ndarray
    index: np.ndarray  # (nx, ny) grid -> cell id or -1
    ij: np.ndarray
    centers: np.ndarray
    volumes: np.ndarray
    compartment: np.ndarray
    interior_cells: np.ndarray  # (nf, 2)
    interior_area: np.ndarray
    interior_dist: np.ndarray
    interior_axis: np.ndarray
    iface_plus: np.ndarray
    iface_minus: np.ndarray
    iface_length: np.ndarray
    iface_midpoint: np.ndarray
    boundary_cells: np.ndarray
    boundary_length: np.ndarray
    boundary_midpoint: np.ndarray

    @property
    def n_cells(self) -> int:
        return len(self.volumes)

    def cells(self, side: int) -> np.ndarray:
        return np.flatnonzero(self.compartment == side)

    def locate(self, points, side: int | None = None) -> np.ndarray:
        """Cell ids containing ``points`` (-1 where not covered)."""
        pts = np.atleast_2d(points)
        g = np.floor((pts - self.origin) / self.h).astype(int)
        nx, ny = self.index.shape
        ok = (g[:, 0] >= 0) & (g[:, 0] < nx) & (g[:, 1] >= 0) & (g[:, 1] < ny)
        out = np.full(len(pts), -1, dtype=int)
        out[ok] = self.index[g[ok, 0], g[ok, 1]]
        if side is not None:
            bad = out >= 0
            bad[bad] = self.compartment[out[bad]] != side
            out[bad] = -1
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell_id", "compartment", "center_x", "center_y", "volume"])
            for c in range(self.n_cells):
                w.writerow(
                    [c, "+" if self.compartment[c] == PLUS else "-",
                     repr(float(self.centers[c, 0])), repr(float(self.centers[c, 1])),
                     repr(float(self.volumes[c]))]
                )


def build_mesh(geometry: Geometry, resolution: int) -> Mesh:
    """Uniform square cells of side ``1/resolution`` conforming to both polygons."""
    if int(resolution) != resolution or resolution < 2:
        raise GeometryError(f"resolution must be an integer >= 2, got {resolution}")
    res = int(resolution)
    h = 1.0 / res
    verts = np.vstack([geometry.compartment_plus, geometry.compartment_minus, geometry.interface])
    scaled = verts * res
    if np.abs(scaled - np.round(scaled)).max() > 1e-9:
        raise GeometryError(
            f"geometry is not representable at resolution {res}: some vertex or interface "
            "endpoint does not lie on a grid line; choose a resolution that is a multiple "
            "of the vertex denominators"
        )
    lo = np.round(verts.min(axis=0) * res).astype(int)
    hi = np.round(verts.max(axis=0) * res).astype(int)
    nx, ny = hi - lo
    origin = lo * h
    gi, gj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    cen = origin + (np.stack([gi.ravel(), gj.ravel()], axis=1) + 0.5) * h
    in_p = shapely.contains_xy(geometry.polygon_plus, cen[:, 0], cen[:, 1])
    in_m = shapely.contains_xy(geometry.polygon_minus, cen[:, 0], cen[:, 1])
    keep = in_p | in_m
    ij = np.stack([gi.ravel(), gj.ravel()], axis=1)[keep]
    centers = cen[keep]
    comp = np.where(in_p[keep], PLUS, MINUS)
    volumes = np.full(len(centers), h * h)
    for side in (PLUS, MINUS):
        area = geometry.area(side)
        if abs(volumes[comp == side].sum() - area) > 1e-10 * area:
            raise GeometryError(
                f"compartment {'+' if side == PLUS else '-'} is not representable at resolution {res}"
            )
    index = np.full((nx, ny), -1, dtype=int)
    index[ij[:, 0], ij[:, 1]] = np.arange(len(centers))

    gline = geometry.interface_line
    pairs, axis = [], []
    ip, im, imid = [], [], []
    bcell, bmid = [], []
    for ax, (di, dj) in enumerate(((1, 0), (0, 1))):
        a = index[: nx - di, : ny - dj].ravel()
        b = index[di:, dj:].ravel()
        both = (a >= 0) & (b >= 0)
        a2, b2 = a[both], b[both]
        same = comp[a2] == comp[b2]
        pairs.append(np.stack([a2[same], b2[same]], axis=1))
        axis.append(np.full(same.sum(), ax))
        ca, cb = a2[~same], b2[~same]
        mids = 0.5 * (centers[ca] + centers[cb])
        on_g = shapely.distance(shapely.points(mids), gline) <= 1e-9 * h
        for x, y, mid, g in zip(ca, cb, mids, on_g):
            if g:
                p_, m_ = (x, y) if comp[x] == PLUS else (y, x)
                ip.append(p_)
                im.append(m_)
                imid.append(mid)
            else:
                bcell.extend([x, y])
                bmid.extend([mid, mid])
        # faces on the edge of the occupied region
        for cells, off in ((a[(a >= 0) & (b < 0)], +0.5), (b[(b >= 0) & (a < 0)], -0.5)):
            for c in cells:
                mid = centers[c].copy()
                mid[ax] += off * h
                bcell.append(c)
                bmid.append(mid)
    # outermost grid layer
    for c in range(len(centers)):
        i, j = ij[c]
        for ax, edge, off in ((0, i == 0, -0.5), (0, i == nx - 1, 0.5), (1, j == 0, -0.5), (1, j == ny - 1, 0.5)):
            if edge:
                mid = centers[c].copy()
                mid[ax] += off * h
                bcell.append(c)
                bmid.append(mid)

    interior = np.vstack(pairs).astype(int)
    iface_len = np.full(len(ip), h)
    if abs(iface_len.sum() - geometry.interface_length) > 1e-12 * geometry.interface_length:
        raise GeometryError(
            f"interface faces do not tile Gamma at resolution {res} "
            f"({iface_len.sum():.6g} vs {geometry.interface_length:.6g})"
        )
    return Mesh(
        geometry=geometry,
        resolution=res,
        h=h,
        origin=origin,
        index=index,
        ij=ij,
        centers=centers,
        volumes=volumes,
        compartment=comp,
        interior_cells=interior,
        interior_area=np.full(len(interior), h),
        interior_dist=np.full(len(interior), h),
        interior_axis=np.concatenate(axis).astype(int),
        iface_plus=np.asarray(ip, dtype=int),
        iface_minus=np.asarray(im, dtype=int),
        iface_length=iface_len,
        iface_midpoint=np.asarray(imid, dtype=float).reshape(-1, 2),
        boundary_cells=np.asarray(bcell, dtype=int),
        boundary_length=np.full(len(bcell), h),
        boundary_midpoint=np.asarray(bmid, dtype=float).reshape(-1, 2),
    )


# ----------------------------------------------------------------- reflection maps


@dataclass(frozen=True)
class PiecewiseLinear:
    """Height function given by breakpoints; linear extrapolation is not used."""

    knots: np.ndarray
    values: np.ndarray

    def __call__(self, y):
        return np.interp(y, self.knots, self.values)

    def shifted(self, delta) -> "PiecewiseLinear":
        return PiecewiseLinear(self.knots, self.values + delta)


@dataclass(frozen=True)
class ReflectionMap:
    """Measure-preserving involution swapping the compartments near ``anchor``.

    ``kind == "reflection"``: orthogonal reflection at the separating line,
    neighbourhood is the open disc of ``radius`` around the anchor.

    ``kind == "hypograph"``: reflection followed by the shear
    ``(y, t) -> (y, t - eta1(y) + eta2(y))`` in the rotated frame whose columns
    are ``rotation[:, 0]`` (tangential) and ``rotation[:, 1]`` (up). Both
    compartments are hypographs ``t < eta(y)`` there, ``eta1`` describing the
    reflected minus compartment and ``eta2`` the plus compartment; the
    neighbourhood is ``|y| < radius, -radius < t - eta(y) <= 0``.
    """

    geometry: Geometry
    anchor: np.ndarray
    radius: float
    kind: str
    rotation: np.ndarray = field(default_factory=lambda: np.eye(2))
    eta1: PiecewiseLinear | None = None
    eta2: PiecewiseLinear | None = None

    def side_of(self, x) -> np.ndarray:
        s = self.geometry.signed_distance(x)
        return np.where(s > 1e-13, PLUS, np.where(s < -1e-13, MINUS, 0))

    def _to_frame(self, x):
        return (np.atleast_2d(x) - self.anchor) @ self.rotation

    def _from_frame(self, yt):
        return self.anchor + yt @ self.rotation.T

    def kinks(self) -> np.ndarray:
        if self.kind != "hypograph":
            return np.empty(0)
        return np.union1d(self.eta1.knots[1:-1], self.eta2.knots[1:-1])

    def plus_to_minus(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "reflection":
            return self.geometry.reflect(x)
        yt = self._to_frame(x)
        yt[:, 1] += self.eta1(yt[:, 0]) - self.eta2(yt[:, 0])
        return self.geometry.reflect(self._from_frame(yt))

    def minus_to_plus(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = self.geometry.reflect(x)
        if self.kind == "reflection":
            return y
        yt = self._to_frame(y)
        yt[:, 1] += self.eta2(yt[:, 0]) - self.eta1(yt[:, 0])
        return self._from_frame(yt)

    def contains(self, x) -> np.ndarray:
        """Membership in the closure of ``(Omega_+ u Omega_-) n V`` plus ``Gamma n V``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        side = self.side_of(x)
        if self.kind == "reflection":
            near = np.linalg.norm(x - self.anchor, axis=1) < self.radius
            pts = shapely.points(x)
            inside = (
                shapely.covers(self.geometry.polygon_plus, pts)
                | shapely.covers(self.geometry.polygon_minus, pts)
            )
            return near & inside
        out = np.zeros(len(x), dtype=bool)
        for sd, eta in ((PLUS, self.eta2), (MINUS, self.eta1)):
            sel = (side == sd) | (side == 0)
            if not sel.any():
                continue
            y = x[sel] if sd == PLUS else self.geometry.reflect(x[sel])
            yt = self._to_frame(y)
            s = yt[:, 1] - eta(yt[:, 0])
            ok = (np.abs(yt[:, 0]) < self.radius) & (s > -self.radius) & (s <= 1e-12)
            out[sel] |= ok
        return out

    def apply(self, x) -> np.ndarray:
        """Evaluate the involution; raises :class:`DomainError` outside ``V``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ok = self.contains(x)
        if not ok.all():
            bad = x[~ok][0]
            raise DomainError(f"point {bad.tolist()} lies outside the reflection neighbourhood")
        side = self.side_of(x)
        out = np.empty_like(x)
        p = side >= 0
        out[p] = self.plus_to_minus(x[p])
        out[~p] = self.minus_to_plus(x[~p])
        # points of Gamma (side 0): both branches agree up to the frame defect
        return out

    def sample(self, n: int, rng: np.random.Generator, side: int) -> np.ndarray:
        """Uniform samples of ``Omega_side n V``."""
        if self.kind == "hypograph":
            eta = self.eta2 if side == PLUS else self.eta1
            y = rng.uniform(-self.radius, self.radius, n)
            s = rng.uniform(-self.radius, 0.0, n)
            pts = self._from_frame(np.stack([y, eta(y) + s], axis=1))
            return pts if side == PLUS else self.geometry.reflect(pts)
        poly = self.geometry.polygon(side)
        if np.isfinite(self.radius):
            region = poly.intersection(Point(self.anchor).buffer(self.radius, 256))
        else:
            region = poly
        x0, y0, x1, y1 = region.bounds
        out = []
        while sum(len(o) for o in out) < n:
            cand = rng.uniform([x0, y0], [x1, y1], size=(2 * n, 2))
            keep = shapely.contains_xy(region, cand[:, 0], cand[:, 1])
            keep &= self.contains(cand)
            out.append(cand[keep])
        return np.vstack(out)[:n]


def _boundary_walk(poly_coords, anchor, rotation, reach):
    """Boundary polyline through ``anchor`` in frame coordinates, long enough to
    leave ``|y| <= reach`` in both directions."""
    ring = np.asarray(poly_coords, dtype=float)
    if np.allclose(ring[0], ring[-1]):
        ring = ring[:-1]
    k = len(ring)
    # locate the edge containing the anchor
    best, pos = np.inf, None
    for e in range(k):
        a, b = ring[e], ring[(e + 1) % k]
        ab = b - a
        t = np.clip((anchor - a) @ ab / (ab @ ab), 0.0, 1.0)
        dist = np.linalg.norm(a + t * ab - anchor)
        if dist < best:
            best, pos = dist, (e, t)
    if best > 1e-9:
        raise GeometryError("frame anchor is not on the compartment boundary")
    e, _ = pos
    to_frame = lambda p: (np.asarray(p) - anchor) @ rotation  # noqa: E731

    fwd = [to_frame(anchor)]
    for step in range(k):
        v = to_frame(ring[(e + 1 + step) % k])
        if np.allclose(v, fwd[-1]):
            continue
        fwd.append(v)
        if abs(v[0]) > reach:
            break
    bwd = [to_frame(anchor)]
    for step in range(k):
        v = to_frame(ring[(e - step) % k])
        if np.allclose(v, bwd[-1]):
            continue
        bwd.append(v)
        if abs(v[0]) > reach:
            break
    path = np.array(bwd[::-1] + fwd[1:])
    dy = np.diff(path[:, 0])
    if not ((dy > 1e-12).all() or (dy < -1e-12).all()):
        raise GeometryError(
            "compartment boundary is not a graph over the frame direction at this radius; "
            "choose a smaller radius or a different frame axis"
        )
    if dy[0] < 0:
        path = path[::-1]
    if path[0, 0] > -reach or path[-1, 0] < reach:
        raise GeometryError("compartment boundary too short for the requested radius")
    return path


def _height_function(path, radius):
    # keep only the knots needed to describe eta on [-radius, radius]
    y, t = path[:, 0], path[:, 1]
    lo = max(np.searchsorted(y, -radius, side="right") - 1, 0)
    hi = min(np.searchsorted(y, radius, side="left") + 1, len(y))
    ys = np.clip(y[lo:hi], -radius, radius)
    ts = np.interp(ys, y, t)
    ys, idx = np.unique(ys, return_index=True)
    return PiecewiseLinear(ys, ts[idx])


def _hypograph_box(m: ReflectionMap, eta: PiecewiseLinear, lower: bool) -> Polygon:
    ys = eta.knots
    top = np.stack([ys, eta(ys)], axis=1)
    off = -m.radius if lower else m.radius
    bottom = np.stack([ys[::-1], eta(ys[::-1]) + off], axis=1)
    return Polygon(m._from_frame(np.vstack([top, bottom])))


def reflection_map(geometry: Geometry, anchor, radius: float, axis=None) -> ReflectionMap:
    """Construct the local reflection map at ``anchor`` on ``Gamma``.

    Interior anchors whose disc of ``radius`` is mirror symmetric use the plain
    reflection. Anchors with a configured frame (``geometry.frames``) or an
    explicit ``axis`` (interior cone axis, pointing into both domains) use the
    two-step hypograph construction.
    """
    anchor = np.asarray(anchor, dtype=float)
    if not geometry.on_interface(anchor)[0]:
        raise GeometryError(f"anchor {anchor.tolist()} is not on the interface")
    if not radius > 0:
        raise GeometryError("radius must be positive")
    frame = geometry.frame_for(anchor)
    if axis is None and frame is not None:
        axis = frame["axis"]

    if axis is None:
        disc = Point(anchor).buffer(radius, 256) if np.isfinite(radius) else None
        pp, pm = geometry.polygon_plus, geometry.polygon_minus
        mirrored = Polygon(geometry.reflect(np.asarray(pm.exterior.coords)))
        if disc is not None:
            a, b = pp.intersection(disc), mirrored.intersection(disc)
        else:
            a, b = pp, mirrored
        mismatch = a.symmetric_difference(b).area
        if mismatch > 1e-9 * max(a.area, 1e-300):
            raise GeometryError(
                f"plain reflection does not map the compartments onto each other within "
                f"radius {radius}; use a smaller radius or supply a frame axis"
            )
        return ReflectionMap(geometry, anchor, float(radius), "reflection")

    n_vec = np.asarray(axis, dtype=float)
    n_vec = n_vec / np.linalg.norm(n_vec)
    up = -n_vec
    tangent = np.array([up[1], -up[0]])
    rotation = np.stack([tangent, up], axis=1)
    reach = radius
    path2 = _boundary_walk(geometry.compartment_plus, anchor, rotation, reach)
    path1 = _boundary_walk(geometry.reflect(geometry.compartment_minus), anchor, rotation, reach)
    eta2 = _height_function(path2, radius)
    eta1 = _height_function(path1, radius)
    m = ReflectionMap(geometry, anchor, float(radius), "hypograph", rotation, eta1, eta2)

    # hypograph representation: lower box inside, upper box outside
    mirrored_minus = Polygon(geometry.reflect(geometry.compartment_minus))
    for eta, poly in ((eta2, geometry.polygon_plus), (eta1, mirrored_minus)):
        lower = _hypograph_box(m, eta, True)
        upper = _hypograph_box(m, eta, False)
        if lower.difference(poly).area > 1e-9 * lower.area or upper.intersection(poly).area > 1e-9 * upper.area:
            raise GeometryError(
                f"no common hypograph frame at radius {radius}; try a smaller radius"
            )
    # common-frame condition: heights agree where the plus boundary is Gamma
    ys = np.union1d(eta1.knots, eta2.knots)
    ys = np.concatenate([ys, 0.5 * (ys[1:] + ys[:-1])])
    on_g = geometry.on_interface(m._from_frame(np.stack([ys, eta2(ys)], axis=1)))
    if on_g.any() and np.abs(eta1(ys[on_g]) - eta2(ys[on_g])).max() > 1e-12:
        raise GeometryError("height functions disagree on Gamma; frame is not common")
    return m


def verify_reflection(m: ReflectionMap, n_samples: int = 1000, fd_step: float | None = None,
                      rng: np.random.Generator | None = None) -> dict:
    """Sampled defects of the involution, measure preservation, Gamma-fixing and
    boundary-to-boundary properties."""
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    rng = np.random.default_rng(0) if rng is None else rng
    r_eff = m.radius if np.isfinite(m.radius) else 1.0
    h = fd_step if fd_step is not None else r_eff / 1000.0
    if not 0 < h < r_eff / 10:
        raise ValueError("fd_step must lie in (0, radius/10)")
    geo = m.geometry

    inv, det = 0.0, 0.0
    n_det = 0
    for side in (PLUS, MINUS):
        x = m.sample(n_samples // 2, rng, side)
        fwd = m.plus_to_minus if side == PLUS else m.minus_to_plus
        back = m.minus_to_plus if side == PLUS else m.plus_to_minus
        inv = max(inv, float(np.abs(back(fwd(x)) - x).max()))
        keep = _fd_admissible(m, x, side, h)
        xs = x[keep]
        n_det += len(xs)
        if len(xs):
            jac = np.empty((len(xs), 2, 2))
            for k in range(2):
                e = np.zeros(2)
                e[k] = h
                jac[:, :, k] = (fwd(xs + e) - fwd(xs - e)) / (2 * h)
            d = np.abs(np.linalg.det(jac))
            det = max(det, float(np.abs(d - 1.0).max()))

    # Gamma fixed
    gl = geo.interface_line
    zs = np.array([gl.interpolate(t, normalized=True).coords[0] for t in np.linspace(0, 1, 401)])
    zs = zs[m.contains(zs)]
    fixed = 0.0
    if len(zs):
        fixed = max(float(np.abs(m.plus_to_minus(zs) - zs).max()),
                    float(np.abs(m.minus_to_plus(zs) - zs).max()))

    # outer boundary onto outer boundary
    bdry = 0.0
    for side, fwd in ((MINUS, m.minus_to_plus), (PLUS, m.plus_to_minus)):
        lines = geo.outer_lines[side]
        pts = np.array([lines.interpolate(t, normalized=True).coords[0] for t in np.linspace(0, 1, 2001)])
        pts = pts[m.contains(pts)]
        if m.kind == "hypograph":
            # stay off the bottom edge of the frame box where V itself ends
            y = m._to_frame(pts if side == PLUS else geo.reflect(pts))[:, 0]
            pts = pts[np.abs(y) < m.radius * (1 - 1e-9)]
        if len(pts):
            img = fwd(pts)
            target = geo.outer_lines[-side]
            bdry = max(bdry, float(shapely.distance(shapely.points(img), target).max()))
    return {
        "kind": m.kind,
        "n_samples": int(n_samples),
        "n_det_samples": int(n_det),
        "fd_step": h,
        "involution_defect": inv,
        "det_defect": det,
        "gamma_fixed_defect": fixed,
        "boundary_defect": bdry,
    }


def _fd_admissible(m, x, side, h):
    """Points whose central-difference stencil stays in a smooth piece of the map."""
    margin = 2.0 * h
    if m.kind == "reflection":
        poly = m.geometry.polygon(side)
        d = shapely.distance(shapely.points(x), poly.boundary)
        ok = d > margin
        if np.isfinite(m.radius):
            ok &= np.linalg.norm(x - m.anchor, axis=1) < m.radius - margin
        return ok
    y_pts = x if side == PLUS else m.geometry.reflect(x)
    yt = m._to_frame(y_pts)
    eta = m.eta2 if side == PLUS else m.eta1
    s = yt[:, 1] - eta(yt[:, 0])
    lip = 1.0 + max(np.abs(np.diff(m.eta1.values) / np.diff(m.eta1.knots)).max(),
                    np.abs(np.diff(m.eta2.values) / np.diff(m.eta2.knots)).max())
    ok = (np.abs(yt[:, 0]) < m.radius - margin) & (s < -margin * lip) & (s > -m.radius + margin * lip)
    kinks = m.kinks()
    if len(kinks):
        ok &= np.abs(yt[:, 0][:, None] - kinks[None, :]).min(axis=1) > margin
    return ok


@dataclass(frozen=True)
class ExtendedField:
    """Reflected field on ``Omega n V``; ``values`` is NaN on cells outside ``V``."""

    values: np.ndarray
    mask: np.ndarray
    partner: np.ndarray  # reflected cell id, -1 outside V


def reflected_partners(m: ReflectionMap, mesh: Mesh) -> np.ndarray:
    """Cell id of the reflected cell centre for every cell in ``V`` (else -1)."""
    inside = m.contains(mesh.centers)
    partner = np.full(mesh.n_cells, -1, dtype=int)
    if inside.any():
        idx = np.flatnonzero(inside)
        img = m.apply(mesh.centers[idx])
        loc = np.full(len(idx), -1, dtype=int)
        for side in (PLUS, MINUS):
            sel = mesh.compartment[idx] == side
            loc[sel] = mesh.locate(img[sel], side=-side)
        if (loc < 0).any():
            bad = mesh.centers[idx[loc < 0][0]]
            raise GeometryError(f"reflected image of cell at {bad.tolist()} is not covered by the mesh")
        partner[idx] = loc
    return partner


def extend_field(values, m: ReflectionMap, mesh: Mesh, partner: np.ndarray | None = None) -> ExtendedField:
    """Piecewise-constant extension ``u o Phi`` across Gamma on ``Omega n V``."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != mesh.n_cells:
        raise ValueError("field does not match the mesh")
    partner = reflected_partners(m, mesh) if partner is None else partner
    mask = partner >= 0
    out = np.full(values.shape, np.nan)
    src = values[partner[mask]]
    if np.isnan(src).any():
        raise GeometryError("reflected cells fall outside the field's support")
    out[mask] = src
    return ExtendedField(out, mask, partner)


# --------------------------------------------------------------- partition of unity


@dataclass(frozen=True)
class PartitionOfUnity:
    """Weights ``phi_out + sum_beta phi_beta = 1`` on the closure of Omega.

    Raw bumps ``b_beta`` equal 1 on the half-radius disc; with ``S = sum b_beta``
    and ``c = smoothstep(S)`` the weights are ``phi_beta = c b_beta / S`` and
    ``phi_out = 1 - c``.
    """

    anchors: np.ndarray
    radii: np.ndarray

    def raw(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        rho = np.linalg.norm(x[:, None, :] - self.anchors[None, :, :], axis=2) / self.radii
        return radial_bump(rho)

    def evaluate(self, x):
        """Return ``(phi_out, phi)`` with ``phi`` of shape ``(m, P)``."""
        b = self.raw(x)
        s = b.sum(axis=1)
        c = smoothstep(s)[0]
        with np.errstate(invalid="ignore", divide="ignore"):
            phi = np.where(s[:, None] > 0, c[:, None] * b / np.where(s > 0, s, 1.0)[:, None], 0.0)
        phi = np.clip(phi, 0.0, 1.0)
        return 1.0 - c, phi


def partition_of_unity(geometry: Geometry, anchors, radii, n_gamma_samples: int = 4001) -> PartitionOfUnity:
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (len(anchors),)).copy()
    if (radii <= 0).any():
        raise GeometryError("radii must be positive")
    if not geometry.on_interface(anchors).all():
        raise GeometryError("all anchors must lie on the interface")
    gl = geometry.interface_line
    zs = np.array([gl.interpolate(t, normalized=True).coords[0] for t in np.linspace(0, 1, n_gamma_samples)])
    pou = PartitionOfUnity(anchors, radii)
    # phi_out vanishes exactly where the summed bumps reach 1
    uncovered = zs[pou.raw(zs).sum(axis=1) < 1.0]
    if len(uncovered):
        raise CoverageError(
            f"{len(uncovered)} interface samples are not covered by the anchor plateaus, "
            f"e.g. {uncovered[:3].tolist()}",
            uncovered,
        )
    phi_out, _ = pou.evaluate(zs)
    if np.abs(phi_out).max() > 0:
        raise CoverageError("phi_out does not vanish on the interface", zs[phi_out > 0])
    return pou
