"""Unsigned distance fields: mesh, analytic and sampled-grid sources.

Every field evaluates batches of points through ``evaluate(points)``,
returning ``(values, gradients)`` with values ``>= 0`` and unit
gradients. Points closer than :data:`EPS_DEGEN` to the zero set get a
best-effort gradient (the local surface normal where one exists) and are
reported as degenerate by :func:`eval_udf`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._bvh import TriangleBVH
from .errors import EmptyMeshError, MeshFormatError, NoIntersectionError, NonConvergentError
from .mesh import TriangleMesh

EPS_DEGEN = 1e-7

GRID_MAGIC = b"UDFG"


@dataclass
class UdfSample:
    point: np.ndarray
    value: float
    gradient: np.ndarray
    degenerate: bool = False
    out_of_domain: bool = False


def _normalize_rows(v, fallback=None):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    out = v / np.where(n > 0, n, 1.0)
    if fallback is not None:
        bad = (n[..., 0] <= 0)
        out[bad] = fallback[bad] if np.ndim(fallback) > 1 else fallback
    return out


class UdfField:
    """Base class. Subclasses implement ``evaluate`` and set ``bounds``."""

    bounds: tuple[np.ndarray, np.ndarray]
    # distance offset used to step around the non-smooth zone of sampled fields
    kink_clearance: float = 0.0
    # smallest residual the field can resolve
    resolution_floor: float = 0.0

    def evaluate(self, points):
        raise NotImplementedError

    @property
    def diagonal(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(np.asarray(hi) - np.asarray(lo)))

    def in_domain(self, points):
        return np.ones(len(np.atleast_2d(points)), dtype=bool)

    def to_spec(self) -> dict:
        raise TypeError(f"{type(self).__name__} has no JSON spec")


# ----------------------------------------------------------------------
# mesh source
# ----------------------------------------------------------------------

class MeshField(UdfField):
    """Exact distance to a triangle soup, accelerated by a median-split BVH."""

    def __init__(self, mesh: TriangleMesh, padding: float = 0.05):
        if mesh.n_faces == 0:
            raise EmptyMeshError("MeshField needs at least one triangle")
        self.mesh = mesh
        self.bvh = TriangleBVH(mesh.vertices, mesh.faces)
        self.face_normals = mesh.face_normals()
        lo, hi = mesh.bounds()
        pad = padding * max(float(np.max(hi - lo)), 1e-12)
        self.bounds = (lo - pad, hi + pad)

    def closest(self, points):
        return self.bvh.query(points)

    def evaluate(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        d, cp, tri = self.bvh.query(points)
        grad = _normalize_rows(points - cp, fallback=self.face_normals[tri])
        small = d <= EPS_DEGEN
        grad[small] = self.face_normals[tri[small]]
        return d, grad


# ----------------------------------------------------------------------
# analytic primitives
# ----------------------------------------------------------------------

def _orthonormal_frame(normal):
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return n, u, v


class AnalyticField(UdfField):
    """Closed-form UDF. Primitives report their closest point to simplify composition."""

    def __init__(self, bounds=None):
        if bounds is None:
            bounds = (np.full(3, -0.5), np.full(3, 0.5))
        self.bounds = (np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64))

    def sample_surface(self, n, rng):
        raise NotImplementedError

    def _result(self, points, cp, normal_fallback):
        diff = points - cp
        d = np.linalg.norm(diff, axis=1)
        grad = _normalize_rows(diff, fallback=normal_fallback)
        small = d <= EPS_DEGEN
        grad[small] = normal_fallback[small]
        return d, grad


class Sphere(AnalyticField):
    def __init__(self, center=(0.0, 0.0, 0.0), radius=1.0, bounds=None):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        if bounds is None:
            r = 1.25 * self.radius
            bounds = (self.center - r, self.center + r)
        super().__init__(bounds)

    def evaluate(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        rel = points - self.center
        rn = np.linalg.norm(rel, axis=1)
        radial = _normalize_rows(rel, fallback=np.array([1.0, 0.0, 0.0]))
        d = np.abs(rn - self.radius)
        sign = np.where(rn >= self.radius, 1.0, -1.0)
        grad = radial * sign[:, None]
        grad[d <= EPS_DEGEN] = radial[d <= EPS_DEGEN]
        return d, grad

    def sample_surface(self, n, rng):
        v = rng.standard_normal((n, 3))
        return self.center + self.radius * _normalize_rows(v)

    def to_spec(self):
        return {"type": "sphere", "center": self.center.tolist(), "radius": self.radius}


class PlanePatch(AnalyticField):
    """Rectangle (or infinite plane) through ``origin`` with the given normal.

    ``half_extents`` bounds the patch along the in-plane axes ``u`` and
    ``v``; use ``inf`` for an unbounded plane.
    """

    def __init__(self, origin=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0), half_extents=(np.inf, np.inf),
                 u_axis=None, bounds=None):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.normal, u, v = _orthonormal_frame(normal)
        if u_axis is not None:
            u = np.asarray(u_axis, dtype=np.float64)
            u = u - self.normal * (u @ self.normal)
            u /= np.linalg.norm(u)
            v = np.cross(self.normal, u)
        self.u, self.v = u, v
        self.half_extents = np.asarray(half_extents, dtype=np.float64)
        super().__init__(bounds)

    def closest_point(self, points):
        rel = points - self.origin
        a = np.clip(rel @ self.u, -self.half_extents[0], self.half_extents[0])
        b = np.clip(rel @ self.v, -self.half_extents[1], self.half_extents[1])
        return self.origin + a[:, None] * self.u + b[:, None] * self.v

    def evaluate(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cp = self.closest_point(points)
        side = np.where((points - self.origin) @ self.normal >= 0, 1.0, -1.0)
        return self._result(points, cp, side[:, None] * self.normal)

    def sample_surface(self, n, rng):
        if not np.all(np.isfinite(self.half_extents)):
            raise ValueError("cannot sample an unbounded plane")
        ab = rng.uniform(-1, 1, (n, 2)) * self.half_extents
        return self.origin + ab[:, :1] * self.u + ab[:, 1:] * self.v

    def to_spec(self):
        return {"type": "plane", "origin": self.origin.tolist(), "normal": self.normal.tolist(),
                "u_axis": self.u.tolist(),
                "half_extents": [None if not np.isfinite(h) else float(h) for h in self.half_extents]}


class Disk(AnalyticField):
    """Open flat disk: boundary circle included, no thickness."""

    def __init__(self, center=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0), radius=0.4, bounds=None):
        self.center = np.asarray(center, dtype=np.float64)
        self.normal, self.u, self.v = _orthonormal_frame(normal)
        self.radius = float(radius)
        super().__init__(bounds)

    def closest_point(self, points):
        rel = points - self.center
        inplane = rel - np.outer(rel @ self.normal, self.normal)
        r = np.linalg.norm(inplane, axis=1)
        scale = np.where(r > self.radius, self.radius / np.where(r > 0, r, 1.0), 1.0)
        return self.center + inplane * scale[:, None]

    def evaluate(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cp = self.closest_point(points)
        side = np.where((points - self.center) @ self.normal >= 0, 1.0, -1.0)
        return self._result(points, cp, side[:, None] * self.normal)

    def sample_surface(self, n, rng):
        r = self.radius * np.sqrt(rng.uniform(0, 1, n))
        t = rng.uniform(0, 2 * np.pi, n)
        return self.center + (r * np.cos(t))[:, None] * self.u + (r * np.sin(t))[:, None] * self.v

    def to_spec(self):
        return {"type": "disk", "center": self.center.tolist(), "normal": self.normal.tolist(),
                "radius": self.radius}


class BoxShell(AnalyticField):
    """Surface of an axis-aligned box (UDF is |signed box distance|)."""

    def __init__(self, center=(0.0, 0.0, 0.0), half_extents=(0.4, 0.4, 0.4), bounds=None):
        self.center = np.asarray(center, dtype=np.float64)
        self.half = np.asarray(half_extents, dtype=np.float64)
        super().__init__(bounds)

    def closest_point(self, points):
        rel = points - self.center
        q = np.abs(rel) - self.half
        outside = np.any(q > 0, axis=1)
        cp = np.clip(rel, -self.half, self.half)
        # interior points: push the coordinate of the nearest face out to it
        ins = ~outside
        if np.any(ins):
            r = rel[ins]
            qi = q[ins]
            axis = np.argmax(qi, axis=1)
            c = r.copy()
            rows = np.arange(len(r))
            c[rows, axis] = np.where(r[rows, axis] >= 0, 1.0, -1.0) * self.half[axis]
            cp[ins] = c
        return self.center + cp

    def evaluate(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cp = self.closest_point(points)
        rel = points - self.center
        q = np.abs(rel) - self.half
        axis = np.argmax(q, axis=1)
        fallback = np.zeros_like(points)
        rows = np.arange(len(points))
        fallback[rows, axis] = np.where(rel[rows, axis] >= 0, 1.0, -1.0)
        return self._result(points, cp, fallback)

    def sample_surface(self, n, rng):
        h = self.half
        areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1, 1, (n, 3)) * h
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        pts[np.arange(n), axis] = sign * h[axis]
        return self.center + pts

    def to_spec(self):
        return {"type": "box", "center": self.center.tolist(), "half_extents": self.half.tolist()}


class Union(AnalyticField):
    """Min-composition of child fields; gradient comes from the minimizing child."""

    def __init__(self, children, bounds=None):
        self.children = list(children)
        if not self.children:
            raise ValueError("Union needs at least one child")
        if bounds is None:
            bounds = (np.min([c.bounds[0] for c in self.children], axis=0),
                      np.max([c.bounds[1] for c in self.children], axis=0))
        super().__init__(bounds)

    def evaluate(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        best_d, best_g = self.children[0].evaluate(points)
        for child in self.children[1:]:
            d, g = child.evaluate(points)
            take = d < best_d
            best_d = np.where(take, d, best_d)
            best_g = np.where(take[:, None], g, best_g)
        return best_d, best_g

    def child_values(self, points):
        return np.stack([c.evaluate(points)[0] for c in self.children], axis=1)

    def sample_surface(self, n, rng):
        parts = [c.sample_surface(n, rng) for c in self.children]
        return np.concatenate(parts)[rng.permutation(n * len(parts))[:n]]

    def to_spec(self):
        return {"type": "union", "children": [c.to_spec() for c in self.children]}


def spec_with_bounds(field: AnalyticField) -> dict:
    """``to_spec`` plus the sampling bounds, so a round trip rebuilds the same field."""
    spec = field.to_spec()
    spec["bounds"] = [np.asarray(b, dtype=np.float64).tolist() for b in field.bounds]
    return spec


def field_from_spec(spec: dict, bounds=None) -> AnalyticField:
    """Rebuild an analytic field from the dict produced by ``to_spec``."""
    kind = spec["type"]
    if kind == "sphere":
        f = Sphere(spec["center"], spec["radius"])
    elif kind == "plane":
        he = [np.inf if h is None else h for h in spec.get("half_extents", [None, None])]
        f = PlanePatch(spec["origin"], spec["normal"], he, u_axis=spec.get("u_axis"))
    elif kind == "disk":
        f = Disk(spec["center"], spec["normal"], spec["radius"])
    elif kind == "box":
        f = BoxShell(spec["center"], spec["half_extents"])
    elif kind == "union":
        f = Union([field_from_spec(c) for c in spec["children"]])
    else:
        raise ValueError(f"unknown analytic field type {kind!r}")
    b = spec.get("bounds", bounds)
    if b is not None:
        f.bounds = (np.asarray(b[0], dtype=np.float64), np.asarray(b[1], dtype=np.float64))
    return f


# ----------------------------------------------------------------------
# sampled grid
# ----------------------------------------------------------------------

class GridField(UdfField):
    """Trilinear interpolation of UDF values stored on a regular grid.

    ``values`` is indexed ``[i, j, k]`` along x, y, z. Queries outside the
    grid are clamped to its boundary and reported through ``in_domain``.
    """

    def __init__(self, values, origin, spacing):
        self.values = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("grid needs at least 2 nodes per axis")
        self.origin = np.asarray(origin, dtype=np.float64)
        self.spacing = float(spacing)
        self.shape = np.array(self.values.shape)
        self.bounds = (self.origin.copy(), self.origin + (self.shape - 1) * self.spacing)
        self.kink_clearance = np.sqrt(3.0) * self.spacing
        self.resolution_floor = 1e-3 * self.spacing

    @classmethod
    def from_field(cls, field: UdfField, resolution, bounds=None):
        lo, hi = field.bounds if bounds is None else bounds
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        spacing = float(np.max(hi - lo)) / (resolution - 1)
        n = np.maximum(np.ceil((hi - lo) / spacing - 1e-9).astype(int) + 1, 2)
        axes = [lo[a] + spacing * np.arange(n[a]) for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        vals = field.evaluate(pts)[0].reshape(tuple(n))
        return cls(vals, lo, spacing)

    def in_domain(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo, hi = self.bounds
        return np.all((points >= lo) & (points <= hi), axis=1)

    def evaluate(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo, hi = self.bounds
        p = np.clip(points, lo, hi)
        g = (p - self.origin) / self.spacing
        i0 = np.clip(np.floor(g).astype(np.int64), 0, self.shape - 2)
        t = g - i0
        V = self.values
        i, j, k = i0[:, 0], i0[:, 1], i0[:, 2]
        c = np.empty((len(p), 2, 2, 2))
        for a in (0, 1):
            for b in (0, 1):
                for e in (0, 1):
                    c[:, a, b, e] = V[i + a, j + b, k + e]
        tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
        # interpolate along z, then y, then x; keep partials for the analytic gradient
        cz = c[:, :, :, 0] * (1 - tz)[:, None, None] + c[:, :, :, 1] * tz[:, None, None]
        dcz = c[:, :, :, 1] - c[:, :, :, 0]
        cy = cz[:, :, 0] * (1 - ty)[:, None] + cz[:, :, 1] * ty[:, None]
        dcy_dy = cz[:, :, 1] - cz[:, :, 0]
        dcy_dz = dcz[:, :, 0] * (1 - ty)[:, None] + dcz[:, :, 1] * ty[:, None]
        val = cy[:, 0] * (1 - tx) + cy[:, 1] * tx
        gx = cy[:, 1] - cy[:, 0]
        gy = dcy_dy[:, 0] * (1 - tx) + dcy_dy[:, 1] * tx
        gz = dcy_dz[:, 0] * (1 - tx) + dcy_dz[:, 1] * tx
        grad = np.stack([gx, gy, gz], axis=1) / self.spacing
        grad = _normalize_rows(grad, fallback=np.array([0.0, 0.0, 1.0]))
        return np.maximum(val, 0.0), grad

    def save(self, path):
        nx, ny, nz = (int(s) for s in self.shape)
        with open(path, "wb") as fh:
            fh.write(GRID_MAGIC + struct.pack("<III", nx, ny, nz))
            fh.write(struct.pack("<4d", *self.origin, self.spacing))
            # x-fastest on disk == C order of the [k, j, i] transpose
            fh.write(self.values.transpose(2, 1, 0).astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        if len(raw) < 48 or raw[:4] != GRID_MAGIC:
            raise MeshFormatError("not a UDFG grid file", path)
        nx, ny, nz = struct.unpack("<III", raw[4:16])
        ox, oy, oz, spacing = struct.unpack("<4d", raw[16:48])
        count = nx * ny * nz
        if len(raw) != 48 + 4 * count:
            raise MeshFormatError(f"expected {count} float32 values", path)
        vals = np.frombuffer(raw[48:], dtype="<f4").reshape(nz, ny, nx).transpose(2, 1, 0)
        return cls(vals.astype(np.float64), (ox, oy, oz), spacing)


# ----------------------------------------------------------------------
# operations
# ----------------------------------------------------------------------

def eval_udf(field: UdfField, p) -> UdfSample:
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValueError("query point must be finite")
    d, g = field.evaluate(p[None])
    return UdfSample(point=p, value=float(d[0]), gradient=g[0],
                     degenerate=bool(d[0] <= EPS_DEGEN),
                     out_of_domain=not bool(field.in_domain(p[None])[0]))


@dataclass
class Projection:
    points: np.ndarray
    residual: np.ndarray
    normals: np.ndarray
    converged: np.ndarray
    steps: np.ndarray
    stalled: np.ndarray = field(default=None)


def project_points(field: UdfField, points, max_steps: int = 10, tol: float = 1e-9) -> Projection:
    """Batched ``x <- x - F(x) n(x)`` until ``F < tol``.

    ``normals`` holds the last non-degenerate gradient seen along the way,
    i.e. the surface normal at the foot point as approached from the
    starting side. For sampled grids the step is taken from a point lifted
    ``field.kink_clearance`` off the current iterate, where interpolated
    values are still an honest distance.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    x = np.array(points, dtype=np.float64).reshape(-1, 3)
    n = len(x)
    lift = field.kink_clearance
    d, g = field.evaluate(x)
    normals = g.copy()
    residual = d.copy()
    history = [residual.copy()]
    steps = np.zeros(n, dtype=np.int64)
    active = residual >= tol
    for _ in range(max_steps):
        if not np.any(active):
            break
        xa = x[active]
        da, ga = d[active], g[active]
        if lift > 0:
            # lift along the last trusted normal; gradients inside the kink zone are noise
            y = xa + lift * normals[active]
            dy, gy = field.evaluate(y)
            step_pt = y - dy[:, None] * gy
            ga = gy
        else:
            step_pt = xa - da[:, None] * ga
        x[active] = step_pt
        ok = da > EPS_DEGEN
        idx = np.flatnonzero(active)
        normals[idx[ok]] = ga[ok]
        d_new, g_new = field.evaluate(x[active])
        d[active] = d_new
        g[active] = g_new
        if lift > 0:
            # distance estimate from a lifted probe, immune to the interpolation kink
            y = x[active] + lift * normals[active]
            r = np.abs(field.evaluate(y)[0] - lift)
            residual[active] = np.minimum(d_new, r)
        else:
            residual[active] = d_new
        steps[active] += 1
        history.append(residual.copy())
        active = residual >= tol
    converged = residual < tol
    hist = np.array(history[-4:])
    if len(hist) >= 4:
        monotone = np.all(np.diff(hist, axis=0) < 0, axis=0)
    else:
        monotone = np.ones(n, dtype=bool)
    stalled = ~converged & ~monotone
    return Projection(x, residual, normals, converged, steps, stalled)


def project_to_surface(field: UdfField, p, max_steps: int = 10, tol: float = 1e-9):
    """Project a single point; returns ``(point, residual)``."""
    proj = project_points(field, np.asarray(p, dtype=np.float64)[None], max_steps, tol)
    if proj.stalled[0]:
        raise NonConvergentError(
            f"projection residual {proj.residual[0]:.3g} >= {tol:.3g} after {max_steps} steps")
    return proj.points[0], float(proj.residual[0])


@dataclass
class NormalizeTransform:
    """``x_normalized = scale * (x + offset)``."""

    scale: float
    offset: np.ndarray

    def apply(self, points):
        return self.scale * (np.asarray(points, dtype=np.float64) + self.offset)

    def invert(self, points):
        return np.asarray(points, dtype=np.float64) / self.scale - self.offset

    def to_dict(self):
        return {"scale": self.scale, "offset": np.asarray(self.offset).tolist()}


def normalize_to_unit_cube(mesh: TriangleMesh) -> tuple[TriangleMesh, NormalizeTransform]:
    if mesh.n_vertices == 0 or mesh.n_faces == 0:
        raise EmptyMeshError("cannot normalize an empty mesh")
    lo, hi = mesh.bounds()
    extent = float(np.max(hi - lo))
    scale = 1.0 / extent if extent > 0 else 1.0
    t = NormalizeTransform(scale, -(lo + hi) / 2.0)
    return TriangleMesh(t.apply(mesh.vertices), mesh.faces.copy()), t


def compose_nonmanifold(primitives, n_probe: int = 20000, tol: float = 1e-4, rng=None,
                        band: float = 0.02, bounds=None):
    """Min-compose analytic primitives and sample where their zero sets cross.

    Returns ``(field, locus)`` where ``locus`` is an (L, 3) array of points
    lying within ``tol`` of at least two primitives.
    """
    prims = list(primitives)
    if len(prims) < 2:
        raise ValueError("need at least two primitives")
    rng = np.random.default_rng(0) if rng is None else rng
    union = Union(prims, bounds=bounds)
    found = []
    for i in range(len(prims)):
        for j in range(i + 1, len(prims)):
            # sample the primitive that has a finite surface
            a, b = (i, j) if _bounded(prims[i]) else (j, i)
            pts = prims[a].sample_surface(n_probe, rng)
            near = prims[b].evaluate(pts)[0] < band
            q = pts[near]
            # alternating projections converge to the crossing for transversal pairs
            for _ in range(60):
                q = prims[b].closest_point(q) if hasattr(prims[b], "closest_point") else _proj(prims[b], q)
                q = prims[a].closest_point(q) if hasattr(prims[a], "closest_point") else _proj(prims[a], q)
            if len(q):
                da = prims[a].evaluate(q)[0]
                db = prims[b].evaluate(q)[0]
                found.append(q[(da < tol) & (db < tol)])
    locus = np.concatenate(found) if found else np.zeros((0, 3))
    if len(locus) == 0:
        raise NoIntersectionError("primitive zero sets do not meet")
    return union, locus


def _bounded(prim) -> bool:
    return not (isinstance(prim, PlanePatch) and not np.all(np.isfinite(prim.half_extents)))


def _proj(prim, q):
    d, g = prim.evaluate(q)
    return q - d[:, None] * g
