"""Mesh comparison metrics: TQ, CD, HD, ECD, TD and NM-CD.

Distances are in the units of the input meshes. :func:`evaluate` first maps
both meshes through the reference's unit-cube transform and then applies
the reporting scale factors listed in :data:`SCALES`.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ._bvh import TriangleBVH
from .errors import EmptyMeshError
from .mesh import TriangleMesh
from .udf import normalize_to_unit_cube

SCALES = {"cd": 1e3, "hd": 1e2, "ecd": 1e2, "nm_cd": 1e3}
ALL_METRICS = ("cd", "hd", "ecd", "tq", "td", "nm_cd")


def _require(mesh: TriangleMesh, what="mesh"):
    if mesh.n_faces == 0:
        raise EmptyMeshError(f"{what} has no faces")


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def triangle_quality(mesh: TriangleMesh, per_face: bool = False, eps: float = 1e-14):
    """Mean of ``6/sqrt(3) * S / (p * h)`` over non-degenerate faces.

    ``S`` is the area, ``p`` the half perimeter and ``h`` the longest edge.
    With ``per_face`` the per-face array is returned as well, NaN on
    degenerate faces.
    """
    _require(mesh)
    t = mesh.vertices[mesh.faces]
    lens = np.linalg.norm(t[:, [1, 2, 0]] - t, axis=2)
    area = mesh.face_areas()
    p = lens.sum(axis=1) / 2.0
    h = lens.max(axis=1)
    ok = (h > 0) & (area > eps * h * h)
    q = np.full(len(area), np.nan)
    q[ok] = (6.0 / math.sqrt(3.0)) * area[ok] / (p[ok] * h[ok])
    if not np.any(ok):
        raise EmptyMeshError("every face is degenerate")
    mean = float(np.mean(q[ok]))
    return (mean, q) if per_face else mean


def sample_surface(mesh: TriangleMesh, n: int, rng=None):
    """Area-weighted uniform samples; returns ``(points, face_index)``."""
    _require(mesh)
    rng = _rng(rng)
    area = mesh.face_areas()
    total = area.sum()
    if total <= 0:
        raise EmptyMeshError("mesh has zero area")
    fi = rng.choice(len(area), size=n, p=area / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    t = mesh.vertices[mesh.faces[fi]]
    pts = ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
           + (r1 * r2)[:, None] * t[:, 2])
    return pts, fi


def _surface_distances(a, b, n_samples, rng):
    _require(a, "first mesh")
    _require(b, "second mesh")
    rng = _rng(rng)
    pa, _ = sample_surface(a, n_samples, rng)
    pb, _ = sample_surface(b, n_samples, rng)
    da = TriangleBVH(b.vertices, b.faces).query(pa)[0]
    db = TriangleBVH(a.vertices, a.faces).query(pb)[0]
    return da, db


def chamfer_l1(a: TriangleMesh, b: TriangleMesh, n_samples: int = 100_000, rng=0) -> float:
    """Symmetric mean of sample-to-surface distances, halved."""
    da, db = _surface_distances(a, b, n_samples, rng)
    return 0.5 * (float(da.mean()) + float(db.mean()))


def hausdorff(a: TriangleMesh, b: TriangleMesh, n_samples: int = 100_000, rng=0,
              diagonal: float | None = None) -> float:
    """Sampled two-sided Hausdorff distance as a percentage of ``diagonal``.

    ``diagonal`` defaults to the bounding-box diagonal of ``b`` (the reference).
    """
    da, db = _surface_distances(a, b, n_samples, rng)
    diag = b.diagonal() if diagonal is None else float(diagonal)
    return 100.0 * max(float(da.max()), float(db.max())) / diag


def sharp_samples(mesh: TriangleMesh, n_samples: int, rng=0, threshold: float = 0.2,
                  radius: float | None = None) -> np.ndarray:
    """Surface samples near a crease.

    A sample is kept when some other sample within ``radius`` carries a
    normal with ``|dot| < threshold``. Absolute dot products make the rule
    independent of face orientation.
    """
    pts, fi = sample_surface(mesh, n_samples, rng)
    radius = 0.01 * mesh.diagonal() if radius is None else float(radius)
    normals = mesh.face_normals()[fi]
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    keep = np.zeros(len(pts), dtype=bool)
    if len(pairs):
        dots = np.abs(np.einsum("ij,ij->i", normals[pairs[:, 0]], normals[pairs[:, 1]]))
        hit = pairs[dots < threshold]
        keep[hit[:, 0]] = True
        keep[hit[:, 1]] = True
    return pts[keep]


def point_chamfer(pa, pb) -> float:
    """L1 chamfer between point sets; Inf when exactly one side is empty."""
    pa = np.asarray(pa, dtype=np.float64).reshape(-1, 3)
    pb = np.asarray(pb, dtype=np.float64).reshape(-1, 3)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return math.inf
    da = cKDTree(pb).query(pa)[0]
    db = cKDTree(pa).query(pb)[0]
    return 0.5 * (float(da.mean()) + float(db.mean()))


def edge_chamfer(a: TriangleMesh, b: TriangleMesh, n_samples: int = 100_000, sharp_threshold: float = 0.2,
                 sharp_radius: float | None = None, rng=0) -> float:
    """Chamfer between the sharp-sample sets of two meshes.

    Both sides are drawn from the same seed so identical meshes give
    identical sample sets. ``sharp_radius`` defaults to 1% of the diagonal
    of ``b``.
    """
    _require(a, "first mesh")
    _require(b, "second mesh")
    radius = 0.01 * b.diagonal() if sharp_radius is None else sharp_radius
    seed = _seed_of(rng)
    sa = sharp_samples(a, n_samples, seed, sharp_threshold, radius)
    sb = sharp_samples(b, n_samples, seed, sharp_threshold, radius)
    return point_chamfer(sa, sb)


def euler_td(a: TriangleMesh, b: TriangleMesh) -> int:
    """``|chi(a) - chi(b)|`` with chi counted over referenced vertices only."""
    return abs(a.euler_characteristic() - b.euler_characteristic())


def nonmanifold_locus(mesh: TriangleMesh):
    """Edges with more than two faces and vertices with a broken link.

    Returns ``(segments, points)`` with shapes (E, 2, 3) and (V, 3).
    """
    if mesh.n_faces == 0:
        return np.zeros((0, 2, 3)), np.zeros((0, 3))
    edges, inc = mesh.edge_incidence()
    nm_edges = edges[inc > 2]
    nm_verts = np.flatnonzero(mesh.vertex_link_status() == 2)
    return mesh.vertices[nm_edges], mesh.vertices[nm_verts]


def sample_locus(segments, points, n_samples: int, rng=0) -> np.ndarray:
    """Length-weighted samples on ``segments`` plus the isolated ``points``."""
    rng = _rng(rng)
    segments = np.asarray(segments, dtype=np.float64).reshape(-1, 2, 3)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = [points]
    if len(segments):
        lens = np.linalg.norm(segments[:, 1] - segments[:, 0], axis=1)
        if lens.sum() > 0:
            si = rng.choice(len(segments), size=n_samples, p=lens / lens.sum())
            t = rng.random(n_samples)[:, None]
            out.append(segments[si, 0] * (1 - t) + segments[si, 1] * t)
        else:
            out.append(segments[:, 0])
    return np.concatenate(out)


def _seed_of(rng):
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2**63))
    return rng


def nm_chamfer(a, b, n_samples: int = 100_000, rng=0) -> float:
    """Chamfer between non-manifold loci.

    Either argument may be a mesh or a point array that already samples a
    locus. Inf when exactly one side has no non-manifold feature.
    """
    seed = _seed_of(rng)

    def pts(x):
        if isinstance(x, TriangleMesh):
            return sample_locus(*nonmanifold_locus(x), n_samples, seed)
        return np.asarray(x, dtype=np.float64).reshape(-1, 3)

    return point_chamfer(pts(a), pts(b))


@dataclass
class MetricsReport:
    """Scaled metric values; see ``scales`` for the factor applied to each."""

    cd: float | None = None
    hd: float | None = None
    ecd: float | None = None
    tq: float | None = None
    td: int | None = None
    nm_cd: float | None = None
    sample_counts: dict = field(default_factory=dict)
    parameters: dict = field(default_factory=dict)
    scales: dict = field(default_factory=lambda: dict(SCALES))

    def validate(self):
        for k in ("cd", "hd", "ecd", "td", "nm_cd"):
            v = getattr(self, k)
            if v is not None and not v >= 0:
                raise ValueError(f"{k} must be >= 0, got {v}")
        if self.tq is not None and not 0 <= self.tq <= 1 + 1e-9:
            raise ValueError(f"tq out of range: {self.tq}")

    def values(self) -> dict:
        return {k: getattr(self, k) for k in ALL_METRICS if getattr(self, k) is not None}

    def to_dict(self) -> dict:
        def enc(v):
            return "Infinite" if isinstance(v, float) and math.isinf(v) else v
        d = {k: enc(v) for k, v in self.values().items()}
        d["scales"] = {k: v for k, v in self.scales.items() if k in d}
        d["sample_counts"] = self.sample_counts
        d["parameters"] = self.parameters
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(mesh: TriangleMesh, reference: TriangleMesh, metrics=ALL_METRICS, n_samples: int = 100_000,
             sharp_threshold: float = 0.2, sharp_radius: float | None = None, rng_seed: int = 0,
             reference_locus=None, normalize: bool = True) -> MetricsReport:
    """Compute the requested metrics of ``mesh`` against ``reference``.

    With ``normalize`` both meshes are mapped by the transform that puts the
    reference in the centered unit cube. ``reference_locus`` (points in the
    reference frame) replaces the reference's own non-manifold locus.
    """
    metrics = tuple(metrics)
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    _require(reference, "reference mesh")
    locus = reference_locus
    if normalize:
        reference, tf = normalize_to_unit_cube(reference)
        mesh = TriangleMesh(tf.apply(mesh.vertices), mesh.faces.copy()) if mesh.n_vertices else mesh
        if locus is not None:
            locus = tf.apply(locus)
    rep = MetricsReport(parameters={"n_samples": n_samples, "sharp_threshold": sharp_threshold,
                                    "sharp_radius": sharp_radius, "rng_seed": rng_seed,
                                    "normalized": normalize})
    if "cd" in metrics:
        rep.cd = chamfer_l1(mesh, reference, n_samples, rng_seed) * SCALES["cd"]
        rep.sample_counts["cd"] = n_samples
    if "hd" in metrics:
        rep.hd = hausdorff(mesh, reference, n_samples, rng_seed)
        rep.sample_counts["hd"] = n_samples
    if "ecd" in metrics:
        rep.ecd = edge_chamfer(mesh, reference, n_samples, sharp_threshold, sharp_radius, rng_seed) * SCALES["ecd"]
        rep.sample_counts["ecd"] = n_samples
    if "tq" in metrics:
        rep.tq = triangle_quality(mesh)
    if "td" in metrics:
        rep.td = euler_td(mesh, reference)
    if "nm_cd" in metrics:
        ref = reference if locus is None else locus
        rep.nm_cd = nm_chamfer(mesh, ref, n_samples, rng_seed) * SCALES["nm_cd"]
        rep.sample_counts["nm_cd"] = n_samples
    rep.validate()
    return rep


def write_csv(rows: list[tuple[str, MetricsReport]], path, metrics=ALL_METRICS):
    """One row per model: ``name`` followed by the requested metric columns."""
    if hasattr(path, "write"):
        _write_rows(path, rows, metrics)
        return
    with open(path, "w", newline="") as fh:
        _write_rows(fh, rows, metrics)


def _write_rows(fh, rows, metrics):
    w = csv.writer(fh)
    w.writerow(["name", *metrics])
    for name, rep in rows:
        vals = rep.values()
        w.writerow([name, *[("Infinite" if isinstance(vals.get(m), float) and math.isinf(vals[m])
                             else vals.get(m, "")) for m in metrics]])
