"""Named analytic test fields with ground-truth meshes and non-manifold loci."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mesh import TriangleMesh, box_mesh, icosphere
from .udf import AnalyticField, BoxShell, Disk, PlanePatch, Sphere, Union


def disk_mesh(center=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0), radius=0.4, rings: int = 24,
              segments: int = 96) -> TriangleMesh:
    """Polar triangulation of a flat disk."""
    from .udf import _orthonormal_frame

    n, u, v = _orthonormal_frame(normal)
    c = np.asarray(center, dtype=np.float64)
    verts = [c]
    faces = []
    t = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    for r in range(1, rings + 1):
        rad = radius * r / rings
        ring = c + rad * (np.cos(t)[:, None] * u + np.sin(t)[:, None] * v)
        verts.extend(ring)
    for s in range(segments):
        faces.append((0, 1 + s, 1 + (s + 1) % segments))
    for r in range(1, rings):
        a0 = 1 + (r - 1) * segments
        b0 = 1 + r * segments
        for s in range(segments):
            s1 = (s + 1) % segments
            faces.append((a0 + s, b0 + s, b0 + s1))
            faces.append((a0 + s, b0 + s1, a0 + s1))
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64))


def plane_mesh(origin=(0.0, 0.0, 0.0), half: float = 0.45, n: int = 48) -> TriangleMesh:
    from .mesh import grid_patch
    return grid_patch(n, n, (-half, -half), (half, half), z=float(origin[2]))


def _merge(*meshes) -> TriangleMesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces))


def _segment(a, b, n):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return np.asarray(a, float) * (1 - t) + np.asarray(b, float) * t


def _circle(r, n, z=0.0):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([r * np.cos(t), r * np.sin(t), np.full(n, z)], axis=1)


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    build: Callable[[], AnalyticField]
    reference: Callable[[], TriangleMesh]
    locus: Callable[[int], np.ndarray]
    closed: bool = False
    open_boundary: bool = False
    thin_plate: bool = False

    def field(self) -> AnalyticField:
        return self.build()


R = 0.4


def _none(n):
    return np.zeros((0, 3))


PRESETS: dict[str, Preset] = {}


def _add(p: Preset):
    PRESETS[p.name] = p


_add(Preset(
    "sphere", "sphere of radius 0.5 (unit diameter)",
    lambda: Sphere(radius=0.5, bounds=(np.full(3, -0.625), np.full(3, 0.625))),
    lambda: icosphere(5, 0.5), _none, closed=True))
_add(Preset(
    "cube", "box surface with half extent 0.4",
    lambda: BoxShell(half_extents=(R, R, R)),
    lambda: box_mesh((-R,) * 3, (R,) * 3, divisions=16), _none, closed=True))
_add(Preset(
    "two-disks", "disks of radius 0.4 in z=0 and x=0 crossing along the y axis",
    lambda: Union([Disk(normal=(0, 0, 1), radius=R), Disk(normal=(1, 0, 0), radius=R)]),
    lambda: _merge(disk_mesh(normal=(0, 0, 1), radius=R), disk_mesh(normal=(1, 0, 0), radius=R)),
    lambda n: _segment((0, -R, 0), (0, R, 0), n), open_boundary=True))
_add(Preset(
    "three-disks", "three pairwise orthogonal disks of radius 0.4",
    lambda: Union([Disk(normal=ax, radius=R) for ax in np.eye(3)]),
    lambda: _merge(*[disk_mesh(normal=ax, radius=R) for ax in np.eye(3)]),
    lambda n: np.concatenate([_segment(-R * ax, R * ax, max(n // 3, 2)) for ax in np.eye(3)]),
    open_boundary=True))
_add(Preset(
    "sphere-plane", "sphere of radius 0.4 cut by the square z=0 patch of half size 0.45",
    lambda: Union([Sphere(radius=R, bounds=(np.full(3, -0.5), np.full(3, 0.5))),
                   PlanePatch(normal=(0, 0, 1), half_extents=(0.45, 0.45))]),
    lambda: _merge(icosphere(4, R), plane_mesh(half=0.45)),
    lambda n: _circle(R, n), open_boundary=True))
_add(Preset(
    "thin-plate", "parallel disks of radius 0.4 at z=+-0.05",
    lambda: Union([Disk(center=(0, 0, 0.05), radius=R), Disk(center=(0, 0, -0.05), radius=R)]),
    lambda: _merge(disk_mesh(center=(0, 0, 0.05), radius=R), disk_mesh(center=(0, 0, -0.05), radius=R)),
    _none, open_boundary=True, thin_plate=True))
_add(Preset(
    "open-disk", "single disk of radius 0.4 with an open rim",
    lambda: Disk(radius=R),
    lambda: disk_mesh(radius=R), _none, open_boundary=True))


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
