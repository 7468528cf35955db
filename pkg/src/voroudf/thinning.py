"""Mesh thinning: dissolve solid tetrahedra and drop small manifold fragments.

Only faces are ever deleted; vertex arrays pass through untouched.
"""

from __future__ import annotations

import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import NoManifoldPairError, StalledThinningWarning
from .mesh import TriangleMesh

log = logging.getLogger(__name__)

_TET_FACES = ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3))


def _key(a, b, c):
    return tuple(sorted((int(a), int(b), int(c))))


class _FaceSet:
    """Mutable face set with edge incidence bookkeeping."""

    def __init__(self, faces):
        self.faces = {}
        self.edge_faces = defaultdict(set)
        for f in np.asarray(faces, dtype=np.int64).tolist():
            self.add(_key(*f))

    def add(self, k):
        if k in self.faces:
            return
        self.faces[k] = True
        a, b, c = k
        for e in ((a, b), (a, c), (b, c)):
            self.edge_faces[e].add(k)

    def remove(self, k):
        del self.faces[k]
        a, b, c = k
        for e in ((a, b), (a, c), (b, c)):
            s = self.edge_faces[e]
            s.discard(k)
            if not s:
                del self.edge_faces[e]

    def incidence(self, u, v):
        e = (u, v) if u < v else (v, u)
        return len(self.edge_faces.get(e, ()))

    def __contains__(self, k):
        return k in self.faces

    def array(self):
        if not self.faces:
            return np.zeros((0, 3), dtype=np.int64)
        return np.array(sorted(self.faces), dtype=np.int64)


def _find_tets(fs: _FaceSet):
    tets = set()
    for (u, v), fset in fs.edge_faces.items():
        if len(fset) < 2:
            continue
        thirds = sorted({w for f in fset for w in f if w != u and w != v})
        for i in range(len(thirds)):
            for j in range(i + 1, len(thirds)):
                w1, w2 = thirds[i], thirds[j]
                if _key(u, w1, w2) in fs and _key(v, w1, w2) in fs:
                    tets.add(tuple(sorted((u, v, w1, w2))))
    return sorted(tets)


def detect_solid_tets(mesh: TriangleMesh) -> list[tuple[int, int, int, int]]:
    """All vertex quadruples whose four triangles are present in the mesh.

    Candidates come from pairs of faces on a shared edge; the two closing
    faces are then looked up in a face hash.
    """
    return _find_tets(_FaceSet(mesh.faces))


def _udf(field, pts):
    return field.evaluate(np.asarray(pts, dtype=np.float64).reshape(-1, 3))[0]


def _fold_cosine(vertices, u, v, w1, w2):
    """Cosine of the angle between faces (w1, w2, u) and (w1, w2, v) around edge w1-w2.

    -1 for a flat pair on opposite sides of the edge, +1 for a pair folded
    onto itself.
    """
    e = vertices[w2] - vertices[w1]
    e = e / max(np.linalg.norm(e), 1e-300)
    a = vertices[u] - vertices[w1]
    b = vertices[v] - vertices[w1]
    a = a - (a @ e) * e
    b = b - (b @ e) * e
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den > 0 else 1.0


def _opposite_angles(vertices, u, v, w1, w2):
    """Sum of the angles at ``u`` and ``v`` facing edge w1-w2 (below pi for a Delaunay edge)."""
    total = 0.0
    for p in (u, v):
        a = vertices[w1] - vertices[p]
        b = vertices[w2] - vertices[p]
        den = np.linalg.norm(a) * np.linalg.norm(b)
        total += float(np.arccos(np.clip(a @ b / den, -1.0, 1.0))) if den > 0 else np.pi
    return total


def _pair_candidates(fs: _FaceSet, tet, vertices, field):
    """Face pairs of ``tet`` sharing a manifold edge, best first.

    Ranked by the field at the shared-edge midpoint, then by the field summed
    over the two face centroids. Field values closer than ``tie_tol`` count as
    equal; remaining ties prefer the pair whose removal leaves the most open
    face pair (flat tets on a sheet then keep a valid triangulation), then the
    kept pair with the smaller opposite-angle sum, then the longer shared edge.
    """
    faces = [_key(*(tet[i] for i in idx)) for idx in _TET_FACES]
    cands = []
    for i in range(4):
        for j in range(i + 1, 4):
            shared = sorted(set(faces[i]) & set(faces[j]))
            u, v = shared
            if fs.incidence(u, v) != 2:
                continue
            cands.append((faces[i], faces[j], u, v))
    if not cands:
        return []
    mids = np.array([(vertices[u] + vertices[v]) / 2.0 for _, _, u, v in cands])
    cents = np.array([[vertices[list(f)].mean(axis=0) for f in (f1, f2)] for f1, f2, _, _ in cands])
    emid = _udf(field, mids)
    csum = _udf(field, cents.reshape(-1, 3)).reshape(-1, 2).sum(axis=1)
    elen = np.array([np.linalg.norm(vertices[u] - vertices[v]) for _, _, u, v in cands])
    rest = [sorted(set(tet) - {u, v}) for _, _, u, v in cands]
    fold = np.array([_fold_cosine(vertices, u, v, *w) for (_, _, u, v), w in zip(cands, rest)])
    angles = np.array([_opposite_angles(vertices, u, v, *w) for (_, _, u, v), w in zip(cands, rest)])
    tol = _tie_tol(field)
    order = np.lexsort((-elen, np.round(angles, 9), np.round(fold, 6), -np.round(csum / tol),
                        -np.round(emid / tol)))
    return [(cands[i], float(emid[i])) for i in order]


def _tie_tol(field):
    return max(1e-9 * float(getattr(field, "diagonal", 1.0)), float(getattr(field, "resolution_floor", 0.0)))


def _components(fs: _FaceSet) -> int:
    arr = fs.array()
    return TriangleMesh(np.zeros((int(arr.max()) + 1 if len(arr) else 0, 3)), arr).n_components()


def _prune_one(fs: _FaceSet, tet, vertices, field, check_components=False):
    faces = [_key(*(tet[i] for i in idx)) for idx in _TET_FACES]
    if not all(f in fs for f in faces):
        return None
    cands = _pair_candidates(fs, tet, vertices, field)
    if not cands:
        raise NoManifoldPairError(f"tet {tet} has no face pair on a manifold edge")
    (f1, f2, _, _), _ = cands[0]
    before = _components(fs) if check_components else None
    fs.remove(f1)
    fs.remove(f2)
    if check_components:
        after = _components(fs)
        assert after == before, "pruning changed the component count"
    return f1, f2


def prune_tet(mesh: TriangleMesh, tet, field) -> TriangleMesh:
    """Delete the face pair of ``tet`` with the highest field value on its shared manifold edge."""
    fs = _FaceSet(mesh.faces)
    if _prune_one(fs, tuple(int(t) for t in tet), mesh.vertices, field, check_components=True) is None:
        raise ValueError("tet faces are not all present")
    return TriangleMesh(mesh.vertices, fs.array())


def trim_fins(fs: _FaceSet) -> int:
    """Delete faces left over from partially emitted tets; returns the count.

    A fin face has one edge used by no other face while both of its other
    edges carry three or more faces. Removing it closes the gap without
    touching genuine rims or creases. Repeats to a fixpoint.
    """
    removed = 0
    while True:
        fins = []
        for k in sorted(fs.faces):
            a, b, c = k
            inc = sorted((fs.incidence(a, b), fs.incidence(a, c), fs.incidence(b, c)))
            if inc[0] == 1 and inc[1] >= 3:
                fins.append(k)
        if not fins:
            return removed
        for k in fins:
            a, b, c = k
            inc = sorted((fs.incidence(a, b), fs.incidence(a, c), fs.incidence(b, c)))
            if inc[0] == 1 and inc[1] >= 3:
                fs.remove(k)
                removed += 1


def _tet_score(fs, tet, vertices, field):
    cands = _pair_candidates(fs, tet, vertices, field)
    return cands[0][1] if cands else -np.inf


def _small_manifold(faces, n_vertices, max_faces):
    """Component mask of edge-connected components that are 2-manifold and small."""
    m = TriangleMesh(np.zeros((n_vertices, 3)), faces)
    labels = m.face_components()
    if len(labels) == 0:
        return labels, np.zeros(0, dtype=bool)
    sizes = np.bincount(labels)
    drop = np.zeros(len(sizes), dtype=bool)
    for c in np.flatnonzero(sizes < max_faces):
        sub = TriangleMesh(m.vertices, faces[labels == c])
        _, inc = sub.edge_incidence()
        if inc.max() > 2:
            continue
        if np.any(sub.vertex_link_status() == 2):
            continue
        drop[c] = True
    return labels, drop


def remove_small_components(mesh: TriangleMesh, max_faces: int = 10, stats: dict | None = None) -> TriangleMesh:
    """Repeatedly delete 2-manifold components with fewer than ``max_faces`` faces."""
    faces = mesh.faces.copy()
    removed = 0
    while len(faces):
        labels, drop = _small_manifold(faces, len(mesh.vertices), max_faces)
        if not np.any(drop):
            break
        gone = drop[labels]
        removed += int(gone.sum())
        faces = faces[~gone]
    if stats is not None:
        stats["small_component_faces_removed"] = stats.get("small_component_faces_removed", 0) + removed
    return TriangleMesh(mesh.vertices, faces)


@dataclass
class ThinningReport:
    passes: int = 0
    tets_pruned: int = 0
    faces_removed: int = 0
    boundary_faces_removed: int = 0
    small_component_faces_removed: int = 0
    fin_faces_removed: int = 0
    no_manifold_pair: int = 0
    stalled: bool = False
    residual_tets: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if k != "extra"} | self.extra


def thin(mesh: TriangleMesh, field, max_faces: int = 10, max_passes: int = 1000,
         report: ThinningReport | None = None, fins: bool = True) -> TriangleMesh:
    """Prune solid tets pass by pass, then drop small manifold components.

    Each pass ranks every tet by the field value on its best prunable edge
    and dissolves them in descending order. A pass that removes nothing
    while tets remain ends the loop with :class:`StalledThinningWarning`.
    With ``fins`` the faces of three-sided tets are trimmed as well
    (see :func:`trim_fins`).
    """
    rep = ThinningReport() if report is None else report
    fs = _FaceSet(mesh.faces)
    verts = mesh.vertices
    for _ in range(max_passes):
        tets = _find_tets(fs)
        if not tets:
            break
        rep.passes += 1
        scores = [_tet_score(fs, t, verts, field) for t in tets]
        order = sorted(range(len(tets)), key=lambda i: (-scores[i], tets[i]))
        progress = 0
        for i in order:
            t = tets[i]
            rim = [_key(*(t[i] for i in idx)) for idx in _TET_FACES]
            rim = {f for f in rim if f in fs and min(fs.incidence(f[0], f[1]), fs.incidence(f[0], f[2]),
                                                     fs.incidence(f[1], f[2])) == 1}
            try:
                res = _prune_one(fs, t, verts, field)
            except NoManifoldPairError:
                rep.no_manifold_pair += 1
                continue
            if res is None:
                continue
            # a face on an open rim has an edge no other face uses
            rep.boundary_faces_removed += sum(f in rim for f in res)
            progress += 1
            rep.tets_pruned += 1
            rep.faces_removed += 2
        if progress == 0:
            rep.stalled = True
            rep.residual_tets = len(tets)
            warnings.warn(f"thinning stalled with {len(tets)} solid tets left",
                          StalledThinningWarning, stacklevel=2)
            return TriangleMesh(verts, fs.array())
    if fins:
        rep.fin_faces_removed += trim_fins(fs)
    out = TriangleMesh(verts, fs.array())
    stats = {}
    out = remove_small_components(out, max_faces, stats)
    rep.small_component_faces_removed += stats["small_component_faces_removed"]
    rep.residual_tets = len(detect_solid_tets(out))
    return out
