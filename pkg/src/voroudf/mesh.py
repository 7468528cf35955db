"""Indexed triangle mesh container and OBJ / PLY input-output.

Meshes produced by the reconstruction are allowed to be open and
non-manifold, so nothing here assumes a half-edge structure: adjacency is
derived from plain index lists on demand.
"""

from __future__ import annotations

import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import EmptyMeshError, MeshFormatError


def _sorted_edges(faces: np.ndarray) -> np.ndarray:
    """Return the (3F, 2) array of face edges with each row sorted."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.sort(e, axis=1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices.copy(), self.faces.copy())

    # ------------------------------------------------------------------
    # validity
    # ------------------------------------------------------------------
    def validate(self):
        """Raise ``ValueError`` on degenerate or duplicate faces or bad indices."""
        f = self.faces
        if len(f) == 0:
            return
        if f.min() < 0 or f.max() >= len(self.vertices):
            raise ValueError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("degenerate face with repeated vertex")
        key = np.sort(f, axis=1)
        if len(np.unique(key, axis=0)) != len(key):
            raise ValueError("duplicate face")

    def cleaned(self) -> "TriangleMesh":
        """Drop degenerate and duplicate faces, keeping first occurrences in order."""
        f = self.faces
        ok = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
        f = f[ok]
        _, first = np.unique(np.sort(f, axis=1), axis=0, return_index=True)
        return TriangleMesh(self.vertices.copy(), f[np.sort(first)])

    def compact(self) -> "TriangleMesh":
        """Remove vertices not referenced by any face, remapping indices."""
        used = np.unique(self.faces)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh(self.vertices[used], remap[self.faces])

    # ------------------------------------------------------------------
    # adjacency
    # ------------------------------------------------------------------
    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (E, 2) array."""
        if len(self.faces) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        return np.unique(_sorted_edges(self.faces), axis=0)

    def edge_faces(self) -> dict:
        """Map each sorted edge tuple to the list of incident face indices."""
        out = defaultdict(list)
        for fi, (a, b, c) in enumerate(self.faces.tolist()):
            for u, v in ((a, b), (b, c), (c, a)):
                out[(u, v) if u < v else (v, u)].append(fi)
        return out

    def edge_incidence(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(edges, counts)``: unique edges and how many faces use each."""
        if len(self.faces) == 0:
            return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
        edges, counts = np.unique(_sorted_edges(self.faces), axis=0, return_counts=True)
        return edges, counts

    def vertex_faces(self) -> list[list[int]]:
        out = [[] for _ in range(len(self.vertices))]
        for fi, tri in enumerate(self.faces.tolist()):
            for v in tri:
                out[v].append(fi)
        return out

    def face_components(self) -> np.ndarray:
        """Label faces by connected component, faces being adjacent when they share an edge."""
        nf = len(self.faces)
        if nf == 0:
            return np.zeros(0, dtype=np.int64)
        e = _sorted_edges(self.faces)
        fid = np.tile(np.arange(nf), 3)
        _, inv = np.unique(e, axis=0, return_inverse=True)
        inv = inv.ravel()
        ne = inv.max() + 1
        # bipartite face-edge graph collapsed to faces
        g = coo_matrix((np.ones(len(fid)), (fid, inv)), shape=(nf, ne)).tocsr()
        adj = g @ g.T
        _, labels = connected_components(adj, directed=False)
        return labels

    def n_components(self) -> int:
        labels = self.face_components()
        return 0 if len(labels) == 0 else int(labels.max() + 1)

    def euler_characteristic(self) -> int:
        """V - E + F with V counting only vertices referenced by faces."""
        if len(self.faces) == 0:
            return 0
        v = len(np.unique(self.faces))
        return int(v - len(self.edges()) + len(self.faces))

    def vertex_link_status(self) -> np.ndarray:
        """Per-vertex manifoldness of the face link.

        Returns an int array: 0 unused, 1 disk or half-disk, 2 non-manifold
        (link disconnected, or a link vertex of degree > 2).
        """
        status = np.zeros(len(self.vertices), dtype=np.int8)
        links = defaultdict(list)
        for a, b, c in self.faces.tolist():
            links[a].append((b, c))
            links[b].append((c, a))
            links[c].append((a, b))
        for v, pairs in links.items():
            deg = defaultdict(int)
            parent = {}

            def find(x):
                while parent[x] != x:
                    parent[x] = parent[parent[x]]
                    x = parent[x]
                return x

            for u, w in pairs:
                deg[u] += 1
                deg[w] += 1
                parent.setdefault(u, u)
                parent.setdefault(w, w)
                ru, rw = find(u), find(w)
                if ru != rw:
                    parent[ru] = rw
            roots = {find(x) for x in parent}
            ok = len(roots) == 1 and max(deg.values()) <= 2
            status[v] = 1 if ok else 2
        return status

    def face_areas(self) -> np.ndarray:
        t = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        t = self.vertices[self.faces]
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.vertices) == 0:
            raise EmptyMeshError("mesh has no vertices")
        used = self.vertices[np.unique(self.faces)] if len(self.faces) else self.vertices
        return used.min(axis=0), used.max(axis=0)

    def diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def orient_components(self) -> "TriangleMesh":
        """Best-effort consistent orientation per edge-connected component.

        Flood-fills across manifold edges only; non-manifold and
        non-orientable regions keep whatever orientation the fill reaches
        first. Intended for viewers, never relied on by the pipeline.
        """
        faces = self.faces.copy()
        ef = self.edge_faces()
        nbrs = defaultdict(list)
        for (u, v), fs in ef.items():
            if len(fs) == 2:
                nbrs[fs[0]].append((fs[1], u, v))
                nbrs[fs[1]].append((fs[0], u, v))
        seen = np.zeros(len(faces), dtype=bool)

        def has_directed(f, u, v):
            a, b, c = f
            return (a, b) == (u, v) or (b, c) == (u, v) or (c, a) == (u, v)

        for start in range(len(faces)):
            if seen[start]:
                continue
            seen[start] = True
            stack = [start]
            while stack:
                fi = stack.pop()
                for fj, u, v in nbrs[fi]:
                    if seen[fj]:
                        continue
                    # neighbours must traverse the shared edge in opposite directions
                    fi_t = tuple(faces[fi])
                    fj_t = tuple(faces[fj])
                    if has_directed(fi_t, u, v) == has_directed(fj_t, u, v):
                        faces[fj] = faces[fj][::-1]
                    seen[fj] = True
                    stack.append(fj)
        return TriangleMesh(self.vertices.copy(), faces)


# ----------------------------------------------------------------------
# I/O
# ----------------------------------------------------------------------

_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif tag == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    if len(idx) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except ValueError as exc:
                raise MeshFormatError(str(exc), path, lineno) from None
    mesh = TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))
    if len(mesh.faces) and (mesh.faces.min() < 0 or mesh.faces.max() >= len(mesh.vertices)):
        raise MeshFormatError("face index out of range", path)
    return mesh


def _read_ply_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise MeshFormatError("missing 'ply' magic", path, 1)
    fmt = None
    elements = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise MeshFormatError("unterminated header", path, lineno)
        parts = raw.decode("ascii", errors="replace").split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError("property before element", path, lineno)
            if parts[1] == "list":
                elements[-1][2].append((parts[4], "list", parts[2], parts[3]))
            else:
                elements[-1][2].append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            break
    if fmt not in ("binary_little_endian", "binary_big_endian", "ascii"):
        raise MeshFormatError(f"unsupported PLY format {fmt!r}", path)
    return fmt, elements, lineno


def read_ply(path) -> TriangleMesh:
    """Read positions and faces from a binary or ASCII PLY; other attributes are skipped."""
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _read_ply_header(fh, path)
        verts = np.zeros((0, 3))
        faces = []
        if fmt == "ascii":
            tokens = fh.read().decode("ascii").split()
            pos = 0
            for name, count, props in elements:
                rows = []
                for _ in range(count):
                    row = {}
                    for p in props:
                        if p[1] == "list":
                            n = int(tokens[pos]); pos += 1
                            row[p[0]] = [int(t) for t in tokens[pos:pos + n]]; pos += n
                        else:
                            row[p[0]] = float(tokens[pos]); pos += 1
                    rows.append(row)
                if name == "vertex":
                    verts = np.array([[r["x"], r["y"], r["z"]] for r in rows], dtype=np.float64)
                elif name == "face":
                    key = props[0][0]
                    for r in rows:
                        idx = r[key]
                        faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
        else:
            end = "<" if fmt == "binary_little_endian" else ">"
            for name, count, props in elements:
                if all(p[1] != "list" for p in props):
                    dt = np.dtype([(p[0], end + _PLY_TYPES[p[1]]) for p in props])
                    data = np.frombuffer(fh.read(dt.itemsize * count), dtype=dt, count=count)
                    if name == "vertex":
                        verts = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
                    continue
                for _ in range(count):
                    row = {}
                    for p in props:
                        if p[1] == "list":
                            cfmt = end + _PLY_TYPES[p[2]]
                            (n,) = struct.unpack(cfmt, fh.read(struct.calcsize(cfmt)))
                            ifmt = end + _PLY_TYPES[p[3]] * n
                            row[p[0]] = struct.unpack(ifmt, fh.read(struct.calcsize(ifmt)))
                        else:
                            sfmt = end + _PLY_TYPES[p[1]]
                            (row[p[0]],) = struct.unpack(sfmt, fh.read(struct.calcsize(sfmt)))
                    if name == "face":
                        idx = next(v for k, v in row.items() if isinstance(v, tuple))
                        faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
    return TriangleMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(mesh: TriangleMesh, path):
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def write_ply(mesh: TriangleMesh, path):
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {mesh.n_vertices}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {mesh.n_faces}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    fdt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    fdata = np.zeros(mesh.n_faces, dtype=fdt)
    fdata["n"] = 3
    fdata["idx"] = mesh.faces
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f8").tobytes())
        fh.write(fdata.tobytes())


def write_point_ply(points, path, labels=None):
    """Write a binary PLY point cloud, optionally colouring points by integer label."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(points)}",
              "property double x", "property double y", "property double z"]
    fields = [("xyz", "<f8", (3,))]
    if labels is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        fields.append(("rgb", "u1", (3,)))
    header.append("end_header")
    data = np.zeros(len(points), dtype=np.dtype(fields))
    data["xyz"] = points
    if labels is not None:
        lab = np.asarray(labels, dtype=np.int64)
        # cheap integer hash to a stable colour per label
        h = (lab * 2654435761) & 0xFFFFFF
        data["rgb"] = np.stack([(h >> 16) & 255, (h >> 8) & 255, h & 255], axis=1)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_mesh(path) -> TriangleMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise MeshFormatError(f"unsupported mesh extension {suffix!r}", path)


def write_mesh(mesh: TriangleMesh, path):
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        write_obj(mesh, path)
    elif suffix == ".ply":
        write_ply(mesh, path)
    else:
        raise MeshFormatError(f"unsupported mesh extension {suffix!r}", path)


# ----------------------------------------------------------------------
# reference shapes used by tests, presets and metrics fixtures
# ----------------------------------------------------------------------

def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    verts = list(v)
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f.tolist():
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = np.array(nf, dtype=np.int64)
    return TriangleMesh(np.array(verts) * radius + np.asarray(center, dtype=np.float64), f)


def box_mesh(lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5), divisions: int = 1) -> TriangleMesh:
    """Closed axis-aligned box surface, each face split into ``divisions``² quads."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    n = divisions
    verts, faces = [], []
    index = {}

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    s = np.linspace(0.0, 1.0, n + 1)
    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        for side, sign in ((lo[axis], -1), (hi[axis], 1)):
            for i in range(n):
                for j in range(n):
                    quad = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.empty(3)
                        p[axis] = side
                        p[u_ax] = lo[u_ax] + (hi[u_ax] - lo[u_ax]) * s[i + di]
                        p[v_ax] = lo[v_ax] + (hi[v_ax] - lo[v_ax]) * s[j + dj]
                        quad.append(vid(p))
                    a, b, c, d = quad
                    if (sign > 0) == (axis != 1):
                        faces += [[a, b, c], [a, c, d]]
                    else:
                        faces += [[a, c, b], [a, d, c]]
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64))


def torus_mesh(major: float = 0.35, minor: float = 0.12, nu: int = 32, nv: int = 16) -> TriangleMesh:
    u = np.linspace(0, 2 * np.pi, nu, endpoint=False)
    v = np.linspace(0, 2 * np.pi, nv, endpoint=False)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    x = (major + minor * np.cos(vv)) * np.cos(uu)
    y = (major + minor * np.cos(vv)) * np.sin(uu)
    z = minor * np.sin(vv)
    verts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(nu):
        for j in range(nv):
            a = i * nv + j
            b = ((i + 1) % nu) * nv + j
            c = ((i + 1) % nu) * nv + (j + 1) % nv
            d = i * nv + (j + 1) % nv
            faces += [[a, b, c], [a, c, d]]
    return TriangleMesh(verts, np.array(faces, dtype=np.int64))


def grid_patch(nx: int, ny: int, lo=(-0.5, -0.5), hi=(0.5, 0.5), z: float = 0.0) -> TriangleMesh:
    """Flat triangulated rectangle in the plane ``z = const``."""
    xs = np.linspace(lo[0], hi[0], nx + 1)
    ys = np.linspace(lo[1], hi[1], ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)], axis=1)
    faces = []
    for i in range(nx):
        for j in range(ny):
            a = i * (ny + 1) + j
            b = (i + 1) * (ny + 1) + j
            faces += [[a, b, b + 1], [a, b + 1, a + 1]]
    return TriangleMesh(verts, np.array(faces, dtype=np.int64))
