"""Approximate geodesic Voronoi diagram on the zero set and its dual mesh.

Dense projected samples are linked by a pruned KNN graph; seeds are
attached as sources and a multi-source Dijkstra sweep labels every sample
with its geodesically nearest seed. Triangles are emitted wherever three
labels meet around a sample.
"""

from __future__ import annotations

import heapq
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .errors import (DisconnectedSeedWarning, EmptyMeshError, ProjectionFailureError,
                     UnreachableNodesWarning)
from .mesh import TriangleMesh, write_point_ply
from .seed_opt import on_open_boundary
from .udf import UdfField, project_points

log = logging.getLogger(__name__)


@dataclass
class SurfaceSamples:
    points: np.ndarray
    normals: np.ndarray

    def __len__(self):
        return len(self.points)


@dataclass
class SurfaceGraph:
    """Sample graph with seeds appended as the last ``n_seeds`` nodes.

    ``edges`` is an (E, 2) array with ``a < b``; ``indptr``/``indices``/
    ``weights`` hold the symmetric CSR adjacency.
    """

    points: np.ndarray
    normals: np.ndarray
    n_samples: int
    n_seeds: int
    edges: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    seed_links: list = field(default_factory=list)
    excluded_seeds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    labels: np.ndarray | None = None
    dist: np.ndarray | None = None
    # seed id of every output mesh vertex, set by extract_dual_triangles
    vertex_seed_ids: np.ndarray | None = None
    counters: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.n_samples + self.n_seeds

    def seed_node(self, i: int) -> int:
        return self.n_samples + i

    def neighbors(self, node: int) -> np.ndarray:
        return self.indices[self.indptr[node]:self.indptr[node + 1]]

    def dump_edges(self, path):
        """Edge list as text: one ``a b length`` line per edge."""
        lengths = np.linalg.norm(self.points[self.edges[:, 0]] - self.points[self.edges[:, 1]], axis=1)
        with open(path, "w") as fh:
            fh.write(f"# nodes {self.n_nodes} samples {self.n_samples} seeds {self.n_seeds}\n")
            for (a, b), w in zip(self.edges.tolist(), lengths.tolist()):
                fh.write(f"{a} {b} {w!r}\n")

    def dump_labels(self, path):
        """Labeled samples as a colored PLY point cloud."""
        if self.labels is None:
            raise ValueError("graph has no labels yet")
        write_point_ply(self.points[:self.n_samples], path, self.labels[:self.n_samples])


def sample_surface(field: UdfField, count: int, rng, max_steps: int = 20, tol: float = 1e-9,
                   max_rounds: int = 50) -> SurfaceSamples:
    """Uniform draws in the field bounds projected onto the zero set.

    Non-converged projections and projections landing on an open rim are
    re-drawn, so sample density follows area rather than piling up on rims.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in field.bounds)
    tol = max(tol, field.resolution_floor)
    pts, nrm = [], []
    have = 0
    drawn = failed = 0
    for _ in range(max_rounds):
        need = count - have
        if need <= 0:
            break
        cand = rng.uniform(lo, hi, size=(need, 3))
        proj = project_points(field, cand, max_steps, tol)
        drawn += need
        failed += int(np.sum(~proj.converged))
        if failed > 0.05 * drawn:
            raise ProjectionFailureError(
                f"{failed} of {drawn} surface samples failed to project")
        ok = proj.converged & ~on_open_boundary(field, proj.points, cand)
        pts.append(proj.points[ok])
        nrm.append(proj.normals[ok])
        have += int(ok.sum())
    if have < count:
        raise ProjectionFailureError(f"only {have} of {count} surface samples placed")
    p = np.concatenate(pts)[:count]
    n = np.concatenate(nrm)[:count]
    return SurfaceSamples(p, n)


def default_eps_udf(points) -> float:
    """1.5 x the median nearest-neighbor spacing of the samples."""
    d, _ = cKDTree(points).query(points, k=2)
    return 1.5 * float(np.median(d[:, 1]))


def _edge_keep(field, pa, pb, na, nb, eps_udf, eps_grad, check_b=True):
    e = pb - pa
    ln = np.linalg.norm(e, axis=1)
    ok = ln > 0
    e = e / np.where(ln > 0, ln, 1.0)[:, None]
    mid = 0.5 * (pa + pb)
    dm = field.evaluate(mid)[0] if len(mid) else np.zeros(0)
    ok &= dm <= eps_udf
    ok &= np.abs(np.sum(na * e, axis=1)) <= eps_grad
    if check_b:
        ok &= np.abs(np.sum(nb * e, axis=1)) <= eps_grad
    return ok, ln


def build_and_prune_graph(samples: SurfaceSamples, seeds, field: UdfField, k: int = 20,
                          eps_udf: float | None = None, eps_grad: float = 0.8) -> SurfaceGraph:
    """Symmetric KNN graph over the samples with off-surface edges removed.

    An edge goes when the field at its midpoint exceeds ``eps_udf`` or when
    an endpoint normal is within ``arccos(eps_grad)`` of the edge direction.
    Each seed links to its ``k`` nearest samples under the same tests; the
    normal test only applies at the sample end since the field gradient is
    undefined at a seed on the surface.
    """
    if k < 3:
        raise ValueError("k must be >= 3")
    pts = np.asarray(samples.points, dtype=np.float64)
    nrm = np.asarray(samples.normals, dtype=np.float64)
    seeds = np.asarray(seeds, dtype=np.float64).reshape(-1, 3)
    ns, nq = len(pts), len(seeds)
    if eps_udf is None:
        eps_udf = default_eps_udf(pts)
    tree = cKDTree(pts)
    kk = min(k, ns - 1)
    _, idx = tree.query(pts, k=kk + 1)
    a = np.repeat(np.arange(ns), kk)
    b = idx[:, 1:].ravel()
    e = np.unique(np.sort(np.stack([a, b], axis=1), axis=1), axis=0)
    keep, _ = _edge_keep(field, pts[e[:, 0]], pts[e[:, 1]], nrm[e[:, 0]], nrm[e[:, 1]],
                         eps_udf, eps_grad)
    sample_edges = e[keep]
    counters = {"knn_edges": int(len(e)), "pruned_edges": int((~keep).sum()),
                "eps_udf": float(eps_udf), "eps_grad": float(eps_grad)}

    # seed attachments
    ks = min(k, ns)
    _, sidx = tree.query(seeds, k=ks)
    sidx = sidx.reshape(nq, ks)
    sa = np.repeat(np.arange(nq), ks)
    sb = sidx.ravel()
    skeep, _ = _edge_keep(field, pts[sb], seeds[sa], nrm[sb], None, eps_udf, eps_grad, check_b=False)
    seed_links = [sb[(sa == i) & skeep] for i in range(nq)]
    excluded = np.array([i for i in range(nq) if len(seed_links[i]) == 0], dtype=np.int64)
    if len(excluded):
        warnings.warn(f"{len(excluded)} seeds have no surviving graph links and are excluded",
                      DisconnectedSeedWarning, stacklevel=2)
    seed_edges = np.stack([sb[skeep], ns + sa[skeep]], axis=1)
    edges = np.concatenate([sample_edges, seed_edges]).astype(np.int64)

    allp = np.vstack([pts, seeds])
    alln = np.vstack([nrm, np.zeros((nq, 3))])
    w = np.linalg.norm(allp[edges[:, 0]] - allp[edges[:, 1]], axis=1)
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    ww = np.concatenate([w, w])
    order = np.lexsort((dst, src))
    src, dst, ww = src[order], dst[order], ww[order]
    indptr = np.zeros(ns + nq + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    indptr = np.cumsum(indptr)
    counters["edges"] = int(len(edges))
    return SurfaceGraph(allp, alln, ns, nq, edges, indptr, dst.astype(np.int64), ww,
                        seed_links, excluded, counters=counters)


@njit(cache=True)
def _multisource_dijkstra(indptr, indices, weights, sources, source_labels, n):
    dist = np.full(n, np.inf)
    label = np.full(n, -1, dtype=np.int64)
    done = np.zeros(n, dtype=np.bool_)
    heap = [(0.0, np.int64(0), np.int64(0))]
    heap.pop()
    for s, lab in zip(sources, source_labels):
        heapq.heappush(heap, (0.0, lab, s))
    while len(heap) > 0:
        d, lab, u = heapq.heappop(heap)
        if done[u]:
            continue
        # the first pop of a node carries the smallest (distance, label) key
        done[u] = True
        dist[u] = d
        label[u] = lab
        for p in range(indptr[u], indptr[u + 1]):
            v = indices[p]
            if done[v]:
                continue
            nd = d + weights[p]
            if nd < dist[v] or (nd == dist[v] and lab < label[v]):
                dist[v] = nd
                label[v] = lab
                heapq.heappush(heap, (nd, lab, v))
    return dist, label


def label_multisource(graph: SurfaceGraph) -> SurfaceGraph:
    """Flood the graph from all attached seeds; ties go to the smaller seed id."""
    active = np.setdiff1d(np.arange(graph.n_seeds), graph.excluded_seeds)
    if len(active) == 0:
        raise EmptyMeshError("no seed is attached to the surface graph")
    sources = (graph.n_samples + active).astype(np.int64)
    dist, label = _multisource_dijkstra(graph.indptr, graph.indices, graph.weights,
                                        sources, active.astype(np.int64), graph.n_nodes)
    unreached = int(np.sum(label[:graph.n_samples] < 0))
    graph.counters["unreached_nodes"] = unreached
    if unreached:
        warnings.warn(f"{unreached} samples are unreachable from every seed",
                      UnreachableNodesWarning, stacklevel=2)
    graph.labels = label
    graph.dist = dist
    return graph


WITNESS_RULES = ("neighbors", "clique")


@njit(cache=True)
def _adjacent(indptr, indices, v, w):
    for p in range(indptr[v], indptr[v + 1]):
        if indices[p] == w:
            return True
    return False


@njit(cache=True)
def _junction_triples(indptr, indices, labels, clique, n_samples):
    out = []
    nbr = np.empty(indptr[1:].max() - indptr[:-1].min() + 1 if len(indptr) > 1 else 1,
                   dtype=np.int64)
    for u in range(len(labels)):
        li = labels[u]
        if li < 0 or (clique and u >= n_samples):
            continue
        # one representative neighbor per foreign label (neighbors rule),
        # or every foreign-labelled sample neighbor (clique rule)
        m = 0
        for p in range(indptr[u], indptr[u + 1]):
            v = indices[p]
            lj = labels[v]
            if lj < 0 or lj == li or (clique and v >= n_samples):
                continue
            dup = False
            if not clique:
                for q in range(m):
                    if labels[nbr[q]] == lj:
                        dup = True
                        break
            if not dup:
                nbr[m] = v
                m += 1
        for x in range(m):
            for y in range(x + 1, m):
                a, b, c = li, labels[nbr[x]], labels[nbr[y]]
                if b == c:
                    continue
                if clique and not _adjacent(indptr, indices, nbr[x], nbr[y]):
                    continue
                if a > b:
                    a, b = b, a
                if b > c:
                    b, c = c, b
                if a > b:
                    a, b = b, a
                out.append((a, b, c))
    res = np.empty((len(out), 3), dtype=np.int64)
    for i in range(len(out)):
        res[i, 0] = out[i][0]
        res[i, 1] = out[i][1]
        res[i, 2] = out[i][2]
    return res


def extract_dual_triangles(graph: SurfaceGraph, seeds=None, witness: str = "neighbors") -> TriangleMesh:
    """One triangle per distinct label triple meeting around a node.

    With ``witness="neighbors"`` a node labelled i with neighbors labelled
    j and k emits {i, j, k}. ``"clique"`` additionally requires the two
    neighbors to be adjacent, i.e. the three labels meet on a graph
    triangle of samples. This keeps the witness local where seeds sit
    closer together than the KNN radius (crowded creases).
    Vertices are the seed positions; seeds used by no triangle are dropped.
    """
    if witness not in WITNESS_RULES:
        raise ValueError(f"witness must be one of {WITNESS_RULES}")
    if graph.labels is None:
        raise ValueError("label the graph first")
    seeds = graph.points[graph.n_samples:] if seeds is None else np.asarray(seeds, dtype=np.float64)
    tri = _junction_triples(graph.indptr, graph.indices, graph.labels.astype(np.int64),
                            witness == "clique", graph.n_samples)
    if len(tri) == 0:
        raise EmptyMeshError("no three geodesic Voronoi regions meet")
    tri = np.unique(tri, axis=0)
    used, inv = np.unique(tri, return_inverse=True)
    graph.counters["dual_triangles"] = int(len(tri))
    graph.vertex_seed_ids = used
    return TriangleMesh(seeds[used].copy(), inv.reshape(-1, 3).astype(np.int64))


def build_gvd_mesh(field: UdfField, seeds, count: int, rng, k: int = 20,
                   eps_udf: float | None = None, eps_grad: float = 0.8, tol: float = 1e-9,
                   max_steps: int = 20, witness: str = "neighbors"):
    """Sample, build, label and extract in one call; returns ``(mesh, graph)``."""
    samples = sample_surface(field, count, rng, max_steps=max_steps, tol=tol)
    graph = build_and_prune_graph(samples, seeds, field, k, eps_udf, eps_grad)
    label_multisource(graph)
    mesh = extract_dual_triangles(graph, witness=witness)
    return mesh, graph
