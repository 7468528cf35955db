"""Surface sampling, graph pruning, geodesic labeling and dual extraction."""

import numpy as np
import numpy.testing as npt
import pytest
from scipy.sparse.csgraph import connected_components
from scipy.sparse import coo_matrix
from scipy.spatial import Delaunay, cKDTree

import oracles
from voroudf.errors import DisconnectedSeedWarning, EmptyMeshError
from voroudf.gvd import (SurfaceGraph, SurfaceSamples, build_and_prune_graph, build_gvd_mesh,
                         extract_dual_triangles, label_multisource, sample_surface)
from voroudf.thinning import thin
from voroudf.udf import Disk, PlanePatch, Sphere, Union


def _graph(points, edges, n_seeds):
    """SurfaceGraph over ``points`` (seeds last) with the given undirected edges."""
    points = np.asarray(points, dtype=np.float64)
    edges = np.sort(np.asarray(edges, dtype=np.int64), axis=1)
    n = len(points)
    w = np.linalg.norm(points[edges[:, 0]] - points[edges[:, 1]], axis=1)
    src = np.r_[edges[:, 0], edges[:, 1]]
    dst = np.r_[edges[:, 1], edges[:, 0]]
    ww = np.r_[w, w]
    order = np.lexsort((dst, src))
    indptr = np.r_[0, np.cumsum(np.bincount(src, minlength=n))].astype(np.int64)
    return SurfaceGraph(points, np.zeros_like(points), n - n_seeds, n_seeds, edges, indptr,
                        dst[order], ww[order])


def _components(graph, nodes):
    e = graph.edges
    keep = np.isin(e[:, 0], nodes) & np.isin(e[:, 1], nodes)
    adj = coo_matrix((np.ones(keep.sum()), (e[keep, 0], e[keep, 1])), shape=(graph.n_nodes,) * 2)
    _, lab = connected_components(adj, directed=False)
    return lab


def _plane_seeds(rng, jitter=0.02):
    g = np.linspace(-0.35, 0.35, 6)
    xy = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2) + rng.uniform(-jitter, jitter, (36, 2))
    return xy, np.c_[xy, np.zeros(36)]


class TestSampleSurface:
    def test_sphere_on_surface(self):
        s = sample_surface(Sphere(radius=1.0), 10_000, np.random.default_rng(0))
        assert len(s) == 10_000
        npt.assert_allclose(np.linalg.norm(s.points, axis=1), 1.0, atol=1e-6)

    def test_two_disks_area_ratio(self):
        f = Union([Disk(center=(0, 0, 0.2), radius=0.4), Disk(center=(0, 0, -0.2), radius=0.2)])
        s = sample_surface(f, 20_000, np.random.default_rng(0))
        top = np.sum(s.points[:, 2] > 0)
        bottom = len(s) - top
        ratio = top / bottom
        assert abs(ratio / 4.0 - 1.0) < 0.1

    def test_deterministic(self):
        a = sample_surface(Disk(), 500, np.random.default_rng(4))
        b = sample_surface(Disk(), 500, np.random.default_rng(4))
        assert a.points.tobytes() == b.points.tobytes()

    def test_count_validated(self):
        with pytest.raises(ValueError):
            sample_surface(Sphere(), 0, np.random.default_rng(0))


class TestPruning:
    def test_parallel_planes_disconnected(self):
        f = Union([PlanePatch(origin=(0, 0, 0.05), half_extents=(0.4, 0.4)),
                   PlanePatch(origin=(0, 0, -0.05), half_extents=(0.4, 0.4))])
        s = sample_surface(f, 4000, np.random.default_rng(0))
        g = build_and_prune_graph(s, np.zeros((0, 3)), f, k=20, eps_udf=0.01)
        z = g.points[g.edges, 2]
        assert np.all(np.sign(z[:, 0]) == np.sign(z[:, 1]))
        lab = _components(g, np.arange(g.n_samples))
        up = s.points[:, 2] > 0
        assert not set(lab[:g.n_samples][up]) & set(lab[:g.n_samples][~up])

    def test_in_plane_edges_kept(self):
        f = PlanePatch(half_extents=(0.4, 0.4))
        s = sample_surface(f, 2000, np.random.default_rng(1))
        g = build_and_prune_graph(s, np.zeros((0, 3)), f, k=10)
        assert g.counters["pruned_edges"] == 0
        assert len(g.edges) == g.counters["knn_edges"]

    def test_rim_edge_pruned(self):
        f = Disk(radius=0.4)
        # four samples on the disk near the rim and one just past it
        pts = np.array([[0.39, 0.0, 0.0], [0.38, 0.01, 0.0], [0.38, -0.01, 0.0], [0.37, 0.0, 0.0],
                        [0.42, 0.0, 0.0]])
        _, nrm = f.evaluate(pts)
        npt.assert_allclose(nrm[4], [1, 0, 0], atol=1e-12)
        g = build_and_prune_graph(SurfaceSamples(pts, nrm), np.zeros((0, 3)), f, k=4, eps_udf=1.0)
        assert not np.any(g.edges == 4)
        assert len(g.edges) == 6

    def test_monotone_in_thresholds(self):
        f = Union([Disk(), Disk(normal=(1, 0, 0))])
        s = sample_surface(f, 3000, np.random.default_rng(2))

        def edge_set(eu, eg):
            g = build_and_prune_graph(s, np.zeros((0, 3)), f, k=12, eps_udf=eu, eps_grad=eg)
            return set(map(tuple, g.edges.tolist()))

        loose, tight_u, tight_g = edge_set(0.05, 0.9), edge_set(0.005, 0.9), edge_set(0.05, 0.3)
        assert tight_u <= loose
        assert tight_g <= loose
        assert len(tight_g) < len(loose)

    def test_disconnected_seed_warns(self):
        f = PlanePatch(half_extents=(0.4, 0.4))
        s = sample_surface(f, 500, np.random.default_rng(0))
        seeds = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.3]])
        with pytest.warns(DisconnectedSeedWarning):
            g = build_and_prune_graph(s, seeds, f, k=8)
        npt.assert_array_equal(g.excluded_seeds, [1])

    def test_k_validated(self):
        with pytest.raises(ValueError):
            build_and_prune_graph(SurfaceSamples(np.zeros((5, 3)), np.zeros((5, 3))), np.zeros((1, 3)),
                                  Sphere(), k=2)


class TestLabeling:
    def test_line_tie_goes_to_smaller_id(self):
        pts = np.c_[np.arange(11.0), np.zeros(11), np.zeros(11)]
        pts = np.vstack([pts, pts[[0, 10]]])
        edges = [(i, i + 1) for i in range(10)] + [(0, 11), (10, 12)]
        g = label_multisource(_graph(pts, edges, 2))
        npt.assert_array_equal(g.labels[:11], [0] * 6 + [1] * 5)
        npt.assert_allclose(g.dist[:11], [0, 1, 2, 3, 4, 5, 4, 3, 2, 1, 0])

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n, nq = int(rng.integers(30, 190)), int(rng.integers(2, 10))
        # integer lattice points give many exact distance ties
        pts = rng.integers(0, 8, (n + nq, 3)).astype(float)
        pts[:, 2] = 0.0
        tree = cKDTree(pts)
        pairs = tree.query_pairs(1.5, output_type="ndarray")
        pairs = pairs[np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1) > 0]
        g = label_multisource(_graph(pts, pairs, nq))
        w = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
        sources = {n + i: i for i in range(nq)}
        dist, lab = oracles.multisource_labels(n + nq, pairs.tolist(), w, sources)
        npt.assert_array_equal(g.labels, lab)
        npt.assert_allclose(g.dist, dist, rtol=1e-12)

    def test_no_attached_seed(self):
        g = _graph(np.zeros((3, 3)) + np.arange(3)[:, None], [(0, 1), (1, 2)], 1)
        g.excluded_seeds = np.array([0])
        with pytest.raises(EmptyMeshError):
            label_multisource(g)

    def test_thin_plate_labels_stay_on_sheet(self):
        h = 0.02
        f = Union([PlanePatch(origin=(0, 0, h), half_extents=(0.4, 0.4)),
                   PlanePatch(origin=(0, 0, -h), half_extents=(0.4, 0.4))])
        rng = np.random.default_rng(0)
        xy = rng.uniform(-0.35, 0.35, (40, 2))
        seeds = np.c_[xy, np.where(np.arange(40) % 2 == 0, h, -h)]
        s = sample_surface(f, 20_000, np.random.default_rng(1))
        g = label_multisource(build_and_prune_graph(s, seeds, f))
        lab = g.labels[:g.n_samples]
        assert np.all(lab >= 0)
        assert np.all(np.sign(seeds[lab, 2]) == np.sign(s.points[:, 2]))
        euclid = cKDTree(seeds).query(s.points)[1]
        assert np.sum(np.sign(seeds[euclid, 2]) != np.sign(s.points[:, 2])) > 100
        mesh = extract_dual_triangles(g)
        z = mesh.vertices[mesh.faces, 2]
        assert np.all((np.abs(z.sum(axis=1)) == 3 * h))


class TestDualTriangles:
    def test_three_seed_junction(self):
        ang = np.deg2rad([90, 210, 330])
        seeds = np.c_[0.2 * np.cos(ang), 0.2 * np.sin(ang), np.zeros(3)]
        for r in range(3):
            mesh, g = build_gvd_mesh(Disk(radius=0.4), seeds, 3000, np.random.default_rng(r))
            assert mesh.n_faces == 1
            npt.assert_array_equal(g.vertex_seed_ids, [0, 1, 2])
            # flood labels agree with a per-source shortest path
            w = g.weights
            src = np.repeat(np.arange(g.n_nodes), np.diff(g.indptr))
            half = src < g.indices
            edges = np.c_[src[half], g.indices[half]]
            _, lab = oracles.multisource_labels(g.n_nodes, edges.tolist(), w[half],
                                                {g.n_samples + i: i for i in range(3)})
            npt.assert_array_equal(g.labels, lab)

    def test_single_label_gives_nothing(self):
        pts = np.c_[np.arange(5.0), np.zeros(5), np.zeros(5)]
        pts = np.vstack([pts, pts[:1]])
        g = label_multisource(_graph(pts, [(i, i + 1) for i in range(4)] + [(0, 5)], 1))
        with pytest.raises(EmptyMeshError):
            extract_dual_triangles(g)

    def test_needs_labels(self):
        g = _graph(np.eye(3), [(0, 1), (1, 2)], 1)
        with pytest.raises(ValueError):
            extract_dual_triangles(g)

    def test_unknown_witness(self):
        g = label_multisource(_graph(np.eye(3), [(0, 1), (1, 2)], 1))
        with pytest.raises(ValueError):
            extract_dual_triangles(g, witness="gabriel")

    @pytest.mark.parametrize("seed", range(3))
    def test_plane_grid_matches_delaunay(self, seed):
        xy, seeds = _plane_seeds(np.random.default_rng(seed))
        f = PlanePatch(half_extents=(0.45, 0.45))
        mesh, g = build_gvd_mesh(f, seeds, 3600, np.random.default_rng(1))
        ids = g.vertex_seed_ids
        delaunay = set(map(tuple, np.sort(Delaunay(xy).simplices, axis=1).tolist()))
        interior = {t for t in delaunay if np.all(np.abs(xy[list(t)]).max(axis=1) < 0.3)}
        raw = set(map(tuple, np.sort(ids[mesh.faces], axis=1).tolist()))
        assert interior <= raw
        thinned = thin(mesh, f)
        tri = set(map(tuple, np.sort(ids[thinned.faces], axis=1).tolist()))
        assert interior <= tri
        assert len(tri - delaunay) <= 1
        # hull slivers of the Delaunay triangulation have no junction on the patch
        assert abs(len(tri) - len(delaunay)) <= 0.2 * len(delaunay)

    def test_clique_subset_of_neighbors(self):
        xy, seeds = _plane_seeds(np.random.default_rng(0))
        f = PlanePatch(half_extents=(0.45, 0.45))
        s = sample_surface(f, 3600, np.random.default_rng(1))
        g = label_multisource(build_and_prune_graph(s, seeds, f))
        a = extract_dual_triangles(g)
        ida = g.vertex_seed_ids
        b = extract_dual_triangles(g, witness="clique")
        idb = g.vertex_seed_ids
        ta = set(map(tuple, np.sort(ida[a.faces], axis=1).tolist()))
        tb = set(map(tuple, np.sort(idb[b.faces], axis=1).tolist()))
        assert tb <= ta
        delaunay = set(map(tuple, np.sort(Delaunay(xy).simplices, axis=1).tolist()))
        assert len(tb - delaunay) < len(ta - delaunay)

    def test_vertices_are_seed_positions(self):
        xy, seeds = _plane_seeds(np.random.default_rng(0))
        mesh, g = build_gvd_mesh(PlanePatch(half_extents=(0.45, 0.45)), seeds, 3600,
                                 np.random.default_rng(1))
        npt.assert_array_equal(mesh.vertices, seeds[g.vertex_seed_ids])
        assert len(np.unique(np.sort(mesh.faces, axis=1), axis=0)) == mesh.n_faces


class TestDebugDumps:
    def test_edges_and_labels(self, tmp_path):
        pts = np.c_[np.arange(4.0), np.zeros(4), np.zeros(4)]
        pts = np.vstack([pts, pts[:1]])
        g = _graph(pts, [(0, 1), (1, 2), (2, 3), (0, 4)], 1)
        with pytest.raises(ValueError):
            g.dump_labels(tmp_path / "l.ply")
        label_multisource(g)
        g.dump_edges(tmp_path / "e.txt")
        lines = (tmp_path / "e.txt").read_text().splitlines()
        assert lines[0].startswith("# nodes 5")
        assert len(lines) == 5
        g.dump_labels(tmp_path / "l.ply")
        assert (tmp_path / "l.ply").read_bytes().startswith(b"ply\n")
