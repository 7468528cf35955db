"""Seed initialization, cell sampling, tangent solves and repulsion."""

import warnings

import numpy as np
import numpy.testing as npt
import pytest
from scipy.spatial import cKDTree

import oracles
from voroudf.config import ReconConfig
from voroudf.errors import ZeroWidthError
from voroudf.seed_opt import (CellSampleSet, SeedState, compute_null_basis, halfspaces, init_seeds,
                              kernel_width, merge_close_seeds, optimize, project_force,
                              repulsive_energy_and_forces, sample_cell, sample_cells, solve_l1_tangent,
                              solve_l2_tangent)
from voroudf.udf import Disk, PlanePatch, Sphere, Union

GAMMA = 10.0


def _plane_cell(anchor, m=100, rng=None):
    rng = np.random.default_rng(0) if rng is None else rng
    pts = np.c_[rng.uniform(-0.5, 0.5, (m, 2)), rng.uniform(-0.1, 0.1, m)]
    return CellSampleSet(0, pts, np.abs(pts[:, 2]), np.tile([0.0, 0, 1], (m, 1)) * np.sign(pts[:, 2])[:, None])


def _two_plane_cell(m=100, rng=None):
    """Samples near the line x=z=0 with the gradient of the nearer plane."""
    rng = np.random.default_rng(1) if rng is None else rng
    pts = rng.uniform(-0.1, 0.1, (m, 3))
    f = Union([PlanePatch(), PlanePatch(normal=(1, 0, 0))])
    d, g = f.evaluate(pts)
    return CellSampleSet(0, pts, d, g)


class TestInitSeeds:
    def test_on_sphere(self):
        x = init_seeds(Sphere(radius=1.0), ReconConfig(seed_count=100), np.random.default_rng(0))
        assert x.shape == (100, 3)
        npt.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-6)
        assert len(np.unique(x, axis=0)) == 100

    def test_deterministic(self):
        cfg = ReconConfig(seed_count=50)
        a = init_seeds(Sphere(), cfg, np.random.default_rng(3))
        b = init_seeds(Sphere(), cfg, np.random.default_rng(3))
        assert a.tobytes() == b.tobytes()

    def test_disk_interior(self):
        x = init_seeds(Disk(radius=0.4), ReconConfig(seed_count=50), np.random.default_rng(0))
        npt.assert_allclose(x[:, 2], 0.0, atol=1e-9)
        r = np.hypot(x[:, 0], x[:, 1])
        assert np.all(r <= 0.4 + 1e-12)
        # without rejection about half of all projections land on the rim;
        # only near-grazing approaches can slip through
        assert np.sum(r > 0.4 - 1e-9) <= 2

    def test_too_few(self):
        with pytest.raises(ValueError):
            init_seeds(Sphere(), ReconConfig(seed_count=4).replace(seed_count=3), np.random.default_rng(0))


class TestSampleCell:
    def test_bisector(self):
        cell = sample_cell(SeedState(0, np.array([-1.0, 0, 0]), np.array([-1.0, 0, 0])),
                           [[1.0, 0, 0]], Sphere(), 200, np.random.default_rng(0))
        assert len(cell) == 200
        assert np.all(cell.points[:, 0] < 0)

    def test_lone_seed_fallback_radius(self):
        f = Sphere(radius=0.5, bounds=(np.full(3, -1.0), np.full(3, 1.0)))
        cs = sample_cells(np.zeros((1, 3)), f, 300, np.random.default_rng(0))
        r = np.linalg.norm(cs.points[0], axis=1)
        assert r.max() <= 0.1 * f.diagonal + 1e-12
        assert r.max() > 0.05 * f.diagonal

    def test_cube_corners_match_voronoi(self):
        seeds = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], dtype=float)
        cs = sample_cells(seeds, Sphere(), 100, np.random.default_rng(0))
        owner = cKDTree(seeds).query(cs.points.reshape(-1, 3))[1].reshape(8, 100)
        assert np.all(owner == np.arange(8)[:, None])
        npt.assert_array_equal(np.sign(cs.points.mean(axis=1)), np.sign(seeds))


class TestL1Tangent:
    def test_plane_soft_threshold(self):
        anchor = np.array([0.1, 0.2, 0.03])
        out = solve_l1_tangent(SeedState(0, anchor, anchor), _plane_cell(anchor), GAMMA,
                               (np.zeros((0, 3)), np.zeros(0)))
        npt.assert_allclose(out.position, [0.1, 0.2, 0.0], atol=1e-9)

    def test_fixed_point(self):
        anchor = np.array([0.1, 0.2, 0.0])
        pts = np.c_[np.random.default_rng(0).uniform(-0.5, 0.5, (50, 2)), np.zeros(50)]
        cell = CellSampleSet(0, pts, np.zeros(50), np.tile([0.0, 0, 1], (50, 1)))
        out = solve_l1_tangent(SeedState(0, anchor, anchor), cell, GAMMA, (np.zeros((0, 3)), np.zeros(0)))
        npt.assert_allclose(out.position, anchor, atol=1e-12)

    def test_snaps_to_crease(self):
        anchor = np.array([0.01, 0.02, -0.015])
        cell = _two_plane_cell()
        out = solve_l1_tangent(SeedState(0, anchor, anchor), cell, GAMMA, (np.zeros((0, 3)), np.zeros(0)))
        npt.assert_allclose(out.position[[0, 2]], 0.0, atol=1e-9)
        A, b = cell.gradients, np.einsum("mk,mk->m", cell.gradients, cell.points) - cell.values
        H = np.vstack([np.eye(3), -np.eye(3)])
        h = np.full(6, 0.2)
        _, f_brute = oracles.brute_force_l1(A, b, anchor, H, h, GAMMA)
        f = oracles.l1_objective(A, b, out.position, anchor, GAMMA)[0]
        assert f <= f_brute + 1e-9

    def test_stays_in_cell(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            seeds = rng.uniform(-0.2, 0.2, (13, 3))
            H, h, _ = halfspaces(seeds, seeds, 12)
            cell = _plane_cell(seeds[0], rng=rng)
            out = solve_l1_tangent(SeedState(0, seeds[0], seeds[0]), cell, GAMMA, (H[0], h[0]))
            assert np.all(H[0] @ out.position <= h[0] + 1e-9)
            A, b = cell.gradients, np.einsum("mk,mk->m", cell.gradients, cell.points) - cell.values
            f0 = oracles.l1_objective(A, b, seeds[0], seeds[0], GAMMA)[0]
            assert oracles.l1_objective(A, b, out.position, seeds[0], GAMMA)[0] <= f0 + 1e-12

    def test_stored_system_spans_normals(self):
        anchor = np.zeros(3)
        out = solve_l1_tangent(SeedState(0, anchor, anchor), _two_plane_cell(), GAMMA,
                               (np.zeros((0, 3)), np.zeros(0)))
        V0, r = compute_null_basis(out.tangent_matrix, 0.1)
        assert r == 2
        npt.assert_allclose(np.abs(V0[:, 0]), [0, 1, 0], atol=1e-9)

    def test_too_few_samples(self):
        cell = CellSampleSet(0, np.zeros((2, 3)), np.zeros(2), np.tile([0.0, 0, 1], (2, 1)))
        with pytest.raises(ValueError):
            solve_l1_tangent(SeedState(0, np.zeros(3), np.zeros(3)), cell, GAMMA, (np.zeros((0, 3)), np.zeros(0)))


class TestL2Tangent:
    def test_plane_min_norm_step(self):
        anchor = np.array([0.1, 0.2, 0.03])
        x = solve_l2_tangent(_plane_cell(anchor), anchor)
        npt.assert_allclose(x, [0.1, 0.2, 0.0], atol=1e-6)

    def test_two_planes(self):
        anchor = np.array([0.01, 0.02, -0.015])
        x = solve_l2_tangent(_two_plane_cell(), anchor)
        # least squares with symmetric plane samples lands on the crease line
        npt.assert_allclose(x[1], 0.02, atol=1e-6)

    def test_medial_drift(self):
        # samples between parallel sheets z=+-0.05 carry opposing gradients
        rng = np.random.default_rng(0)
        pts = np.c_[rng.uniform(-0.02, 0.02, (100, 2)), rng.uniform(-0.04, 0.04, 100)]
        f = Union([PlanePatch(origin=(0, 0, 0.05)), PlanePatch(origin=(0, 0, -0.05))])
        d, g = f.evaluate(pts)
        anchor = np.array([0.0, 0.0, 0.01])
        x = solve_l2_tangent(CellSampleSet(0, pts, d, g), anchor)
        cell_radius = 0.05
        assert np.linalg.norm(x - anchor) > cell_radius or abs(f.evaluate(x[None])[0][0]) > 0.04


class TestNullBasis:
    def test_plane(self):
        V0, r = compute_null_basis(np.array([[0, 0, 1.0], [0, 0, 0], [0, 0, 0]]), 0.1)
        assert r == 1
        npt.assert_allclose(np.array([[0, 0, 1.0]]) @ V0, 0.0, atol=1e-12)
        npt.assert_allclose(V0.T @ V0, np.eye(2), atol=1e-9)

    def test_identity(self):
        V0, r = compute_null_basis(np.eye(3), 0.1)
        assert r == 3 and V0.shape == (3, 0)

    def test_two_planes(self):
        V0, r = compute_null_basis(np.array([[1.0, 0, 0], [0, 0, 1], [0, 0, 0]]), 0.1)
        assert r == 2
        npt.assert_allclose(np.abs(V0[:, 0]), [0, 1, 0], atol=1e-12)

    def test_zero(self):
        V0, r = compute_null_basis(np.zeros((3, 3)), 0.1)
        assert r == 0 and V0.shape == (3, 3)


class TestKernelWidth:
    def test_line(self):
        assert kernel_width(np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]])) == 1.0

    def test_brute_force(self):
        x = np.random.default_rng(0).random((1000, 3))
        d = np.linalg.norm(x[:, None] - x[None], axis=2)
        np.fill_diagonal(d, np.inf)
        assert kernel_width(x) == d.min()

    def test_duplicate(self):
        with pytest.raises(ZeroWidthError):
            kernel_width(np.array([[0.0, 0, 0], [0, 0, 0], [1, 0, 0]]))


class TestRepulsion:
    def test_pair_energy(self):
        e, _ = repulsive_energy_and_forces(np.array([[0.0, 0, 0], [0.3, 0, 0]]), 0.3)
        npt.assert_allclose(e, 2 * np.exp(-0.5), rtol=1e-15)

    def test_newton_third_law(self):
        _, g = repulsive_energy_and_forces(np.array([[0.1, 0.2, 0], [0.3, -0.1, 0.2]]), 0.3)
        assert np.array_equal(g[0], -g[1])

    def test_finite_differences_n20(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-0.3, 0.3, (20, 3))
        sigma = kernel_width(x) * 3
        _, g = repulsive_energy_and_forces(x, sigma, cutoff=1e6)
        fd = oracles.central_difference(lambda y: oracles.gaussian_energy(y, sigma), x, h=1e-6)
        assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-5

    def test_cutoff_drops_far_pairs(self):
        e, g = repulsive_energy_and_forces(np.array([[0.0, 0, 0], [4.5, 0, 0]]), 1.0)
        assert e == 0.0 and not np.any(g)


class TestProjectForce:
    def test_plane(self):
        npt.assert_allclose(project_force([1.0, 2, 3], np.eye(3)[:, :2]), [1, 2, 0])

    def test_pinned(self):
        npt.assert_array_equal(project_force([1.0, 2, 3], np.zeros((3, 0))), [0, 0, 0])

    def test_line(self):
        npt.assert_allclose(project_force([1.0, 2, 3], np.array([[0.0], [1], [0]])), [0, 2, 0])


class TestMerge:
    def test_drops_higher_id(self):
        x = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [2.001, 0, 0]])
        out = merge_close_seeds(x, 0.1)
        npt.assert_array_equal(out, x[:3])

    def test_mask(self):
        x = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [2.001, 0, 0]])
        out = merge_close_seeds(x, 0.1, mask=np.array([True, True, True, False]))
        npt.assert_array_equal(out, x)


class TestOptimize:
    @pytest.fixture(scope="class")
    @staticmethod
    def sphere_run():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cfg = ReconConfig(seed_count=60, max_outer_iters=8)
            f = Sphere(radius=1.0, bounds=(np.full(3, -1.25), np.full(3, 1.25)))
            return optimize(f, cfg), optimize(f, cfg)

    def test_on_surface_and_spread(self, sphere_run):
        res, _ = sphere_run
        n = len(res.positions)
        npt.assert_allclose(np.linalg.norm(res.positions, axis=1), 1.0, atol=1e-4)
        uniform = np.sqrt(4 * np.pi / n)
        assert uniform / 2 <= kernel_width(res.positions) <= 2 * uniform

    def test_deterministic(self, sphere_run):
        a, b = sphere_run
        assert a.positions.tobytes() == b.positions.tobytes()

    def test_null_basis_orthonormal(self, sphere_run):
        res, _ = sphere_run
        for s in res.seeds():
            V0 = s.null_basis
            npt.assert_allclose(V0.T @ V0, np.eye(V0.shape[1]), atol=1e-9)

    def test_plane_seeds_rank_one(self):
        f = PlanePatch(bounds=(np.full(3, -0.5), np.full(3, 0.5)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = optimize(f, ReconConfig(seed_count=40, max_outer_iters=3))
        assert np.all(res.rank == 1)

    def test_crease_seeds_rank_two(self):
        f = Union([Disk(radius=0.4), Disk(normal=(1, 0, 0), radius=0.4)])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = optimize(f, ReconConfig(seed_count=100, max_outer_iters=3))
        x = res.positions
        on_crease = (np.hypot(x[:, 0], x[:, 2]) < 1e-6) & (np.abs(x[:, 1]) < 0.3)
        assert on_crease.sum() >= 3
        assert np.all(res.rank[on_crease] >= 2)
