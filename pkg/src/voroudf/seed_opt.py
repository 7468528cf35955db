"""Seed placement: initialization, Voronoi-cell sampling, L1 tangent snap and
feature-aware repulsion driven by projected L-BFGS.

Seed data is kept in flat arrays (``positions`` is (N, 3), ``tangent_matrix``
is (N, 3, 3), ...). :class:`SeedState` is a per-seed view for callers that
want one object per seed.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import line_search
from scipy.spatial import cKDTree

from . import _tangent
from .config import ReconConfig
from .errors import (InfeasiblePolytopeError, MaxIterationsWarning, ProjectionFailureError,
                     ZeroWidthError)
from .udf import UdfField, UdfSample, project_points

log = logging.getLogger(__name__)

# fraction of seeds allowed to fail projection before the field is declared invalid
_MAX_FAIL_FRACTION = 0.05
# open-boundary probe step relative to the bounding diagonal
_BOUNDARY_PROBE = 1e-3


@dataclass
class SeedState:
    id: int
    position: np.ndarray
    anchor: np.ndarray
    tangent_matrix: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    tangent_rhs: np.ndarray = field(default_factory=lambda: np.zeros(3))
    null_basis: np.ndarray = field(default_factory=lambda: np.eye(3))
    rank: int = 0


@dataclass
class CellSampleSet:
    """Samples of one Voronoi cell with their field values."""

    seed_id: int
    points: np.ndarray
    values: np.ndarray
    gradients: np.ndarray
    budget_exhausted: bool = False

    def __len__(self):
        return len(self.points)

    @property
    def samples(self) -> list[UdfSample]:
        return [UdfSample(p, float(d), g) for p, d, g in zip(self.points, self.values, self.gradients)]


@dataclass
class CellSamples:
    """Cell samples for all seeds, padded to (N, M, 3)."""

    points: np.ndarray
    values: np.ndarray
    gradients: np.ndarray
    counts: np.ndarray
    exhausted: np.ndarray

    def cell(self, i) -> CellSampleSet:
        m = self.counts[i]
        return CellSampleSet(i, self.points[i, :m], self.values[i, :m], self.gradients[i, :m],
                             bool(self.exhausted[i]))


# ----------------------------------------------------------------------
# initialization
# ----------------------------------------------------------------------

def _projection_tol(field: UdfField, tol: float) -> float:
    return max(tol, field.resolution_floor)


def on_open_boundary(field: UdfField, points, origins, probe=None, slack: float | None = None):
    """True where a projection from ``origins`` landed on a rim or crease.

    From an interior sheet point, a step of length ``t`` continuing the
    approach direction ends exactly ``t`` away from the surface. When the
    projection hit a kink (an open rim, a box edge) the step cuts back
    towards the sheet and the distance falls short of ``t``. Such points
    concentrate on a curve and would skew area-uniform sampling. ``slack``
    defaults to 1e-6 for exact fields and 5% for interpolated grids.
    """
    if slack is None:
        slack = 0.05 if field.kink_clearance > 0 else 1e-6
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    approach = np.asarray(origins, dtype=np.float64).reshape(-1, 3) - points
    length = np.linalg.norm(approach, axis=1)
    t = max(_BOUNDARY_PROBE * field.diagonal, 2.0 * field.kink_clearance) if probe is None else probe
    moved = length > 1e-3 * t
    out = np.zeros(len(points), dtype=bool)
    if np.any(moved):
        u = approach[moved] / length[moved, None]
        d, _ = field.evaluate(points[moved] - t * u)
        out[moved] = d < (1.0 - slack) * t
    return out


def init_seeds(field: UdfField, config: ReconConfig, rng) -> np.ndarray:
    """Uniform draws in the field bounds, projected onto the zero set.

    Projections landing on an open boundary, failing to converge or
    duplicating an accepted seed are re-drawn. Returns an (N, 3) array.
    """
    n = config.seed_count
    if n < 4:
        raise ValueError("seed_count must be >= 4")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in field.bounds)
    tol = _projection_tol(field, config.projection_tol)
    out = np.zeros((0, 3))
    first = True
    for _ in range(50):
        need = n - len(out)
        if need <= 0:
            break
        cand = rng.uniform(lo, hi, size=(need, 3))
        proj = project_points(field, cand, config.projection_max_steps, tol)
        ok = proj.converged
        if first and np.mean(~ok) > _MAX_FAIL_FRACTION:
            raise ProjectionFailureError(
                f"{np.sum(~ok)} of {need} seeds failed to project; the field is likely invalid")
        first = False
        ok &= ~on_open_boundary(field, proj.points, cand)
        pts = proj.points[ok]
        if len(out):
            d, _ = cKDTree(out).query(pts)
            pts = pts[d > 0]
        # drop duplicates inside the batch as well, keeping first occurrence
        _, keep = np.unique(pts, axis=0, return_index=True)
        out = np.vstack([out, pts[np.sort(keep)]])
    if len(out) < n:
        raise ProjectionFailureError(f"could only place {len(out)} of {n} seeds")
    return out[:n]


def project_seeds(field: UdfField, positions, config: ReconConfig, rng=None) -> np.ndarray:
    """Project seeds onto the zero set; stalled ones restart from a small jitter.

    Positions are first clamped to the field bounds, which keeps repulsion
    from pushing seeds off an unbounded sheet.
    """
    tol = _projection_tol(field, config.projection_tol)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in field.bounds)
    positions = np.clip(np.asarray(positions, dtype=np.float64), lo, hi)
    proj = project_points(field, positions, config.projection_max_steps, tol)
    x = proj.points
    bad = ~proj.converged
    if np.any(bad) and rng is not None:
        jitter = 1e-4 * field.diagonal * rng.standard_normal((int(bad.sum()), 3))
        retry = project_points(field, positions[bad] + jitter, config.projection_max_steps, tol)
        x[bad] = np.where(retry.residual[:, None] < proj.residual[bad][:, None], retry.points, x[bad])
    return x


# ----------------------------------------------------------------------
# cell sampling
# ----------------------------------------------------------------------

def _ball_points(rng, centers, radii):
    v = rng.standard_normal((len(centers), 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radii * rng.uniform(0.0, 1.0, len(centers)) ** (1.0 / 3.0)
    return centers + v * r[:, None]


def sample_cells(positions, field: UdfField, m: int, rng, tree=None) -> CellSamples:
    """Rejection-sample ``m`` points in every Voronoi cell.

    Candidates are uniform in the ball of radius equal to the distance to the
    nearest other seed (``0.1 * diag`` for a lone seed) and kept iff the
    owning seed is strictly the nearest. The draw budget is ``20 m`` per cell.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    tree = cKDTree(positions) if tree is None else tree
    if n > 1:
        nn = tree.query(positions, k=2)[0][:, 1]
    else:
        nn = np.full(n, 0.1 * field.diagonal)
    budget = 20 * m
    pts = np.zeros((n, m, 3))
    counts = np.zeros(n, dtype=np.int64)
    drawn = np.zeros(n, dtype=np.int64)
    while True:
        active = np.flatnonzero((counts < m) & (drawn < budget))
        if len(active) == 0:
            break
        # over-draw by 2x, capped by the remaining budget
        per = np.minimum(2 * (m - counts[active]), budget - drawn[active])
        owner = np.repeat(active, per)
        drawn[active] += per
        cand = _ball_points(rng, positions[owner], nn[owner])
        if n > 1:
            d, idx = tree.query(cand, k=2)
            ok = (idx[:, 0] == owner) & (d[:, 0] < d[:, 1])
        else:
            ok = np.ones(len(cand), dtype=bool)
        owner, cand = owner[ok], cand[ok]
        # first-come slots per owner; extras beyond m are discarded
        order = np.argsort(owner, kind="stable")
        owner, cand = owner[order], cand[order]
        start = np.searchsorted(owner, owner, side="left")
        slot = counts[owner] + (np.arange(len(owner)) - start)
        keep = slot < m
        pts[owner[keep], slot[keep]] = cand[keep]
        np.add.at(counts, owner[keep], 1)
    values = np.zeros((n, m))
    grads = np.zeros((n, m, 3))
    mask = np.arange(m)[None, :] < counts[:, None]
    if np.any(mask):
        d, g = field.evaluate(pts[mask])
        values[mask] = d
        grads[mask] = g
    return CellSamples(pts, values, grads, counts, counts < m)


def sample_cell(seed: SeedState, neighbor_seeds, field: UdfField, m: int, rng) -> CellSampleSet:
    """Single-cell convenience wrapper around :func:`sample_cells`."""
    nb = np.asarray(neighbor_seeds, dtype=np.float64).reshape(-1, 3)
    pos = np.vstack([np.asarray(seed.position, dtype=np.float64)[None], nb])
    cs = sample_cells(pos, field, m, rng)
    out = cs.cell(0)
    out.seed_id = seed.id
    return out


# ----------------------------------------------------------------------
# tangent systems
# ----------------------------------------------------------------------

def tangent_rows(samples: CellSamples):
    """Per-sample tangent planes ``n_m . x = n_m . p_m - d_m`` as (N, M, 3), (N, M)."""
    a = samples.gradients
    b = np.einsum("nmk,nmk->nm", a, samples.points) - samples.values
    return a, b


def reduce_tangent(a, b, counts):
    """Thin-QR reduction of each stacked system to 3x3 ``R`` and ``Q^T b``."""
    n = len(a)
    R = np.zeros((n, 3, 3))
    rhs = np.zeros((n, 3))
    for i in range(n):
        m = counts[i]
        if m == 0:
            continue
        q, r = np.linalg.qr(a[i, :m], mode="reduced")
        k = r.shape[0]
        R[i, :k] = r
        rhs[i, :k] = q.T @ b[i, :m]
    return R, rhs


def compute_null_basis(A, tau: float = 0.1):
    """Null-space basis of ``A`` with rank counted against ``tau * sigma_max``.

    Returns ``(V0, r)`` where ``V0`` is 3 x (3 - r) with orthonormal columns.
    """
    A = np.asarray(A, dtype=np.float64)
    if not np.all(np.isfinite(A)):
        raise ValueError("A must be finite")
    _, s, vt = np.linalg.svd(A)
    smax = s[0] if len(s) else 0.0
    r = 0 if smax <= 0 else int(np.sum(s > tau * smax))
    return vt[r:].T.copy(), r


def null_projectors(R, tau: float):
    """Batched ``V0 V0^T`` projectors and ranks for (N, 3, 3) matrices."""
    _, s, vt = np.linalg.svd(R)
    smax = s[:, :1]
    rank = np.where(smax[:, 0] > 0, np.sum(s > tau * smax, axis=1), 0)
    keep = np.arange(3)[None, :] >= rank[:, None]
    v = vt * keep[:, :, None]
    P = np.einsum("nki,nkj->nij", v, v)
    return P, rank, vt


def project_force(g, V0):
    """``V0 V0^T g``; an empty basis pins the seed."""
    V0 = np.asarray(V0, dtype=np.float64).reshape(3, -1)
    g = np.asarray(g, dtype=np.float64)
    if V0.shape[1] == 0:
        return np.zeros_like(g)
    return V0 @ (V0.T @ g)


def halfspaces(positions, anchors, k: int, tree=None):
    """Voronoi bisector halfspaces of each anchor against its ``k`` nearest seeds.

    ``2 (x_j - x_i0)^T x <= |x_j|^2 - |x_i0|^2``; returns (N, K, 3), (N, K), counts.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    k = min(k, n - 1)
    if k <= 0:
        return np.zeros((n, 0, 3)), np.zeros((n, 0)), np.zeros(n, dtype=np.int64)
    tree = cKDTree(positions) if tree is None else tree
    _, idx = tree.query(anchors, k=k + 1)
    # drop the seed itself; anchors coincide with their own positions
    nb = np.zeros((n, k), dtype=np.int64)
    for i in range(n):
        row = idx[i][idx[i] != i]
        nb[i] = row[:k]
    xj = positions[nb]
    x0 = anchors[:, None, :]
    H = 2.0 * (xj - x0)
    h = np.sum(xj * xj, axis=2) - np.sum(x0 * x0, axis=2)
    return H, h, np.full(n, k, dtype=np.int64)


def l1_objective(A, b, x, anchor, gamma):
    return float(np.sum(np.abs(b - A @ x)) + gamma * np.sum((x - anchor) ** 2))


def solve_l1_batch(a, b, counts, anchors, H, h, hcounts, gamma, max_iter, tol, threads=1):
    """Solve the constrained L1 tangent fit for every seed.

    Returns ``(x, iterations, status)`` with status codes from ``_tangent``.
    """
    n = len(anchors)
    out_x = np.zeros((n, 3))
    out_it = np.zeros(n, dtype=np.int64)
    out_st = np.zeros(n, dtype=np.int64)
    args = (np.ascontiguousarray(a), np.ascontiguousarray(b), counts.astype(np.int64),
            np.ascontiguousarray(anchors), np.ascontiguousarray(H), np.ascontiguousarray(h),
            hcounts.astype(np.int64), float(gamma), int(max_iter), float(tol))
    if threads <= 1 or n < 2 * threads:
        _tangent.solve_batch(*args, 0, n, out_x, out_it, out_st)
    else:
        bounds = np.linspace(0, n, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as ex:
            futs = [ex.submit(_tangent.solve_batch, *args, int(lo), int(hi), out_x, out_it, out_st)
                    for lo, hi in zip(bounds[:-1], bounds[1:])]
            for f in futs:
                f.result()
    return out_x, out_it, out_st


def solve_l1_tangent(seed: SeedState, samples: CellSampleSet, gamma: float, halfspaces,
                     max_iter: int = 200, tol: float = 1e-8) -> SeedState:
    """L1 tangent snap of one seed inside its Voronoi halfspace polytope.

    ``halfspaces`` is ``(H, h)`` with rows ``H_k x <= h_k``.
    """
    if len(samples) < 3:
        raise ValueError("need at least 3 samples")
    H, h = (np.asarray(v, dtype=np.float64) for v in halfspaces)
    H = H.reshape(-1, 3)
    anchor = np.asarray(seed.position, dtype=np.float64).copy()
    if np.any(H @ anchor > h + 1e-12):
        raise InfeasiblePolytopeError("anchor violates its own cell constraints")
    a = np.asarray(samples.gradients, dtype=np.float64)
    bb = np.einsum("mk,mk->m", a, samples.points) - samples.values
    x, _, status = _tangent.solve_one(a, bb, anchor, H, h, float(gamma), int(max_iter), float(tol))
    f0 = l1_objective(a, bb, anchor, anchor, gamma)
    f1 = l1_objective(a, bb, x, anchor, gamma)
    assert f1 <= f0 + 1e-12, "L1 solve increased the objective"
    assert np.all(H @ x <= h + 1e-9), "L1 solve left the cell"
    if status == _tangent.STALL:
        log.debug("seed %d: L1 solver hit its iteration cap", seed.id)
    R, rhs = reduce_tangent(a[None], bb[None], np.array([len(a)]))
    return SeedState(seed.id, x, anchor, R[0], rhs[0], seed.null_basis, seed.rank)


def solve_l2_tangent(samples: CellSampleSet, anchor, damping: float = 1e-9):
    """Unconstrained least-squares tangent fit, damped toward ``anchor``."""
    if len(samples) < 3:
        raise ValueError("need at least 3 samples")
    anchor = np.asarray(anchor, dtype=np.float64)
    a = np.asarray(samples.gradients, dtype=np.float64)
    b = np.einsum("mk,mk->m", a, samples.points) - samples.values
    lhs = a.T @ a + damping * np.eye(3)
    return anchor + np.linalg.solve(lhs, a.T @ (b - a @ anchor))


# ----------------------------------------------------------------------
# repulsion
# ----------------------------------------------------------------------

def kernel_width(positions) -> float:
    """Minimum pairwise seed distance."""
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) < 2:
        raise ValueError("need at least two seeds")
    d, _ = cKDTree(positions).query(positions, k=2)
    sigma = float(d[:, 1].min())
    if sigma <= 0:
        raise ZeroWidthError("two seeds coincide")
    return sigma


def repulsive_energy_and_forces(positions, sigma: float, cutoff: float = 4.0):
    """Gaussian pair energy over ordered pairs and its gradient per seed.

    Pairs farther apart than ``cutoff * sigma`` are skipped.
    """
    x = np.asarray(positions, dtype=np.float64)
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    pairs = cKDTree(x).query_pairs(cutoff * sigma, output_type="ndarray")
    g = np.zeros_like(x)
    if len(pairs) == 0:
        return 0.0, g
    i, j = pairs[:, 0], pairs[:, 1]
    diff = x[i] - x[j]
    f = np.exp(-np.sum(diff * diff, axis=1) / (2.0 * sigma * sigma))
    # both ordered pairs (i, j) and (j, i) contribute
    energy = 2.0 * float(np.sum(f))
    gi = (-2.0 / (sigma * sigma)) * f[:, None] * diff
    np.add.at(g, i, gi)
    np.add.at(g, j, -gi)
    return energy, g


# ----------------------------------------------------------------------
# projected L-BFGS
# ----------------------------------------------------------------------

def _two_loop(grad, s_hist, y_hist):
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y), a in zip(zip(s_hist, y_hist), reversed(alphas)):
        rho = 1.0 / np.dot(y, s)
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def _apply_projectors(P, v):
    return np.einsum("nij,nj->ni", P, v.reshape(-1, 3))


@dataclass
class OptimizationResult:
    positions: np.ndarray
    anchors: np.ndarray
    tangent_matrix: np.ndarray
    tangent_rhs: np.ndarray
    projectors: np.ndarray
    rank: np.ndarray
    null_vt: np.ndarray
    sigma: float
    outer_iterations: int
    inner_iterations: list[int]
    converged: bool
    counters: dict = field(default_factory=dict)

    def seeds(self) -> list[SeedState]:
        out = []
        for i in range(len(self.positions)):
            r = int(self.rank[i])
            out.append(SeedState(i, self.positions[i].copy(), self.anchors[i].copy(),
                                 self.tangent_matrix[i].copy(), self.tangent_rhs[i].copy(),
                                 self.null_vt[i, r:].T.copy(), r))
        return out

    @property
    def total_inner_iterations(self) -> int:
        return int(sum(self.inner_iterations))


def _dedupe(x):
    _, keep = np.unique(x, axis=0, return_index=True)
    return x[np.sort(keep)]


def merge_close_seeds(x, fraction: float, mask=None):
    """Drop seeds within ``fraction`` x median nearest-neighbor spacing of a lower id.

    Only pairs with both ends in ``mask`` (all seeds when None) are merged.
    Two seeds snapped onto the same feature from different sheets can end
    up almost coincident, with a null space that forbids separating them.
    """
    if fraction <= 0 or len(x) < 3:
        return x
    d, _ = cKDTree(x).query(x, k=2)
    r = fraction * float(np.median(d[:, 1]))
    pairs = cKDTree(x).query_pairs(r, output_type="ndarray")
    if mask is not None and len(pairs):
        pairs = pairs[mask[pairs[:, 0]] & mask[pairs[:, 1]]]
    if len(pairs) == 0:
        return x
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    drop = np.zeros(len(x), dtype=bool)
    for i, j in pairs.tolist():
        if not drop[i]:
            drop[j] = True
    return x[~drop]


class _Tangents:
    """Resampled cell statistics around the current seeds."""

    def __init__(self, field, x, config, rng):
        tree = cKDTree(x)
        self.samples = sample_cells(x, field, config.samples_per_cell, rng, tree)
        self.a, self.b = tangent_rows(self.samples)
        self.R, self.rhs = reduce_tangent(self.a, self.b, self.samples.counts)
        self.P, self.rank, self.vt = null_projectors(self.R, config.rank_threshold)


def optimize(field: UdfField, config: ReconConfig, rng=None, initial=None) -> OptimizationResult:
    """Alternate L1 tangent snapping with projected repulsion until quiescent.

    Each outer iteration snaps every seed onto its local tangent structure,
    resets the kernel width to the minimum seed spacing and runs L-BFGS on
    the repulsion energy with forces restricted to each seed's tangent null
    space. The inner loop ends once the relative change of the repulsion
    gradient falls below ``delta``; the outer loop ends when an inner loop
    performs no step.
    """
    rng = np.random.default_rng(config.rng_seed) if rng is None else rng
    x = init_seeds(field, config, rng) if initial is None else np.array(initial, dtype=np.float64)
    counters = {"l1_stalls": 0, "l1_reverts": 0, "line_search_failures": 0,
                "sample_budget_exhausted": 0, "duplicates_removed": 0, "seeds_merged": 0}
    inner_counts = []
    # common random numbers: every cell resample replays one stream, so tangent
    # data varies with the seeds rather than with sampling noise
    sample_seed = int(rng.integers(2**63))
    g_prev = None
    converged = False
    sigma = np.nan
    anchors = x.copy()
    tan = None
    outer = 0
    for outer in range(1, config.max_outer_iters + 1):
        # L1 tangent snap for all seeds
        tan = _Tangents(field, x, config, np.random.default_rng(sample_seed))
        counters["sample_budget_exhausted"] += int(np.sum(tan.samples.exhausted))
        anchors = x.copy()
        tree = cKDTree(x)
        H, h, hc = halfspaces(x, anchors, config.halfspace_neighbor_count, tree)
        xs, _, status = solve_l1_batch(tan.a, tan.b, tan.samples.counts, anchors, H, h, hc,
                                       config.gamma, config.admm_max_iters, config.admm_tol,
                                       config.threads)
        few = tan.samples.counts < 3
        xs[few] = anchors[few]
        counters["l1_stalls"] += int(np.sum(status == _tangent.STALL))
        log.debug("L1 snap: mean move %.3g", float(np.linalg.norm(xs - x, axis=1).mean()))
        x = xs
        before = len(x)
        x = merge_close_seeds(x, config.merge_fraction)
        if len(x) != before:
            counters["seeds_merged"] += before - len(x)
            g_prev = None

        try:
            sigma = kernel_width(x)
        except ZeroWidthError:
            before = len(x)
            x = _dedupe(x)
            counters["duplicates_removed"] += before - len(x)
            g_prev = None
            sigma = kernel_width(x)

        updates = 0
        s_hist, y_hist = [], []
        x_last = gp_last = None
        for _ in range(config.max_lbfgs_iters):
            x = project_seeds(field, x, config, rng)
            tan = _Tangents(field, x, config, np.random.default_rng(sample_seed))
            P = tan.P
            e0, g_full = repulsive_energy_and_forces(x, sigma)
            if g_prev is not None and g_prev.shape == g_full.shape:
                rel = np.linalg.norm(g_full - g_prev) / max(np.linalg.norm(g_prev), 1e-12)
                log.debug("rel=%.3g E=%.6g", rel, e0)
                if rel < config.delta:
                    break
            g_prev = g_full
            gp = _apply_projectors(P, g_full).ravel()
            if not np.any(gp):
                break
            if x_last is not None:
                # secant pair between consecutive projected iterates
                sv = (x - x_last).ravel()
                yv = gp - gp_last
                if np.dot(sv, yv) > 1e-12 * np.sqrt(np.dot(sv, sv) * np.dot(yv, yv)):
                    s_hist.append(sv)
                    y_hist.append(yv)
                    if len(s_hist) > config.lbfgs_memory:
                        s_hist.pop(0)
                        y_hist.pop(0)
            x_last, gp_last = x.copy(), gp
            d = _apply_projectors(P, _two_loop(gp, s_hist, y_hist)).ravel()
            if np.dot(d, gp) >= 0:
                s_hist.clear()
                y_hist.clear()
                d = -gp
            if not s_hist:
                # without curvature history move the fastest seed a quarter kernel width
                d *= 0.25 * sigma / np.max(np.linalg.norm(d.reshape(-1, 3), axis=1))
            amax = 0.5 * sigma / np.max(np.linalg.norm(d.reshape(-1, 3), axis=1))

            cache = {}

            def retract(v):
                key = v.tobytes()
                if key not in cache:
                    xp = project_seeds(field, v.reshape(-1, 3), config)
                    e, g = repulsive_energy_and_forces(xp, sigma)
                    cache[key] = (xp, e, _apply_projectors(P, g).ravel())
                return cache[key]

            def f(v):
                return retract(v)[1]

            def fprime(v):
                return retract(v)[2]

            x0 = x.ravel()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                alpha, *_ = line_search(f, fprime, x0, d, gfk=gp, old_fval=e0,
                                        c1=config.wolfe_c1, c2=config.wolfe_c2, amax=amax)
            if alpha is None:
                # Wolfe point beyond the step cap or not found: Armijo backtracking
                counters["line_search_failures"] += 1
                alpha = min(1.0, amax)
                slope = np.dot(gp, d)
                while alpha > 1e-10 and f(x0 + alpha * d) > e0 + config.wolfe_c1 * alpha * slope:
                    alpha *= 0.5
                if alpha <= 1e-10:
                    break
            log.debug("alpha=%.3g amax=%.3g", alpha, amax)
            x = retract(x0 + alpha * d)[0]
            updates += 1
        x = project_seeds(field, x, config, rng)
        inner_counts.append(updates)
        log.info("outer %d: sigma=%.4g inner steps=%d", outer, sigma, updates)
        if updates == 0:
            converged = True
            break
    if not converged:
        warnings.warn(f"seed optimization stopped after {config.max_outer_iters} outer iterations",
                      MaxIterationsWarning, stacklevel=2)
    tan = _Tangents(field, x, config, np.random.default_rng(sample_seed))
    return OptimizationResult(x, anchors if len(anchors) == len(x) else x.copy(), tan.R, tan.rhs,
                              tan.P, tan.rank, tan.vt, float(sigma), outer, inner_counts,
                              converged, counters)
