"""Numba kernels for the constrained L1 tangent fit.

Problem per seed::

    min_x  sum_m |b_m - a_m . x| + gamma * |x - x0|^2   s.t.  H x <= h

solved by ADMM on the split ``A x + r = b``, ``x = z`` (``z`` in the
polytope), followed by an exact primal active-set finish started from the
ADMM point; the candidate with the lowest objective wins.
"""

import numpy as np
from numba import njit

# status codes
OK = 0
STALL = 1
REVERTED = 2


@njit(cache=True)
def objective(A, b, x, x0, gamma):
    s = 0.0
    for m in range(A.shape[0]):
        s += abs(b[m] - (A[m, 0] * x[0] + A[m, 1] * x[1] + A[m, 2] * x[2]))
    d0 = x[0] - x0[0]
    d1 = x[1] - x0[1]
    d2 = x[2] - x0[2]
    return s + gamma * (d0 * d0 + d1 * d1 + d2 * d2)


@njit(cache=True)
def dykstra(y, H, h, max_cycles=200, tol=1e-13):
    """Euclidean projection of ``y`` onto ``{x : H x <= h}``."""
    K = H.shape[0]
    x = y.copy()
    if K == 0:
        return x
    incr = np.zeros((K, 3))
    for _ in range(max_cycles):
        change = 0.0
        for k in range(K):
            hk = H[k]
            v = x + incr[k]
            nn = hk[0] * hk[0] + hk[1] * hk[1] + hk[2] * hk[2]
            viol = hk[0] * v[0] + hk[1] * v[1] + hk[2] * v[2] - h[k]
            if viol > 0.0 and nn > 0.0:
                xn = v - (viol / nn) * hk
            else:
                xn = v
            incr[k] = v - xn
            d = xn - x
            change += d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
            x = xn
        if change < tol * tol:
            break
    return x


@njit(cache=True)
def pull_feasible(x, x0, H, h):
    """Move ``x`` toward the strictly feasible anchor until every halfspace holds."""
    t = 1.0
    for k in range(H.shape[0]):
        hx = H[k, 0] * x[0] + H[k, 1] * x[1] + H[k, 2] * x[2]
        if hx > h[k]:
            h0 = H[k, 0] * x0[0] + H[k, 1] * x0[1] + H[k, 2] * x0[2]
            slack0 = h[k] - h0
            if slack0 <= 0.0:
                return x0.copy()
            tk = slack0 / (hx - h0)
            if tk < t:
                t = tk
    if t < 1.0:
        # shave a relative ulp-scale margin so round-off cannot leave us outside
        t = t * (1.0 - 1e-12)
        return x0 + t * (x - x0)
    return x.copy()


@njit(cache=True, nogil=True)
def _eqp(C, d, nc, c, x0, gamma):
    """Minimize ``-c.x + gamma |x - x0|^2`` on ``C[:nc] x = d[:nc]``; returns ``(x, nu)``."""
    g2 = 2.0 * gamma
    base = x0 + c / g2
    if nc == 0:
        return base, np.zeros(0)
    Cs = C[:nc].copy()
    G = Cs @ Cs.T
    rhs = g2 * (Cs @ base - d[:nc])
    nu = np.linalg.solve(G, rhs)
    return base - (Cs.T @ nu) / g2, nu


@njit(cache=True, nogil=True)
def merge_rows(A, b, tol=1e-12):
    """Collapse coincident hyperplanes (equal up to sign) into weighted rows."""
    M = A.shape[0]
    Am = np.empty((M, 3))
    bm = np.empty(M)
    w = np.zeros(M)
    n = 0
    for m in range(M):
        found = False
        for j in range(n):
            for s in (1.0, -1.0):
                if (abs(A[m, 0] - s * Am[j, 0]) <= tol and abs(A[m, 1] - s * Am[j, 1]) <= tol
                        and abs(A[m, 2] - s * Am[j, 2]) <= tol and abs(b[m] - s * bm[j]) <= tol):
                    found = True
                    break
            if found:
                w[j] += 1.0
                break
        if not found:
            Am[n] = A[m]
            bm[n] = b[m]
            w[n] = 1.0
            n += 1
    return Am[:n].copy(), bm[:n].copy(), w[:n].copy()


@njit(cache=True, nogil=True)
def _independent(C, nc, row):
    """True when ``row`` is not (numerically) in the span of ``C[:nc]``."""
    v = row.copy()
    nv = np.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    if nv == 0.0:
        return False
    if nc > 0:
        Cs = C[:nc].copy()
        coef = np.linalg.lstsq(Cs.T, v)[0]
        v = v - Cs.T @ coef
    return np.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) > 1e-9 * nv


@njit(cache=True, nogil=True)
def active_set(A, b, w, x0, H, h, gamma, xs, max_iter):
    """Primal active-set finish from a feasible start ``xs``.

    Residual signs stay fixed off the active set and active rows are held as
    equalities. Each step moves toward the face minimizer up to the first
    breakpoint or halfspace; at a stationary face the multipliers decide
    which row to release. Row ``m`` carries L1 weight ``w[m]``. Returns
    ``(x, optimal)``.
    """
    M = A.shape[0]
    K = H.shape[0]
    x = xs.copy()
    sign = np.empty(M)
    for m in range(M):
        r = b[m] - (A[m, 0] * x[0] + A[m, 1] * x[1] + A[m, 2] * x[2])
        sign[m] = 1.0 if r >= 0.0 else -1.0
    # active rows: index < M is a tangent row, >= M a halfspace row
    act = np.full(3, -1, dtype=np.int64)
    nc = 0
    C = np.zeros((3, 3))
    d = np.zeros(3)
    in_t = np.zeros(M, dtype=np.bool_)
    in_h = np.zeros(K, dtype=np.bool_)
    xscale = 1.0 + np.sqrt(x0[0] * x0[0] + x0[1] * x0[1] + x0[2] * x0[2])
    for _ in range(max_iter):
        c = np.zeros(3)
        for m in range(M):
            if not in_t[m]:
                c += (w[m] * sign[m]) * A[m]
        xh, nu = _eqp(C, d, nc, c, x0, gamma)
        p = xh - x
        pn = np.sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2])
        if pn <= 1e-14 * xscale:
            # stationary on the current face: check multipliers
            worst = 1e-10
            wi = -1
            for i in range(nc):
                if act[i] < M:
                    v = abs(nu[i]) - w[act[i]]
                else:
                    v = -nu[i]
                if v > worst:
                    worst = v
                    wi = i
            if wi < 0:
                return x, True
            row = act[wi]
            if row < M:
                in_t[row] = False
                # lambda = -nu; the residual leaves zero on the side of lambda
                sign[row] = 1.0 if -nu[wi] > 0.0 else -1.0
            else:
                in_h[row - M] = False
            for i in range(wi, nc - 1):
                act[i] = act[i + 1]
                C[i] = C[i + 1]
                d[i] = d[i + 1]
            nc -= 1
            continue
        # ratio test along p
        t = 1.0
        block = -1
        for m in range(M):
            if in_t[m]:
                continue
            ap = A[m, 0] * p[0] + A[m, 1] * p[1] + A[m, 2] * p[2]
            if sign[m] * ap > 0.0:
                r = b[m] - (A[m, 0] * x[0] + A[m, 1] * x[1] + A[m, 2] * x[2])
                tm = max(r / ap, 0.0)
                if tm < t:
                    t = tm
                    block = m
        for k in range(K):
            if in_h[k]:
                continue
            hp = H[k, 0] * p[0] + H[k, 1] * p[1] + H[k, 2] * p[2]
            if hp > 0.0:
                slack = h[k] - (H[k, 0] * x[0] + H[k, 1] * x[1] + H[k, 2] * x[2])
                tk = max(slack / hp, 0.0)
                if tk < t:
                    t = tk
                    block = M + k
        if block < 0:
            x = xh
            continue
        x = x + t * p
        row_vec = A[block] if block < M else H[block - M]
        if nc == 3 or not _independent(C, nc, row_vec):
            # round-off breakpoint of a row already implied by the face: let it cross
            if block < M:
                sign[block] = -sign[block]
            continue
        act[nc] = block
        if block < M:
            in_t[block] = True
            C[nc] = A[block]
            d[nc] = b[block]
        else:
            in_h[block - M] = True
            C[nc] = H[block - M]
            d[nc] = h[block - M]
        nc += 1
    return x, False


@njit(cache=True, nogil=True)
def solve_one(A, b, x0, H, h, gamma, max_iter, tol):
    """Return ``(x, iterations, status)`` for one seed."""
    M = A.shape[0]
    f0 = objective(A, b, x0, x0, gamma)
    if M == 0:
        return x0.copy(), 0, OK
    AtA = A.T @ A
    scale = 0.0
    for m in range(M):
        scale += abs(b[m] - (A[m, 0] * x0[0] + A[m, 1] * x0[1] + A[m, 2] * x0[2]))
    scale = max(scale / M, 1e-8)
    rho = 1.0 / scale
    x = x0.copy()
    z = x0.copy()
    r = b - A @ x
    r_old = r.copy()
    u = np.zeros(M)
    w = np.zeros(3)
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        # x-update: (2 gamma I + rho A^T A + rho I) x = 2 gamma x0 + rho A^T (b - r - u) + rho (z - w)
        lhs = rho * AtA
        for j in range(3):
            lhs[j, j] += 2.0 * gamma + rho
        rhs = 2.0 * gamma * x0 + rho * (A.T @ (b - r - u)) + rho * (z - w)
        x = np.linalg.solve(lhs, rhs)
        Ax = A @ x
        v = b - Ax - u
        thr = 1.0 / rho
        for m in range(M):
            if v[m] > thr:
                r[m] = v[m] - thr
            elif v[m] < -thr:
                r[m] = v[m] + thr
            else:
                r[m] = 0.0
        z_old = z
        z = dykstra(x + w, H, h)
        pr1 = Ax + r - b
        pr2 = x - z
        u += pr1
        w += pr2
        prim = np.sqrt(np.sum(pr1 * pr1) + np.sum(pr2 * pr2))
        dual = rho * np.sqrt(np.sum((A.T @ (r - r_old) - (z - z_old)) ** 2))
        r_old = r.copy()
        if prim < tol and dual < tol:
            converged = True
            break
        # residual balancing, rescaling the scaled duals
        if prim > 10.0 * dual:
            rho *= 2.0
            u /= 2.0
            w /= 2.0
        elif dual > 10.0 * prim:
            rho /= 2.0
            u *= 2.0
            w *= 2.0

    best = x0.copy()
    fbest = f0
    xa = pull_feasible(z, x0, H, h)
    Am, bm, wm = merge_rows(A, b)
    xf, optimal = active_set(Am, bm, wm, x0, H, h, gamma, xa, 50 + 4 * (Am.shape[0] + H.shape[0]))
    cands = [xa, pull_feasible(x, x0, H, h), pull_feasible(xf, x0, H, h)]
    for ci in range(len(cands)):
        c = cands[ci]
        fc = objective(A, b, c, x0, gamma)
        if fc < fbest:
            fbest = fc
            best = c
    status = OK
    if not converged and not optimal:
        status = STALL
    return best, it, status


@njit(cache=True, nogil=True)
def solve_batch(A_all, b_all, m_count, x0_all, H_all, h_all, k_count, gamma, max_iter, tol, lo, hi,
                out_x, out_it, out_status):
    for i in range(lo, hi):
        m = m_count[i]
        k = k_count[i]
        x, it, st = solve_one(A_all[i, :m].copy(), b_all[i, :m].copy(), x0_all[i].copy(),
                              H_all[i, :k].copy(), h_all[i, :k].copy(), gamma, max_iter, tol)
        out_x[i] = x
        out_it[i] = it
        out_status[i] = st
