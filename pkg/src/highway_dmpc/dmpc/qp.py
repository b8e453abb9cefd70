"""Thin adapters from a dense two-sided QP to off-the-shelf sparse solvers.

Problem form::

    minimize    0.5 z'Pz + q'z
    subject to  lo <= A z <= hi

Infinite bounds are allowed; rows with ``lo == hi`` become equalities.
The in-repo ``ipm`` backend is a dense primal-dual interior-point method sized
for the planner subproblem (tens of variables); it hands problems with
equality rows, or that it fails to solve, to clarabel.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve


class QPFailure(RuntimeError):
    pass


def solve_qp(P, q, A, lo, hi, backend: str = "ipm") -> np.ndarray:
    if backend == "ipm":
        try:
            return _solve_ipm(P, q, A, lo, hi)
        except QPFailure:
            return _solve_clarabel(P, q, A, lo, hi)
    if backend == "clarabel":
        return _solve_clarabel(P, q, A, lo, hi)
    if backend == "osqp":
        return _solve_osqp(P, q, A, lo, hi)
    raise ValueError(f"unknown QP backend {backend!r}")


def _solve_ipm(P, q, A, lo, hi, tol: float = 1e-9, max_iter: int = 60):
    """Dense primal-dual interior point (Mehrotra predictor-corrector).

    Rows with a single nonzero are treated as variable bounds and enter the
    normal equations as a diagonal; variables pinned by such a row with
    ``lo == hi`` are eliminated first. Other equality rows are not supported.
    """
    nnz = np.count_nonzero(A, axis=1)
    single = nnz == 1
    col = np.argmax(A != 0, axis=1)
    coef = A[np.arange(len(A)), col]
    fixed_row = single & np.isfinite(lo) & (lo == hi)
    if np.any(~single & np.isfinite(lo) & (lo == hi)):
        raise QPFailure("equality rows")
    n = len(q)
    z = np.zeros(n)
    free = np.ones(n, dtype=bool)
    if fixed_row.any():
        free[col[fixed_row]] = False
        z[col[fixed_row]] = lo[fixed_row] / coef[fixed_row]
        if not free.any():
            return z
    zf = z[~free]
    shift = A[:, ~free] @ zf
    keep = ~fixed_row
    Pr = P[np.ix_(free, free)]
    qr = q[free] + P[np.ix_(free, ~free)] @ zf
    Ar = A[keep][:, free]
    z[free] = _ipm_core(Pr, qr, Ar, lo[keep] - shift[keep], hi[keep] - shift[keep],
                        tol, max_iter)
    return z


def _ipm_core(P, q, A, lo, hi, tol, max_iter):
    n = len(q)
    nnz = np.count_nonzero(A, axis=1)
    empty = nnz == 0
    if np.any(empty & ((lo > 0) | (hi < 0))):
        raise QPFailure("infeasible empty row")
    A, lo, hi = A[~empty], lo[~empty], hi[~empty]
    single = nnz[~empty] == 1
    col = np.argmax(A != 0, axis=1)
    coef = A[np.arange(len(A)), col]
    # general rows as G z <= h
    up = np.isfinite(hi) & ~single
    low = np.isfinite(lo) & ~single
    G = np.vstack([A[up], -A[low]])
    h = np.r_[hi[up], -lo[low]]
    # bound rows as sign * z[idx] <= hb
    bu = np.isfinite(hi) & single
    bl = np.isfinite(lo) & single
    idx = np.r_[col[bu], col[bl]]
    sgn = np.r_[np.sign(coef[bu]), -np.sign(coef[bl])]
    hb = np.r_[hi[bu] / np.abs(coef[bu]), -lo[bl] / np.abs(coef[bl])]
    m, mb = len(h), len(hb)
    if m + mb == 0:
        return np.linalg.solve(P, -q)
    z = np.zeros(n)
    s = np.maximum(h, 1.0)
    lam = np.ones(m)
    sb = np.maximum(hb, 1.0)
    lb = np.ones(mb)
    scale_d = 1.0 + np.max(np.abs(q))
    scale_p = 1.0 + max(np.max(np.abs(h), initial=0.0), np.max(np.abs(hb), initial=0.0))
    mtot = m + mb
    best = (np.inf, z)
    for _ in range(max_iter):
        rd = P @ z + q + G.T @ lam
        np.add.at(rd, idx, sgn * lb)
        rp = G @ z + s - h
        rb = sgn * z[idx] + sb - hb
        mu = (s @ lam + sb @ lb) / mtot
        err = max(np.max(np.abs(rd)) / scale_d,
                  max(np.max(np.abs(rp), initial=0.0), np.max(np.abs(rb), initial=0.0)) / scale_p,
                  np.max(s * lam, initial=0.0), np.max(sb * lb, initial=0.0))
        if err <= tol:
            return z
        if err < best[0]:
            best = (err, z)
        w = lam / s
        wb = lb / sb
        K = P + (G.T * w) @ G
        K[np.diag_indices(n)] += np.bincount(idx, weights=wb, minlength=n)
        fac = _regularized_cholesky(K)

        def newton(rc, rcb):
            rhs = -rd - G.T @ (w * rp - rc / s)
            np.add.at(rhs, idx, -sgn * (wb * rb - rcb / sb))
            dz = cho_solve(fac, rhs)
            dlam = w * (G @ dz + rp) - rc / s
            dlb = wb * (sgn * dz[idx] + rb) - rcb / sb
            return dz, -(rc + s * dlam) / lam, dlam, -(rcb + sb * dlb) / lb, dlb

        def max_step(*pairs):
            a = 1.0
            for v, dv in pairs:
                neg = dv < 0
                if neg.any():
                    a = min(a, float(np.min(-v[neg] / dv[neg])))
            return a

        dz, ds, dlam, dsb, dlb = newton(s * lam, sb * lb)
        a_aff = max_step((s, ds), (lam, dlam), (sb, dsb), (lb, dlb))
        mu_aff = ((s + a_aff * ds) @ (lam + a_aff * dlam)
                  + (sb + a_aff * dsb) @ (lb + a_aff * dlb)) / mtot
        sigma = (mu_aff / mu) ** 3
        dz, ds, dlam, dsb, dlb = newton(s * lam + ds * dlam - sigma * mu,
                                        sb * lb + dsb * dlb - sigma * mu)
        a = min(1.0, 0.99 * max_step((s, ds), (lam, dlam), (sb, dsb), (lb, dlb)))
        z = z + a * dz
        s = s + a * ds
        lam = lam + a * dlam
        sb = sb + a * dsb
        lb = lb + a * dlb
    # rounding can stall the dual residual just above tol; accept a close iterate
    if best[0] <= 1e-6:
        return best[1]
    raise QPFailure("ipm max_iter")


def _regularized_cholesky(K):
    # the barrier weights grow without bound near the solution; a relative
    # diagonal shift keeps the factorization defined
    scale = float(np.max(np.abs(np.diag(K)))) or 1.0
    for shift in (0.0, 1e-14, 1e-12, 1e-10, 1e-8):
        try:
            return cho_factor(K + shift * scale * np.eye(len(K)) if shift else K)
        except np.linalg.LinAlgError:
            continue
    raise QPFailure("factorization")


def _solve_clarabel(P, q, A, lo, hi):
    import clarabel

    eq = np.isfinite(lo) & np.isfinite(hi) & (lo == hi)
    up = np.isfinite(hi) & ~eq
    low = np.isfinite(lo) & ~eq
    blocks = [A[eq], A[up], -A[low]]
    rhs = np.concatenate([hi[eq], hi[up], -lo[low]])
    G = sp.csc_matrix(np.vstack(blocks))
    cones = []
    if eq.any():
        cones.append(clarabel.ZeroConeT(int(eq.sum())))
    n_ineq = int(up.sum() + low.sum())
    if n_ineq:
        cones.append(clarabel.NonnegativeConeT(n_ineq))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = 1e-9
    settings.tol_gap_rel = 1e-9
    settings.tol_feas = 1e-9
    settings.max_iter = 100
    solver = clarabel.DefaultSolver(sp.csc_matrix(np.triu(P)), q, G, rhs, cones, settings)
    sol = solver.solve()
    status = str(sol.status)
    if status not in ("Solved", "AlmostSolved"):
        raise QPFailure(status)
    return np.asarray(sol.x)


def _solve_osqp(P, q, A, lo, hi):
    import osqp

    solver = osqp.OSQP()
    solver.setup(sp.csc_matrix(np.triu(P)), q, sp.csc_matrix(A), np.maximum(lo, -1e20),
                 np.minimum(hi, 1e20), verbose=False, eps_abs=1e-8, eps_rel=1e-8,
                 polishing=True, max_iter=20000)
    res = solver.solve()
    status = str(res.info.status).lower()
    if "solved" not in status or res.x is None or not np.all(np.isfinite(res.x)):
        raise QPFailure(status)
    return np.asarray(res.x)
