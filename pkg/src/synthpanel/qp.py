"""Simplex-constrained least squares and the nested V search, compiled with numba.

The weight problem ``min ||A w - b||^2  s.t.  w >= 0, sum(w) = 1`` is solved by
a primal active-set method working in the null space of the equality
constraints.  The same routine handles extra equality rows, which the
tie-breaking stage uses to stay on the optimal face of the first problem.
"""

from __future__ import annotations

import numpy as np
from numba import njit

CONVERGED = 0
ITERATION_CAP = 1

_STEP_TOL = 1e-13


@njit(cache=True)
def _svd_parts(E):
    """SVD of a short-and-wide ``E``; returns (U, s, Vt, rank)."""
    p, n = E.shape
    U, s, Vt = np.linalg.svd(E, full_matrices=True)
    rank = 0
    if s.shape[0] > 0:
        smax = s[0]
        for i in range(s.shape[0]):
            if s[i] > 1e-10 * smax and s[i] > 1e-300:
                rank += 1
    return U, s, Vt, rank


@njit(cache=True)
def _ones_null_basis(n):
    """Orthonormal basis of the complement of ``1`` in R^n (Householder reflector columns)."""
    # H = I - 2 u u' / u'u with u = 1/sqrt(n) - e_1 maps e_1 to 1/sqrt(n)
    u = np.full(n, 1.0 / np.sqrt(n))
    u[0] -= 1.0
    uu = u @ u
    Z = np.empty((n, n - 1))
    for k in range(1, n):
        for i in range(n):
            Z[i, k - 1] = (1.0 if i == k else 0.0) - 2.0 * u[i] * u[k] / uu
    return Z


@njit(cache=True)
def active_set_ls(G, y, E, f, w0, max_iter, kkt_tol):
    """Minimise ``0.5 ||G w - y||^2`` over ``{w >= 0, E w = f}``.

    ``w0`` must be feasible.  ``kkt_tol`` is relative to
    ``||G||_F (||G||_F + ||y||)``, the scale of the gradient's round-off.
    Returns ``(w, iterations, status)`` where status is ``CONVERGED`` or
    ``ITERATION_CAP``; ``w`` is feasible either way.
    """
    J = G.shape[1]
    gn = np.sqrt(np.sum(G * G))
    tol = kkt_tol * max(gn * (gn + np.sqrt(np.sum(y * y))), 1e-300)
    sum_only = E.shape[0] == 1 and np.all(E == 1.0)
    w = w0.copy()
    free = w > 0.0
    tabu = np.zeros(J, dtype=np.bool_)
    r = G @ w - y
    it = 0
    while it < max_iter:
        it += 1
        g = G.T @ r
        F = np.flatnonzero(free)
        n = F.shape[0]
        EF = np.empty((E.shape[0], n))
        for k in range(n):
            EF[:, k] = E[:, F[k]]
        if sum_only:
            rank = 1
            U = np.ones((1, 1))
            s = np.ones(1)
            Vt = np.ones((1, n))
        else:
            U, s, Vt, rank = _svd_parts(EF)
        q = n - rank
        dF = np.zeros(n)
        ray = False
        if q > 0:
            if sum_only:
                Z = _ones_null_basis(n)
            else:
                Z = Vt[rank:, :].T.copy()
            GF = np.empty((G.shape[0], n))
            for k in range(n):
                GF[:, k] = G[:, F[k]]
            GZ = GF @ Z
            M = GZ.T @ GZ
            gF = np.empty(n)
            for k in range(n):
                gF[k] = g[F[k]]
            rz = Z.T @ gF
            lam, Q = np.linalg.eigh(M)
            c = Q.T @ rz
            lmax = max(lam[-1], 0.0)
            thr = 1e-11 * lmax + 1e-300
            cnull = 0.0
            cnorm = 0.0
            for k in range(q):
                cnorm += c[k] * c[k]
                if lam[k] <= thr:
                    cnull += c[k] * c[k]
            u = np.zeros(q)
            if cnull > 1e-24 * (1.0 + cnorm):
                ray = True
                for k in range(q):
                    if lam[k] <= thr:
                        u -= c[k] * Q[:, k]
            else:
                for k in range(q):
                    if lam[k] > thr:
                        u -= (c[k] / lam[k]) * Q[:, k]
            dF = Z @ u
        dmax = 0.0
        slope = 0.0
        for k in range(n):
            dmax = max(dmax, abs(dF[k]))
            slope += g[F[k]] * dF[k]
        if dmax <= _STEP_TOL or slope >= -tol * dmax:
            # stationary on the current face: price out the bound constraints
            gF = np.empty(n)
            for k in range(n):
                gF[k] = g[F[k]]
            mult = np.zeros(E.shape[0])
            if sum_only:
                mult[0] = gF.mean()
            elif rank > 0:
                t = Vt[:rank, :] @ gF
                for k in range(rank):
                    t[k] /= s[k]
                mult = U[:, :rank] @ t
            rho = g - E.T @ mult
            best = -1
            bval = -tol
            for j in range(J):
                if not free[j] and not tabu[j] and rho[j] < bval:
                    bval = rho[j]
                    best = j
            if best < 0:
                return w, it, CONVERGED
            free[best] = True
            continue
        # exact line search: eigenvalue truncation can make the subspace
        # step overshoot, and a ray has no natural length
        Gd = np.zeros(G.shape[0])
        for k in range(n):
            Gd += dF[k] * G[:, F[k]]
        curv = Gd @ Gd
        alpha = -slope / curv if curv > 0.0 else np.inf
        if not ray and alpha > 1.0:
            alpha = 1.0
        block = -1
        for k in range(n):
            if dF[k] < 0.0:
                a = -w[F[k]] / dF[k]
                if a < alpha:
                    alpha = a
                    block = k
        if not np.isfinite(alpha):
            return w, it, CONVERGED
        for k in range(n):
            w[F[k]] += alpha * dF[k]
        if block >= 0:
            jb = F[block]
            w[jb] = 0.0
            free[jb] = False
            if alpha == 0.0:
                tabu[jb] = True
        if alpha > 0.0:
            tabu[:] = False
        for k in range(n):
            if w[F[k]] < 0.0:
                w[F[k]] = 0.0
                free[F[k]] = False
        r = G @ w - y
    return w, it, ITERATION_CAP


@njit(cache=True)
def _best_vertex(A, b):
    J = A.shape[1]
    best = 0
    bval = np.inf
    for j in range(J):
        acc = 0.0
        for k in range(A.shape[0]):
            d = A[k, j] - b[k]
            acc += d * d
        if acc < bval:
            bval = acc
            best = j
    w = np.zeros(J)
    w[best] = 1.0
    return w


@njit(cache=True)
def _renormalise(w):
    for j in range(w.shape[0]):
        if w[j] < 0.0:
            w[j] = 0.0
    tot = w.sum()
    return w / tot


@njit(cache=True)
def simplex_ls(A, b, w0, max_iter, kkt_tol):
    """``min ||A w - b||^2`` over the unit simplex; ``w0`` empty means cold start."""
    J = A.shape[1]
    if w0.shape[0] == J:
        w = _renormalise(w0.copy())
    else:
        w = _best_vertex(A, b)
    E = np.ones((1, J))
    f = np.ones(1)
    w, it, status = active_set_ls(A, b, E, f, w, max_iter, kkt_tol)
    return _renormalise(w), it, status


@njit(cache=True)
def face_tiebreak(A, B, ypath, w1, max_iter, kkt_tol):
    """Among simplex points with ``A w = A w1`` pick the best fit of ``B w`` to ``ypath``."""
    J = A.shape[1]
    K = A.shape[0]
    E = np.empty((K + 1, J))
    E[:K, :] = A
    E[K, :] = 1.0
    f = np.empty(K + 1)
    f[:K] = A @ w1
    f[K] = 1.0
    w, it, status = active_set_ls(B, ypath, E, f, w1, max_iter, kkt_tol)
    return _renormalise(w), it, status


@njit(cache=True)
def solve_weights_core(Z0, z1, v, Y0path, y1path, max_iter, zero_tol, kkt_tol, w0):
    """Weights for predictor importances ``v``.

    When the predictor loss can be driven to zero the optimum is a face of
    the simplex; ties on that face are broken by the fit of the outcome path.
    Returns ``(w, loss, status)``.
    """
    sv = np.sqrt(v)
    A = Z0 * sv.reshape(-1, 1)
    b = z1 * sv
    w, it, status = simplex_ls(A, b, w0, max_iter, kkt_tol)
    res = A @ w - b
    loss = float(res @ res)
    if status == CONVERGED and loss <= zero_tol * (1.0 + float(b @ b)) and Y0path.shape[0] > 0:
        w2, it2, status2 = face_tiebreak(A, Y0path, y1path, w, max_iter, kkt_tol)
        w = w2
        res = A @ w - b
        loss = float(res @ res)
    return w, loss, status


@njit(cache=True)
def _softmax_ext(u):
    # last coordinate pinned at zero
    K = u.shape[0] + 1
    m = 0.0
    for k in range(K - 1):
        if u[k] > m:
            m = u[k]
    v = np.empty(K)
    tot = 0.0
    for k in range(K - 1):
        v[k] = np.exp(u[k] - m)
        tot += v[k]
    v[K - 1] = np.exp(-m)
    tot += v[K - 1]
    return v / tot


@njit(cache=True)
def _validation_mse(Z0, z1, u, Y0v, y1v, w_warm, max_iter, kkt_tol):
    v = _softmax_ext(u)
    sv = np.sqrt(v)
    A = Z0 * sv.reshape(-1, 1)
    b = z1 * sv
    w, it, status = simplex_ls(A, b, w_warm, max_iter, kkt_tol)
    e = y1v - Y0v @ w
    return float(e @ e) / e.shape[0], w, status


@njit(cache=True)
def nelder_mead_v(Z0, z1, Y0v, y1v, u0, max_evals, max_iter, kkt_tol, xatol, frtol):
    """Nelder-Mead over the softmax parameterisation of the V diagonal.

    Returns ``(u_best, f_best, evals, status)``; status is ``ITERATION_CAP``
    if any inner weight solve hit its iteration cap.
    """
    n = u0.shape[0]
    sim = np.empty((n + 1, n))
    fs = np.empty(n + 1)
    w_warm = np.empty(0)
    status = CONVERGED
    sim[0] = u0
    for i in range(n):
        sim[i + 1] = u0
        sim[i + 1, i] += 1.0
    evals = 0
    for i in range(n + 1):
        fs[i], w_warm, st = _validation_mse(Z0, z1, sim[i], Y0v, y1v, w_warm, max_iter, kkt_tol)
        status = max(status, st)
        evals += 1
    while evals < max_evals:
        order = np.argsort(fs, kind="mergesort")
        sim = sim[order].copy()
        fs = fs[order].copy()
        xspread = 0.0
        for i in range(1, n + 1):
            for k in range(n):
                xspread = max(xspread, abs(sim[i, k] - sim[0, k]))
        fspread = fs[n] - fs[0]
        if xspread <= xatol or fspread <= frtol * abs(fs[0]) + 1e-300:
            break
        centroid = np.zeros(n)
        for i in range(n):
            centroid += sim[i]
        centroid /= n
        xr = centroid + (centroid - sim[n])
        fr, w_warm, st = _validation_mse(Z0, z1, xr, Y0v, y1v, w_warm, max_iter, kkt_tol)
        status = max(status, st)
        evals += 1
        shrink = False
        if fr < fs[0]:
            xe = centroid + 2.0 * (centroid - sim[n])
            fe, w_warm, st = _validation_mse(Z0, z1, xe, Y0v, y1v, w_warm, max_iter, kkt_tol)
            status = max(status, st)
            evals += 1
            if fe < fr:
                sim[n] = xe
                fs[n] = fe
            else:
                sim[n] = xr
                fs[n] = fr
        elif fr < fs[n - 1]:
            sim[n] = xr
            fs[n] = fr
        else:
            if fr < fs[n]:
                xc = centroid + 0.5 * (xr - centroid)
                fc, w_warm, st = _validation_mse(Z0, z1, xc, Y0v, y1v, w_warm, max_iter, kkt_tol)
                status = max(status, st)
                evals += 1
                if fc <= fr:
                    sim[n] = xc
                    fs[n] = fc
                else:
                    shrink = True
            else:
                xc = centroid + 0.5 * (sim[n] - centroid)
                fc, w_warm, st = _validation_mse(Z0, z1, xc, Y0v, y1v, w_warm, max_iter, kkt_tol)
                status = max(status, st)
                evals += 1
                if fc < fs[n]:
                    sim[n] = xc
                    fs[n] = fc
                else:
                    shrink = True
            if shrink:
                for i in range(1, n + 1):
                    sim[i] = sim[0] + 0.5 * (sim[i] - sim[0])
                    fs[i], w_warm, st = _validation_mse(Z0, z1, sim[i], Y0v, y1v, w_warm, max_iter, kkt_tol)
                    status = max(status, st)
                    evals += 1
    best = 0
    for i in range(n + 1):
        if fs[i] < fs[best]:
            best = i
    return sim[best].copy(), fs[best], evals, status


def softmax_ext(u: np.ndarray) -> np.ndarray:
    return _softmax_ext(np.asarray(u, dtype=float))


def inverse_softmax_ext(v: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    v = np.maximum(np.asarray(v, dtype=float), floor)
    return np.log(v[:-1]) - np.log(v[-1])


def kkt_residual(A: np.ndarray, b: np.ndarray, w: np.ndarray, support_tol: float = 0.0) -> float:
    """Stationarity residual of ``||A w - b||^2`` on the simplex at ``w``."""
    g = 2.0 * A.T @ (A @ w - b)
    supp = w > support_tol
    nu = float(np.mean(g[supp]))
    on = np.abs(g[supp] - nu)
    off = np.maximum(nu - g[~supp], 0.0)
    return float(max(on.max(initial=0.0), off.max(initial=0.0)))
