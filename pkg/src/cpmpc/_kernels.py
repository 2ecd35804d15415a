"""Compiled inner loops of the single-shooting MPC solver.

Everything here works on plain arrays.  Box data for step ``k`` of the
input sequence constrains the state ``x_{k+1}``:
``lo[k, m]``, ``hi[k, m]`` are the corners of unsafe box ``m`` and
``valid[k, m]`` flags nonempty boxes.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def penalized_objective(U, x0, dt, ell, tx, ty, tol, lo, hi, valid, margin, mu, grad):
    """Tracking cost plus ``mu`` times squared constraint violations.

    Violations are measured against constraints tightened by ``margin``
    (clearance) and shrunk to ``tol`` (terminal ball).  Writes the gradient
    with respect to ``U`` into ``grad`` and returns ``(f, cost, pen)``.
    """
    H = U.shape[0]
    M = lo.shape[1]
    X = np.empty((H + 1, 4))
    X[0, 0] = x0[0]
    X[0, 1] = x0[1]
    X[0, 2] = x0[2]
    X[0, 3] = x0[3]
    for k in range(H):
        th = X[k, 2]
        v = X[k, 3]
        X[k + 1, 0] = X[k, 0] + dt * v * math.cos(th)
        X[k + 1, 1] = X[k, 1] + dt * v * math.sin(th)
        X[k + 1, 2] = th + dt * (v / ell) * math.tan(U[k, 0])
        X[k + 1, 3] = v + dt * U[k, 1]

    gp = np.zeros((H + 1, 2))
    cost = 0.0
    for k in range(H + 1):
        dx = X[k, 0] - tx
        dy = X[k, 1] - ty
        cost += dx * dx + dy * dy
        gp[k, 0] = 2.0 * dx
        gp[k, 1] = 2.0 * dy

    pen = 0.0
    for k in range(H):
        px = X[k + 1, 0]
        py = X[k + 1, 1]
        for m in range(M):
            if not valid[k, m]:
                continue
            best = lo[k, m, 0] - px
            axis = 0
            sign = -1.0
            c = px - hi[k, m, 0]
            if c > best:
                best = c
                sign = 1.0
            c = lo[k, m, 1] - py
            if c > best:
                best = c
                axis = 1
                sign = -1.0
            c = py - hi[k, m, 1]
            if c > best:
                best = c
                axis = 1
                sign = 1.0
            viol = margin - best
            if viol > 0.0:
                pen += viol * viol
                gp[k + 1, axis] += mu * (-2.0 * viol * sign)

    for i in range(2):
        d = X[H, i] - (tx if i == 0 else ty)
        viol = abs(d) - tol
        if viol > 0.0:
            pen += viol * viol
            gp[H, i] += mu * 2.0 * viol * (1.0 if d > 0 else -1.0)

    # adjoint sweep
    l0 = gp[H, 0]
    l1 = gp[H, 1]
    l2 = 0.0
    l3 = 0.0
    for k in range(H - 1, -1, -1):
        th = X[k, 2]
        v = X[k, 3]
        phi = U[k, 0]
        cphi = math.cos(phi)
        grad[k, 0] = l2 * dt * v / ell / (cphi * cphi)
        grad[k, 1] = l3 * dt
        ct = math.cos(th)
        st = math.sin(th)
        n2 = l0 * (-dt * v * st) + l1 * (dt * v * ct) + l2
        n3 = l0 * dt * ct + l1 * dt * st + l2 * dt / ell * math.tan(phi) + l3
        l0 = l0 + gp[k, 0]
        l1 = l1 + gp[k, 1]
        l2 = n2
        l3 = n3
    return cost + mu * pen, cost, pen


@njit(cache=True)
def _project(U, lb, ub):
    out = np.empty_like(U)
    for k in range(U.shape[0]):
        for i in range(2):
            v = U[k, i]
            if v < lb[i]:
                v = lb[i]
            elif v > ub[i]:
                v = ub[i]
            out[k, i] = v
    return out


@njit(cache=True)
def spg(U0, lb, ub, x0, dt, ell, tx, ty, tol, lo, hi, valid, margin, mu, max_iter):
    """Nonmonotone spectral projected gradient on the input box.

    Returns ``(U, f, cost, pen, iterations)`` for the best iterate seen.
    """
    x = _project(U0, lb, ub)
    g = np.empty_like(x)
    f, cost, pen = penalized_objective(x, x0, dt, ell, tx, ty, tol, lo, hi, valid, margin, mu, g)
    best_x = x.copy()
    best_f, best_cost, best_pen = f, cost, pen
    hist = np.full(10, -np.inf)
    hist[0] = f
    best_hist = np.full(10, np.inf)
    pg = _project(x - g, lb, ub) - x
    pg_norm = np.max(np.abs(pg)) if pg.size else 0.0
    alpha = 1.0 / pg_norm if pg_norm > 0 else 1.0
    gn = np.empty_like(x)
    it = 0
    while it < max_iter:
        if pg_norm <= 1e-10:
            break
        it += 1
        d = _project(x - alpha * g, lb, ub) - x
        gtd = np.sum(g * d)
        if gtd >= 0.0:
            break
        fmax = np.max(hist)
        lam = 1.0
        accepted = False
        for _ in range(40):
            xn = x + lam * d
            fn, cn, pnn = penalized_objective(xn, x0, dt, ell, tx, ty, tol, lo, hi, valid,
                                              margin, mu, gn)
            if fn <= fmax + 1e-4 * lam * gtd:
                accepted = True
                break
            denom = fn - f - lam * gtd
            lt = -0.5 * lam * lam * gtd / denom if denom > 0 else 0.5 * lam
            if lt < 0.1 * lam or lt > 0.9 * lam:
                lt = 0.5 * lam
            lam = lt
        if not accepted:
            break
        s = xn - x
        y = gn - g
        sy = np.sum(s * y)
        ss = np.sum(s * s)
        x = xn
        f = fn
        g[:, :] = gn
        hist[it % 10] = f
        if f < best_f:
            best_f, best_cost, best_pen = f, cn, pnn
            best_x[:, :] = x
        if ss <= 1e-28:
            break
        if best_hist[it % 10] - best_f <= 1e-12 * (1.0 + abs(best_f)):
            break
        best_hist[it % 10] = best_f
        alpha = ss / sy if sy > 0 else 1e10
        if alpha < 1e-12:
            alpha = 1e-12
        elif alpha > 1e12:
            alpha = 1e12
        pg = _project(x - g, lb, ub) - x
        pg_norm = np.max(np.abs(pg))
    return best_x, best_f, best_cost, best_pen, it
