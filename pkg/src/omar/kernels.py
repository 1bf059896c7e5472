"""Hot numeric kernels.

Every kernel exists in two flavours: a numba-compiled one (suffix ``_nb``)
and a pure-numpy one (suffix ``_np``). The unsuffixed public name is bound to
one of them according to :data:`omar._accel.USE_NUMBA`. Several kernels are
written once in an array style that numba accepts, so both flavours share a
single source and differ only in compilation.

Polynomial coefficient matrices are row-per-cluster and column-per-power
(``coef[i, q]`` multiplies ``t**q``), zero-padded to a common width.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, jitable, njit


# --------------------------------------------------------------------------
# Poisson-binomial mass of the number of treated peers


def _pb_pmf_np(p):
    pmf = np.zeros(p.shape[0] + 1)
    pmf[0] = 1.0
    for k in range(p.shape[0]):
        pk = p[k]
        pmf[1 : k + 2] = pmf[1 : k + 2] * (1.0 - pk) + pmf[0 : k + 1] * pk
        pmf[0] = pmf[0] * (1.0 - pk)
    return pmf


def _pb_pmf_loops(p):
    m = p.shape[0]
    pmf = np.zeros(m + 1)
    pmf[0] = 1.0
    for k in range(m):
        pk = p[k]
        for s in range(k + 1, 0, -1):
            pmf[s] = pmf[s] * (1.0 - pk) + pmf[s - 1] * pk
        pmf[0] = pmf[0] * (1.0 - pk)
    return pmf


def _loo_pb_np(p):
    # row j: mass of sum_{l != j} A_l over s = 0..n-1
    n = p.shape[0]
    out = np.zeros((n, n))
    out[:, 0] = 1.0
    rows = np.arange(n)
    for l in range(n):
        idx = rows[rows != l]
        block = out[idx]
        nxt = block * (1.0 - p[l])
        nxt[:, 1:] += block[:, :-1] * p[l]
        out[idx] = nxt
    return out


def _loo_pb_loops(p):
    n = p.shape[0]
    out = np.zeros((n, n))
    for j in range(n):
        out[j, 0] = 1.0
        k = 0
        for l in range(n):
            if l == j:
                continue
            pl = p[l]
            for s in range(k + 1, 0, -1):
                out[j, s] = out[j, s] * (1.0 - pl) + out[j, s - 1] * pl
            out[j, 0] = out[j, 0] * (1.0 - pl)
            k += 1
    return out


pb_pmf_np = _pb_pmf_np
pb_pmf_nb = njit(_pb_pmf_loops)
loo_pb_np = _loo_pb_np
loo_pb_nb = njit(_loo_pb_loops)


# --------------------------------------------------------------------------
# Bernstein-form surfaces on a grid


def _bernstein_grid_np(weights, deg, grid):
    """``out[i, g] = sum_k weights[i, k] * grid[g]**k * (1 - grid[g])**(deg[i] - k)``."""
    n_rows = weights.shape[0]
    out = np.zeros((n_rows, grid.shape[0]))
    one_minus = 1.0 - grid
    for d in np.unique(deg):
        rows = np.nonzero(deg == d)[0]
        k = np.arange(d + 1)
        basis = grid[:, None] ** k[None, :] * one_minus[:, None] ** (d - k)[None, :]
        out[rows] = weights[rows, : d + 1] @ basis.T
    return out


def _bernstein_grid_loops(weights, deg, grid):
    n_rows = weights.shape[0]
    n_grid = grid.shape[0]
    top = 0
    for i in range(n_rows):
        top = max(top, deg[i])
    # power tables built once by repeated multiplication
    xp = np.ones((n_grid, top + 1))
    yp = np.ones((n_grid, top + 1))
    for g in range(n_grid):
        for k in range(1, top + 1):
            xp[g, k] = xp[g, k - 1] * grid[g]
            yp[g, k] = yp[g, k - 1] * (1.0 - grid[g])
    out = np.zeros((n_rows, n_grid))
    for i in range(n_rows):
        d = deg[i]
        for g in range(n_grid):
            acc = 0.0
            for k in range(d + 1):
                acc += weights[i, k] * xp[g, k] * yp[g, d - k]
            out[i, g] = acc
    return out


bernstein_grid_np = _bernstein_grid_np
bernstein_grid_nb = njit(_bernstein_grid_loops)


# --------------------------------------------------------------------------
# Polynomial evaluation (one t per row)


@jitable
def _horner(coef, t):
    n_rows, width = coef.shape
    val = np.zeros(n_rows)
    der = np.zeros(n_rows)
    for q in range(width - 1, -1, -1):
        der = der * t + val
        val = val * t + coef[:, q]
    return val, der


def _kahan_poly(coef, t):
    # compensated sum of c_q t^q; the alternating binomial coefficients cancel
    n_rows, width = coef.shape
    total = np.zeros(n_rows)
    comp = np.zeros(n_rows)
    tq = np.ones(n_rows)
    for q in range(width):
        y = coef[:, q] * tq - comp
        s = total + y
        comp = (s - total) - y
        total = s
        tq = tq * t
    return total


horner_np = _horner
horner_nb = njit(_horner)
kahan_poly_np = _kahan_poly
kahan_poly_nb = njit(_kahan_poly)


# --------------------------------------------------------------------------
# Convex split of the loss: L = L_plus - L_minus
#
# On [0, 1] each part is a polynomial with non-negative coefficients
# (pos / neg).  Left of 0 L_plus continues linearly with slope sig0 and
# L_minus adds the exponential tail; right of 1 both continue with slope
# sig1 and L_minus again carries the exponential term.


def _split_eval(f, pos, neg, sig0, sig1, delta):
    tc = np.minimum(np.maximum(f, 0.0), 1.0)
    pv, pd = _horner(pos, tc)
    nv, nd = _horner(neg, tc)
    below = f < 0.0
    above = f > 1.0
    at0 = f == 0.0
    at1 = f == 1.0
    ex0 = delta * np.exp(np.minimum(f, 0.0))
    ex1 = delta * np.exp(np.minimum(1.0 - f, 0.0))

    lp = np.where(below, pos[:, 0] + sig0 * f, np.where(above, pv + sig1 * (f - 1.0), pv))
    lm = np.where(
        below,
        neg[:, 0] + sig0 * f - delta + ex0,
        np.where(above, nv + sig1 * (f - 1.0) - delta + ex1, nv),
    )
    gp = np.where(below, sig0, np.where(above, sig1, pd))
    gp = np.where(at0, 0.5 * (sig0 + pd), np.where(at1, 0.5 * (pd + sig1), gp))
    gm = np.where(below, sig0 + ex0, np.where(above, sig1 - ex1, nd))
    gm = np.where(at0, 0.5 * (sig0 + delta + nd), np.where(at1, 0.5 * (nd + sig1 - delta), gm))
    return lp, gp, lm, gm


split_eval_np = _split_eval
split_eval_nb = njit(_split_eval)


# --------------------------------------------------------------------------
# Convex DC subproblem
#
#   min_{eta, b} mean_i { L_plus_i(f_i) - g_i f_i } + lam/2 eta' K eta,
#   f = K eta + b.
#
# Monotone FISTA in the kernel metric: the eta-direction w/N + lam*eta is the
# RKHS gradient, so one matvec per iteration suffices (K eta is carried along
# by linearity). The step 1/Lip is found by backtracking. Returns the final
# iterate, objective, iteration count and a status code:
#   0 converged (gradient norm below tol), 1 iteration cap, 2 no progress
#   possible (backtracking exhausted).


@jitable
def _lplus(f, pos, sig0, sig1):
    tc = np.minimum(np.maximum(f, 0.0), 1.0)
    pv, pd = _horner(pos, tc)
    below = f < 0.0
    above = f > 1.0
    val = np.where(below, pos[:, 0] + sig0 * f, np.where(above, pv + sig1 * (f - 1.0), pv))
    sg = np.where(below, sig0, np.where(above, sig1, pd))
    sg = np.where(f == 0.0, 0.5 * (sig0 + pd), np.where(f == 1.0, 0.5 * (pd + sig1), sg))
    return val, sg


def _solve_subproblem(K, eta, b, g, lam, pos, sig0, sig1, max_iter, tol):
    n = K.shape[0]
    x_eta = eta.copy()
    x_b = b
    x_k = K @ x_eta
    val, sg = _lplus(x_k + x_b, pos, sig0, sig1)
    x_obj = np.mean(val - g * (x_k + x_b)) + 0.5 * lam * np.dot(x_eta, x_k)
    y_eta = x_eta.copy()
    y_b = x_b
    y_k = x_k.copy()
    y_obj = x_obj
    y_sg = sg
    tk = 1.0
    lip = 1.0
    status = 1
    it = 0
    while it < max_iter:
        w = y_sg - g
        d_eta = w / n + lam * y_eta
        d_b = np.mean(w)
        kd = K @ d_eta
        gnorm2 = np.dot(d_eta, kd) + d_b * d_b
        if gnorm2 < 0.0:
            gnorm2 = d_b * d_b
        if math.sqrt(gnorm2) < tol:
            if y_obj <= x_obj:
                x_eta = y_eta
                x_b = y_b
                x_k = y_k
                x_obj = y_obj
            status = 0
            break
        ok = False
        while lip < 1e16:
            z_eta = y_eta - d_eta / lip
            z_b = y_b - d_b / lip
            z_k = y_k - kd / lip
            zval, zsg = _lplus(z_k + z_b, pos, sig0, sig1)
            z_obj = np.mean(zval - g * (z_k + z_b)) + 0.5 * lam * np.dot(z_eta, z_k)
            if z_obj <= y_obj - 0.5 * gnorm2 / lip + 1e-15 * abs(y_obj):
                ok = True
                break
            lip *= 2.0
        it += 1
        if not ok:
            status = 2
            break
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        if z_obj <= x_obj:
            # accept z, momentum step from it
            mom = (tk - 1.0) / t_next
            n_eta = z_eta + mom * (z_eta - x_eta)
            n_b = z_b + mom * (z_b - x_b)
            n_k = z_k + mom * (z_k - x_k)
            x_eta = z_eta
            x_b = z_b
            x_k = z_k
            x_obj = z_obj
            tk = t_next
        else:
            # monotone safeguard: restart momentum from the incumbent
            n_eta = x_eta.copy()
            n_b = x_b
            n_k = x_k.copy()
            tk = 1.0
        y_eta = n_eta
        y_b = n_b
        y_k = n_k
        yval, y_sg = _lplus(y_k + y_b, pos, sig0, sig1)
        y_obj = np.mean(yval - g * (y_k + y_b)) + 0.5 * lam * np.dot(y_eta, y_k)
        lip *= 0.9
    return x_eta, x_b, x_obj, it, status


solve_subproblem_np = _solve_subproblem
solve_subproblem_nb = njit(_solve_subproblem)


# --------------------------------------------------------------------------
# Nadaraya-Watson (local-constant) regression with a Gaussian kernel


def _nw_predict_np(train, y, query, h, chunk=2048):
    out = np.empty(query.shape[0])
    tsq = (train**2).sum(axis=1)
    fallback = y.mean()
    for lo in range(0, query.shape[0], chunk):
        q = query[lo : lo + chunk]
        d2 = (q**2).sum(axis=1)[:, None] + tsq[None, :] - 2.0 * q @ train.T
        logw = -0.5 * np.maximum(d2, 0.0) / (h * h)
        # shift by the row max so the nearest point keeps weight 1
        w = np.exp(logw - logw.max(axis=1, keepdims=True))
        num = w @ y
        den = w.sum(axis=1)
        out[lo : lo + chunk] = np.where(den > 0, num / np.where(den > 0, den, 1.0), fallback)
    return out


def _nw_predict_loops(train, y, query, h):
    m, d = train.shape
    out = np.empty(query.shape[0])
    d2 = np.empty(m)
    for i in range(query.shape[0]):
        best = np.inf
        for r in range(m):
            acc = 0.0
            for k in range(d):
                diff = query[i, k] - train[r, k]
                acc += diff * diff
            d2[r] = acc
            if acc < best:
                best = acc
        num = 0.0
        den = 0.0
        for r in range(m):
            w = math.exp(-0.5 * (d2[r] - best) / (h * h))
            num += w * y[r]
            den += w
        out[i] = num / den
    return out


def _nw_loo_np(train, y, h):
    # leave-one-out fitted values, used for bandwidth selection
    d2 = (train**2).sum(axis=1)[:, None] + (train**2).sum(axis=1)[None, :] - 2.0 * train @ train.T
    logw = -0.5 * np.maximum(d2, 0.0) / (h * h)
    np.fill_diagonal(logw, -np.inf)
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    return (w @ y) / w.sum(axis=1)


def _nw_loo_loops(train, y, h):
    m, d = train.shape
    out = np.empty(m)
    d2 = np.empty(m)
    for i in range(m):
        best = np.inf
        for r in range(m):
            acc = 0.0
            for k in range(d):
                diff = train[i, k] - train[r, k]
                acc += diff * diff
            d2[r] = acc
            if r != i and acc < best:
                best = acc
        num = 0.0
        den = 0.0
        for r in range(m):
            if r == i:
                continue
            w = math.exp(-0.5 * (d2[r] - best) / (h * h))
            num += w * y[r]
            den += w
        out[i] = num / den
    return out


nw_predict_np = _nw_predict_np
nw_predict_nb = njit(_nw_predict_loops)
nw_loo_np = _nw_loo_np
nw_loo_nb = njit(_nw_loo_loops)


if USE_NUMBA:
    nw_predict = nw_predict_nb
    nw_loo = nw_loo_nb
else:
    nw_predict = nw_predict_np
    nw_loo = nw_loo_np


if USE_NUMBA:
    pb_pmf = pb_pmf_nb
    loo_pb = loo_pb_nb
    bernstein_grid = bernstein_grid_nb
    horner = horner_nb
    kahan_poly = kahan_poly_nb
    split_eval = split_eval_nb
    solve_subproblem = solve_subproblem_nb
else:
    pb_pmf = pb_pmf_np
    loo_pb = loo_pb_np
    bernstein_grid = bernstein_grid_np
    horner = horner_np
    kahan_poly = kahan_poly_np
    split_eval = split_eval_np
    solve_subproblem = solve_subproblem_np
