"""Compiled inner loops of the node-wise registration optimizer.

All positions here are in pixel-index units: pixel ``(q, p)`` sits at
``(X, Y) = (p, q)``; morphing node ``(k, j)`` sits at ``(gx[j], gy[k])``.
``DX, DY`` hold node displacements in the same units.
"""

import numpy as np
from numba import njit

EDGE_TOL = 1e-9
GOLDEN = 0.5 * (np.sqrt(5.0) - 1.0)


@njit(cache=True, nogil=True)
def sample(u, bv, X, Y):
    ny, nx = u.shape
    if X < -EDGE_TOL or Y < -EDGE_TOL or X > nx - 1 + EDGE_TOL or Y > ny - 1 + EDGE_TOL:
        return bv
    if X < 0.0:
        X = 0.0
    elif X > nx - 1.0:
        X = nx - 1.0
    if Y < 0.0:
        Y = 0.0
    elif Y > ny - 1.0:
        Y = ny - 1.0
    i = int(X)
    if i > nx - 2:
        i = nx - 2
    k = int(Y)
    if k > ny - 2:
        k = ny - 2
    fx = X - i
    fy = Y - k
    return ((1.0 - fy) * ((1.0 - fx) * u[k, i] + fx * u[k, i + 1])
            + fy * ((1.0 - fx) * u[k + 1, i] + fx * u[k + 1, i + 1]))


@njit(cache=True, nogil=True)
def _node(D, r, c, ck, cj, cval):
    if r == ck and c == cj:
        return cval
    return D[r, c]


@njit(cache=True, nogil=True)
def residual_cells(DX, DY, ck, cj, cdx, cdy, r0, r1, c0, c1,
                   sx, sy, cs, ce, rs, re, u, ubv, v):
    """Sum of ``|v - u o (I+T)|`` over pixels of cells ``[r0,r1) x [c0,c1)``.

    Node ``(ck, cj)`` is replaced by displacement ``(cdx, cdy)``.
    """
    total = 0.0
    for r in range(r0, r1):
        for c in range(c0, c1):
            a00x = _node(DX, r, c, ck, cj, cdx)
            a01x = _node(DX, r, c + 1, ck, cj, cdx)
            a10x = _node(DX, r + 1, c, ck, cj, cdx)
            a11x = _node(DX, r + 1, c + 1, ck, cj, cdx)
            a00y = _node(DY, r, c, ck, cj, cdy)
            a01y = _node(DY, r, c + 1, ck, cj, cdy)
            a10y = _node(DY, r + 1, c, ck, cj, cdy)
            a11y = _node(DY, r + 1, c + 1, ck, cj, cdy)
            for q in range(rs[r], re[r]):
                t = sy[q]
                for p in range(cs[c], ce[c]):
                    s = sx[p]
                    dx = (1.0 - t) * ((1.0 - s) * a00x + s * a01x) + t * ((1.0 - s) * a10x + s * a11x)
                    dy = (1.0 - t) * ((1.0 - s) * a00y + s * a01y) + t * ((1.0 - s) * a10y + s * a11y)
                    total += abs(v[q, p] - sample(u, ubv, p + dx, q + dy))
    return total


@njit(cache=True, nogil=True)
def residual_stats(DX, DY, sx, sy, cs, ce, rs, re, u, ubv, v):
    """``(sum, max)`` of ``|v - u o (I+T)|`` over all pixels."""
    n = DX.shape[0] - 1
    total = 0.0
    big = 0.0
    for r in range(n):
        for c in range(n):
            a00x = DX[r, c]
            a01x = DX[r, c + 1]
            a10x = DX[r + 1, c]
            a11x = DX[r + 1, c + 1]
            a00y = DY[r, c]
            a01y = DY[r, c + 1]
            a10y = DY[r + 1, c]
            a11y = DY[r + 1, c + 1]
            for q in range(rs[r], re[r]):
                t = sy[q]
                for p in range(cs[c], ce[c]):
                    s = sx[p]
                    dx = (1.0 - t) * ((1.0 - s) * a00x + s * a01x) + t * ((1.0 - s) * a10x + s * a11x)
                    dy = (1.0 - t) * ((1.0 - s) * a00y + s * a01y) + t * ((1.0 - s) * a10y + s * a11y)
                    e = abs(v[q, p] - sample(u, ubv, p + dx, q + dy))
                    total += e
                    if e > big:
                        big = e
    return total, big


@njit(cache=True, nogil=True)
def grad_integrand(DX, DY, a, b, ck, cj, cdx, cdy, Hx, Hy, rxy, ryx):
    """``|dTx/dx| + |dTx/dy| + |dTy/dx| + |dTy/dy|`` at node ``(a, b)``.

    Forward differences, backward on the last row/column. ``rxy`` and ``ryx``
    convert the mixed derivatives from pixel units to the objective's units.
    """
    m = DX.shape[0]
    if b < m - 1:
        b0, b1 = b, b + 1
    else:
        b0, b1 = b - 1, b
    if a < m - 1:
        a0, a1 = a, a + 1
    else:
        a0, a1 = a - 1, a
    txx = (_node(DX, a, b1, ck, cj, cdx) - _node(DX, a, b0, ck, cj, cdx)) / Hx
    tyx = (_node(DY, a, b1, ck, cj, cdy) - _node(DY, a, b0, ck, cj, cdy)) / Hx
    txy = (_node(DX, a1, b, ck, cj, cdx) - _node(DX, a0, b, ck, cj, cdx)) / Hy
    tyy = (_node(DY, a1, b, ck, cj, cdy) - _node(DY, a0, b, ck, cj, cdy)) / Hy
    return abs(txx) + rxy * abs(txy) + ryx * abs(tyx) + abs(tyy)


@njit(cache=True, nogil=True)
def grad_window(DX, DY, k, j, cdx, cdy, Hx, Hy, rxy, ryx):
    m = DX.shape[0]
    total = 0.0
    for a in range(max(k - 1, 0), min(k + 2, m)):
        for b in range(max(j - 1, 0), min(j + 2, m)):
            total += grad_integrand(DX, DY, a, b, k, j, cdx, cdy, Hx, Hy, rxy, ryx)
    return total


@njit(cache=True, nogil=True)
def grad_total(DX, DY, Hx, Hy, rxy, ryx):
    m = DX.shape[0]
    total = 0.0
    for a in range(m):
        for b in range(m):
            total += grad_integrand(DX, DY, a, b, -1, -1, 0.0, 0.0, Hx, Hy, rxy, ryx)
    return total


@njit(cache=True, nogil=True)
def local_objective(ax, ay, k, j, DX, DY, gx, gy, sx, sy, cs, ce, rs, re,
                    u, ubv, v, weights):
    """Terms of the objective that depend on node ``(k, j)`` placed at ``(ax, ay)``.

    ``weights = (w_res, w_warp, w_grad, C1, C2, ux, uy, Hx, Hy, rxy, ryx)``.
    """
    m = DX.shape[0]
    cdx = ax - gx[j]
    cdy = ay - gy[k]
    r0 = max(k - 1, 0)
    r1 = min(k + 1, m - 1)
    c0 = max(j - 1, 0)
    c1 = min(j + 1, m - 1)
    res = residual_cells(DX, DY, k, j, cdx, cdy, r0, r1, c0, c1,
                         sx, sy, cs, ce, rs, re, u, ubv, v)
    wn = weights[5] * abs(cdx) + weights[6] * abs(cdy)
    gr = grad_window(DX, DY, k, j, cdx, cdy, weights[7], weights[8], weights[9], weights[10])
    return weights[0] * res + weights[3] * weights[1] * wn + weights[4] * weights[2] * gr


@njit(cache=True, nogil=True)
def _cross_at(px, py, qx, qy, rx, ry):
    # cross(q - p, r - q)
    return (qx - px) * (ry - qy) - (qy - py) * (rx - qx)


@njit(cache=True, nogil=True)
def node_constraints(k, j, DX, DY, gx, gy, margin_frac):
    """Half-planes ``a*x + b*y + c >= 0`` keeping adjacent quadrants convex.

    Each row is ``(a, b, c)`` with ``(a, b)`` a unit normal and ``c`` already
    reduced by the safety margin, so the row value is a signed distance.
    """
    m = DX.shape[0]
    out = np.empty((12, 3))
    n = 0
    # local diameter from the mapped 8-neighbourhood
    diam = 0.0
    for a in range(max(k - 1, 0), min(k + 2, m)):
        for b in range(max(j - 1, 0), min(j + 2, m)):
            for a2 in range(max(k - 1, 0), min(k + 2, m)):
                for b2 in range(max(j - 1, 0), min(j + 2, m)):
                    dx = (gx[b] + DX[a, b]) - (gx[b2] + DX[a2, b2])
                    dy = (gy[a] + DY[a, b]) - (gy[a2] + DY[a2, b2])
                    d = np.sqrt(dx * dx + dy * dy)
                    if d > diam:
                        diam = d
    margin = margin_frac * diam
    vr = np.empty(4, dtype=np.int64)
    vc = np.empty(4, dtype=np.int64)
    vx = np.empty(4)
    vy = np.empty(4)
    for r in range(k - 1, k + 1):
        for c in range(j - 1, j + 1):
            if r < 0 or c < 0 or r > m - 2 or c > m - 2:
                continue
            vr[0], vc[0] = r, c
            vr[1], vc[1] = r, c + 1
            vr[2], vc[2] = r + 1, c + 1
            vr[3], vc[3] = r + 1, c
            ia = -1
            for i in range(4):
                vx[i] = gx[vc[i]] + DX[vr[i], vc[i]]
                vy[i] = gy[vr[i]] + DY[vr[i], vc[i]]
                if vr[i] == k and vc[i] == j:
                    ia = i
            for i in range(4):
                ip = (i + 3) % 4
                inx = (i + 1) % 4
                if ia != i and ia != ip and ia != inx:
                    continue
                # evaluate the affine function of A at three points
                vals = np.empty(3)
                for e in range(3):
                    axp = 0.0 if e != 1 else 1.0
                    ayp = 0.0 if e != 2 else 1.0
                    px, py = vx[ip], vy[ip]
                    qx, qy = vx[i], vy[i]
                    rx, ry = vx[inx], vy[inx]
                    if ip == ia:
                        px, py = axp, ayp
                    if i == ia:
                        qx, qy = axp, ayp
                    if inx == ia:
                        rx, ry = axp, ayp
                    vals[e] = _cross_at(px, py, qx, qy, rx, ry)
                ca = vals[1] - vals[0]
                cb = vals[2] - vals[0]
                nrm = np.sqrt(ca * ca + cb * cb)
                if nrm == 0.0:
                    continue
                out[n, 0] = ca / nrm
                out[n, 1] = cb / nrm
                out[n, 2] = vals[0] / nrm - margin
                n += 1
    return out[:n]


@njit(cache=True, nogil=True)
def feasible(ax, ay, cons, boundary, xmax, ymax):
    for i in range(cons.shape[0]):
        if cons[i, 0] * ax + cons[i, 1] * ay + cons[i, 2] < 0.0:
            return False
    if boundary:
        if ax < 0.0 or ay < 0.0 or ax > xmax or ay > ymax:
            return False
    return True


@njit(cache=True, nogil=True)
def line_interval(dim, fixed, cons, boundary, xmax, ymax):
    """Feasible interval of coordinate ``dim`` with the other one held at ``fixed``."""
    lo = -1e300
    hi = 1e300
    for i in range(cons.shape[0]):
        a = cons[i, dim]
        rest = cons[i, 1 - dim] * fixed + cons[i, 2]
        if a > 0.0:
            lo = max(lo, -rest / a)
        elif a < 0.0:
            hi = min(hi, -rest / a)
        elif rest < 0.0:
            return 1.0, -1.0
    if boundary:
        lim = xmax if dim == 0 else ymax
        lo = max(lo, 0.0)
        hi = min(hi, lim)
        if fixed < 0.0 or fixed > (ymax if dim == 0 else xmax):
            return 1.0, -1.0
    lim = xmax if dim == 0 else ymax
    return max(lo, -lim), min(hi, 2.0 * lim)


@njit(cache=True, nogil=True)
def optimize_node(k, j, DX, DY, gx, gy, sx, sy, cs, ce, rs, re, u, ubv, v,
                  weights, n_search, cd_iters, gss_maxit, gss_tol, margin_frac, accept_eps):
    """Move node ``(k, j)`` to a better feasible position; returns ``(moved, f0, f)``."""
    m = DX.shape[0]
    ny, nx = u.shape
    xmax = nx - 1.0
    ymax = ny - 1.0
    boundary = k == 0 or j == 0 or k == m - 1 or j == m - 1
    ax0 = gx[j] + DX[k, j]
    ay0 = gy[k] + DY[k, j]
    f0 = local_objective(ax0, ay0, k, j, DX, DY, gx, gy, sx, sy, cs, ce, rs, re, u, ubv, v, weights)
    cons = node_constraints(k, j, DX, DY, gx, gy, margin_frac)

    bx, by, fb = ax0, ay0, f0

    # search points: triangles between A0 and consecutive mapped axis neighbours
    nbr_r = np.array([k, k + 1, k, k - 1])
    nbr_c = np.array([j + 1, j, j - 1, j])
    exists = np.empty(4, dtype=np.bool_)
    nxs = np.empty(4)
    nys = np.empty(4)
    for i in range(4):
        exists[i] = 0 <= nbr_r[i] < m and 0 <= nbr_c[i] < m
        if exists[i]:
            nxs[i] = gx[nbr_c[i]] + DX[nbr_r[i], nbr_c[i]]
            nys[i] = gy[nbr_r[i]] + DY[nbr_r[i], nbr_c[i]]
    for i in range(4):
        i2 = (i + 1) % 4
        if not (exists[i] and exists[i2]):
            continue
        i3 = (i + 2) % 4
        last_shared = exists[i3]
        for lev in range(1, n_search + 1):
            frac = lev / (n_search + 1.0)
            qmax = lev - 1 if last_shared else lev
            for q in range(0, qmax + 1):
                w = q / lev
                cx = ax0 + frac * ((1.0 - w) * nxs[i] + w * nxs[i2] - ax0)
                cy = ay0 + frac * ((1.0 - w) * nys[i] + w * nys[i2] - ay0)
                if not feasible(cx, cy, cons, boundary, xmax, ymax):
                    continue
                f = local_objective(cx, cy, k, j, DX, DY, gx, gy, sx, sy, cs, ce, rs, re,
                                    u, ubv, v, weights)
                if f < fb:
                    bx, by, fb = cx, cy, f

    # coordinate descent with golden-section line searches
    for _ in range(cd_iters):
        for dim in range(2):
            fixed = by if dim == 0 else bx
            lo, hi = line_interval(dim, fixed, cons, boundary, xmax, ymax)
            if not hi - lo > gss_tol:
                continue
            a, b = lo, hi
            c = b - GOLDEN * (b - a)
            d = a + GOLDEN * (b - a)
            if dim == 0:
                fc = local_objective(c, by, k, j, DX, DY, gx, gy, sx, sy, cs, ce, rs, re, u, ubv, v, weights)
                fd = local_objective(d, by, k, j, DX, DY, gx, gy, sx, sy, cs, ce, rs, re, u, ubv, v, weights)
            else:
                fc = local_objective(bx, c, k, j, DX, DY, gx, gy, sx, sy, cs, ce, rs, re, u, ubv, v, weights)
                fd = local_objective(bx, d, k, j, DX, DY, gx, gy, sx, sy, cs, ce, rs, re, u, ubv, v, weights)
            best_t, best_f = c, fc
            if fd < best_f:
                best_t, best_f = d, fd
            for _it in range(gss_maxit - 2):
                if b - a <= gss_tol:
                    break
                if fc < fd:
                    b, d, fd = d, c, fc
                    c = b - GOLDEN * (b - a)
                    if dim == 0:
                        fc = local_objective(c, by, k, j, DX, DY, gx, gy, sx, sy, cs, ce, rs, re, u, ubv, v, weights)
                    else:
                        fc = local_objective(bx, c, k, j, DX, DY, gx, gy, sx, sy, cs, ce, rs, re, u, ubv, v, weights)
                    if fc < best_f:
                        best_t, best_f = c, fc
                else:
                    a, c, fc = c, d, fd
                    d = a + GOLDEN * (b - a)
                    if dim == 0:
                        fd = local_objective(d, by, k, j, DX, DY, gx, gy, sx, sy, cs, ce, rs, re, u, ubv, v, weights)
                    else:
                        fd = local_objective(bx, d, k, j, DX, DY, gx, gy, sx, sy, cs, ce, rs, re, u, ubv, v, weights)
                    if fd < best_f:
                        best_t, best_f = d, fd
            if best_f < fb:
                if dim == 0:
                    bx = best_t
                else:
                    by = best_t
                fb = best_f

    if fb < f0 - accept_eps:
        DX[k, j] = bx - gx[j]
        DY[k, j] = by - gy[k]
        return True, f0, fb
    return False, f0, f0
