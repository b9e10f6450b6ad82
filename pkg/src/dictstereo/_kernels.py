"""Compiled scalar kernels shared by the BRDF, rendering and search code.

Everything here is written as plain scalar loops so that a value computed for
one (light, view, normal) configuration is bit-identical no matter which
batch it was computed in, and no matter how many threads run the batch.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

N_THETA_H = 90
N_THETA_D = 90
N_PHI_D = 180
TABLE_SIZE = N_THETA_H * N_THETA_D * N_PHI_D

HALF_PI = 0.5 * math.pi
# fractional grid offsets closer than this to a node are snapped onto it
SNAP = 1e-12


@njit(cache=True)
def _angle(ax, ay, az, bx, by, bz):
    cx = ay * bz - az * by
    cy = az * bx - ax * bz
    cz = ax * by - ay * bx
    return math.atan2(math.sqrt(cx * cx + cy * cy + cz * cz), ax * bx + ay * by + az * bz)


@njit(cache=True)
def half_angle(lx, ly, lz, vx, vy, vz, nx, ny, nz):
    """(theta_h, theta_d, phi_d) of a unit light/view/normal triple, phi_d in [0, pi)."""
    hx = lx + vx
    hy = ly + vy
    hz = lz + vz
    hn = math.sqrt(hx * hx + hy * hy + hz * hz)
    hx /= hn
    hy /= hn
    hz /= hn
    theta_h = _angle(hx, hy, hz, nx, ny, nz)
    theta_d = _angle(lx, ly, lz, hx, hy, hz)

    # azimuth reference: normal projected onto the plane orthogonal to h
    c = nx * hx + ny * hy + nz * hz
    ex = nx - c * hx
    ey = ny - c * hy
    ez = nz - c * hz
    en = math.sqrt(ex * ex + ey * ey + ez * ez)
    if en < 1e-12:
        # h parallel to n: project the global x axis instead (y if h is along x)
        ex = 1.0 - hx * hx
        ey = -hx * hy
        ez = -hx * hz
        en = math.sqrt(ex * ex + ey * ey + ez * ez)
        if en < 1e-6:
            ex = -hy * hx
            ey = 1.0 - hy * hy
            ez = -hy * hz
            en = math.sqrt(ex * ex + ey * ey + ez * ez)
    ex /= en
    ey /= en
    ez /= en
    fx = hy * ez - hz * ey
    fy = hz * ex - hx * ez
    fz = hx * ey - hy * ex
    phi = math.atan2(lx * fx + ly * fy + lz * fz, lx * ex + ly * ey + lz * ez)
    if phi < 0.0:
        phi += math.pi
    if phi >= math.pi:
        phi -= math.pi
    return theta_h, theta_d, phi


@njit(cache=True)
def _clamped_axis(u, n):
    if u <= 0.0:
        return 0, 0, 0.0
    if u >= n - 1:
        return n - 1, n - 1, 0.0
    i0 = int(math.floor(u))
    f = u - i0
    if f < SNAP:
        return i0, i0, 0.0
    if f > 1.0 - SNAP:
        return i0 + 1, i0 + 1, 0.0
    return i0, i0 + 1, f


@njit(cache=True)
def _wrapped_axis(u, n):
    fl = math.floor(u)
    f = u - fl
    i0 = int(fl) % n
    if f < SNAP:
        return i0, i0, 0.0
    if f > 1.0 - SNAP:
        i0 = (i0 + 1) % n
        return i0, i0, 0.0
    return i0, (i0 + 1) % n, f


@njit(cache=True)
def grid_coords(theta_h, theta_d, phi_d):
    """Continuous grid coordinates (square-root warp on theta_h, 1 degree elsewhere)."""
    th = theta_h if theta_h > 0.0 else 0.0
    uh = math.sqrt(th / HALF_PI) * N_THETA_H
    ud = theta_d / HALF_PI * N_THETA_D
    up = phi_d / math.pi * N_PHI_D
    return uh, ud, up


@njit(cache=True)
def corners(theta_h, theta_d, phi_d, idx, w):
    """Fill the 8 trilinear corner indices and weights (fixed order)."""
    uh, ud, up = grid_coords(theta_h, theta_d, phi_d)
    h0, h1, fh = _clamped_axis(uh, N_THETA_H)
    d0, d1, fd = _clamped_axis(ud, N_THETA_D)
    p0, p1, fp = _wrapped_axis(up, N_PHI_D)
    k = 0
    for a in range(2):
        ih = h0 if a == 0 else h1
        wh = 1.0 - fh if a == 0 else fh
        for b in range(2):
            jd = d0 if b == 0 else d1
            wd = 1.0 - fd if b == 0 else fd
            for c in range(2):
                kp = p0 if c == 0 else p1
                wp = 1.0 - fp if c == 0 else fp
                idx[k] = (ih * N_THETA_D + jd) * N_PHI_D + kp
                w[k] = wh * wd * wp
                k += 1


@njit(cache=True)
def lookup(table, theta_h, theta_d, phi_d):
    """Trilinear lookup in one flat channel table of length TABLE_SIZE."""
    idx = np.empty(8, dtype=np.int64)
    w = np.empty(8)
    corners(theta_h, theta_d, phi_d, idx, w)
    s = 0.0
    for k in range(8):
        if w[k] != 0.0:
            s += w[k] * table[idx[k]]
    return s


@njit(cache=True)
def _shade_row(tables, c, nx, ny, nz, lx, ly, lz, vx, vy, vz, idx, w, out):
    # out[m] = max(0, n.l) * s^T rho_m for every atom m of channel c
    M = tables.shape[2]
    for m in range(M):
        out[m] = 0.0
    cos_l = nx * lx + ny * ly + nz * lz
    if cos_l <= 0.0:
        return
    if nx * vx + ny * vy + nz * vz <= 0.0:
        return
    th, td, pd = half_angle(lx, ly, lz, vx, vy, vz, nx, ny, nz)
    corners(th, td, pd, idx, w)
    for m in range(M):
        s = 0.0
        for k in range(8):
            if w[k] != 0.0:
                s += w[k] * tables[c, idx[k], m]
        out[m] = s * cos_l


@njit(parallel=True, cache=True)
def render_matrices(normals, lights, intensities, view, tables):
    """B[c, n, q, m] for every candidate normal; tables has shape (C, T, M)."""
    C = tables.shape[0]
    M = tables.shape[2]
    N = normals.shape[0]
    Q = lights.shape[0]
    out = np.zeros((C, N, Q, M))
    vx, vy, vz = view[0], view[1], view[2]
    for n in prange(N):
        idx = np.empty(8, dtype=np.int64)
        w = np.empty(8)
        row = np.empty(M)
        nx, ny, nz = normals[n, 0], normals[n, 1], normals[n, 2]
        for c in range(C):
            for q in range(Q):
                _shade_row(tables, c, nx, ny, nz, lights[q, 0], lights[q, 1], lights[q, 2],
                           vx, vy, vz, idx, w, row)
                for m in range(M):
                    out[c, n, q, m] = row[m] * intensities[q]
    return out


@njit(parallel=True, cache=True)
def render_pixels(normals, coeffs, lights, intensities, view, tables):
    """Intensities I[p, c, q] = sum_m B[c, p, q, m] * coeffs[p, c, m]."""
    C = tables.shape[0]
    M = tables.shape[2]
    P = normals.shape[0]
    Q = lights.shape[0]
    out = np.zeros((P, C, Q))
    vx, vy, vz = view[0], view[1], view[2]
    for p in prange(P):
        idx = np.empty(8, dtype=np.int64)
        w = np.empty(8)
        row = np.empty(M)
        nx, ny, nz = normals[p, 0], normals[p, 1], normals[p, 2]
        for c in range(C):
            for q in range(Q):
                _shade_row(tables, c, nx, ny, nz, lights[q, 0], lights[q, 1], lights[q, 2],
                           vx, vy, vz, idx, w, row)
                s = 0.0
                for m in range(M):
                    s += (row[m] * intensities[q]) * coeffs[p, c, m]
                out[p, c, q] = s
    return out


@njit(parallel=True, cache=True)
def gram_matrices(B):
    C, N, Q, M = B.shape
    G = np.zeros((C, N, M, M))
    for n in prange(N):
        for c in range(C):
            for i in range(M):
                for j in range(i, M):
                    s = 0.0
                    for q in range(Q):
                        s += B[c, n, q, i] * B[c, n, q, j]
                    G[c, n, i, j] = s
                    G[c, n, j, i] = s
    return G


@njit(cache=True)
def _chol_solve(G, f, sub, k, L, out):
    # solve G[sub, sub] z = f[sub] by Cholesky; False if numerically singular
    dmax = 0.0
    for a in range(k):
        d = G[sub[a], sub[a]]
        if d > dmax:
            dmax = d
    if dmax <= 0.0:
        return False
    for a in range(k):
        for b in range(a + 1):
            s = G[sub[a], sub[b]]
            for t in range(b):
                s -= L[a, t] * L[b, t]
            if a == b:
                if s <= 1e-13 * dmax:
                    return False
                L[a, a] = math.sqrt(s)
            else:
                L[a, b] = s / L[b, b]
    for a in range(k):
        s = f[sub[a]]
        for t in range(a):
            s -= L[a, t] * out[t]
        out[a] = s / L[a, a]
    for a in range(k - 1, -1, -1):
        s = out[a]
        for t in range(a + 1, k):
            s -= L[t, a] * out[t]
        out[a] = s / L[a, a]
    return True


@njit(cache=True)
def gram_nnls(G, f, x, passive, excluded, sub, zsub, z, L, wbuf):
    """Lawson-Hanson active set on the normal equations: min x'Gx - 2f'x, x >= 0.

    Work buffers are supplied by the caller. Returns the outer iteration count,
    or -1 when the 3*M iteration cap was hit.
    """
    M = f.shape[0]
    fmax = 0.0
    for j in range(M):
        x[j] = 0.0
        passive[j] = False
        excluded[j] = False
        a = abs(f[j])
        if a > fmax:
            fmax = a
    tol = 1e-13 * fmax
    for j in range(M):
        wbuf[j] = f[j]
    it = 0
    while True:
        best = -1
        bw = tol
        for j in range(M):
            if not passive[j] and not excluded[j] and wbuf[j] > bw:
                bw = wbuf[j]
                best = j
        if best < 0:
            return it
        if it >= 3 * M:
            return -1
        it += 1
        passive[best] = True
        first = True
        while True:
            k = 0
            for j in range(M):
                if passive[j]:
                    sub[k] = j
                    k += 1
            if not _chol_solve(G, f, sub, k, L, zsub):
                passive[best] = False
                excluded[best] = True
                break
            positive = True
            for a in range(k):
                if zsub[a] <= 0.0:
                    positive = False
            if positive:
                for j in range(M):
                    x[j] = 0.0
                for a in range(k):
                    x[sub[a]] = zsub[a]
                break
            for j in range(M):
                z[j] = 0.0
            for a in range(k):
                z[sub[a]] = zsub[a]
            alpha = 2.0
            jmin = -1
            for a in range(k):
                j = sub[a]
                if zsub[a] <= 0.0:
                    r = x[j] / (x[j] - z[j])
                    if r < alpha:
                        alpha = r
                        jmin = j
            for j in range(M):
                if passive[j]:
                    x[j] += alpha * (z[j] - x[j])
            x[jmin] = 0.0
            for j in range(M):
                if passive[j] and x[j] <= 0.0:
                    x[j] = 0.0
                    passive[j] = False
            if first and not passive[best]:
                # the entering variable left immediately; do not cycle on it
                excluded[best] = True
            first = False
        for j in range(M):
            s = f[j]
            for t in range(M):
                s -= G[j, t] * x[t]
            wbuf[j] = s


@njit(cache=True)
def _candidate_residual(B, G, n, y, rowmask, full_rows, bufs, Gm, f, x):
    # squared NNLS residual summed over channels for candidate n
    C = B.shape[0]
    Q = B.shape[2]
    M = B.shape[3]
    passive, excluded, sub, zsub, z, L, wbuf = bufs
    total = 0.0
    for c in range(C):
        if full_rows:
            for i in range(M):
                for j in range(M):
                    Gm[i, j] = G[c, n, i, j]
        else:
            for i in range(M):
                for j in range(i, M):
                    s = 0.0
                    for q in range(Q):
                        if rowmask[q]:
                            s += B[c, n, q, i] * B[c, n, q, j]
                    Gm[i, j] = s
                    Gm[j, i] = s
        for m in range(M):
            s = 0.0
            for q in range(Q):
                if rowmask[q]:
                    s += B[c, n, q, m] * y[c, q]
            f[m] = s
        gram_nnls(Gm, f, x, passive, excluded, sub, zsub, z, L, wbuf)
        for q in range(Q):
            if rowmask[q]:
                r = y[c, q]
                for m in range(M):
                    r -= B[c, n, q, m] * x[m]
                total += r * r
    return total


@njit(cache=True)
def _buffers(M):
    return (np.zeros(M, dtype=np.bool_), np.zeros(M, dtype=np.bool_),
            np.zeros(M, dtype=np.int64), np.zeros(M), np.zeros(M), np.zeros((M, M)), np.zeros(M))


@njit(parallel=True, cache=True)
def scan_all(B, G, Y, rowmask, block):
    """Brute-force argmin over every candidate for every pixel.

    Y is (P, C, Q); rowmask is (P, Q). Candidates are visited in ascending
    index order per pixel so ties resolve to the lowest index.
    """
    N = B.shape[1]
    M = B.shape[3]
    P = Y.shape[0]
    best = np.full(P, np.inf)
    arg = np.full(P, -1, dtype=np.int64)
    full = np.empty(P, dtype=np.bool_)
    for p in range(P):
        full[p] = True
        for q in range(rowmask.shape[1]):
            if not rowmask[p, q]:
                full[p] = False
    for start in range(0, N, block):
        stop = min(N, start + block)
        for p in prange(P):
            bufs = _buffers(M)
            Gm = np.empty((M, M))
            f = np.empty(M)
            x = np.empty(M)
            bp = best[p]
            ap = arg[p]
            for n in range(start, stop):
                r = _candidate_residual(B, G, n, Y[p], rowmask[p], full[p], bufs, Gm, f, x)
                if r < bp:
                    bp = r
                    ap = n
            best[p] = bp
            arg[p] = ap
    return arg, best


@njit(parallel=True, cache=True)
def scan_lists(B, G, Y, rowmask, offsets, cands):
    """Per-pixel argmin over cands[offsets[p]:offsets[p+1]] (ascending indices)."""
    M = B.shape[3]
    P = Y.shape[0]
    best = np.full(P, np.inf)
    arg = np.full(P, -1, dtype=np.int64)
    for p in prange(P):
        full = True
        for q in range(rowmask.shape[1]):
            if not rowmask[p, q]:
                full = False
        bufs = _buffers(M)
        Gm = np.empty((M, M))
        f = np.empty(M)
        x = np.empty(M)
        for t in range(offsets[p], offsets[p + 1]):
            n = cands[t]
            r = _candidate_residual(B, G, n, Y[p], rowmask[p], full, bufs, Gm, f, x)
            if r < best[p]:
                best[p] = r
                arg[p] = n
    return arg, best


@njit(cache=True)
def residual_profile(B, G, y, rowmask):
    """Squared residual of every candidate for a single observation."""
    N = B.shape[1]
    M = B.shape[3]
    full = True
    for q in range(rowmask.shape[0]):
        if not rowmask[q]:
            full = False
    bufs = _buffers(M)
    Gm = np.empty((M, M))
    f = np.empty(M)
    x = np.empty(M)
    out = np.empty(N)
    for n in range(N):
        out[n] = _candidate_residual(B, G, n, y, rowmask, full, bufs, Gm, f, x)
    return out
