"""Dense non-negative least squares with optimality certificates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_TOL = 1e-9


class SolverError(ValueError):
    pass


@dataclass(frozen=True)
class NnlsSolution:
    coefficients: np.ndarray
    residual_norm: float
    kkt_gap: float
    certified: bool
    iterations: int


def kkt_gap(B: np.ndarray, y: np.ndarray, c: np.ndarray, lam: float = 0.0, squared: bool = False) -> float:
    """Largest violation of the first-order conditions at c.

    The gradient is B'(Bc - y) for the NNLS convention, or 2B'(Bc - y) + lam
    when `squared` (penalized objective ||y - Bc||^2 + lam * sum(c)).
    """
    g = B.T @ (B @ c - y)
    if squared:
        g = 2.0 * g + lam
    viol = np.maximum(-g, 0.0)
    viol = np.where(c > 0, np.abs(g), viol)
    return float(viol.max(initial=0.0))


def _check(B, y):
    B = np.asarray(B, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if B.ndim != 2 or B.shape[0] != y.shape[0] or min(B.shape) < 1:
        raise SolverError(f"incompatible shapes B{B.shape}, y{y.shape}")
    if not (np.all(np.isfinite(B)) and np.all(np.isfinite(y))):
        raise SolverError("non-finite input")
    return B, y


def nnls(B, y, tol: float = DEFAULT_TOL) -> NnlsSolution:
    """min ||y - Bc|| subject to c >= 0 (Lawson-Hanson active set).

    tol is relative to ||y||. Zero columns keep a zero coefficient.
    """
    B, y = _check(B, y)
    Q, M = B.shape
    ynorm = float(np.linalg.norm(y))
    atol = tol * max(ynorm, np.finfo(float).tiny)
    x = np.zeros(M)
    passive = np.zeros(M, dtype=bool)
    skip = np.zeros(M, dtype=bool)
    live = np.linalg.norm(B, axis=0) > 0
    w = B.T @ y
    # entering threshold well below the certificate tolerance
    enter_tol = 1e-3 * atol
    it = 0
    certified = True
    while True:
        cand = ~passive & ~skip & live & (w > enter_tol)
        if not cand.any():
            break
        if it >= 3 * M:
            certified = False
            break
        it += 1
        j = int(np.flatnonzero(cand)[np.argmax(w[cand])])
        passive[j] = True
        while True:
            cols = np.flatnonzero(passive)
            z_p = np.linalg.lstsq(B[:, cols], y, rcond=None)[0]
            if np.all(z_p > 0):
                x[:] = 0.0
                x[cols] = z_p
                break
            z = np.zeros(M)
            z[cols] = z_p
            neg = cols[z_p <= 0]
            ratios = x[neg] / (x[neg] - z[neg])
            k = int(np.argmin(ratios))
            alpha = ratios[k]
            x[cols] += alpha * (z[cols] - x[cols])
            x[neg[k]] = 0.0
            drop = passive & (x <= 0)
            x[drop] = 0.0
            passive &= ~drop
            if not passive[j]:
                # entering column bounced straight out (numerical degeneracy)
                skip[j] = True
                break
        w = B.T @ (y - B @ x)
    gap = kkt_gap(B, y, x)
    return NnlsSolution(x, float(np.linalg.norm(y - B @ x)), gap, certified and gap <= atol, it)


def _gram_active_set(G, f, M, enter_tol):
    # min x'Gx - 2f'x over x >= 0, Lawson-Hanson on the normal equations
    x = np.zeros(M)
    passive = np.zeros(M, dtype=bool)
    skip = np.zeros(M, dtype=bool)
    w = f.copy()
    it = 0
    while True:
        cand = ~passive & ~skip & (w > enter_tol)
        if not cand.any():
            return x, it, True
        if it >= 3 * M:
            return x, it, False
        it += 1
        j = int(np.flatnonzero(cand)[np.argmax(w[cand])])
        passive[j] = True
        while True:
            cols = np.flatnonzero(passive)
            Gp, fp = G[np.ix_(cols, cols)], f[cols]
            z_p = np.linalg.lstsq(Gp, fp, rcond=None)[0]
            r = Gp @ z_p - fp
            if np.linalg.norm(r) > 1e-10 * max(np.linalg.norm(fp), np.finfo(float).tiny):
                # f is outside range(G) on this support (singular block with a lam shift):
                # the reduced problem is unbounded along d = -r, so walk to the nearest bound
                d = -r
                neg = d < 0
                if not neg.any():
                    return x, it, False
                ratios = x[cols][neg] / -d[neg]
                k = int(np.argmin(ratios))
                x[cols] = np.maximum(x[cols] + ratios[k] * d, 0.0)
                x[cols[neg][k]] = 0.0
                drop = passive & (x <= 0)
                x[drop] = 0.0
                passive &= ~drop
                if not passive[j]:
                    skip[j] = True
                    break
                continue
            if np.all(z_p > 0):
                x[:] = 0.0
                x[cols] = z_p
                break
            z = np.zeros(M)
            z[cols] = z_p
            neg = cols[z_p <= 0]
            ratios = x[neg] / (x[neg] - z[neg])
            k = int(np.argmin(ratios))
            x[cols] += ratios[k] * (z[cols] - x[cols])
            x[neg[k]] = 0.0
            drop = passive & (x <= 0)
            x[drop] = 0.0
            passive &= ~drop
            if not passive[j]:
                skip[j] = True
                break
        w = f - G @ x


def nn_lasso(B, y, lam: float, tol: float = DEFAULT_TOL) -> NnlsSolution:
    """min ||y - Bc||^2 + lam * ||c||_1 subject to c >= 0.

    On the non-negative orthant the penalty is linear, so this is NNLS in Gram
    form with the linear term shifted by lam / 2.
    """
    B, y = _check(B, y)
    if not (lam >= 0 and math.isfinite(lam)):
        raise SolverError(f"lambda must be finite and >= 0, got {lam}")
    Q, M = B.shape
    ynorm = float(np.linalg.norm(y))
    atol = tol * max(ynorm, np.finfo(float).tiny)
    G = B.T @ B
    f = B.T @ y - 0.5 * lam
    x, it, converged = _gram_active_set(G, f, M, 1e-3 * atol)
    gap = kkt_gap(B, y, x, lam, squared=True)
    sup = np.flatnonzero(x > 0)
    if sup.size and sup.size <= Q:
        # re-solve the support through a QR of B instead of the squared Gram system
        q, r = np.linalg.qr(B[:, sup])
        if np.all(np.abs(np.diag(r)) > 1e-12 * np.abs(r).max()):
            ls = np.linalg.solve(r, q.T @ y)
            shift = np.linalg.solve(r, np.linalg.solve(r.T, np.ones(sup.size)))
            refined = np.zeros(M)
            refined[sup] = ls - 0.5 * lam * shift
            if np.all(refined[sup] > 0):
                g2 = kkt_gap(B, y, refined, lam, squared=True)
                if g2 < gap:
                    x, gap = refined, g2
    return NnlsSolution(x, float(np.linalg.norm(y - B @ x)), gap, converged and gap <= atol, it)


def lasso_objective(B, y, c, lam: float) -> float:
    r = np.asarray(y) - np.asarray(B) @ c
    return float(r @ r + lam * np.sum(c))
