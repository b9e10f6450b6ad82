"""Depth from a normal field by least-squares gradient integration."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import spsolve

NZ_FLOOR = 0.05


@dataclass(frozen=True, eq=False)
class DepthMap:
    depth: np.ndarray  # (H, W), NaN outside the mask
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        if self.depth.shape != self.mask.shape:
            raise ValueError(f"depth {self.depth.shape} and mask {self.mask.shape} differ")
        if not np.all(np.isfinite(self.depth[self.mask])):
            raise ValueError("depth must be finite on the mask")


def integrate_normals(normals: np.ndarray, mask: np.ndarray, eps: float = NZ_FLOOR) -> DepthMap:
    """Poisson integration of p = -nx/nz, q = -ny/nz over an irregular mask.

    Columns run along +x and rows along -y (y points up in the camera
    frame), so z[r, c+1] - z[r, c] ~ p and z[r+1, c] - z[r, c] ~ -q, each
    using the mean gradient of the two pixels.
    Each 4-connected component is returned with zero mean.
    """
    normals = np.asarray(normals, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if normals.shape != mask.shape + (3,):
        raise ValueError(f"normals {normals.shape} do not match mask {mask.shape}")
    n = normals[mask]
    if n.shape[0] < 2:
        raise ValueError("degenerate mask: fewer than two pixels")
    if np.any(np.abs(np.linalg.norm(n, axis=1) - 1.0) > 1e-6):
        raise ValueError("normals must be unit length on the mask")
    if np.any(n[:, 2] <= eps):
        bad = np.argwhere(mask & (normals[..., 2] <= eps))[0]
        raise ValueError(f"normal z component below {eps} at pixel {tuple(int(v) for v in bad)}")

    H, W = mask.shape
    idx = np.full(mask.shape, -1, dtype=np.int64)
    idx[mask] = np.arange(n.shape[0])
    p = np.zeros(mask.shape)
    q = np.zeros(mask.shape)
    p[mask] = -n[:, 0] / n[:, 2]
    q[mask] = -n[:, 1] / n[:, 2]

    rows, cols, vals, rhs = [], [], [], []
    k = 0
    for a, b, g in ((idx[:, :-1], idx[:, 1:], 0.5 * (p[:, :-1] + p[:, 1:])),
                    (idx[:-1, :], idx[1:, :], -0.5 * (q[:-1, :] + q[1:, :]))):
        both = (a >= 0) & (b >= 0)
        m = int(both.sum())
        e = np.arange(k, k + m)
        rows += [e, e]
        cols += [a[both], b[both]]
        vals += [np.full(m, -1.0), np.ones(m)]
        rhs.append(g[both])
        k += m
    if k == 0:
        raise ValueError("degenerate mask: no neighbouring pixel pairs")
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(k, n.shape[0]))
    b = np.concatenate(rhs)

    labels, count = ndimage.label(mask)
    comp = labels[mask] - 1
    # pin the first pixel of every 4-connected component, then remove its mean
    first = np.unique(comp, return_index=True)[1]
    pin = sp.csr_matrix((np.ones(count), (first, first)), shape=(n.shape[0], n.shape[0]))
    z = spsolve((A.T @ A + pin).tocsc(), A.T @ b)
    z -= (np.bincount(comp, weights=z) / np.bincount(comp))[comp]
    depth = np.full((H, W), np.nan)
    depth[mask] = z
    return DepthMap(depth, mask)


def relative_depth_error(estimate: DepthMap, truth: DepthMap, mask: np.ndarray | None = None) -> float:
    """RMS difference after removing the best constant offset, over the truth's depth range."""
    if estimate.depth.shape != truth.depth.shape:
        raise ValueError("depth maps differ in shape")
    m = estimate.mask & truth.mask if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("no common pixels")
    d = estimate.depth[m] - truth.depth[m]
    d = d - d.mean()
    span = float(truth.depth[m].max() - truth.depth[m].min())
    if span == 0.0:
        raise ValueError("truth depth has zero range")
    return float(np.sqrt(np.mean(d * d)) / span)


def erode(mask: np.ndarray, band: int) -> np.ndarray:
    """Drop a band of `band` pixels along the mask boundary."""
    if band <= 0:
        return np.asarray(mask, dtype=bool)
    return ndimage.binary_erosion(mask, iterations=band, border_value=0)


def write_obj(path: str | Path, depth: DepthMap) -> None:
    """Grid triangulation of the masked depth map (x = column, y = -row)."""
    mask = depth.mask
    idx = np.full(mask.shape, -1, dtype=np.int64)
    idx[mask] = np.arange(int(mask.sum())) + 1  # OBJ is 1-based
    rr, cc = np.nonzero(mask)
    lines = [f"v {c} {-r} {depth.depth[r, c]:.9g}" for r, c in zip(rr, cc)]
    a, b = idx[:-1, :-1], idx[:-1, 1:]
    c, d = idx[1:, :-1], idx[1:, 1:]
    for t in ((a, c, b), (b, c, d)):
        ok = (t[0] > 0) & (t[1] > 0) & (t[2] > 0)
        lines += [f"f {i} {j} {k}" for i, j, k in zip(t[0][ok], t[1][ok], t[2][ok])]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
