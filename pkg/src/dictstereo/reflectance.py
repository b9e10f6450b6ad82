"""Sparse non-negative BRDF abundance estimation at known normals."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .brdf import Brdf, Dictionary
from .render import DEFAULT_VIEW, LightingRig, PixelObservation, render_normals
from .solvers import DEFAULT_TOL, NnlsSolution, nn_lasso

LAMBDA_GRID = (0.0, 1e-3, 1e-2, 1e-1)


@dataclass(frozen=True)
class LambdaPolicy:
    """How the l1 weight is chosen per solve.

    mode "absolute" uses `value` directly; "relative" uses value * ||B'y||_inf;
    "auto" picks the relative factor from LAMBDA_GRID by held-out-light error.
    """

    mode: str = "auto"
    value: float = 0.0

    def __post_init__(self):
        if self.mode not in ("auto", "relative", "absolute"):
            raise ValueError(f"unknown lambda mode {self.mode!r}")
        if not self.value >= 0:
            raise ValueError(f"lambda value must be >= 0, got {self.value}")

    def resolve(self, B: np.ndarray, y: np.ndarray) -> float:
        if self.mode == "absolute":
            return self.value
        return self.value * float(np.max(np.abs(B.T @ y), initial=0.0))


@dataclass(frozen=True, eq=False)
class AbundanceMap:
    coefficients: np.ndarray  # (H, W, C, M)
    lam: np.ndarray  # (H, W, C) weight used per solve
    residual: np.ndarray  # (H, W, C)
    kkt_gap: np.ndarray  # (H, W, C)
    certified: np.ndarray  # (H, W, C) bool
    mask: np.ndarray  # (H, W) pixels that were solved
    atom_names: tuple[str, ...] = ()

    @property
    def uncertified(self) -> int:
        return int(np.count_nonzero(~self.certified[self.mask]))


def _rows(y: np.ndarray, saturation: float | None) -> np.ndarray:
    if saturation is None:
        return np.ones(y.shape[-1], dtype=bool)
    return ~np.any(y >= saturation, axis=0)


def pixel_matrices(dictionary: Dictionary, normal, rig: LightingRig, view=DEFAULT_VIEW) -> np.ndarray:
    """B rendered at the exact normal, shape (C, Q, M)."""
    return render_normals(dictionary, np.asarray(normal, dtype=np.float64)[None], rig, view)[:, 0]


def estimate_brdf_pixel(obs: PixelObservation, normal, dictionary: Dictionary, rig: LightingRig, lam: float,
                        view=DEFAULT_VIEW, saturation: float | None = None,
                        tol: float = DEFAULT_TOL, B: np.ndarray | None = None) -> list[NnlsSolution]:
    """One l1-regularised non-negative fit per colour channel.

    B may be passed pre-rendered as (C, Q, M); otherwise it is rendered at
    `normal` exactly.
    """
    y = obs.intensities
    if B is None:
        B = pixel_matrices(dictionary, normal, rig, view)
    if B.shape[1] != y.shape[1]:
        raise ValueError(f"pixel {obs.pixel}: {y.shape[1]} observations for {B.shape[1]} rendered lights")
    rows = _rows(y, saturation)
    out = []
    for c in range(y.shape[0]):
        try:
            out.append(nn_lasso(B[c][rows], y[c][rows], lam, tol))
        except ValueError as exc:
            raise ValueError(f"pixel {obs.pixel}, channel {c}: {exc}") from exc
    return out


def estimate_brdf_pooled(observations: Sequence[tuple[PixelObservation, np.ndarray]], dictionary: Dictionary,
                         rig: LightingRig, lam: float, view=DEFAULT_VIEW, tol: float = DEFAULT_TOL,
                         matrices: Sequence[np.ndarray] | None = None) -> list[NnlsSolution]:
    """A single abundance vector per channel for pixels known to share a material."""
    if not observations:
        raise ValueError("pooling needs at least one pixel")
    if matrices is None:
        normals = np.stack([np.asarray(n, dtype=np.float64) for _, n in observations])
        Bs = render_normals(dictionary, normals, rig, view)  # (C, P, Q, M)
        matrices = [Bs[:, p] for p in range(len(observations))]
    out = []
    for c in range(dictionary.channels):
        B = np.concatenate([m[c] for m in matrices])
        y = np.concatenate([o.intensities[c] for o, _ in observations])
        out.append(nn_lasso(B, y, lam, tol))
    return out


def reconstruct_brdf(c: np.ndarray, dictionary: Dictionary, name: str = "reconstructed") -> Brdf:
    """D c per channel; c is (M,) for all channels or (C, M)."""
    c = np.asarray(c, dtype=np.float64)
    C, M = dictionary.channels, dictionary.M
    if c.ndim == 1:
        c = np.broadcast_to(c, (C, M))
    if c.shape != (C, M):
        raise ValueError(f"abundances {c.shape} do not match dictionary ({C}, {M})")
    if np.any(c < 0):
        raise ValueError("abundances must be non-negative")
    vals = np.zeros((C,) + dictionary.atoms[0].values.shape[1:])
    for j, atom in enumerate(dictionary.atoms):
        for ch in range(C):
            if c[ch, j] != 0.0:
                vals[ch] += c[ch, j] * atom.values[ch]
    return Brdf(vals, name=name)


def select_lambda_factor(samples: Sequence[tuple[np.ndarray, np.ndarray]], factors: Sequence[float] = LAMBDA_GRID,
                         holdout_every: int = 5) -> float:
    """Pick a relative l1 weight by prediction error on held-out lights.

    samples holds (B, y) pairs for one channel each. Every `holdout_every`-th
    light is withheld from the fit and used for scoring.
    """
    if not samples:
        return factors[0]
    scores = np.zeros(len(factors))
    for B, y in samples:
        held = np.zeros(y.shape[0], dtype=bool)
        held[::holdout_every] = True
        Bt, yt = B[~held], y[~held]
        scale = float(np.max(np.abs(Bt.T @ yt), initial=0.0))
        for k, f in enumerate(factors):
            c = nn_lasso(Bt, yt, f * scale).coefficients
            r = y[held] - B[held] @ c
            scores[k] += float(r @ r)
    return float(factors[int(np.argmin(scores))])


def calibrate(policy: LambdaPolicy, samples: Sequence[tuple[np.ndarray, np.ndarray]]) -> LambdaPolicy:
    """Turn an "auto" policy into a fixed relative one; other policies pass through."""
    if policy.mode != "auto":
        return policy
    return LambdaPolicy("relative", select_lambda_factor(samples))


def estimate_abundances(stack: np.ndarray, normals: np.ndarray, mask: np.ndarray, dictionary: Dictionary,
                        rig: LightingRig, policy: LambdaPolicy = LambdaPolicy(), view=DEFAULT_VIEW,
                        saturation: float | None = None, skip: np.ndarray | None = None,
                        tol: float = DEFAULT_TOL, auto_samples: int = 64, chunk: int = 1024) -> AbundanceMap:
    """Per-pixel abundances for a (Q, H, W, C) stack at the given normals.

    Pixels flagged in `skip` are left at zero and marked as not solved.
    """
    Q, H, W, C = stack.shape
    M = dictionary.M
    solve = np.asarray(mask, dtype=bool).copy()
    if skip is not None:
        solve &= ~np.asarray(skip, dtype=bool)
    coeff = np.zeros((H, W, C, M))
    lam = np.zeros((H, W, C))
    resid = np.zeros((H, W, C))
    gap = np.zeros((H, W, C))
    cert = np.ones((H, W, C), dtype=bool)
    pix = np.argwhere(solve)

    if policy.mode == "auto" and len(pix):
        # evenly spaced sample of pixels, fixed by the pixel list (deterministic)
        take = pix[np.linspace(0, len(pix) - 1, min(auto_samples, len(pix))).astype(int)]
        Bs = render_normals(dictionary, normals[take[:, 0], take[:, 1]], rig, view)
        samples = []
        for k, (r, c) in enumerate(take):
            y = stack[:, r, c, :].T
            rows = _rows(y, saturation)
            for ch in range(C):
                samples.append((Bs[ch, k][rows], y[ch][rows]))
        policy = calibrate(policy, samples)

    for start in range(0, len(pix), chunk):
        block = pix[start:start + chunk]
        Bs = render_normals(dictionary, normals[block[:, 0], block[:, 1]], rig, view)
        for k, (r, c) in enumerate(block):
            y = stack[:, r, c, :].T
            rows = _rows(y, saturation)
            for ch in range(C):
                B = Bs[ch, k][rows]
                yc = y[ch][rows]
                l = policy.resolve(B, yc)
                sol = nn_lasso(B, yc, l, tol)
                coeff[r, c, ch] = sol.coefficients
                lam[r, c, ch] = l
                resid[r, c, ch] = sol.residual_norm
                gap[r, c, ch] = sol.kkt_gap
                cert[r, c, ch] = sol.certified
    return AbundanceMap(coeff, lam, resid, gap, cert, solve, tuple(dictionary.names))


# ---------------------------------------------------------------- blob files

_HEADER = struct.Struct("<4I")


def write_abundance_blob(path: str | Path, amap: AbundanceMap, extra: dict | None = None) -> None:
    """Binary blob (width, height, M, channels, then row-major float64) plus JSON metadata."""
    path = Path(path)
    H, W, C, M = amap.coefficients.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(W, H, M, C))
        fh.write(np.ascontiguousarray(amap.coefficients, dtype="<f8").tobytes())
    meta = {"atoms": list(amap.atom_names), "width": W, "height": H, "M": M, "channels": C,
            "dtype": "float64-le", "layout": "row, column, channel, atom",
            "lambda_mean": float(amap.lam[amap.mask].mean()) if amap.mask.any() else 0.0,
            "uncertified": amap.uncertified}
    meta.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def read_abundance_blob(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated abundance header")
    W, H, M, C = _HEADER.unpack_from(data)
    n = W * H * M * C
    if len(data) != _HEADER.size + 8 * n:
        raise ValueError(f"{path}: expected {n} coefficients")
    return np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(H, W, C, M).copy()
