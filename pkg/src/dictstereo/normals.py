"""Per-pixel surface normal estimation by searching candidate normals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels as K
from .sampling import angular_distance_deg as angular_error_deg  # noqa: F401
from .render import LightingRig, PixelObservation, RenderedDictionary, RenderedPyramid
from .solvers import nnls

DEFAULT_SCHEDULE = (10.0, 5.0, 3.0, 1.0, 0.5)
# candidates per brute-force block; keeps a block of B matrices cache-resident
_BLOCK = 256


@dataclass(frozen=True)
class Schedule:
    resolutions: tuple[float, ...] = DEFAULT_SCHEDULE

    def __post_init__(self):
        r = tuple(float(x) for x in self.resolutions)
        if not r:
            raise ValueError("a schedule needs at least one resolution")
        if any(x <= 0 for x in r):
            raise ValueError(f"resolutions must be positive: {r}")
        if any(b >= a for a, b in zip(r, r[1:])):
            raise ValueError(f"resolutions must be strictly decreasing: {r}")
        object.__setattr__(self, "resolutions", r)

    @property
    def finest(self) -> float:
        return self.resolutions[-1]


@dataclass(frozen=True, eq=False)
class NormalEstimate:
    normal: np.ndarray
    residual: float
    visited: int
    index: int  # position of the winner in the finest candidate set
    schedule_trace: tuple[np.ndarray, ...] = ()


@dataclass(frozen=True, eq=False)
class NormalMap:
    normals: np.ndarray  # (H, W, 3), zero where not estimated
    residual: np.ndarray  # (H, W), NaN where not estimated
    visited: np.ndarray  # (H, W)
    index: np.ndarray  # (H, W), -1 where not estimated
    mask: np.ndarray  # (H, W) bool, pixels that were estimated

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def _obs_array(obs: PixelObservation | np.ndarray) -> np.ndarray:
    y = obs.intensities if isinstance(obs, PixelObservation) else np.asarray(obs, dtype=np.float64)
    if y.ndim == 1:
        y = y[None]
    return np.ascontiguousarray(y, dtype=np.float64)


def saturation_mask(Y: np.ndarray, saturation: float | None) -> np.ndarray:
    """(P, Q) rows to keep: a light is dropped when any channel reaches saturation."""
    if saturation is None:
        return np.ones((Y.shape[0], Y.shape[2]), dtype=bool)
    return ~np.any(Y >= saturation, axis=1)


def _check_q(Y: np.ndarray, rendered: RenderedDictionary) -> None:
    if Y.shape[2] != rendered.Q:
        raise ValueError(f"observation has {Y.shape[2]} lights, rendered dictionary has {rendered.Q}")
    if Y.shape[1] != rendered.channels:
        raise ValueError(f"observation has {Y.shape[1]} channels, rendered dictionary has {rendered.channels}")


def search_brute(Y: np.ndarray, rendered: RenderedDictionary, rowmask: np.ndarray | None = None):
    """Full scan. Y is (P, C, Q). Returns (winner index, squared residual) per pixel."""
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    _check_q(Y, rendered)
    if len(rendered.candidates) == 0:
        raise ValueError("empty candidate set")
    rm = np.ones((Y.shape[0], Y.shape[2]), dtype=bool) if rowmask is None else np.ascontiguousarray(rowmask)
    return K.scan_all(rendered.matrices, rendered.grams, Y, rm, _BLOCK)


def _cone_lists(level: RenderedDictionary, centers: np.ndarray, half_angle_deg: float):
    r = 2.0 * math.sin(math.radians(min(half_angle_deg, 180.0)) / 2.0) + 1e-9
    cos_t = math.cos(math.radians(half_angle_deg))
    hits = level.tree.query_ball_point(centers, r)
    normals = level.candidates.normals
    lists = []
    for c, h in zip(centers, hits):
        idx = np.asarray(sorted(h), dtype=np.int64)
        if idx.size:
            idx = idx[normals[idx] @ c >= cos_t]
        if idx.size == 0:
            raise RuntimeError(f"empty refinement cone around {c} at {level.candidates.resolution} degrees")
        lists.append(idx)
    offsets = np.zeros(len(lists) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(l) for l in lists])
    cands = np.concatenate(lists) if lists else np.zeros(0, dtype=np.int64)
    return offsets, cands


def search_c2f(Y: np.ndarray, pyramid: RenderedPyramid, schedule: Schedule,
               rowmask: np.ndarray | None = None):
    """Coarse-to-fine search.

    Level 1 scans every candidate at the coarsest resolution; level j+1 scans
    the candidates at resolution j+1 lying within resolution j of the level-j
    winner. Returns (index into finest level, squared residual, visited count,
    per-level winner indices of shape (P, L)).
    """
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    P = Y.shape[0]
    rm = np.ones((P, Y.shape[2]), dtype=bool) if rowmask is None else np.ascontiguousarray(rowmask)
    levels = [pyramid.level(r) for r in schedule.resolutions]
    arg, best = search_brute(Y, levels[0], rm)
    visited = np.full(P, len(levels[0].candidates), dtype=np.int64)
    trace = np.empty((P, len(levels)), dtype=np.int64)
    trace[:, 0] = arg
    for j in range(1, len(levels)):
        prev, cur = levels[j - 1], levels[j]
        _check_q(Y, cur)
        centers = prev.candidates.normals[arg]
        offsets, cands = _cone_lists(cur, centers, schedule.resolutions[j - 1])
        arg, best = K.scan_lists(cur.matrices, cur.grams, Y, rm, offsets, cands)
        visited += np.diff(offsets)
        trace[:, j] = arg
    return arg, best, visited, trace


def _certified_residual(y: np.ndarray, rendered: RenderedDictionary, index: int, rows: np.ndarray) -> float:
    total = 0.0
    for c in range(y.shape[0]):
        total += nnls(rendered.matrices[c, index][rows], y[c][rows]).residual_norm ** 2
    return math.sqrt(total)


def estimate_normal_brute(obs: PixelObservation, rendered: RenderedDictionary,
                          saturation: float | None = None) -> NormalEstimate:
    y = _obs_array(obs)
    rm = saturation_mask(y[None], saturation)
    arg, _ = search_brute(y[None], rendered, rm)
    i = int(arg[0])
    return NormalEstimate(rendered.candidates.normals[i].copy(),
                          _certified_residual(y, rendered, i, rm[0]),
                          len(rendered.candidates), i)


def estimate_normal_c2f(obs: PixelObservation, pyramid: RenderedPyramid, schedule: Schedule = Schedule(),
                        saturation: float | None = None) -> NormalEstimate:
    y = _obs_array(obs)
    rm = saturation_mask(y[None], saturation)
    arg, _, visited, trace = search_c2f(y[None], pyramid, schedule, rm)
    levels = [pyramid.level(r) for r in schedule.resolutions]
    finest = levels[-1]
    i = int(arg[0])
    path = tuple(l.candidates.normals[t].copy() for l, t in zip(levels, trace[0]))
    return NormalEstimate(finest.candidates.normals[i].copy(),
                          _certified_residual(y, finest, i, rm[0]), int(visited[0]), i, path)


def estimate_normal_lambertian(obs: PixelObservation, rig: LightingRig, shadow_threshold: float = 0.0) -> NormalEstimate:
    """Classic linear photometric stereo over the unshadowed measurements."""
    y = _obs_array(obs).sum(axis=0)
    if y.shape[0] != rig.Q:
        raise ValueError(f"observation has {y.shape[0]} lights, rig has {rig.Q}")
    keep = y > shadow_threshold
    L = rig.directions[keep] * rig.intensities[keep, None]
    if L.shape[0] < 3 or np.linalg.matrix_rank(L) < 3:
        raise np.linalg.LinAlgError("lighting is rank deficient over the unshadowed measurements")
    b, res, *_ = np.linalg.lstsq(L, y[keep], rcond=None)
    nb = float(np.linalg.norm(b))
    if nb == 0.0:
        raise np.linalg.LinAlgError("zero scaled normal")
    resid = float(np.linalg.norm(y[keep] - L @ b))
    return NormalEstimate(b / nb, resid, 0, -1)


def foreground(stack: np.ndarray, mask: np.ndarray | None, dark_threshold: float) -> np.ndarray:
    """Pixels to estimate: inside the mask and brighter than dark_threshold somewhere."""
    bright = stack.max(axis=(0, 3)) > dark_threshold
    if mask is not None:
        bright &= np.asarray(mask, dtype=bool)
    return bright


def estimate_image(stack: np.ndarray, pyramid: RenderedPyramid, schedule: Schedule = Schedule(),
                   mask: np.ndarray | None = None, dark_threshold: float = 0.0,
                   saturation: float | None = None, method: str = "c2f") -> NormalMap:
    """Estimate a normal per foreground pixel of a (Q, H, W, C) stack.

    Pixels are independent; the result does not depend on visitation order or
    thread count.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 4:
        raise ValueError(f"expected a (Q, H, W, C) stack, got {stack.shape}")
    Q, H, W, C = stack.shape
    fg = foreground(stack, mask, dark_threshold)
    normals = np.zeros((H, W, 3))
    residual = np.full((H, W), np.nan)
    visited = np.zeros((H, W), dtype=np.int64)
    index = np.full((H, W), -1, dtype=np.int64)
    if fg.any():
        Y = np.ascontiguousarray(np.moveaxis(stack[:, fg, :], 0, 2))  # (P, C, Q)
        rm = saturation_mask(Y, saturation)
        finest = pyramid.level(schedule.finest)
        if method == "c2f":
            arg, best, vis, _ = search_c2f(Y, pyramid, schedule, rm)
        elif method == "brute":
            arg, best = search_brute(Y, finest, rm)
            vis = np.full(len(arg), len(finest.candidates))
        else:
            raise ValueError(f"unknown search method {method!r}")
        normals[fg] = finest.candidates.normals[arg]
        residual[fg] = np.sqrt(best)
        visited[fg] = vis
        index[fg] = arg
    return NormalMap(normals, residual, visited, index, fg)
