"""Image formation: per-candidate dictionary matrices and synthetic image stacks."""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels as K
from .brdf import Brdf, Dictionary, _as_unit
from .brdf import evaluate as _evaluate
from .sampling import CandidateSet, equiangular_hemisphere

DEFAULT_VIEW = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class LightingRig:
    directions: np.ndarray  # (Q, 3)
    intensities: np.ndarray | None = None  # (Q,), defaults to ones

    def __post_init__(self):
        d = np.ascontiguousarray(self.directions, dtype=np.float64).reshape(-1, 3)
        if d.shape[0] < 1:
            raise ValueError("a lighting rig needs at least one light")
        norms = np.linalg.norm(d, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("light directions must be unit vectors")
        if self.intensities is None:
            s = np.ones(d.shape[0])
        else:
            s = np.ascontiguousarray(self.intensities, dtype=np.float64).reshape(-1)
            if s.shape[0] != d.shape[0]:
                raise ValueError(f"{s.shape[0]} intensities for {d.shape[0]} lights")
            if np.any(s < 0) or not np.all(np.isfinite(s)):
                raise ValueError("light intensities must be finite and non-negative")
        d.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "intensities", s)

    @property
    def Q(self) -> int:
        return self.directions.shape[0]

    def subset(self, rows: Sequence[int] | np.ndarray) -> "LightingRig":
        rows = np.asarray(rows)
        return LightingRig(self.directions[rows], self.intensities[rows])

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.directions.tobytes())
        h.update(self.intensities.tobytes())
        return h.hexdigest()


def random_rig(count: int, seed: int | np.random.Generator = 0, min_elevation_deg: float = 0.0) -> LightingRig:
    """Lights drawn uniformly over the upper hemisphere above a minimum elevation."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    zmin = math.sin(math.radians(min_elevation_deg))
    z = rng.uniform(zmin, 1.0, count)
    phi = rng.uniform(0.0, 2.0 * math.pi, count)
    r = np.sqrt(1.0 - z * z)
    d = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return LightingRig(d / np.linalg.norm(d, axis=1, keepdims=True))


def geodesic_rig(count: int) -> LightingRig:
    """Near-uniform deterministic hemisphere lights on a Fibonacci spiral."""
    i = np.arange(count) + 0.5
    z = 1.0 - i / count
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    r = np.sqrt(1.0 - z * z)
    d = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return LightingRig(d / np.linalg.norm(d, axis=1, keepdims=True))


@dataclass(frozen=True, eq=False)
class PixelObservation:
    intensities: np.ndarray  # (C, Q)
    pixel: tuple[int, int] | None = None

    def __post_init__(self):
        a = np.asarray(self.intensities, dtype=np.float64)
        if a.ndim == 1:
            a = a[None]
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise ValueError(f"pixel {self.pixel}: intensities must be finite and non-negative")
        a = np.ascontiguousarray(a)
        a.setflags(write=False)
        object.__setattr__(self, "intensities", a)

    @property
    def Q(self) -> int:
        return self.intensities.shape[1]

    @property
    def channels(self) -> int:
        return self.intensities.shape[0]


def shade(brdf: Brdf, normal, light, view, channel: int = 0) -> float:
    """BRDF value times the clamped cosine; zero for back-lit or invisible geometry."""
    n = _as_unit(normal, "normal")
    l = _as_unit(light, "light")
    v = _as_unit(view, "view")
    cos_l = float(n @ l)
    if cos_l <= 0.0 or float(n @ v) <= 0.0:
        return 0.0
    return _evaluate(brdf, l, v, n, channel) * cos_l


def render_normals(dictionary: Dictionary, normals: np.ndarray, rig: LightingRig, view=DEFAULT_VIEW) -> np.ndarray:
    """B matrices for arbitrary normals, shape (C, N, Q, M)."""
    normals = np.ascontiguousarray(normals, dtype=np.float64).reshape(-1, 3)
    v = _as_unit(view, "view")
    return K.render_matrices(normals, rig.directions, rig.intensities, v, dictionary.stacked)


@dataclass(frozen=True, eq=False)
class RenderedDictionary:
    """B(n) for every candidate of one candidate set.

    matrices has shape (C, N, Q, M): channel, candidate, light, atom.
    """

    matrices: np.ndarray
    candidates: CandidateSet
    dictionary: Dictionary | None = None
    rig: LightingRig | None = None
    view: np.ndarray = field(default_factory=lambda: DEFAULT_VIEW.copy())

    def __post_init__(self):
        if self.matrices.ndim != 4 or self.matrices.shape[1] != len(self.candidates):
            raise ValueError(f"matrices {self.matrices.shape} do not match {len(self.candidates)} candidates")
        self.matrices.setflags(write=False)

    @property
    def Q(self) -> int:
        return self.matrices.shape[2]

    @property
    def M(self) -> int:
        return self.matrices.shape[3]

    @property
    def channels(self) -> int:
        return self.matrices.shape[0]

    @cached_property
    def grams(self) -> np.ndarray:
        g = K.gram_matrices(self.matrices)
        g.setflags(write=False)
        return g

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.candidates.normals)

    def matrix(self, index: int, channel: int = 0) -> np.ndarray:
        return self.matrices[channel, index]

    def columns(self, keep: Sequence[int]) -> "RenderedDictionary":
        keep = np.asarray(keep)
        out = RenderedDictionary(np.ascontiguousarray(self.matrices[..., keep]), self.candidates,
                                 self.dictionary.subset(keep.tolist()) if self.dictionary else None,
                                 self.rig, self.view)
        if "grams" in self.__dict__:
            g = np.ascontiguousarray(self.grams[:, :, keep][:, :, :, keep])
            g.setflags(write=False)
            out.__dict__["grams"] = g
        if "tree" in self.__dict__:
            out.__dict__["tree"] = self.tree
        return out

    def rows(self, rows: Sequence[int]) -> "RenderedDictionary":
        rows = np.asarray(rows)
        out = RenderedDictionary(np.ascontiguousarray(self.matrices[:, :, rows, :]), self.candidates,
                                 self.dictionary, self.rig.subset(rows) if self.rig else None, self.view)
        if "tree" in self.__dict__:
            out.__dict__["tree"] = self.tree
        return out

    def cone(self, center, half_angle_deg: float) -> np.ndarray:
        """Ascending indices of candidates within half_angle_deg of center."""
        c = np.asarray(center, dtype=np.float64)
        r = 2.0 * math.sin(math.radians(min(half_angle_deg, 180.0)) / 2.0) + 1e-9
        idx = np.asarray(sorted(self.tree.query_ball_point(c, r)), dtype=np.int64)
        if idx.size:
            keep = self.candidates.normals[idx] @ c >= math.cos(math.radians(half_angle_deg))
            idx = idx[keep]
        return idx


def render_dictionary(dictionary: Dictionary, candidates: CandidateSet, rig: LightingRig,
                      view=DEFAULT_VIEW) -> RenderedDictionary:
    v = _as_unit(view, "view")
    B = render_normals(dictionary, candidates.normals, rig, v)
    return RenderedDictionary(B, candidates, dictionary, rig, v)


@dataclass(frozen=True, eq=False)
class RenderedPyramid:
    """Rendered dictionaries for each resolution of a coarse-to-fine schedule."""

    levels: tuple[RenderedDictionary, ...]

    @property
    def resolutions(self) -> tuple[float, ...]:
        return tuple(l.candidates.resolution for l in self.levels)

    def level(self, resolution: float) -> RenderedDictionary:
        for l in self.levels:
            if abs(l.candidates.resolution - resolution) < 1e-12:
                return l
        raise KeyError(f"no rendered level at {resolution} degrees (have {self.resolutions})")

    def columns(self, keep: Sequence[int]) -> "RenderedPyramid":
        return RenderedPyramid(tuple(l.columns(keep) for l in self.levels))

    def rows(self, rows: Sequence[int]) -> "RenderedPyramid":
        return RenderedPyramid(tuple(l.rows(rows) for l in self.levels))

    @property
    def finest(self) -> RenderedDictionary:
        return min(self.levels, key=lambda l: l.candidates.resolution)


def render_pyramid(dictionary: Dictionary, resolutions: Sequence[float], rig: LightingRig,
                   view=DEFAULT_VIEW) -> RenderedPyramid:
    return RenderedPyramid(tuple(
        render_dictionary(dictionary, equiangular_hemisphere(r), rig, view) for r in resolutions
    ))


# ---------------------------------------------------------------- cache files

CACHE_MAGIC = b"DSRD"
CACHE_VERSION = 1


def cache_key(dictionary: Dictionary, resolutions: Sequence[float], rig: LightingRig, view) -> str:
    h = hashlib.sha256()
    h.update(b"rings-v1")
    h.update(dictionary.fingerprint().encode())
    h.update(rig.fingerprint().encode())
    h.update(np.asarray(view, dtype=np.float64).tobytes())
    h.update(np.asarray(resolutions, dtype=np.float64).tobytes())
    return h.hexdigest()


def _payload(pyr: RenderedPyramid) -> bytes:
    buf = io.BytesIO()
    arrays = {}
    for i, l in enumerate(pyr.levels):
        arrays[f"res{i}"] = np.array([l.candidates.resolution])
        arrays[f"normals{i}"] = l.candidates.normals
        arrays[f"B{i}"] = l.matrices
    np.savez(buf, **arrays)
    return buf.getvalue()


def save_pyramid(path: str | Path, pyr: RenderedPyramid, key: str) -> None:
    payload = _payload(pyr)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<B", CACHE_VERSION))
        fh.write(bytes.fromhex(key))
        fh.write(hashlib.sha256(payload).digest())
        fh.write(payload)


def load_pyramid(path: str | Path, key: str, dictionary: Dictionary | None = None,
                 rig: LightingRig | None = None, view=DEFAULT_VIEW) -> RenderedPyramid:
    """Load a cached pyramid; raises ValueError when the header or hashes disagree."""
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a rendered-dictionary cache")
    if data[4] != CACHE_VERSION:
        raise ValueError(f"{path}: cache format version {data[4]}, expected {CACHE_VERSION}")
    if data[5:37] != bytes.fromhex(key):
        raise ValueError(f"{path}: cache key mismatch (different dictionary, rig or schedule)")
    payload = data[69:]
    if hashlib.sha256(payload).digest() != data[37:69]:
        raise ValueError(f"{path}: cache content hash mismatch")
    z = np.load(io.BytesIO(payload))
    levels = []
    i = 0
    while f"B{i}" in z.files:
        cs = CandidateSet(z[f"normals{i}"], float(z[f"res{i}"][0]))
        levels.append(RenderedDictionary(z[f"B{i}"], cs, dictionary, rig, np.asarray(view, dtype=np.float64)))
        i += 1
    return RenderedPyramid(tuple(levels))


def cached_pyramid(cache_dir: str | Path | None, dictionary: Dictionary, resolutions: Sequence[float],
                   rig: LightingRig, view=DEFAULT_VIEW) -> RenderedPyramid:
    if cache_dir is None:
        return render_pyramid(dictionary, resolutions, rig, view)
    key = cache_key(dictionary, resolutions, rig, view)
    path = Path(cache_dir) / f"rendered-{key[:16]}.bin"
    if path.exists():
        return load_pyramid(path, key, dictionary, rig, view)
    pyr = render_pyramid(dictionary, resolutions, rig, view)
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    save_pyramid(path, pyr, key)
    return pyr


# ---------------------------------------------------------------- scenes

def _coeff_array(abundances: np.ndarray, P: int, C: int, M: int) -> np.ndarray:
    a = np.asarray(abundances, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, None, :]
    if a.shape[0] != P or a.shape[2] != M or a.shape[1] not in (1, C):
        raise ValueError(f"abundances {np.shape(abundances)} do not match {P} pixels, {C} channels, {M} atoms")
    if np.any(a < 0):
        raise ValueError("abundances must be non-negative")
    return np.ascontiguousarray(np.broadcast_to(a, (P, C, M)))


def render_scene(normals: np.ndarray, abundances: np.ndarray, dictionary: Dictionary, rig: LightingRig,
                 view=DEFAULT_VIEW, mask: np.ndarray | None = None, noise_sigma: float = 0.0,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Render I_p = B(n_p) c_p for every pixel.

    normals is (H, W, 3) or (P, 3); abundances (H, W, [C,] M) or (P, [C,] M).
    Returns a stack of shape (Q, H, W, C) (or (Q, P, C)). noise_sigma is the
    standard deviation of additive Gaussian noise relative to the mean
    foreground intensity; noisy values are clipped at zero.
    """
    normals = np.asarray(normals, dtype=np.float64)
    spatial = normals.shape[:-1]
    P = int(np.prod(spatial))
    C, M = dictionary.channels, dictionary.M
    ab = np.asarray(abundances, dtype=np.float64)
    if ab.shape[:len(spatial)] != spatial:
        raise ValueError(f"abundance map {ab.shape} does not match normal map {normals.shape}")
    coeffs = _coeff_array(ab.reshape((P,) + ab.shape[len(spatial):]), P, C, M)
    n = normals.reshape(P, 3)
    fg = np.ones(P, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(P)
    v = _as_unit(view, "view")
    out = np.zeros((P, C, rig.Q))
    if fg.any():
        out[fg] = K.render_pixels(np.ascontiguousarray(n[fg]), np.ascontiguousarray(coeffs[fg]),
                                  rig.directions, rig.intensities, v, dictionary.stacked)
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        level = noise_sigma * float(out[fg].mean()) if fg.any() else 0.0
        noise = rng.normal(0.0, 1.0, out.shape) * level
        out = np.where(fg[:, None, None], np.maximum(out + noise, 0.0), 0.0)
    return np.moveaxis(out, 2, 0).reshape((rig.Q,) + spatial + (C,))


def relight(result, new_rig: LightingRig, view=DEFAULT_VIEW) -> np.ndarray:
    """Render a reconstruction (normals, abundances, mask, dictionary) under new lights."""
    return render_scene(result.normals, result.abundances, result.dictionary, new_rig, view, mask=result.mask)
