"""Candidate normals on the camera-facing hemisphere."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class CandidateSet:
    normals: np.ndarray  # (N, 3), unit, nz >= 0
    resolution: float  # nominal spacing in degrees

    def __post_init__(self):
        n = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
        n.setflags(write=False)
        object.__setattr__(self, "normals", n)

    def __len__(self) -> int:
        return self.normals.shape[0]

    def save(self, path: str | Path) -> None:
        """CSV sidecar: first line holds the resolution, then one normal per row."""
        header = f"resolution_deg={self.resolution!r}"
        np.savetxt(path, self.normals, fmt="%.17g", delimiter=",", header=header)

    @classmethod
    def load(cls, path: str | Path) -> "CandidateSet":
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
        res = float(first.split("=", 1)[1])
        return cls(np.loadtxt(path, delimiter=",", ndmin=2), res)


def ring_layout(resolution_deg: float) -> list[tuple[float, int]]:
    """(polar angle in degrees, azimuth count) for every latitude ring."""
    if not resolution_deg > 0 or resolution_deg > 90:
        raise ValueError(f"resolution must lie in (0, 90] degrees, got {resolution_deg}")
    k_max = int(math.floor(90.0 / resolution_deg + 1e-9))
    polars = [k * resolution_deg for k in range(k_max + 1)]
    if 90.0 - polars[-1] > 0.5 * resolution_deg:
        polars.append(90.0)
    rings = []
    for p in polars:
        if p == 0.0:
            rings.append((0.0, 1))
            continue
        s = math.sin(math.radians(p))
        rings.append((p, int(math.ceil(360.0 * s / resolution_deg - 1e-9))))
    return rings


def equiangular_hemisphere(resolution_deg: float) -> CandidateSet:
    """Latitude rings every `resolution_deg` from the pole down to the equator."""
    out = []
    for polar, count in ring_layout(resolution_deg):
        t = math.radians(polar)
        az = np.arange(count) * (2.0 * math.pi / count)
        ring = np.stack([math.sin(t) * np.cos(az), math.sin(t) * np.sin(az),
                         np.full(count, math.cos(t))], axis=1)
        out.append(ring)
    normals = np.concatenate(out)
    normals[:, 2] = np.maximum(normals[:, 2], 0.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return CandidateSet(normals, float(resolution_deg))


def cone_mask(normals: np.ndarray, center, half_angle_deg: float) -> np.ndarray:
    c = np.asarray(center, dtype=np.float64).reshape(3)
    return normals @ c >= math.cos(math.radians(half_angle_deg))


def cone_subset(parent: CandidateSet, center, half_angle_deg: float) -> CandidateSet:
    c = np.asarray(center, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(c) - 1.0) > 1e-6:
        raise ValueError("cone center must be a unit vector")
    if not 0 < half_angle_deg <= 180:
        raise ValueError(f"half angle must lie in (0, 180], got {half_angle_deg}")
    return CandidateSet(parent.normals[cone_mask(parent.normals, c, half_angle_deg)], parent.resolution)


def angular_distance_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle between unit vectors along the last axis, in degrees (stable form)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.sum(a * b, axis=-1)
    return np.degrees(np.arctan2(cross, dot))


def random_hemisphere(count: int, rng: np.random.Generator, max_polar_deg: float = 90.0) -> np.ndarray:
    """Uniform (area-measure) unit vectors with polar angle <= max_polar_deg."""
    zmin = math.cos(math.radians(max_polar_deg))
    z = rng.uniform(zmin, 1.0, count)
    phi = rng.uniform(0.0, 2.0 * math.pi, count)
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
