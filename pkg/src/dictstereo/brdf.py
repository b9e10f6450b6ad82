"""Tabulated isotropic BRDFs on the half-angle grid.

Tables use the MERL layout: 90 theta_h bins with a square-root warp, 90
theta_d bins and 180 phi_d bins at 1 degree, phi_d folded into [0, pi) by
reciprocity. Each channel therefore holds 1,458,000 samples.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from . import _kernels as K

log = logging.getLogger(__name__)

N_THETA_H = K.N_THETA_H
N_THETA_D = K.N_THETA_D
N_PHI_D = K.N_PHI_D
TABLE_SHAPE = (N_THETA_H, N_THETA_D, N_PHI_D)
TABLE_SIZE = K.TABLE_SIZE

MERL_SCALES = (1.0 / 1500.0, 1.15 / 1500.0, 1.66 / 1500.0)

_UNIT_TOL = 1e-6


def theta_h_nodes() -> np.ndarray:
    return (np.arange(N_THETA_H) / N_THETA_H) ** 2 * (0.5 * math.pi)


def theta_d_nodes() -> np.ndarray:
    return np.arange(N_THETA_D) * (math.pi / 180.0)


def phi_d_nodes() -> np.ndarray:
    return np.arange(N_PHI_D) * (math.pi / 180.0)


@dataclass(frozen=True)
class HalfAngleCoords:
    theta_h: float
    theta_d: float
    phi_d: float

    def __post_init__(self):
        if not (0.0 <= self.theta_h <= 0.5 * math.pi and 0.0 <= self.theta_d <= 0.5 * math.pi):
            raise ValueError(f"elevations out of range: {self}")
        if not 0.0 <= self.phi_d < math.pi:
            raise ValueError(f"phi_d must be folded into [0, pi): {self.phi_d}")


@dataclass(frozen=True)
class SamplingFunctional:
    """Sparse linear functional over a flattened channel table.

    Applying it to a table performs trilinear interpolation at one
    (theta_h, theta_d, phi_d) location.
    """

    indices: tuple[int, ...]
    weights: tuple[float, ...]

    def apply(self, table: np.ndarray) -> float:
        flat = np.asarray(table).reshape(-1)
        return float(sum(w * flat[i] for i, w in zip(self.indices, self.weights)))

    def dense(self) -> np.ndarray:
        s = np.zeros(TABLE_SIZE)
        s[list(self.indices)] = self.weights
        return s


@dataclass(frozen=True, eq=False)
class Brdf:
    """Reflectance samples of shape (channels, 90, 90, 180)."""

    values: np.ndarray
    name: str = ""
    clamped: int = 0  # negative entries zeroed when the table was loaded

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 3:
            v = v[None]
        if v.ndim != 4 or v.shape[1:] != TABLE_SHAPE:
            raise ValueError(f"expected (C, 90, 90, 180) samples, got {v.shape}")
        if v.shape[0] not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise ValueError("BRDF samples must be finite")
        if np.any(v < 0):
            raise ValueError("BRDF samples must be non-negative")
        if v.flags.writeable:
            v = v.copy() if v is self.values else v
            v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    def flat(self, channel: int = 0) -> np.ndarray:
        return self.values[channel].reshape(-1)

    def channel(self, channel: int) -> "Brdf":
        return Brdf(self.values[channel:channel + 1], name=self.name)

    def fingerprint(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values).tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class Dictionary:
    atoms: tuple[Brdf, ...]

    def __post_init__(self):
        atoms = tuple(self.atoms)
        if not atoms:
            raise ValueError("a dictionary needs at least one atom")
        ch = {a.channels for a in atoms}
        if len(ch) != 1:
            raise ValueError(f"atoms disagree on channel count: {sorted(ch)}")
        object.__setattr__(self, "atoms", atoms)

    @property
    def M(self) -> int:
        return len(self.atoms)

    @property
    def channels(self) -> int:
        return self.atoms[0].channels

    @property
    def names(self) -> list[str]:
        return [a.name or f"atom{j}" for j, a in enumerate(self.atoms)]

    @cached_property
    def stacked(self) -> np.ndarray:
        """Atoms as a (C, T, M) array, the layout the render kernels gather from."""
        out = np.empty((self.channels, TABLE_SIZE, self.M))
        for j, a in enumerate(self.atoms):
            out[:, :, j] = a.values.reshape(self.channels, -1)
        out.setflags(write=False)
        return out

    def subset(self, keep: Sequence[int]) -> "Dictionary":
        return Dictionary(tuple(self.atoms[j] for j in keep))

    def without(self, j: int) -> "Dictionary":
        return self.subset([k for k in range(self.M) if k != j])

    def gray(self) -> "Dictionary":
        if self.channels == 1:
            return self
        return Dictionary(tuple(a.channel(0) for a in self.atoms))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in self.atoms:
            h.update(a.fingerprint().encode())
        return h.hexdigest()


def _as_unit(v, what: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    n = float(np.linalg.norm(a))
    if not np.all(np.isfinite(a)) or abs(n - 1.0) > _UNIT_TOL:
        raise ValueError(f"{what} must be a unit vector, got norm {n}")
    return a


def _front_facing(light, view, normal):
    l = _as_unit(light, "light")
    v = _as_unit(view, "view")
    n = _as_unit(normal, "normal")
    if np.dot(n, l) <= 0.0 or np.dot(n, v) <= 0.0:
        raise ValueError("light and view must both lie in front of the surface")
    return l, v, n


def to_half_angle(light, view, normal) -> HalfAngleCoords:
    l, v, n = _front_facing(light, view, normal)
    return HalfAngleCoords(*K.half_angle(*l, *v, *n))


def _functional_at(theta_h: float, theta_d: float, phi_d: float) -> SamplingFunctional:
    idx = np.empty(8, dtype=np.int64)
    w = np.empty(8)
    K.corners(theta_h, theta_d, phi_d, idx, w)
    merged: dict[int, float] = {}
    for i, wk in zip(idx.tolist(), w.tolist()):
        if wk != 0.0:
            merged[i] = merged.get(i, 0.0) + wk
    return SamplingFunctional(tuple(merged), tuple(merged.values()))


def sampling_functional(light, view, normal) -> SamplingFunctional:
    c = to_half_angle(light, view, normal)
    return _functional_at(c.theta_h, c.theta_d, c.phi_d)


def functional_from_coords(coords: HalfAngleCoords) -> SamplingFunctional:
    return _functional_at(coords.theta_h, coords.theta_d, coords.phi_d)


def evaluate(brdf: Brdf, light, view, normal, channel: int = 0) -> float:
    if not 0 <= channel < brdf.channels:
        raise IndexError(f"channel {channel} out of range for {brdf.channels}-channel BRDF")
    l, v, n = _front_facing(light, view, normal)
    th, td, pd = K.half_angle(*l, *v, *n)
    return float(K.lookup(brdf.flat(channel), th, td, pd))


def canonical_directions(theta_h, theta_d, phi_d) -> tuple[np.ndarray, np.ndarray]:
    """Incident/outgoing directions (normal = +z) for half-angle coordinates.

    The half vector is placed in the x-z plane; the difference vector is
    rotated about y by theta_h to give the incident direction.
    """
    th, td, pd = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (theta_h, theta_d, phi_d)))
    dx = np.sin(td) * np.cos(pd)
    dy = np.sin(td) * np.sin(pd)
    dz = np.cos(td)
    ch, sh = np.cos(th), np.sin(th)
    wi = np.stack([dx * ch + dz * sh, dy, -dx * sh + dz * ch], axis=-1)
    h = np.stack([sh, np.zeros_like(sh), ch], axis=-1)
    wo = 2.0 * np.sum(wi * h, axis=-1, keepdims=True) * h - wi
    return wi, wo


@lru_cache(maxsize=1)
def node_angles() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    th, td, pd = np.meshgrid(theta_h_nodes(), theta_d_nodes(), phi_d_nodes(), indexing="ij")
    for a in (th, td, pd):
        a.setflags(write=False)
    return th, td, pd


@lru_cache(maxsize=1)
def incident_cosine_weights() -> np.ndarray:
    """max(0, cos theta_i) of the canonical incident direction at every grid node."""
    th, td, pd = node_angles()
    wi, _ = canonical_directions(th, td, pd)
    w = np.maximum(0.0, wi[..., 2])
    w.setflags(write=False)
    return w


# ---------------------------------------------------------------- parametric models

def _ward(theta_h, cos_i, cos_o, rho_d, rho_s, alpha):
    out = np.full(np.shape(theta_h), rho_d / math.pi)
    if rho_s == 0.0:
        return out
    ok = (cos_i > 0) & (cos_o > 0) & (theta_h < 0.5 * math.pi)
    t2 = np.tan(theta_h[ok]) ** 2
    spec = rho_s * np.exp(-t2 / alpha**2) / (4.0 * math.pi * alpha**2 * np.sqrt(cos_i[ok] * cos_o[ok]))
    out[ok] += spec
    return out


def _cook_torrance(theta_h, theta_d, cos_i, cos_o, rho_d, rho_s, m, f0):
    out = np.full(np.shape(theta_h), rho_d / math.pi)
    if rho_s == 0.0:
        return out
    ok = (cos_i > 0) & (cos_o > 0) & (theta_h < 0.5 * math.pi)
    ch = np.cos(theta_h[ok])
    cd = np.cos(theta_d[ok])
    ci, co = cos_i[ok], cos_o[ok]
    t2 = np.tan(theta_h[ok]) ** 2
    D = np.exp(-t2 / m**2) / (math.pi * m**2 * ch**4)
    G = np.minimum(1.0, np.minimum(2.0 * ch * co / cd, 2.0 * ch * ci / cd))
    F = f0 + (1.0 - f0) * (1.0 - cd) ** 5
    out[ok] += rho_s * F * D * G / (4.0 * ci * co)
    return out


_MODEL_PARAMS = {
    "lambertian": {"albedo": None},
    "ward": {"rho_d": None, "rho_s": None, "alpha": None},
    "cook-torrance": {"rho_d": 0.0, "rho_s": 1.0, "m": None, "f0": None},
}


def _per_channel(params: dict, channels: int | None) -> tuple[list[dict], int]:
    lens = {len(v) for v in params.values() if isinstance(v, (list, tuple, np.ndarray))}
    if lens - {1, 3}:
        raise ValueError(f"per-channel parameters must have length 1 or 3, got {sorted(lens)}")
    c = channels or (3 if 3 in lens else 1)
    out = []
    for k in range(c):
        d = {}
        for name, v in params.items():
            if isinstance(v, (list, tuple, np.ndarray)):
                v = v[k] if len(v) == 3 else v[0]
            d[name] = float(v)
        out.append(d)
    return out, c


def _validate(model: str, p: dict) -> None:
    def nonneg(*names):
        for n in names:
            if not p[n] >= 0:
                raise ValueError(f"{model}: {n} must be >= 0, got {p[n]}")

    def positive(*names):
        for n in names:
            if not p[n] > 0:
                raise ValueError(f"{model}: {n} must be > 0, got {p[n]}")

    if model == "lambertian":
        nonneg("albedo")
    elif model == "ward":
        nonneg("rho_d", "rho_s")
        positive("alpha")
    else:
        nonneg("rho_d", "rho_s")
        positive("m")
        if not 0.0 <= p["f0"] <= 1.0:
            raise ValueError(f"cook-torrance: f0 must lie in [0, 1], got {p['f0']}")


def parametric_value(model: str, params: dict, theta_h, theta_d, cos_i, cos_o) -> np.ndarray:
    """Closed-form single-channel model value at given geometry (arrays broadcast)."""
    th, td, ci, co = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (theta_h, theta_d, cos_i, cos_o)))
    if model == "lambertian":
        return np.full(th.shape, params["albedo"] / math.pi)
    if model == "ward":
        return _ward(th, ci, co, params["rho_d"], params["rho_s"], params["alpha"])
    if model == "cook-torrance":
        return _cook_torrance(th, td, ci, co, params["rho_d"], params["rho_s"], params["m"], params["f0"])
    raise ValueError(f"unknown model {model!r}")


def generate_parametric(model: str, params: dict | None = None, *, channels: int | None = None,
                        name: str | None = None) -> Brdf:
    """Tabulate a Lambertian, Ward or Cook-Torrance BRDF on the grid nodes.

    Scalar parameters apply to every channel; length-3 sequences give per-channel
    values and switch the table to RGB.
    """
    if model not in _MODEL_PARAMS:
        raise ValueError(f"unknown model {model!r}; choose from {sorted(_MODEL_PARAMS)}")
    full = dict(_MODEL_PARAMS[model])
    params = dict(params or {})
    unknown = set(params) - set(full)
    if unknown:
        raise ValueError(f"{model}: unknown parameters {sorted(unknown)}")
    full.update(params)
    missing = [k for k, v in full.items() if v is None]
    if missing:
        raise ValueError(f"{model}: missing parameters {missing}")
    per, c = _per_channel(full, channels)
    for p in per:
        _validate(model, p)

    th, td, pd = node_angles()
    wi, wo = canonical_directions(th, td, pd)
    ci, co = wi[..., 2], wo[..., 2]
    values = np.empty((c,) + TABLE_SHAPE)
    for k, p in enumerate(per):
        values[k] = parametric_value(model, p, th, td, ci, co)
    np.maximum(values, 0.0, out=values)
    if name is None:
        name = model + "(" + ",".join(f"{k}={v}" for k, v in sorted(params.items())) + ")"
    return Brdf(values, name=name)


# ---------------------------------------------------------------- MERL files

def read_merl(source: str | Path | BinaryIO, name: str | None = None) -> Brdf:
    """Load a MERL-convention binary BRDF (3 channels, scaled doubles)."""
    if hasattr(source, "read"):
        data = source.read()
        label = name or getattr(source, "name", "merl")
    else:
        path = Path(source)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise OSError(f"cannot read MERL file {path}: {exc}") from exc
        label = name or path.stem
    if len(data) < 12:
        raise ValueError(f"{label}: truncated MERL header")
    dims = struct.unpack("<3i", data[:12])
    if dims != TABLE_SHAPE:
        raise ValueError(f"{label}: MERL dimensions {dims}, expected {TABLE_SHAPE}")
    n = 3 * TABLE_SIZE
    if len(data) < 12 + 8 * n:
        raise ValueError(f"{label}: truncated MERL payload ({len(data) - 12} of {8 * n} bytes)")
    raw = np.frombuffer(data, dtype="<f8", count=n, offset=12).reshape(3, TABLE_SIZE)
    vals = raw * np.asarray(MERL_SCALES)[:, None]
    neg = vals < 0
    clamped = int(np.count_nonzero(neg))
    if clamped:
        log.info("%s: clamped %d negative entries to 0", label, clamped)
        vals[neg] = 0.0
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"{label}: non-finite samples")
    return Brdf(vals.reshape((3,) + TABLE_SHAPE), name=label, clamped=clamped)


def _merl_stored(values: np.ndarray, scale: float) -> tuple[np.ndarray, int]:
    # stored value whose product with the scale reproduces the table entry exactly
    st = values / scale
    bad = st * scale != values
    for direction in (np.inf, -np.inf):
        if not bad.any():
            break
        cand = np.nextafter(st[bad], direction)
        hit = cand * scale == values[bad]
        where = np.flatnonzero(bad)[hit]
        st[where] = cand[hit]
        bad[where] = False
    return st, int(np.count_nonzero(bad))


def write_merl(brdf: Brdf, target: str | Path | BinaryIO) -> int:
    """Write a 3-channel table in MERL layout.

    Returns the number of entries with no exactly representable stored value
    (those round-trip to within one ulp).
    """
    if brdf.channels != 3:
        raise ValueError("MERL files hold exactly 3 channels")
    parts = [struct.pack("<3i", *TABLE_SHAPE)]
    inexact = 0
    for c, scale in enumerate(MERL_SCALES):
        st, bad = _merl_stored(brdf.flat(c), scale)
        inexact += bad
        parts.append(st.astype("<f8").tobytes())
    payload = b"".join(parts)
    if hasattr(target, "write"):
        target.write(payload)
    else:
        Path(target).write_bytes(payload)
    if inexact:
        log.warning("%s: %d entries are not exactly representable in MERL scaling", brdf.name, inexact)
    return inexact


def load_merl_directory(directory: str | Path) -> list[Brdf]:
    paths = sorted(Path(directory).glob("*.binary"))
    if not paths:
        raise FileNotFoundError(f"no *.binary MERL files in {directory}")
    return [read_merl(p) for p in paths]


# ---------------------------------------------------------------- error metric

def relative_brdf_error(estimate: Brdf, truth: Brdf) -> float:
    """Cosine-weighted RMS table difference (unit cell weights), channel-averaged."""
    if estimate.values.shape != truth.values.shape:
        raise ValueError(f"shape mismatch: {estimate.values.shape} vs {truth.values.shape}")
    w = incident_cosine_weights()
    errs = []
    for c in range(estimate.channels):
        d = (estimate.values[c] - truth.values[c]) * w
        errs.append(math.sqrt(float(np.sum(d * d)) / TABLE_SIZE))
    return float(np.mean(errs))


def weighted_gram(tables: np.ndarray) -> np.ndarray:
    """Cosine-weighted Gram matrix of flat tables (T, K), scaled by 1/T.

    For c and a truth atom expressed in the same basis, the squared relative
    error is (c - e)' W (c - e); used to score many estimates cheaply.
    """
    w = incident_cosine_weights().reshape(-1)
    A = tables * w[:, None]
    return (A.T @ A) / TABLE_SIZE


def default_parametric_specs() -> list[dict]:
    """Ten-atom dictionary: a Lambertian plus half-diffuse Ward materials of roughness 0.05-0.5."""
    specs = [{"model": "lambertian", "params": {"albedo": 1.0}, "name": "lambertian"}]
    for a in np.linspace(0.05, 0.5, 9):
        a = round(float(a), 4)
        specs.append({"model": "ward", "params": {"rho_d": 0.5, "rho_s": 0.5, "alpha": a},
                      "name": f"ward-{a:g}"})
    return specs


def build_parametric_dictionary(specs: Sequence[dict], channels: int | None = None) -> Dictionary:
    return Dictionary(tuple(
        generate_parametric(s["model"], s.get("params", {}), channels=channels or s.get("channels"),
                            name=s.get("name"))
        for s in specs
    ))
