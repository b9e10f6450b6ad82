"""Image stacks, PFM/PNG files and the dataset manifest."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image

from .render import LightingRig

MANIFEST_VERSION = 1

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version", "images", "lights"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": MANIFEST_VERSION},
        "images": {"type": "array", "items": {"type": "string"}},
        "lights": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        },
        "intensities": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "view": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "encoding": {"enum": ["pfm", "png16"]},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "saturation": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "mask": {"type": ["string", "null"]},
        "ground_truth": {"type": "object", "additionalProperties": {"type": "string"}},
    },
}


class InputError(ValueError):
    """Bad or inconsistent input files."""


# ---------------------------------------------------------------- PFM

def write_pfm(path: str | Path, image: np.ndarray) -> None:
    """Little-endian PFM; row 0 of `image` is the top row."""
    a = np.asarray(image, dtype=np.float32)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(np.flipud(a).astype("<f4").tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    """Returns float32 (H, W) or (H, W, 3) with row 0 at the top."""
    data = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", data)
    if not m:
        raise InputError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = data[m.end():]
    if len(body) < 4 * count:
        raise InputError(f"{path}: truncated PFM ({len(body)} bytes for {count} floats)")
    a = np.frombuffer(body, dtype=dtype, count=count).reshape((h, w, channels) if channels == 3 else (h, w))
    return np.flipud(a).astype(np.float32)


# ---------------------------------------------------------------- PNG

def read_png16(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Decode a PNG to [0, 1] floats (H, W, C) plus the pixels at the top code value."""
    import cv2

    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InputError(f"{path}: cannot decode image")
    if raw.ndim == 3:
        raw = raw[..., :3][..., ::-1]  # BGR to RGB, alpha dropped
    else:
        raw = raw[..., None]
    top = np.iinfo(raw.dtype).max
    return raw.astype(np.float64) / top, raw == top


def write_png16(path: str | Path, image: np.ndarray) -> None:
    import cv2

    a = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    a = np.round(a * 65535).astype(np.uint16)
    if a.ndim == 3 and a.shape[2] == 3:
        a = a[..., ::-1]
    elif a.ndim == 3:
        a = a[..., 0]
    if not cv2.imwrite(str(path), a):
        raise OSError(f"could not write {path}")


def write_preview(path: str | Path, image: np.ndarray, mask: np.ndarray | None = None) -> None:
    """8-bit preview scaled to the 99.5th percentile of the masked pixels."""
    a = np.asarray(image, dtype=np.float64)
    sel = a if mask is None else a[np.asarray(mask, dtype=bool)]
    top = float(np.percentile(sel, 99.5)) if sel.size else 1.0
    a = np.clip(a / (top if top > 0 else 1.0), 0.0, 1.0) ** (1 / 2.2)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    Image.fromarray(np.round(a * 255).astype(np.uint8)).save(path)


def write_normal_preview(path: str | Path, normals: np.ndarray, mask: np.ndarray) -> None:
    """False colour (n + 1) / 2 with the background black."""
    rgb = np.where(mask[..., None], (np.asarray(normals) + 1.0) * 0.5, 0.0)
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(path)


def read_mask(path: str | Path) -> np.ndarray:
    a = np.asarray(Image.open(path))
    if a.ndim == 3:
        a = a[..., :3].max(axis=2)
    return a > 0


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path)


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True, eq=False)
class Manifest:
    root: Path
    images: tuple[str, ...]
    rig: LightingRig
    view: np.ndarray
    encoding: str = "pfm"
    gamma: float = 1.0
    saturation: float | None = None
    mask: str | None = None
    ground_truth: dict | None = None

    def to_json(self) -> dict:
        doc = {"version": MANIFEST_VERSION, "images": list(self.images),
               "lights": self.rig.directions.tolist(), "intensities": self.rig.intensities.tolist(),
               "view": np.asarray(self.view).tolist(), "encoding": self.encoding,
               "saturation": self.saturation, "mask": self.mask}
        if self.encoding == "png16":
            doc["gamma"] = self.gamma
        if self.ground_truth:
            doc["ground_truth"] = dict(self.ground_truth)
        return doc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    try:
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise InputError(f"{path}: {exc.message}") from exc
    if len(doc["images"]) != len(doc["lights"]):
        raise InputError(f"{path}: {len(doc['images'])} images but {len(doc['lights'])} lights")
    if not doc["images"]:
        raise InputError(f"{path}: no images")
    d = np.asarray(doc["lights"], dtype=np.float64)
    norms = np.linalg.norm(d, axis=1)
    if np.any(norms == 0):
        raise InputError(f"{path}: zero light direction")
    try:
        rig = LightingRig(d / norms[:, None], doc.get("intensities"))
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    view = np.asarray(doc.get("view", [0.0, 0.0, 1.0]), dtype=np.float64)
    return Manifest(path.parent, tuple(doc["images"]), rig, view / np.linalg.norm(view),
                    doc.get("encoding", "pfm"), float(doc.get("gamma", 1.0)), doc.get("saturation"),
                    doc.get("mask"), doc.get("ground_truth"))


def load_stack(manifest: Manifest) -> tuple[np.ndarray, np.ndarray | None, float | None]:
    """(Q, H, W, C) linear stack, the manifest mask (or None) and the saturation level.

    For 16-bit PNG input the top code value always counts as saturated; it
    maps to 1.0 after linearisation, so that is the default level.
    """
    frames = []
    saturation = manifest.saturation
    for name in manifest.images:
        p = manifest.root / name
        if not p.exists():
            raise InputError(f"missing image {p}")
        if manifest.encoding == "pfm":
            a = read_pfm(p).astype(np.float64)
            if a.ndim == 2:
                a = a[..., None]
        else:
            a, _ = read_png16(p)
            a = a ** manifest.gamma
            if saturation is None:
                saturation = 1.0
        if not np.all(np.isfinite(a)):
            raise InputError(f"{p}: non-finite pixel values")
        if frames and a.shape != frames[0].shape:
            raise InputError(f"{p}: shape {a.shape} differs from {frames[0].shape}")
        frames.append(np.maximum(a, 0.0))
    stack = np.stack(frames)
    mask = None
    if manifest.mask:
        mask = read_mask(manifest.root / manifest.mask)
        if mask.shape != stack.shape[1:3]:
            raise InputError(f"mask {mask.shape} does not match images {stack.shape[1:3]}")
    return stack, mask, saturation


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
