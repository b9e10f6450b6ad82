"""End-to-end commands: synthesize, reconstruct, relight, benchmark, render-dict."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import brdf as brdf_mod
from . import io as dio
from .brdf import Dictionary
from .config import PipelineConfig
from .integration import NZ_FLOOR, DepthMap, integrate_normals, write_obj
from .io import InputError
from .normals import NormalMap, Schedule, estimate_image, estimate_normal_lambertian, search_c2f
from .reflectance import (AbundanceMap, LambdaPolicy, calibrate, estimate_abundances, read_abundance_blob,
                          write_abundance_blob)
from .render import (DEFAULT_VIEW, LightingRig, PixelObservation, cached_pyramid, geodesic_rig, random_rig,
                     relight, render_normals, render_scene)
from .sampling import angular_distance_deg, random_hemisphere
from .solvers import nn_lasso

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Too many solves failed to certify."""


def set_threads(n: int) -> None:
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------- building blocks

def build_dictionary(cfg: PipelineConfig) -> Dictionary:
    spec = cfg["dictionary"]
    atoms = []
    channels = spec["channels"]
    if spec["merl_dir"]:
        try:
            merl = brdf_mod.load_merl_directory(spec["merl_dir"])
        except (OSError, ValueError) as exc:
            raise InputError(f"dictionary: {exc}") from exc
        channels = channels or 3
        for b in merl:
            if channels == 1:
                b = brdf_mod.Brdf(b.values.mean(axis=0, keepdims=True), name=b.name, clamped=b.clamped)
            atoms.append(b)
    specs = brdf_mod.default_parametric_specs() if spec["parametric"] == "default" else spec["parametric"]
    try:
        atoms += list(brdf_mod.build_parametric_dictionary(specs, channels or 1).atoms) if specs else []
        return Dictionary(tuple(atoms))
    except (KeyError, ValueError) as exc:
        raise InputError(f"dictionary: {exc}") from exc


def make_rig(spec: dict, count: int | None = None) -> LightingRig:
    n = spec["count"] if count is None else count
    if n < 1:
        raise InputError("a lighting rig needs at least one light")
    if spec["kind"] == "geodesic":
        return geodesic_rig(n)
    return random_rig(n, spec["seed"], spec["min_elevation_deg"])


def lambda_policy(cfg: PipelineConfig) -> LambdaPolicy:
    return LambdaPolicy(cfg["lambda"]["mode"], cfg["lambda"]["value"])


def _guard_output(out: Path, force: bool) -> None:
    if (out / "outputs.json").exists() and not force:
        raise InputError(f"{out} already holds results; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _write_outputs_manifest(out: Path, names: list[str]) -> None:
    entries = {n: {"sha256": dio.sha256_file(out / n), "bytes": (out / n).stat().st_size} for n in sorted(names)}
    (out / "outputs.json").write_text(json.dumps(entries, indent=2), encoding="utf-8")


# ---------------------------------------------------------------- scenes

def sphere_geometry(size: int, radius: float, nz_min: float = 0.1):
    """Orthographic sphere: normals (H, W, 3), mask and depth (NaN outside)."""
    R = radius * size
    c = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = (x - c) / R, (y - c) / R
    r2 = dx * dx + dy * dy
    mask = r2 <= 1.0 - nz_min * nz_min
    nz = np.sqrt(np.clip(1.0 - r2, 0.0, None))
    # image rows grow downwards, so the y component flips sign
    normals = np.stack([dx, -dy, nz], axis=-1)
    normals[~mask] = 0.0
    depth = np.where(mask, nz * R, np.nan)
    return normals, mask, depth


def scene_abundances(shape: str, materials: list[int], M: int, size: int, checker: int) -> np.ndarray:
    if any(m >= M for m in materials):
        raise InputError(f"scene material index out of range for {M} atoms: {materials}")
    ab = np.zeros((size, size, M))
    if shape == "sphere":
        for m in materials:
            ab[..., m] += 1.0 / len(materials)
        return ab
    y, x = np.mgrid[0:size, 0:size]
    cell = (y // checker + x // checker) % len(materials)
    for k, m in enumerate(materials):
        ab[cell == k, m] = 1.0
    return ab


def synthesize(cfg: PipelineConfig, out: Path, force: bool = False) -> Path:
    """Render a synthetic dataset with ground truth; returns the manifest path."""
    out = Path(out)
    _guard_output(out, force)
    scene = cfg["scene"]
    D = build_dictionary(cfg)
    rig = make_rig(scene["lights"])
    normals, mask, depth = sphere_geometry(scene["size"], scene["radius"])
    ab = scene_abundances(scene["shape"], scene["materials"], D.M, scene["size"], scene["checker"])
    rng = np.random.default_rng(cfg["seed"])
    stack = render_scene(normals, ab, D, rig, mask=mask, noise_sigma=cfg["noise_sigma"], rng=rng)
    names = []
    width = len(str(rig.Q - 1))
    for q in range(rig.Q):
        name = f"img_{q:0{width}d}.pfm"
        dio.write_pfm(out / name, stack[q])
        names.append(name)
    dio.write_mask(out / "mask.png", mask)
    dio.write_pfm(out / "gt_normals.pfm", normals)
    dio.write_pfm(out / "gt_depth.pfm", np.where(mask, depth, 0.0))
    C = D.channels
    gt = AbundanceMap(np.repeat(ab[:, :, None, :], C, axis=2), np.zeros(mask.shape + (C,)),
                      np.zeros(mask.shape + (C,)), np.zeros(mask.shape + (C,)),
                      np.ones(mask.shape + (C,), dtype=bool), mask, tuple(D.names))
    write_abundance_blob(out / "gt_abundances.bin", gt)
    manifest = dio.Manifest(out, tuple(names), rig, DEFAULT_VIEW.copy(), mask="mask.png",
                            ground_truth={"normals": "gt_normals.pfm", "depth": "gt_depth.pfm",
                                          "abundances": "gt_abundances.bin"})
    manifest.save(out / "manifest.json")
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    files = names + ["mask.png", "gt_normals.pfm", "gt_depth.pfm", "gt_abundances.bin", "gt_abundances.json",
                     "manifest.json", "config.json"]
    _write_outputs_manifest(out, files)
    return out / "manifest.json"


# ---------------------------------------------------------------- reconstruction

@dataclass(frozen=True, eq=False)
class ReconstructionResult:
    normals: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W)
    abundances: np.ndarray  # (H, W, C, M)
    dictionary: Dictionary
    normal_map: NormalMap | None = None
    abundance_map: AbundanceMap | None = None
    depth: DepthMap | None = None
    report: dict = field(default_factory=dict)


def _stats(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return {"count": 0}
    return {"count": int(a.size), "mean": float(a.mean()), "median": float(np.median(a)),
            "p95": float(np.percentile(a, 95)), "max": float(a.max())}


def reconstruct(manifest_path: str | Path, cfg: PipelineConfig, out: str | Path | None,
                force: bool = False) -> ReconstructionResult:
    """Normals, abundances and depth for one dataset; writes artifacts when `out` is given."""
    t0 = time.perf_counter()
    set_threads(cfg["threads"])
    if out is not None:
        out = Path(out)
        _guard_output(out, force)
    manifest = dio.load_manifest(manifest_path)
    stack, mask, saturation = dio.load_stack(manifest)
    if cfg["mask"]:
        mask = dio.read_mask(cfg["mask"])
        if mask.shape != stack.shape[1:3]:
            raise InputError(f"mask {mask.shape} does not match images {stack.shape[1:3]}")
    if cfg["saturation"] is not None:
        saturation = cfg["saturation"]
    D = build_dictionary(cfg)
    if stack.shape[3] != D.channels:
        raise InputError(f"images have {stack.shape[3]} channels, dictionary has {D.channels}")
    schedule = Schedule(tuple(cfg["schedule"]))
    t1 = time.perf_counter()
    pyramid = cached_pyramid(cfg["cache_dir"], D, schedule.resolutions, manifest.rig, manifest.view)
    t2 = time.perf_counter()
    nmap = estimate_image(stack, pyramid, schedule, mask, cfg["dark_threshold"], saturation, cfg["search"])
    t3 = time.perf_counter()
    skip = None
    q = cfg["skip_residual_quantile"]
    if q is not None and nmap.count:
        skip = nmap.mask & (nmap.residual > np.quantile(nmap.residual[nmap.mask], q))
    amap = estimate_abundances(stack, nmap.normals, nmap.mask, D, manifest.rig, lambda_policy(cfg),
                               manifest.view, saturation, skip)
    t4 = time.perf_counter()
    depth = None
    integrable = nmap.mask & (nmap.normals[..., 2] > NZ_FLOOR)
    try:
        depth = integrate_normals(nmap.normals, integrable)
    except ValueError as exc:
        log.warning("depth integration skipped: %s", exc)
    t5 = time.perf_counter()

    solved = int(amap.mask.sum()) * D.channels
    report = {
        "pixels": nmap.count,
        "residual": _stats(nmap.residual[nmap.mask]),
        "visited": _stats(nmap.visited[nmap.mask]),
        "finest_candidates": len(pyramid.finest.candidates),
        "reflectance": {"solved_pixels": int(amap.mask.sum()), "skipped_pixels": int((nmap.mask & ~amap.mask).sum()),
                        "uncertified": amap.uncertified,
                        "uncertified_fraction": amap.uncertified / solved if solved else 0.0,
                        "lambda": _stats(amap.lam[amap.mask])},
        "depth_pixels": int(depth.mask.sum()) if depth else 0,
        "timing_s": {"load": t1 - t0, "render": t2 - t1, "normals": t3 - t2, "reflectance": t4 - t3,
                     "integration": t5 - t4, "total": t5 - t0},
        "dictionary": D.names,
        "lights": manifest.rig.Q,
    }
    gt = manifest.ground_truth or {}
    if "normals" in gt and nmap.count:
        truth = dio.read_pfm(manifest.root / gt["normals"]).astype(np.float64)
        truth /= np.maximum(np.linalg.norm(truth, axis=-1, keepdims=True), 1e-12)
        report["angular_error_deg"] = _stats(angular_distance_deg(nmap.normals[nmap.mask], truth[nmap.mask]))
    result = ReconstructionResult(nmap.normals, nmap.mask, amap.coefficients, D, nmap, amap, depth, report)
    if out is not None:
        _write_reconstruction(out, result, cfg, manifest)
    frac = report["reflectance"]["uncertified_fraction"]
    if frac > cfg["max_uncertified_fraction"]:
        raise NumericalError(f"{amap.uncertified} of {solved} abundance solves uncertified ({frac:.2%})")
    return result


def _write_reconstruction(out: Path, r: ReconstructionResult, cfg: PipelineConfig, manifest: dio.Manifest) -> None:
    dio.write_pfm(out / "normals.pfm", r.normals)
    dio.write_normal_preview(out / "normals.png", r.normals, r.mask)
    dio.write_mask(out / "mask.png", r.mask)
    write_abundance_blob(out / "abundances.bin", r.abundance_map)
    depth = r.depth.depth if r.depth else np.full(r.mask.shape, np.nan)
    dio.write_pfm(out / "depth.pfm", np.nan_to_num(depth, nan=0.0))
    names = ["normals.pfm", "normals.png", "mask.png", "abundances.bin", "abundances.json", "depth.pfm",
             "pixels.csv", "report.json", "config.json", "reconstruction.json"]
    if r.depth:
        write_obj(out / "mesh.obj", r.depth)
        names.append("mesh.obj")
    nm = r.normal_map
    with open(out / "pixels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "nx", "ny", "nz", "residual", "visited"])
        for i, j in np.argwhere(nm.mask):
            n = nm.normals[i, j]
            w.writerow([i, j, f"{n[0]:.9f}", f"{n[1]:.9f}", f"{n[2]:.9f}", f"{nm.residual[i, j]:.9g}",
                        int(nm.visited[i, j])])
    (out / "report.json").write_text(json.dumps(r.report, indent=2), encoding="utf-8")
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    (out / "reconstruction.json").write_text(json.dumps({
        "view": np.asarray(manifest.view).tolist(),
        "lights": manifest.rig.directions.tolist(),
        "intensities": manifest.rig.intensities.tolist(),
        "channels": r.dictionary.channels,
    }, indent=2), encoding="utf-8")
    _write_outputs_manifest(out, names)


def load_reconstruction(directory: str | Path) -> ReconstructionResult:
    d = Path(directory)
    for name in ("normals.pfm", "abundances.bin", "mask.png", "config.json"):
        if not (d / name).exists():
            raise InputError(f"{d} is missing {name}")
    cfg = PipelineConfig.load(d / "config.json")
    D = build_dictionary(cfg)
    normals = dio.read_pfm(d / "normals.pfm").astype(np.float64)
    mask = dio.read_mask(d / "mask.png")
    normals[mask] /= np.linalg.norm(normals[mask], axis=-1, keepdims=True)
    ab = read_abundance_blob(d / "abundances.bin")
    if ab.shape[2:] != (D.channels, D.M):
        raise InputError(f"abundances {ab.shape} do not match the dictionary in {d / 'config.json'}")
    return ReconstructionResult(normals, mask, ab, D)


def load_lights(path: str | Path) -> LightingRig:
    """Lighting from a JSON file holding "lights" (and optional "intensities")."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        d = np.asarray(doc["lights"], dtype=np.float64).reshape(-1, 3)
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        return LightingRig(d, doc.get("intensities"))
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def relight_reconstruction(recon_dir: str | Path, rig: LightingRig, out: str | Path, force: bool = False) -> Path:
    out = Path(out)
    _guard_output(out, force)
    r = load_reconstruction(recon_dir)
    view = DEFAULT_VIEW
    meta = Path(recon_dir) / "reconstruction.json"
    if meta.exists():
        view = np.asarray(json.loads(meta.read_text(encoding="utf-8"))["view"], dtype=np.float64)
    stack = relight(r, rig, view)
    names = []
    width = len(str(rig.Q - 1))
    for q in range(rig.Q):
        name = f"relit_{q:0{width}d}.pfm"
        dio.write_pfm(out / name, stack[q])
        dio.write_preview(out / name.replace(".pfm", ".png"), stack[q], r.mask)
        names += [name, name.replace(".pfm", ".png")]
    dio.write_mask(out / "mask.png", r.mask)
    dio.Manifest(out, tuple(n for n in names if n.endswith(".pfm")), rig, view, mask="mask.png").save(
        out / "manifest.json")
    _write_outputs_manifest(out, names + ["mask.png", "manifest.json"])
    return out / "manifest.json"


def render_dict(cfg: PipelineConfig, manifest_path: str | Path | None) -> Path:
    """Warm the rendered-dictionary cache for a manifest's lighting (or the scene rig)."""
    if not cfg["cache_dir"]:
        raise InputError("render-dict needs a cache directory (--cache-dir)")
    set_threads(cfg["threads"])
    D = build_dictionary(cfg)
    if manifest_path is not None:
        m = dio.load_manifest(manifest_path)
        rig, view = m.rig, m.view
    else:
        rig, view = make_rig(cfg["scene"]["lights"]), DEFAULT_VIEW
    cached_pyramid(cfg["cache_dir"], D, tuple(cfg["schedule"]), rig, view)
    from .render import cache_key
    key = cache_key(D, tuple(cfg["schedule"]), rig, view)
    return Path(cfg["cache_dir"]) / f"rendered-{key[:16]}.bin"


# ---------------------------------------------------------------- benchmark

BENCH_FIELDS = ["lights", "material", "name", "pixels", "mean_angular_error_deg", "median_angular_error_deg",
                "mean_brdf_error", "lambertian_mean_error_deg"]


def _brdf_errors(coeffs: np.ndarray, truth: np.ndarray, grams: list[np.ndarray]) -> np.ndarray:
    """Relative BRDF error of D c against D e for each row of coeffs (P, C, M)."""
    out = np.zeros(coeffs.shape[0])
    for c, W in enumerate(grams):
        d = coeffs[:, c, :] - truth[None, c, :]
        out += np.sqrt(np.maximum(np.einsum("pi,ij,pj->p", d, W, d), 0.0))
    return out / len(grams)


def benchmark(cfg: PipelineConfig, out: str | Path, force: bool = False) -> list[dict]:
    """Sweep light count and scene material; writes results.csv and plots."""
    out = Path(out)
    _guard_output(out, force)
    set_threads(cfg["threads"])
    bench = cfg["benchmark"]
    D = build_dictionary(cfg)
    schedule = Schedule(tuple(cfg["schedule"]))
    grams = [brdf_mod.weighted_gram(D.stacked[c]) for c in range(D.channels)]
    materials = bench["materials"] if bench["materials"] is not None else list(range(D.M))
    if any(m >= D.M for m in materials):
        raise InputError(f"benchmark material index out of range for {D.M} atoms")
    policy = lambda_policy(cfg)
    rows = []
    for Q in bench["q_values"]:
        rig = make_rig(bench["lights"], Q)
        pyramid = cached_pyramid(cfg["cache_dir"], D, schedule.resolutions, rig)
        for m in materials:
            keep = [k for k in range(D.M) if k != m] if bench["leave_one_out"] and D.M > 1 else list(range(D.M))
            pyr = pyramid.columns(keep)
            rng = np.random.default_rng([cfg["seed"], Q, m])
            normals = random_hemisphere(bench["normals_per_material"], rng, bench["max_polar_deg"])
            onehot = np.zeros((len(normals), D.M))
            onehot[:, m] = 1.0
            Y = np.ascontiguousarray(np.moveaxis(
                render_scene(normals, onehot, D, rig, noise_sigma=cfg["noise_sigma"], rng=rng), 0, 2))
            arg, _, _, _ = search_c2f(Y, pyr, schedule)
            est = pyr.finest.candidates.normals[arg]
            ang = angular_distance_deg(est, normals)
            Bs = render_normals(D.subset(keep), est, rig)
            samples = [(Bs[c, p], Y[p, c]) for p in range(min(len(est), 32)) for c in range(D.channels)]
            pol = calibrate(policy, samples)
            coeffs = np.zeros((len(est), D.channels, D.M))
            for p in range(len(est)):
                for c in range(D.channels):
                    sol = nn_lasso(Bs[c, p], Y[p, c], pol.resolve(Bs[c, p], Y[p, c]))
                    coeffs[p, c, keep] = sol.coefficients
            truth = np.zeros((D.channels, D.M))
            truth[:, m] = 1.0
            berr = _brdf_errors(coeffs, truth, grams)
            lam_err = []
            for p in range(len(est)):
                try:
                    n = estimate_normal_lambertian(PixelObservation(Y[p]), rig).normal
                    lam_err.append(float(angular_distance_deg(n, normals[p])))
                except np.linalg.LinAlgError:
                    lam_err.append(math.nan)
            rows.append({"lights": Q, "material": m, "name": D.names[m], "pixels": len(est),
                         "mean_angular_error_deg": float(ang.mean()),
                         "median_angular_error_deg": float(np.median(ang)),
                         "mean_brdf_error": float(berr.mean()),
                         "lambertian_mean_error_deg": float(np.nanmean(lam_err))})
            log.info("Q=%d %s: %.3f deg", Q, D.names[m], ang.mean())
    with open(out / "results.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        w.writeheader()
        w.writerows(rows)
    names = ["results.csv"] + _plot_benchmark(rows, out)
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    _write_outputs_manifest(out, names + ["config.json"])
    return rows


def _plot_benchmark(rows: list[dict], out: Path) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    qs = sorted({r["lights"] for r in rows})
    ang = [np.mean([r["mean_angular_error_deg"] for r in rows if r["lights"] == q]) for q in qs]
    bre = [np.mean([r["mean_brdf_error"] for r in rows if r["lights"] == q]) for q in qs]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(qs, ang, "o-", color="tab:green", label="angular error (deg)")
    ax.set_xlabel("number of images")
    ax.set_ylabel("mean angular error (deg)")
    ax2 = ax.twinx()
    ax2.plot(qs, bre, "s--", color="tab:red", label="relative BRDF error")
    ax2.set_ylabel("mean relative BRDF error")
    fig.tight_layout()
    fig.savefig(out / "error_vs_images.png", dpi=120)
    plt.close(fig)

    last = [r for r in rows if r["lights"] == qs[-1]]
    last.sort(key=lambda r: -r["mean_angular_error_deg"])
    fig, ax = plt.subplots(figsize=(max(5, 0.5 * len(last)), 3.5))
    ax.bar(range(len(last)), [r["mean_angular_error_deg"] for r in last], color="tab:green")
    ax.set_xticks(range(len(last)), [r["name"] for r in last], rotation=60, ha="right", fontsize=7)
    ax.set_ylabel(f"mean angular error (deg), Q={qs[-1]}")
    fig.tight_layout()
    fig.savefig(out / "error_by_material.png", dpi=120)
    plt.close(fig)
    return ["error_vs_images.png", "error_by_material.png"]
