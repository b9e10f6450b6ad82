"""Command line driver.

Exit codes: 0 success, 1 input error, 2 numerical failure (too many
uncertified solves).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import PipelineConfig
from .io import InputError
from .pipeline import (NumericalError, benchmark, load_lights, reconstruct, relight_reconstruction, render_dict,
                       synthesize)
from .render import random_rig

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2

log = logging.getLogger("dictstereo")


class _Parser(argparse.ArgumentParser):
    # usage errors are input errors; 2 is reserved for numerical failure
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON configuration file")
    p.add_argument("--threads", type=int, help="worker threads")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--schedule", type=_floats, help="candidate spacings in degrees, e.g. 10,5,3,1,0.5")
    p.add_argument("--cache-dir", help="directory for rendered-dictionary caches")
    p.add_argument("--channels", type=int, choices=(1, 3), help="dictionary colour channels")
    p.add_argument("--merl-dir", help="directory of MERL .binary files to add to the dictionary")
    p.add_argument("--noise", type=float, help="synthetic noise sigma, relative to mean intensity")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dictstereo", description="Photometric stereo with a BRDF dictionary.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synthesize", help="render a synthetic dataset with ground truth")
    _common(p)
    p.add_argument("--output", "-o", type=Path, required=True)
    p.add_argument("--shape", choices=("sphere", "checkerboard"))
    p.add_argument("--size", type=int, help="image size in pixels")
    p.add_argument("--lights", type=int, help="number of random lights")
    p.add_argument("--light-seed", type=int)
    p.add_argument("--materials", type=_ints, help="dictionary atom indices used by the scene")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("reconstruct", help="estimate normals, reflectance and depth")
    _common(p)
    p.add_argument("manifest", type=Path)
    p.add_argument("--output", "-o", type=Path, required=True)
    p.add_argument("--mask", help="foreground mask image (overrides the manifest)")
    p.add_argument("--search", choices=("c2f", "brute"))
    p.add_argument("--lambda-mode", choices=("auto", "relative", "absolute"))
    p.add_argument("--lambda", dest="lam", type=float, help="l1 weight (absolute) or factor (relative)")
    p.add_argument("--saturation", type=float, help="intensity at or above which a measurement is dropped")
    p.add_argument("--dark-threshold", type=float)
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")

    p = sub.add_parser("benchmark", help="synthetic sweeps over light count and material")
    _common(p)
    p.add_argument("--output", "-o", type=Path, required=True)
    p.add_argument("--q-values", type=_ints)
    p.add_argument("--normals", type=int, help="random normals per material")
    p.add_argument("--materials", type=_ints)
    p.add_argument("--include-material", action="store_true", help="keep the scene material in the dictionary")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("relight", help="render a reconstruction under new lights")
    p.add_argument("reconstruction", type=Path)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--lights", type=Path, help='JSON file with "lights" and optional "intensities"')
    g.add_argument("--random", type=int, metavar="N", help="N random lights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", "-o", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("render-dict", help="pre-render the dictionary into the cache")
    _common(p)
    p.add_argument("--manifest", type=Path, help="use this dataset's lighting")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    o: dict = {}
    get = lambda name: getattr(args, name, None)  # noqa: E731
    for flag, key in (("threads", "threads"), ("seed", "seed"), ("schedule", "schedule"),
                      ("cache_dir", "cache_dir"), ("noise", "noise_sigma"), ("mask", "mask"),
                      ("search", "search"), ("saturation", "saturation"), ("dark_threshold", "dark_threshold")):
        if get(flag) is not None:
            o[key] = get(flag)
    if get("channels") is not None or get("merl_dir") is not None:
        o["dictionary"] = {k: v for k, v in (("channels", get("channels")), ("merl_dir", get("merl_dir")))
                           if v is not None}
    lam = {k: v for k, v in (("mode", get("lambda_mode")), ("value", get("lam"))) if v is not None}
    if lam:
        o["lambda"] = lam
    scene = {k: v for k, v in (("shape", get("shape")), ("size", get("size")), ("materials", get("materials")))
             if v is not None}
    lights = {k: v for k, v in (("count", get("lights")), ("seed", get("light_seed"))) if v is not None}
    if args.command == "synthesize":
        if lights:
            scene["lights"] = lights
        if scene:
            o["scene"] = scene
    if args.command == "benchmark":
        b = {k: v for k, v in (("q_values", get("q_values")), ("normals_per_material", get("normals")),
                                ("materials", get("materials"))) if v is not None}
        if get("include_material"):
            b["leave_one_out"] = False
        if b:
            o["benchmark"] = b
    return o


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "relight":
            if args.lights is not None:
                rig = load_lights(args.lights)
            else:
                if args.random < 1:
                    raise InputError("--random needs at least one light")
                rig = random_rig(args.random, args.seed)
            path = relight_reconstruction(args.reconstruction, rig, args.output, args.force)
            print(f"wrote {rig.Q} images, manifest {path}")
            return EXIT_OK
        cfg = PipelineConfig.load(args.config, _overrides(args))
        if args.command == "synthesize":
            path = synthesize(cfg, args.output, args.force)
            print(f"wrote dataset {path}")
        elif args.command == "reconstruct":
            result = reconstruct(args.manifest, cfg, args.output, args.force)
            print(json.dumps({k: result.report[k] for k in ("pixels", "residual", "visited")
                              if k in result.report} | (
                {"angular_error_deg": result.report["angular_error_deg"]}
                if "angular_error_deg" in result.report else {}), indent=2))
        elif args.command == "benchmark":
            rows = benchmark(cfg, args.output, args.force)
            print(f"wrote {len(rows)} rows to {args.output / 'results.csv'}")
        elif args.command == "render-dict":
            print(f"cache ready: {render_dict(cfg, args.manifest)}")
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, FileNotFoundError, NotADirectoryError, PermissionError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
