"""``magmatch`` command line.

Exit status: 0 success, 1 domain failure (no match, degenerate geometry,
failed or inconclusive fitness), 2 input error. Failures print one line to
stderr of the form ``magmatch: error[CODE]: message``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, PipelineConfig, load_config
from .features import FeatureSet, evaluate_samples, load_features, save_features
from .field_sim import (
    SamplingPlan,
    SchemaError,
    SingularityError,
    example_scene,
    load_scene,
    read_measurements_csv,
    sample_scene,
)
from .geometry import RigidTransform, rotation_about
from .gp import ConfigurationError, NumericalError, load_belief, save_belief
from .pipeline import RunManifest, build_belief, features_for, register, relative_noise_std
from .registration import evaluate_against_truth, summarize_trials

EXIT_OK, EXIT_DOMAIN, EXIT_INPUT = 0, 1, 2


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code
        self.status = status


def _floats(text: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} numbers, got {len(vals)}")
    return vals


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_updates(seed=args.seed)
    return cfg


def _read_json(path, code="INPUT_SCHEMA"):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError("INPUT_MISSING", f"{path}: {exc.strerror}")
    except json.JSONDecodeError as exc:
        raise CliError(code, f"{path}: {exc}")


def _write_manifest(out, manifest: RunManifest) -> None:
    Path(str(out) + ".manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")


def _frame(args) -> RigidTransform:
    if args.frame:
        return RigidTransform.from_dict(_read_json(args.frame))
    R = np.eye(3)
    for spec in args.frame_rotation or []:
        axis, _, deg = spec.partition(":")
        if axis not in ("x", "y", "z") or not deg:
            raise CliError("INPUT_ARGS", f"--frame-rotation expects AXIS:DEGREES, got {spec!r}")
        R = rotation_about(axis, float(deg)) @ R
    t = args.frame_translation or [0.0, 0.0, 0.0]
    return RigidTransform(R, t)


def cmd_simulate(args) -> int:
    scene = load_scene(args.scene) if args.scene else example_scene(args.preset)
    b = args.bounds
    plan = SamplingPlan(
        args.plan,
        (b[:3], b[3:]),
        resolution=args.resolution,
        count=args.count,
        line_spacing=args.line_spacing,
        point_spacing=args.point_spacing,
        direction=args.direction,
        seed=args.seed if args.seed is not None else 0,
    )
    noise = args.noise_std
    if args.noise_rel is not None:
        noise = relative_noise_std(scene, plan, args.noise_rel)
    frame = _frame(args)
    ms = sample_scene(scene, plan, noise, frame, clearance=args.clearance)
    ms.to_csv(args.out)
    if args.truth_out:
        Path(args.truth_out).write_text(json.dumps(frame.inverse().to_dict(), indent=2) + "\n")
    print(f"wrote {len(ms)} measurements to {args.out} (noise std {noise:.3e} T)")
    return EXIT_OK


def cmd_map(args) -> int:
    cfg = _config(args)
    man = RunManifest("map", config=cfg.to_dict(), seed=cfg.seed)
    man.add_input(args.measurements)
    with man.stage("read"):
        ms = read_measurements_csv(args.measurements)
    with man.stage("absorb"):
        belief = build_belief(ms, cfg)
    with man.stage("write"):
        save_belief(belief, args.out)
    _write_manifest(args.out, man)
    print(f"absorbed {belief.count} measurements into {belief.inducing.size} inducing points")
    return EXIT_OK


def cmd_features(args) -> int:
    cfg = _config(args)
    man = RunManifest("features", config=cfg.to_dict(), seed=cfg.seed)
    man.add_input(args.belief)
    belief = load_belief(args.belief)
    path = None
    if args.measurements:
        man.add_input(args.measurements)
        path = read_measurements_csv(args.measurements).locations
    with man.stage("extract"):
        ex = features_for(belief, cfg, path)
    save_features(ex.features, args.out)
    _write_manifest(args.out, man)
    n = len(ex.features)
    if n == 0:
        print("magmatch: warning[NO_KEYPOINTS]: no keypoints selected; empty feature set written", file=sys.stderr)
    print(f"{n} keypoints from {len(ex.grid)} inference points ({ex.features.discarded} degenerate LRFs dropped)")
    return EXIT_OK


def cmd_register(args) -> int:
    cfg = _config(args)
    man = RunManifest("register", config=cfg.to_dict(), seed=cfg.seed)
    for p in (args.base, args.target):
        man.add_input(p)
    base, target = load_features(args.base), load_features(args.target)
    belief = None
    if args.base_belief:
        man.add_input(args.base_belief)
        belief = load_belief(args.base_belief)
    samples = None
    if args.target_measurements:
        man.add_input(args.target_measurements)
        samples = read_measurements_csv(args.target_measurements)
    with man.stage("register"):
        rep = register(base, target, cfg.msac_config(), belief, samples)
    Path(args.out).write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    _write_manifest(args.out, man)
    if rep.ok:
        print(f"registered: {len(rep.inliers)} inliers of {rep.correspondences}, fitness {rep.fitness.score:.4f}")
        return EXIT_OK
    code = {
        "no-match": "NO_MATCH",
        "estimation-failed": "ESTIMATION_FAILED",
        "fail": "FITNESS_FAIL",
        "inconclusive": "FITNESS_INCONCLUSIVE",
    }[rep.status]
    raise CliError(code, rep.message or f"registration {rep.status}", EXIT_DOMAIN)


def cmd_eval(args) -> int:
    truth = RigidTransform.from_dict(_read_json(args.truth))
    rows, errors = [], []
    for p in args.reports:
        rep = _read_json(p)
        if rep.get("transform") is None:
            rows.append({"report": str(p), "status": rep.get("status"), "translation_error_m": None, "rotation_error_deg": None})
            continue
        terr, rerr = evaluate_against_truth(RigidTransform.from_dict(rep["transform"]), truth)
        errors.append((terr, rerr))
        rows.append({"report": str(p), "status": rep.get("status"), "translation_error_m": terr, "rotation_error_deg": rerr})
    out = {"trials": rows}
    if errors:
        s = summarize_trials(errors)
        out["summary"] = {
            "translation_rmse_m": s.translation_rmse,
            "translation_std_m": s.translation_std,
            "rotation_rmse_deg": s.rotation_rmse,
            "rotation_std_deg": s.rotation_std,
            "trials": s.trials,
            "table_row": s.table_row(),
        }
        print(s.table_row())
    Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
    if not errors:
        raise CliError("NO_TRANSFORM", "no report carries a transform", EXIT_DOMAIN)
    return EXIT_OK


def export_slice(belief, axis: str, value: float, spacing: float, extent=None):
    """Rows (x, y, z, |B|, DoH, tr cov) over a plane normal to ``axis``."""
    k = "xyz".index(axis)
    other = [i for i in range(3) if i != k]
    lo, hi = belief.inducing.bounds
    if extent is not None:
        lo, hi = lo.copy(), hi.copy()
        lo[other], hi[other] = [extent[0], extent[2]], [extent[1], extent[3]]
    a = lo[other[0]] + spacing * np.arange(int(np.floor((hi[other[0]] - lo[other[0]]) / spacing + 1e-9)) + 1)
    b = lo[other[1]] + spacing * np.arange(int(np.floor((hi[other[1]] - lo[other[1]]) / spacing + 1e-9)) + 1)
    A, Bm = np.meshgrid(a, b, indexing="ij")
    P = np.empty((A.size, 3))
    P[:, other[0]], P[:, other[1]], P[:, k] = A.ravel(), Bm.ravel(), value
    s = evaluate_samples(belief, P)
    return np.column_stack([P, s.norm, s.doh, s.variance])


def cmd_export_grid(args) -> int:
    cfg = _config(args)
    belief = load_belief(args.belief)
    rows = export_slice(belief, args.axis, args.value, args.spacing or cfg.inference_spacing_m, args.extent)
    with open(args.out, "w") as fh:
        fh.write("x,y,z,bnorm,doh,var\n")
        for r in rows:
            fh.write(",".join(f"{v:.17g}" for v in r) + "\n")
    print(f"wrote {len(rows)} grid rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="magmatch", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"magmatch {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", required=True, help=out_help)
        return sp

    s = common(sub.add_parser("simulate", help="sample a dipole scene into a measurement CSV"), "measurement CSV")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--scene", help="scene JSON file")
    src.add_argument("--preset", default="desk", choices=["desk", "pair"])
    s.add_argument("--plan", default="uniform-random", choices=SamplingPlan.KINDS)
    s.add_argument("--bounds", type=lambda t: _floats(t, 6), default=[-0.5, -0.5, -0.5, 0.5, 0.5, 0.5],
                   help="xmin,ymin,zmin,xmax,ymax,zmax in metres (world frame)")
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--resolution", type=float)
    s.add_argument("--line-spacing", type=float)
    s.add_argument("--point-spacing", type=float)
    s.add_argument("--direction", default="horizontal", choices=["horizontal", "vertical"])
    noise = s.add_mutually_exclusive_group()
    noise.add_argument("--noise-std", type=float, default=0.0, help="noise std in tesla")
    noise.add_argument("--noise-rel", type=float, help="noise std as a fraction of the RMS field magnitude")
    s.add_argument("--frame", help="world-to-map transform JSON")
    s.add_argument("--frame-rotation", action="append", help="AXIS:DEGREES, repeatable, applied in order")
    s.add_argument("--frame-translation", type=lambda t: _floats(t, 3))
    s.add_argument("--clearance", type=float, default=0.05, help="dipole clearance radius in metres")
    s.add_argument("--truth-out", help="write the map-to-world (target-to-base) transform here")
    s.set_defaults(func=cmd_simulate)

    m = common(sub.add_parser("map", help="absorb measurements into a GP belief"), "belief JSON")
    m.add_argument("measurements")
    m.set_defaults(func=cmd_map)

    f = common(sub.add_parser("features", help="extract keypoints and descriptors"), "feature-set JSON")
    f.add_argument("belief")
    f.add_argument("--measurements", help="measurement CSV bounding the inference grid")
    f.set_defaults(func=cmd_features)

    r = common(sub.add_parser("register", help="register a target feature set to a base one"), "registration report JSON")
    r.add_argument("base")
    r.add_argument("target")
    r.add_argument("--base-belief", help="base-map belief for the fitness check")
    r.add_argument("--target-measurements", help="target measurement CSV used as fitness samples")
    r.set_defaults(func=cmd_register)

    e = common(sub.add_parser("eval", help="compare registration reports with the true transform"), "metrics JSON")
    e.add_argument("reports", nargs="+")
    e.add_argument("--truth", required=True, help="true target-to-base transform JSON")
    e.set_defaults(func=cmd_eval)

    g = common(sub.add_parser("export-grid", help="export |B|, DoH and variance over a slice"), "grid CSV")
    g.add_argument("belief")
    g.add_argument("--axis", default="z", choices=["x", "y", "z"])
    g.add_argument("--value", type=float, default=0.0, help="slice coordinate in metres")
    g.add_argument("--spacing", type=float, help="defaults to inference_spacing_m")
    g.add_argument("--extent", type=lambda t: _floats(t, 4), help="in-plane a_min,a_max,b_min,b_max")
    g.set_defaults(func=cmd_export_grid)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        status, code, msg = exc.status, exc.code, str(exc)
    except (ConfigError, ConfigurationError) as exc:
        status, code, msg = EXIT_INPUT, "CONFIG", str(exc)
    except SchemaError as exc:
        status, code, msg = EXIT_INPUT, "INPUT_SCHEMA", str(exc)
    except SingularityError as exc:
        status, code, msg = EXIT_INPUT, "SINGULARITY", str(exc)
    except FileNotFoundError as exc:
        status, code, msg = EXIT_INPUT, "INPUT_MISSING", f"{exc.filename}: {exc.strerror}"
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        status, code, msg = EXIT_INPUT, "INPUT_INVALID", str(exc)
    except NumericalError as exc:
        status, code, msg = EXIT_DOMAIN, "NUMERICAL", str(exc)
    print(f"magmatch: error[{code}]: {msg}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
