"""Batch command-line front door: scene generation, training, detection,
evaluation, and the one-shot end-to-end reproduction run.

Exit codes: 0 success, 1 reproduction assertion failure, 2 I/O or config
errors. HUTD_THREADS caps BLAS/worker parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, config as config_mod, detect, evaluate, scene as scene_mod, spl
from .config import ConfigError, build_configs, load_config_file, snapshot
from .detect import DetectError
from .evaluate import EvalError
from .grad import GradError
from .hlcl import AugmentError
from .rgc import ClusteringError
from .scene import SceneError, Spectrum
from .spl import SplError

_USER_ERRORS = (
    ConfigError, SceneError, SplError, DetectError, EvalError,
    GradError, AugmentError, ClusteringError, OSError,
)

DETECTOR_CHOICES = ("sam", "cem", "sam-raw", "cem-raw")


class ReproFailure(Exception):
    """An end-to-end acceptance assertion did not hold."""


def _load_configs(args) -> tuple:
    values = load_config_file(args.config) if args.config else {}
    scene_cfg, spl_cfg = build_configs(values)
    if getattr(args, "seed", None) is not None:
        scene_cfg.seed = args.seed
        spl_cfg.seed = args.seed
    for flag, attr in (
        ("rounds", "rounds"), ("epochs", "epochs_per_round"),
        ("k", "k"), ("epsilon", "epsilon"), ("attack", "attack"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(spl_cfg, attr, value)
    balanced = getattr(args, "balanced", None)
    if balanced is not None:
        spl_cfg.balanced = balanced == "on"
    spl_cfg.validate()
    return scene_cfg, spl_cfg


def _normalized_scene(scene_dir):
    """Load a scene dir and min-max normalize cube and reference together."""
    cube, gt, ref = scene_mod.load_scene_dir(scene_dir)
    lo, hi = scene_mod.scene_min_max(cube)
    if hi <= lo:
        raise SceneError("scene cube is constant; cannot normalize")
    norm = scene_mod.HsiCube((cube.data - lo) / (hi - lo), cube.wavelengths)
    ref_values = np.clip((ref.values - lo) / (hi - lo), 0.0, None)
    return norm, gt, Spectrum(ref_values, ref.wavelengths)


def _write_manifest(out_dir, payload) -> str:
    path = Path(out_dir) / "manifest.json"
    payload = dict(payload)
    payload["tool_version"] = __version__
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return str(path)


def cmd_generate(args) -> int:
    scene_cfg, spl_cfg = _load_configs(args)
    t0 = time.monotonic()
    cube, gt, ref = scene_mod.synth_scene(scene_cfg)
    paths = scene_mod.save_scene_dir(args.out, cube, gt, ref)
    cfg_path = Path(args.out) / "config_snapshot.cfg"
    config_mod.write_config_file(snapshot(scene_cfg, spl_cfg), cfg_path)
    paths["config_snapshot"] = str(cfg_path)
    _write_manifest(args.out, {
        "command": "generate",
        "seed": scene_cfg.seed,
        "config": snapshot(scene_cfg, spl_cfg),
        "artifacts": paths,
        "wall_times_s": {"generate": time.monotonic() - t0},
    })
    print(f"scene written to {args.out}")
    return 0


def cmd_train(args) -> int:
    scene_cfg, spl_cfg = _load_configs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cube, _, ref = _normalized_scene(args.scene)
    ckpt_path = out / "checkpoint.bin"
    t0 = time.monotonic()
    if args.resume:
        state = spl.resume(args.resume)
        state = spl.resume_run(state, cube, ref, checkpoint_path=ckpt_path)
    else:
        state = spl.run(cube, ref, spl_cfg, checkpoint_path=ckpt_path)
    trace_path = out / "trace.csv"
    metrics_path = out / "metrics.csv"
    spl.write_trace_csv(state, trace_path)
    spl.write_metrics_csv(state, metrics_path)
    _write_manifest(out, {
        "command": "train",
        "seed": state.cfg.seed,
        "config": snapshot(scene_cfg, state.cfg),
        "artifacts": {
            "checkpoint": str(ckpt_path),
            "trace": str(trace_path),
            "metrics": str(metrics_path),
        },
        "wall_times_s": {"train": time.monotonic() - t0},
    })
    last = state.trace[-1]
    print(
        f"trained {last['round']} rounds; reliable fraction "
        f"{last['reliable_fraction']:.3f}; checkpoint at {ckpt_path}"
    )
    return 0


def cmd_detect(args) -> int:
    cube, _, ref = _normalized_scene(args.scene)
    bundle = None
    if args.detector in ("sam", "cem"):
        if not args.checkpoint:
            raise DetectError(f"detector {args.detector!r} requires --checkpoint")
        bundle = spl.resume(args.checkpoint).bundle
    t0 = time.monotonic()
    score_map = detect.run_detector(args.detector, cube, ref, bundle)
    paths = detect.save_score_map(score_map, args.out)
    _write_manifest(args.out, {
        "command": "detect",
        "detector": args.detector,
        "artifacts": paths,
        "wall_times_s": {"detect": time.monotonic() - t0},
    })
    print(f"{args.detector} score map written to {args.out}")
    return 0


def _load_score_maps(scores_dir, mask_shape):
    maps = {}
    for raw in sorted(Path(scores_dir).glob("*.f32")):
        data = np.frombuffer(raw.read_bytes(), dtype="<f4").astype(np.float64)
        expected = mask_shape[0] * mask_shape[1]
        if data.size != expected:
            raise EvalError(
                f"{raw.name}: {data.size} scores do not fit ground truth "
                f"{mask_shape[0]}x{mask_shape[1]}"
            )
        maps[raw.stem] = data.reshape(mask_shape)
    if not maps:
        raise EvalError(f"no .f32 score maps found in {scores_dir}")
    return maps


def cmd_eval(args) -> int:
    gt = scene_mod.load_mask(Path(args.scene) / "truth.pgm")
    maps = _load_score_maps(args.scores, gt.mask.shape)
    t0 = time.monotonic()
    paths = evaluate.report(maps, gt, args.out)
    _write_manifest(args.out, {
        "command": "eval",
        "artifacts": paths,
        "wall_times_s": {"eval": time.monotonic() - t0},
    })
    print(f"AUC report written to {paths['auc_report']}")
    return 0


def run_repro(config_path, out_dir, seed=None) -> dict:
    """Full pipeline: generate, train, detect with all four detectors,
    evaluate, then check the qualitative-ordering and self-paced-trend
    assertions. Returns the manifest payload."""
    values = load_config_file(config_path) if config_path else {}
    scene_cfg, spl_cfg = build_configs(values)
    if seed is not None:
        scene_cfg.seed = seed
        spl_cfg.seed = seed
    out = Path(out_dir)
    stages = {}
    artifacts = {}

    t0 = time.monotonic()
    cube, gt, ref = scene_mod.synth_scene(scene_cfg)
    scene_dir = out / "scene"
    artifacts.update(scene_mod.save_scene_dir(scene_dir, cube, gt, ref))
    stages["generate"] = time.monotonic() - t0

    t0 = time.monotonic()
    norm_cube, gt, norm_ref = _normalized_scene(scene_dir)
    train_dir = out / "train"
    train_dir.mkdir(parents=True, exist_ok=True)
    ckpt = train_dir / "checkpoint.bin"
    state = spl.run(norm_cube, norm_ref, spl_cfg, checkpoint_path=ckpt)
    spl.write_trace_csv(state, train_dir / "trace.csv")
    spl.write_metrics_csv(state, train_dir / "metrics.csv")
    artifacts["checkpoint"] = str(ckpt)
    artifacts["trace"] = str(train_dir / "trace.csv")
    artifacts["metrics"] = str(train_dir / "metrics.csv")
    stages["train"] = time.monotonic() - t0

    t0 = time.monotonic()
    detect_dir = out / "detect"
    score_maps = {}
    for name in DETECTOR_CHOICES:
        bundle = state.bundle if name in ("sam", "cem") else None
        score_map = detect.run_detector(name, norm_cube, norm_ref, bundle)
        score_maps[name] = score_map
        for kind, path in detect.save_score_map(score_map, detect_dir).items():
            artifacts[f"{name}_{kind}"] = path
    stages["detect"] = time.monotonic() - t0

    t0 = time.monotonic()
    eval_dir = out / "eval"
    artifacts.update(evaluate.report(score_maps, gt, eval_dir))
    stages["eval"] = time.monotonic() - t0

    aucs = {name: evaluate.roc(sm, gt).auc_pd_pf for name, sm in score_maps.items()}
    trend = [row["reliable_fraction"] for row in state.trace]
    checks = {
        "sam_margin": aucs["sam"] - aucs["sam-raw"],
        "cem_margin": aucs["cem"] - aucs["cem-raw"],
        "reliable_fraction_first": trend[0],
        "reliable_fraction_last": trend[-1],
    }
    failures = []
    if checks["sam_margin"] < 0.05:
        failures.append(
            f"embedded SAM must beat raw SAM by 0.05 AUC; margin={checks['sam_margin']:.4f}"
        )
    if checks["cem_margin"] < 0.05:
        failures.append(
            f"embedded CEM must beat raw CEM by 0.05 AUC; margin={checks['cem_margin']:.4f}"
        )
    if trend[-1] < trend[0]:
        failures.append(
            f"reliable fraction fell from {trend[0]:.4f} to {trend[-1]:.4f}"
        )

    payload = {
        "command": "repro",
        "seed": spl_cfg.seed,
        "config": snapshot(scene_cfg, spl_cfg),
        "artifacts": artifacts,
        "wall_times_s": stages,
        "auc_pd_pf": aucs,
        "checks": checks,
        "failures": failures,
    }
    _write_manifest(out, payload)
    return payload


def cmd_repro(args) -> int:
    payload = run_repro(args.config, args.out, seed=args.seed)
    for name, value in payload["auc_pd_pf"].items():
        print(f"AUC(Pd,Pf) {name}: {value:.4f}")
    if payload["failures"]:
        for failure in payload["failures"]:
            print(f"FAIL: {failure}", file=sys.stderr)
        return 1
    print("all end-to-end checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hutd",
        description="Self-supervised hyperspectral underwater target detection",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scene=False, train_flags=False):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override scene and training seeds")
        p.add_argument("--out", required=True, help="output directory")
        if scene:
            p.add_argument("--scene", required=True, help="scene directory")
        if train_flags:
            p.add_argument("--rounds", type=int)
            p.add_argument("--epochs", type=int, help="epochs per self-paced round")
            p.add_argument("--k", type=int, help="free cluster count")
            p.add_argument("--epsilon", type=float, help="perturbation budget")
            p.add_argument("--attack", choices=("fgsm", "pgd"))
            p.add_argument("--balanced", choices=("on", "off"))

    p_gen = sub.add_parser("generate", help="synthesize a nearshore scene")
    common(p_gen)
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="run self-paced training on a scene")
    common(p_train, scene=True, train_flags=True)
    p_train.add_argument("--resume", help="checkpoint file to continue from")
    p_train.set_defaults(func=cmd_train)

    p_detect = sub.add_parser("detect", help="score a scene with one detector")
    common(p_detect, scene=True)
    p_detect.add_argument("--detector", required=True, choices=DETECTOR_CHOICES)
    p_detect.add_argument("--checkpoint", help="training checkpoint (embedding detectors)")
    p_detect.set_defaults(func=cmd_detect)

    p_eval = sub.add_parser("eval", help="ROC/AUC report over score maps")
    common(p_eval, scene=True)
    p_eval.add_argument("--scores", required=True, help="directory of .f32 score maps")
    p_eval.set_defaults(func=cmd_eval)

    p_repro = sub.add_parser("repro", help="full pipeline plus end-to-end checks")
    common(p_repro)
    p_repro.set_defaults(func=cmd_repro)
    return parser


def _apply_thread_cap() -> None:
    cap = os.environ.get("HUTD_THREADS")
    if not cap:
        return
    try:
        limit = max(1, int(cap))
    except ValueError:
        raise ConfigError(f"HUTD_THREADS must be an integer, got {cap!r}")
    import threadpoolctl

    threadpoolctl.threadpool_limits(limits=limit)


def main(argv=None) -> int:
    try:
        _apply_thread_cap()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ReproFailure as exc:
        print(f"FAIL: {exc}", file=sys.stderr)
        return 1
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
