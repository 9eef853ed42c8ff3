"""Command-line pipeline: synth, train, render, eval, gradcheck.

Exit codes are 0 on success, 1 for invalid input (bad flags, missing paths,
malformed config) and 2 when a run fails after validation. Every nonzero exit
writes one JSON object to stderr.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint
from .data import SynthSpec, generate_synthetic, load_dataset, save_dataset, write_color, write_pfm
from .deformation import deform_scene
from .errors import ConfigurationError, DatasetError, InvalidParameterError
from .gradients import PARAM_CLASSES, gradcheck, make_check_problem
from .metrics import evaluate
from .rasterizer import RenderConfig, render
from .trainer import TrainConfig, manifest, train

log = logging.getLogger("anchorsplat")

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    """Raised instead of argparse's own exit so the exit code and JSON line stay uniform."""


class GradcheckFailure(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise ConfigurationError(f"{p}: expected a JSON object of config keys")
    return d


def _write_manifest(out: Path, command: str, argv, config: dict, seed: int, extra=None) -> None:
    d = {"command": command, "argv": list(argv), "engine_version": __version__, "seed": seed,
         "config": config}
    if extra:
        d.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise DatasetError(f"{what} directory not found: {p}")
    return p


def _model_render_config(model: Path, workers: int) -> RenderConfig:
    # the anchor falloff used in training is recorded in the model's manifest
    lambda_e = TrainConfig.lambda_e
    mf = model / "manifest.json"
    if mf.is_file():
        lambda_e = json.loads(mf.read_text()).get("config", {}).get("lambda_e", lambda_e)
    return RenderConfig(lambda_e=lambda_e, workers=workers)


def _select_frames(dataset, which: str) -> list[int]:
    if which == "test":
        return list(dataset.test)
    if which == "train":
        return list(dataset.train)
    if which == "all":
        return list(range(len(dataset.frames)))
    try:
        idx = [int(s) for s in which.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"--frames expects test, train, all or comma-separated indices, got {which!r}") from None
    bad = [i for i in idx if not 0 <= i < len(dataset.frames)]
    if bad:
        raise ConfigurationError(f"frame indices out of range: {bad}")
    return idx


def _renders(dataset, scene, field_, indices, config):
    for i in indices:
        frame = dataset.frames[i]
        yield frame, render(deform_scene(scene, field_, frame.time), dataset.camera_for(frame), config)


# -- subcommands

def cmd_synth(args, argv) -> int:
    cfg = _read_config(args.config)
    known = {f.name for f in fields(SynthSpec)}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigurationError(f"unknown synth config keys: {sorted(unknown)}")
    for key in ("motion", "frames", "seed"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    for key in ("shift", "depth_range", "scale_range"):
        if key in cfg:
            cfg[key] = tuple(cfg[key])
    try:
        spec = SynthSpec(**cfg)
    except TypeError as exc:
        raise ConfigurationError(f"bad synth config: {exc}") from None
    if spec.frames < 2:
        raise ConfigurationError("synthetic datasets need at least 2 frames")
    dataset, truth = generate_synthetic(spec, RenderConfig(workers=args.workers or 1))
    out = Path(args.out)
    save_dataset(dataset, out, color_format=args.format)
    (out / "truth.json").write_text(json.dumps(truth.to_json()) + "\n")
    _write_manifest(out, "synth", argv, asdict(spec), spec.seed)
    print(f"wrote {len(dataset.frames)} frames ({len(dataset.train)} train / {len(dataset.test)} test) to {out}")
    return 0


def cmd_train(args, argv) -> int:
    data = _require_dir(args.data, "dataset")
    cfg = _read_config(args.config)
    overrides = {"seed": args.seed, "workers": args.workers, "anchors": args.anchors,
                 "deform_backend": args.deform_backend, "iterations": args.iterations}
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    config = TrainConfig.from_dict(cfg)
    dataset = load_dataset(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = manifest(config, "train", {"argv": list(argv)})
    (out / "manifest.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    result = train(dataset, config, out_dir=out)
    print(f"trained {config.iterations} iterations, {len(result.scene)} primitives, "
          f"final test PSNR {result.final_psnr:.3f} dB")
    return 0


def cmd_render(args, argv) -> int:
    data = _require_dir(args.data, "dataset")
    model = _require_dir(args.model, "model")
    dataset = load_dataset(data)
    scene, field_ = load_checkpoint(model)
    config = _model_render_config(model, args.workers or 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    indices = _select_frames(dataset, args.frames)
    for frame, res in _renders(dataset, scene, field_, indices, config):
        write_color(out / f"{frame.index:06d}_color.{args.format}", res.color)
        write_pfm(out / f"{frame.index:06d}_depth.pfm", res.depth)
    _write_manifest(out, "render", argv, {"frames": indices, "lambda_e": config.lambda_e}, 0)
    print(f"rendered {len(indices)} frames to {out}")
    return 0


def cmd_eval(args, argv) -> int:
    data = _require_dir(args.data, "dataset")
    model = _require_dir(args.model, "model")
    dataset = load_dataset(data)
    scene, field_ = load_checkpoint(model)
    config = _model_render_config(model, args.workers or 1)
    indices = _select_frames(dataset, args.frames)
    frames, colors = [], []
    for frame, res in _renders(dataset, scene, field_, indices, config):
        frames.append(frame)
        colors.append(res.color)
    report = evaluate(colors, frames)
    lines = ["frame,psnr,ssim"]
    lines += [f"{i},{p:.6f},{s:.6f}" for i, p, s in report.per_frame]
    lines.append(f"mean,{report.psnr:.6f},{report.ssim:.6f}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(text)
        _write_manifest(out, "eval", argv, {"frames": indices}, 0)
    return 0


def cmd_gradcheck(args, argv) -> int:
    seed = 0 if args.seed is None else args.seed
    errs = gradcheck(make_check_problem(seed))
    width = max(map(len, PARAM_CLASSES))
    print(f"{'class':<{width}}  max_rel_error  status")
    ok = True
    for cls, err in errs.items():
        passed = err <= args.tolerance
        ok &= passed
        print(f"{cls:<{width}}  {err:13.3e}  {'ok' if passed else 'FAIL'}")
    if args.out:
        _write_manifest(Path(args.out), "gradcheck", argv, {"tolerance": args.tolerance, "errors": errs},
                        seed)
    if not ok:
        raise GradcheckFailure(f"gradient check failed for seed {seed}: "
                               + ", ".join(c for c, e in errs.items() if e > args.tolerance))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anchorsplat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--workers", type=int, default=None, help="pixel-parallel threads (1 is deterministic)")
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--motion", choices=["static", "global_shift", "periodic", "composite"])
    sp.add_argument("--frames", type=int)
    sp.add_argument("--config", help="JSON object of synthetic scene settings")
    sp.add_argument("--format", choices=["png", "ppm"], default="png")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="fit a scene and deformation field")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="JSON object of TrainConfig keys")
    sp.add_argument("--deform-backend", choices=["edm", "gs", "fps"])
    sp.add_argument("--anchors", type=int)
    sp.add_argument("--iterations", type=int)
    common(sp)
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (("render", cmd_render, "render frames from a trained model"),
                                 ("eval", cmd_eval, "PSNR/SSIM of a trained model")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--data", required=True)
        sp.add_argument("--model", required=True)
        sp.add_argument("--out", required=(name == "render"))
        sp.add_argument("--frames", default="test", help="test, train, all or comma-separated indices")
        if name == "render":
            sp.add_argument("--format", choices=["png", "ppm"], default="png")
        common(sp, seed=False)
        sp.set_defaults(func=func)

    sp = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    sp.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=os.environ.get("COLORGS_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.workers is not None and args.workers < 1:
            raise ConfigurationError("--workers must be at least 1")
    except UsageError as exc:
        return _fail(1, exc)
    except ConfigurationError as exc:
        return _fail(1, exc)
    try:
        return args.func(args, argv)
    except (ConfigurationError, DatasetError, InvalidParameterError) as exc:
        return _fail(1, exc)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        log.debug("run failed", exc_info=True)
        return _fail(2, exc)


if __name__ == "__main__":
    sys.exit(main())
