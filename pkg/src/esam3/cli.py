"""Command-line entry point: gen-data, train, eval, bench-memory."""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_PRECONDITION, EXIT_NUMERICAL = 0, 2, 3, 4
MANIFEST_NAME = "run_manifest.json"

log = logging.getLogger("esam3")


class PreconditionError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: str | None
    seed: int | None
    git_describe: str
    start: str
    end: str | None = None
    status: str = "running"
    exit_code: int | None = None
    error: str | None = None
    outputs: dict[str, str] = field(default_factory=dict)

    def write(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / MANIFEST_NAME).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _git_describe() -> str:
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise PreconditionError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise PreconditionError(f"{path}: invalid JSON ({exc})") from None


# commands -----------------------------------------------------------------


def cmd_gen_data(args, manifest: RunManifest) -> None:
    from .pcs_sim.io import DatasetConfig, write_dataset
    from .pcs_sim.scenes import SceneConfigError

    try:
        cfg = DatasetConfig.from_dict(_read_json(args.config)) if args.config else DatasetConfig()
    except SceneConfigError as exc:
        raise PreconditionError(f"bad dataset config: {exc}") from None
    if args.scenes is not None:
        cfg.num_scenes = args.scenes
    if args.clips is not None:
        cfg.num_clips = args.clips
    try:
        write_dataset(cfg, args.out, args.seed)
    except PermissionError as exc:
        raise PreconditionError(f"cannot write to {args.out}: {exc}") from None
    manifest.outputs["dataset"] = str(args.out)
    print(f"wrote {cfg.num_scenes} scenes and {cfg.num_clips} clips to {args.out}")


def _stage_config(args):
    from .schedule.config import ConfigError, StageConfig, preset

    try:
        cfg = StageConfig.load(args.config) if args.config else preset(args.stage, args.preset)
    except (ConfigError, FileNotFoundError) as exc:
        raise PreconditionError(f"bad stage config: {exc}") from None
    if cfg.stage != args.stage:
        raise PreconditionError(f"config is for stage {cfg.stage}, but --stage {args.stage} was given")
    overrides = {}
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.unfreeze_encoder:
        overrides["unfreeze_encoder"] = True
    try:
        return cfg.with_overrides(**overrides) if overrides else cfg
    except ConfigError as exc:
        raise PreconditionError(str(exc)) from None


def cmd_train(args, manifest: RunManifest) -> None:
    from .model import ModelConfig
    from .pcs_sim.io import read_dataset
    from .promptloop.cache import TeacherCache
    from .promptloop.teacher import Teacher, TeacherConfig
    from .schedule import zoo
    from .schedule.checkpoint import CheckpointError
    from .schedule.runner import DatasetSource, MissingCheckpointError, ProceduralSource, run_stage

    cfg = _stage_config(args)
    manifest.seed = cfg.seed
    if cfg.stage > 1 and not args.from_checkpoint:
        raise PreconditionError(f"stage {cfg.stage} requires --from-checkpoint (a stage-{cfg.stage - 1} checkpoint)")
    source = ProceduralSource(seed=cfg.seed)
    if args.data:
        try:
            source = DatasetSource(read_dataset(args.data))
        except (FileNotFoundError, ValueError) as exc:
            raise PreconditionError(str(exc)) from None
    model_config = zoo.get(args.variant).model_config() if args.variant else ModelConfig()
    cache = TeacherCache() if args.cache else None
    teacher = Teacher(TeacherConfig(), model_config, cache)
    out = Path(args.out)
    try:
        result = run_stage(
            cfg,
            source,
            checkpoint=args.from_checkpoint,
            out_dir=out,
            model_config=model_config,
            teacher=teacher,
            log_path=out / "metrics.jsonl",
        )
    except (MissingCheckpointError, CheckpointError) as exc:
        raise PreconditionError(str(exc)) from None
    manifest.outputs |= {"checkpoint": str(result.checkpoint), "metrics": str(out / "metrics.jsonl")}
    last = result.records[-1]
    print(f"stage {cfg.stage}: {cfg.total_steps} steps, final loss {last['loss_total']:.4f} -> {result.checkpoint}")


def cmd_eval(args, manifest: RunManifest) -> None:
    from .evaluate import EMPTY, ORACLE, jf_report, miou_report, with_ema
    from .model import ModelConfig
    from .pcs_sim.io import read_dataset
    from .schedule.checkpoint import CheckpointError, load_checkpoint

    try:
        data = read_dataset(args.data)
    except (FileNotFoundError, ValueError) as exc:
        raise PreconditionError(str(exc)) from None
    if args.checkpoint in (ORACLE, EMPTY):
        predictor, stride = args.checkpoint, ModelConfig().stride
    else:
        try:
            ckpt = load_checkpoint(args.checkpoint)
        except CheckpointError as exc:
            raise PreconditionError(str(exc)) from None
        predictor = with_ema(ckpt.model, ckpt.ema if args.ema else None)
        stride = ckpt.model.config.stride
    reports = {}
    for metric in args.metrics:
        if metric == "miou":
            if not data.scenes:
                raise PreconditionError("mIoU needs image scenes; the dataset has none")
            reports["miou"] = miou_report(predictor, data.scenes, stride, seed=args.seed)
        else:
            if not data.clips:
                raise PreconditionError("J&F needs video clips; the dataset has none")
            reports["jf"] = jf_report(predictor, data.clips, stride)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"checkpoint": str(args.checkpoint), "data": str(args.data), "reports": reports}, indent=1, sort_keys=True) + "\n")
    manifest.outputs["report"] = str(out)
    for name, rep in reports.items():
        print(f"{name}: {rep['aggregate']}")


def cmd_bench_memory(args, manifest: RunManifest) -> None:
    from .memory.bench import benchmark, write_csv

    rows = [benchmark(n, args.k, args.c, args.dk, args.repeats, seed=args.seed) for n in args.tokens]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out)
    manifest.outputs["csv"] = str(out)
    for r in rows:
        ratio = r["flops_dense"] / r["flops_compressed"]
        print(f"tokens={r['n_tokens']} k={r['k']}: flop ratio {ratio:.1f}, {r['wall_us_dense']:.1f} us vs {r['wall_us_compressed']:.1f} us")


# parser -------------------------------------------------------------------


def _positive(v: str) -> int:
    n = int(v)
    if n <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esam3", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    g.add_argument("--config", help="JSON with 'scene', 'num_scenes', 'num_clips'")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--scenes", type=int, help="override num_scenes")
    g.add_argument("--clips", type=int, help="override num_clips")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--config", help="stage config JSON (defaults to the chosen preset)")
    t.add_argument("--preset", choices=("desk", "published"), default="desk")
    t.add_argument("--data", help="dataset directory; procedural data when omitted")
    t.add_argument("--from-checkpoint", dest="from_checkpoint")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, help="override total_steps")
    t.add_argument("--seed", type=int)
    t.add_argument("--variant", help="model zoo entry, e.g. ES-RV-S")
    t.add_argument("--unfreeze-encoder", action="store_true")
    t.add_argument("--cache", action="store_true", help="cache teacher features on disk")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True, help="checkpoint directory, 'oracle' or 'empty'")
    e.add_argument("--data", required=True)
    e.add_argument("--metrics", nargs="+", choices=("miou", "jf"), default=["miou"])
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--ema", action="store_true", help="evaluate EMA weights when the checkpoint has them")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-memory", help="dense vs compressed readout cost")
    b.add_argument("--tokens", type=_positive, nargs="+", default=[128, 512, 1024, 4096])
    b.add_argument("--k", type=_positive, default=128)
    b.add_argument("--c", type=_positive, default=64)
    b.add_argument("--dk", type=_positive, default=64)
    b.add_argument("--repeats", type=_positive, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench_memory)
    return p


def _manifest_dir(args) -> Path:
    out = Path(args.out)
    return out.parent if out.suffix else out


def main(argv: list[str] | None = None) -> int:
    from .numerics.tensor import NumericalError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    manifest = RunManifest(args.command, getattr(args, "config", None), getattr(args, "seed", None), _git_describe(), _now())
    code = EXIT_OK
    try:
        args.func(args, manifest)
        manifest.status = "ok"
    except PreconditionError as exc:
        code, manifest.status, manifest.error = EXIT_PRECONDITION, "error", str(exc)
        print(f"error: {exc}", file=sys.stderr)
    except NumericalError as exc:
        code, manifest.status, manifest.error = EXIT_NUMERICAL, "error", str(exc)
        print(f"numerical error: {exc}", file=sys.stderr)
    finally:
        manifest.end = _now()
        manifest.exit_code = code
        try:
            manifest.write(_manifest_dir(args))
        except OSError as exc:
            print(f"warning: could not write run manifest: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
