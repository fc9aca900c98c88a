"""Command-line entry point: ``naturalize <subcommand> ...``.

Every subcommand writes a ``run_manifest.json`` (resolved config, seeds, input
hashes, outputs, tool version) next to its outputs. Diagnostics go to
stderr; stdout carries only output paths and JSON summaries.

Exit codes: 0 success, 1 undefined metric, 2 usage error or missing input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .corpus import load_corpus, read_image, save_corpus, synth_corpus, write_image
from .detector import VARIANTS, BlackBoxScorer, load_detector, save_detector, train_detector
from .errors import CheckpointError, ScenarioError, UndefinedMetricError
from .evaluation import (
    DESK_BATCH_SIZE,
    DESK_EPOCHS,
    SCENARIOS,
    ScenarioConfig,
    evaluate_detector,
    run_scenario,
    transform_batch,
    write_reports,
    write_transformed,
)
from .model import load_checkpoint
from .training import TrainConfig, load_perceptual, load_state, train_loop

logger = logging.getLogger("naturalize")

EXIT_OK, EXIT_METRIC, EXIT_USAGE = 0, 1, 2
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")


class UsageError(Exception):
    """Bad flag values or missing inputs; maps to exit code 2."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "run_manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return path


def file_digest(path: str | Path) -> str:
    p = Path(path)
    h = hashlib.sha256()
    if p.is_dir():
        for child in sorted(p.rglob("*")):
            if child.is_file():
                h.update(str(child.relative_to(p)).encode())
                h.update(child.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _non_negative(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _limit_threads():
    """Honor NATURALIZE_THREADS by capping BLAS pools; returns the limiter (or None)."""
    raw = os.environ.get("NATURALIZE_THREADS")
    if not raw:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(raw)))


# ---------------------------------------------------------------- config resolution


def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """Defaults, overridden by a flat JSON ``--config`` file, overridden by explicit flags."""
    values = {}
    if args.config:
        doc = json.loads(_require(args.config, "config file").read_text())
        if not isinstance(doc, dict) or any(isinstance(v, (dict, list)) for v in doc.values()):
            raise UsageError("config file must be a flat JSON object")
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update(doc)
    for f in fields(TrainConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------- subcommands


def cmd_synth(args: argparse.Namespace) -> int:
    corpus = synth_corpus(args.kind, args.count, args.size, args.seed)
    out = Path(args.out)
    manifest = save_corpus(corpus, out)
    RunManifest(
        "synth",
        {"kind": args.kind, "count": args.count, "size": args.size},
        seeds={"seed": args.seed},
        outputs={"manifest": str(manifest), "corpus_digest": corpus.digest()},
    ).write(out)
    print(manifest)
    return EXIT_OK


def cmd_train_detector(args: argparse.Namespace) -> int:
    nat_path = _require(args.natural, "--natural corpus")
    cg_path = _require(args.cg, "--cg corpus")
    natural = load_corpus(nat_path, args.size)
    cg = load_corpus(cg_path, args.size)
    model = train_detector(args.variant, natural.images, cg.images, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_detector(model, out)
    RunManifest(
        "train-detector",
        {"variant": args.variant, "size": args.size},
        seeds={"seed": args.seed},
        inputs={"natural": file_digest(nat_path), "cg": file_digest(cg_path)},
        outputs={"detector": str(out), "fingerprint": model.fingerprint()},
    ).write(out.parent)
    print(out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_train_config(args)
    nat_path = _require(config.natural_path, "natural corpus (--natural)")
    cg_path = _require(config.cg_path, "CG corpus (--cg)")
    det_path = _require(config.detector_path, "detector checkpoint (--detector)")
    natural = load_corpus(nat_path, config.input_size)
    cg = load_corpus(cg_path, config.input_size)
    try:
        detector = load_detector(det_path)
    except CheckpointError as exc:
        raise UsageError(f"cannot read detector checkpoint: {exc}") from exc
    state = load_state(_require(args.resume, "--resume state"), config) if args.resume else None
    out = Path(args.out)
    state = train_loop(config, natural.images, cg.images, BlackBoxScorer(detector), load_perceptual(config), state, out)
    RunManifest(
        "train",
        asdict(config),
        seeds={"seed": config.seed, "perceptual_seed": config.perceptual_seed},
        inputs={"natural": file_digest(nat_path), "cg": file_digest(cg_path), "detector": file_digest(det_path)},
        outputs={
            "checkpoint": str(out / "checkpoint.hnet"),
            "resume": str(out / "resume.hopt"),
            "metrics": str(out / "metrics.jsonl"),
            "iterations": state.iteration,
        },
    ).write(out)
    print(out / "checkpoint.hnet")
    return EXIT_OK


def _collect_images(src: Path) -> list[Path]:
    if src.is_dir():
        return sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    return [src]


def cmd_transform(args: argparse.Namespace) -> int:
    ckpt = _require(args.checkpoint, "--checkpoint")
    src = _require(args.input, "--input")
    try:
        params = load_checkpoint(ckpt)
    except CheckpointError as exc:
        raise UsageError(f"cannot read checkpoint: {exc}") from exc
    size = params.arch.input_size
    paths = _collect_images(src)
    if not paths:
        raise UsageError(f"no images under {src}")
    images = np.stack([read_image(p, size) for p in paths])
    out_images = transform_batch(params, images)
    out = Path(args.out)
    if src.is_dir():
        manifest = write_transformed(out_images, [p.stem for p in paths], out)
        result = manifest
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_image(out, out_images[0])
        result = out
    RunManifest(
        "transform",
        {"input_size": size},
        inputs={"checkpoint": file_digest(ckpt), "input": file_digest(src)},
        outputs={"result": str(result)},
    ).write(out if src.is_dir() else out.parent)
    print(result)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if args.scenario:
        train = TrainConfig(
            alpha=args.alpha,
            batch_size=args.batch_size,
            iterations_per_epoch=args.iterations_per_epoch,
            epochs=args.epochs,
            seed=args.seed,
        )
        cfg = ScenarioConfig(train=train, n_train=args.n_train, n_eval=args.n_eval, size=args.size)
        result = run_scenario(SCENARIOS[args.scenario], cfg, out)
        summary = [r.summary() for r in result.all_reports()]
        RunManifest(
            "evaluate",
            {"scenario": args.scenario, **asdict(cfg.train), "n_train": cfg.n_train, "n_eval": cfg.n_eval},
            seeds={"seed": args.seed},
            outputs=result.artifacts,
        ).write(out)
        print(json.dumps({"reports": summary, "identity": result.identity, "failure_mode": result.failure_mode}))
        return EXIT_OK

    det_path = _require(args.detector, "--detector")
    if args.natural is None and args.cg is None:
        raise UsageError("give --scenario, or --detector with --natural and/or --cg")
    detector = load_detector(det_path)
    natural = load_corpus(_require(args.natural, "--natural corpus"), args.size) if args.natural else None
    cg = load_corpus(_require(args.cg, "--cg corpus"), args.size) if args.cg else None
    empty = np.zeros((0, 3, args.size, args.size), np.uint8)
    report = evaluate_detector(
        detector,
        natural.images if natural else empty,
        cg.images if cg else empty,
        natural.ids if natural else [],
        cg.ids if cg else [],
        scenario=args.tag,
        phase=args.phase,
    )
    json_path, csv_path = write_reports([report], out, "report")
    RunManifest(
        "evaluate",
        {"phase": args.phase, "tag": args.tag, "size": args.size},
        inputs={"detector": file_digest(det_path)},
        outputs={"report_json": str(json_path), "report_csv": str(csv_path)},
    ).write(out)
    summary = report.summary()
    print(json.dumps(summary))
    if summary["accuracy"] is None or summary["detection_rate"] is None:
        raise UndefinedMetricError("report has no CG images (detection rate) or no images at all")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="naturalize", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic natural-like or CG-like corpus")
    p.add_argument("--kind", choices=("natural", "cg"), required=True)
    p.add_argument("--count", type=_positive, required=True)
    p.add_argument("--size", type=_positive, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-detector", help="fit a differential-histogram detector")
    p.add_argument("--natural", required=True, help="natural corpus directory (with manifest.json)")
    p.add_argument("--cg", required=True, help="CG corpus directory")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="mlp")
    p.add_argument("--size", type=_positive, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="detector checkpoint path")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("train", help="train H-Net against a frozen detector")
    p.add_argument("--config", help="flat JSON config; explicit flags override it")
    p.add_argument("--natural", dest="natural_path")
    p.add_argument("--cg", dest="cg_path")
    p.add_argument("--detector", dest="detector_path")
    p.add_argument("--perceptual", dest="perceptual_path")
    p.add_argument("--alpha", type=float, help="adversarial weight (default 0.005)")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=_positive)
    p.add_argument("--iterations-per-epoch", dest="iterations_per_epoch", type=_positive)
    p.add_argument("--epochs", type=_non_negative)
    p.add_argument("--seed", type=int)
    p.add_argument("--input-size", dest="input_size", type=_positive)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=_non_negative)
    p.add_argument("--resume", help="resume state (.hopt) written by a previous run")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transform", help="apply a trained H-Net to an image or a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output PNG (file mode) or directory")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("evaluate", help="score corpora with a detector, or run a full scenario")
    p.add_argument("--scenario", choices=sorted(SCENARIOS))
    p.add_argument("--detector")
    p.add_argument("--natural")
    p.add_argument("--cg")
    p.add_argument("--phase", choices=("before", "after"), default="before")
    p.add_argument("--tag", default="")
    p.add_argument("--size", type=_positive, default=64)
    p.add_argument("--n-train", dest="n_train", type=_positive, default=400)
    p.add_argument("--n-eval", dest="n_eval", type=_positive, default=100)
    p.add_argument("--alpha", type=float, default=5e-3)
    p.add_argument("--batch-size", dest="batch_size", type=_positive, default=DESK_BATCH_SIZE)
    p.add_argument("--iterations-per-epoch", dest="iterations_per_epoch", type=_positive, default=50)
    p.add_argument("--epochs", type=_non_negative, default=DESK_EPOCHS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s"
    )
    limiter = _limit_threads()
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"naturalize {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UndefinedMetricError as exc:
        print(f"naturalize {args.command}: undefined metric: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except ScenarioError as exc:
        if isinstance(exc.cause, UndefinedMetricError):
            print(f"naturalize {args.command}: undefined metric: {exc}", file=sys.stderr)
            return EXIT_METRIC
        raise
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
