"""Command-line entry point: preprocess / train / profile / eval.

One binary, four subcommands, one root seed. Configuration comes from
a JSON file (--config), CUEFEED_* environment variables, and flags, in
that precedence order. Outputs are deterministic given inputs and seed;
every artifact embeds the resolved config hash.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import (
    ENV_PREFIX,
    RunConfig,
    config_hash,
    config_to_dict,
    describe_config,
    load_config,
)
from .data import (
    PreprocessSpec,
    load_image,
    load_manifest,
    materialize_training_sample,
    preprocess,
    training_sample_from_record,
    write_manifest,
)
from .detectors import HoiVocabulary
from .errors import ConfigError, DataError, NumericError
from .evaluation import evaluate_generations
from .profiling import emit_curves, profile_losses
from .train import (
    Trainer,
    build_phase_dataset,
    default_detector_bundle,
    make_profile_denoiser,
)

_PREPROCESS_SALT = 5407


def _build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {key} = {default}" for key, default in describe_config())
    epilog = (
        "configuration keys and defaults (set in the --config JSON file, or via\n"
        f"environment variables {ENV_PREFIX}SECTION__KEY, e.g. "
        f"{ENV_PREFIX}SCHEDULE__NUM_STEPS=500):\n" + keys
    )
    parser = argparse.ArgumentParser(
        prog="cuefeed",
        description="Detector-feedback diffusion fine-tuning toolkit.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--parallel", type=int, help="worker count for independent work items")

    p = sub.add_parser("preprocess", help="resize/crop a manifest dataset deterministically")
    common(p)
    p.add_argument("--manifest", required=True, help="input manifest (JSON Lines)")
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser("train", help="run the configured training phases")
    common(p)
    p.add_argument("--phase", help="run only the named phase")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("profile", help="profile feedback losses across timesteps")
    common(p)
    p.add_argument(
        "--t-grid",
        help="timestep grid: a single integer stride (e.g. 50) or a comma list (e.g. 0,100,400)",
    )
    p.add_argument("--checkpoint", help="profile this checkpoint instead of a fresh model")
    p.set_defaults(handler=cmd_profile)

    p = sub.add_parser("eval", help="score generated images against a reference manifest")
    common(p)
    p.add_argument("--manifest", required=True, help="reference manifest (JSON Lines)")
    p.add_argument("--gen", required=True, help="directory of generated images")
    p.set_defaults(handler=cmd_eval)
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.parallel is not None:
        overrides["parallel"] = args.parallel
    return load_config(args.config, overrides=overrides)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _vocab(config: RunConfig) -> HoiVocabulary:
    return HoiVocabulary(tuple((v, o) for v, o in config.hoi_classes))


def cmd_preprocess(args: argparse.Namespace, config: RunConfig) -> int:
    vocab = _vocab(config)
    records = load_manifest(args.manifest, vocab=vocab)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = PreprocessSpec(target_side=config.preprocess.target_side, crop=config.preprocess.crop)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _PREPROCESS_SALT]))
    root = Path(args.manifest).parent

    out_records = []
    totals = None
    for i, record in enumerate(records):
        sample, stats, _ = preprocess(record, spec, rng, root=root, vocab=vocab)
        totals = stats if totals is None else totals.merge(stats)
        out_records.append(
            materialize_training_sample(sample, out, stem=f"sample_{i:05d}", vocab=vocab)
        )
    write_manifest(out_records, out / "manifest.jsonl")

    stats_payload = {
        "config_hash": config_hash(config),
        "samples": totals.samples if totals else 0,
        "subjects": totals.subjects if totals else 0,
        "dropped_subjects": totals.dropped_subjects if totals else 0,
        "dropped_gaze": totals.dropped_gaze if totals else 0,
        "dropped_keypoints": totals.dropped_keypoints if totals else 0,
    }
    _write_json(out / "preprocess_stats.json", stats_payload)
    if not records:
        print("warning: input manifest has no records; wrote an empty dataset", file=sys.stderr)
    print(
        f"preprocessed {stats_payload['samples']} samples "
        f"({stats_payload['subjects']} subjects, "
        f"{stats_payload['dropped_subjects']} subjects / "
        f"{stats_payload['dropped_gaze']} gaze / "
        f"{stats_payload['dropped_keypoints']} keypoints dropped) -> {out}"
    )
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    trainer = Trainer(config)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {"config_hash": trainer.config_hash, **config_to_dict(config)})
    summary = trainer.run_phases(out, only_phase=args.phase)
    _write_json(out / "run_summary.json", summary)
    print(
        f"trained {summary['steps']} steps, "
        f"{len(summary['checkpoints'])} checkpoints -> {config.out_dir}"
    )
    return 0


def _parse_t_grid(text: str | None, num_steps: int):
    if text is None:
        return None
    text = text.strip()
    try:
        if "," in text:
            grid = [int(p) for p in text.split(",") if p.strip()]
        else:
            stride = int(text)
            if stride <= 0:
                raise ValueError("stride must be positive")
            grid = list(range(0, num_steps, stride))
    except ValueError as exc:
        raise ConfigError(f"bad --t-grid {text!r}: {exc}") from exc
    if not grid:
        raise ConfigError("--t-grid resolved to an empty grid")
    for t in grid:
        if not 0 <= t < num_steps:
            raise ConfigError(f"--t-grid value {t} outside [0, {num_steps})")
    return grid


def cmd_profile(args: argparse.Namespace, config: RunConfig) -> int:
    trainer = Trainer(config)
    if args.checkpoint:
        trainer.load_checkpoint(args.checkpoint)
    t_grid = _parse_t_grid(args.t_grid, config.schedule.num_steps)
    dataset = build_phase_dataset(config.phases[0], config, trainer.vocab)
    predict = make_profile_denoiser(trainer.denoiser, trainer.cond_encoder)
    curves = profile_losses(
        dataset,
        predict,
        trainer.detectors,
        trainer.schedule,
        t_grid=t_grid,
        seed=config.seed,
        workers=max(1, config.parallel),
    )
    paths = emit_curves(
        curves, config.out_dir, header_comment=f"config_hash: {trainer.config_hash}"
    )
    print(f"profiled {len(dataset)} samples -> {paths['csv']}, {paths['png']}")
    return 0


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    vocab = _vocab(config)
    gen_dir = Path(args.gen)
    if not gen_dir.is_dir():
        raise DataError(f"generated-image directory {gen_dir} does not exist")
    if not any(gen_dir.iterdir()):
        raise DataError(f"generated-image directory {gen_dir} is empty")
    records = load_manifest(args.manifest, vocab=vocab)
    if not records:
        raise DataError(f"reference manifest {args.manifest} has no records")
    root = Path(args.manifest).parent

    detectors = default_detector_bundle(config, vocab)
    pairs = []
    for record in records:
        gen_path = gen_dir / Path(record.image).name
        if not gen_path.exists():
            raise DataError(f"no generated image {gen_path} for reference {record.image}")
        sample = training_sample_from_record(record, root, vocab=vocab)
        pairs.append((sample, load_image(gen_path)))

    report = evaluate_generations(
        pairs,
        face_embedder=detectors.face_embedder,
        gaze_detector=detectors.gaze,
        hoi_detector=detectors.hoi,
        num_classes=len(vocab),
    )
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval_report.json", {"config_hash": config_hash(config), **report.to_dict()})
    print(report.render_text())
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = _resolve_config(args)
        return args.handler(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
