"""
Command-line entry points
gen-data, train, sample, ablate, plot, bridge-train and bridge-sample, with
exit codes 0 (success), 1 (usage), 2 (numerical failure) and 3 (I/O).
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import torch
from pydantic import ValidationError

from .ablation import cmd_ablate, load_variant_models, real_sample, write_report
from .checkpoint_store import save_checkpoint, write_meta
from .config import BRIDGE, CONDITIONINGS, VARIANTS, ExperimentConfig
from .embedding_service import get_gap_space
from .embedding_store import write_embeddings
from .exceptions import (
    ConfigMismatchError,
    ContractViolation,
    CorruptionError,
    NumericalInstabilityError,
    PartialReportError,
    ReportParseError,
    TrainingDivergenceError,
    UsageError,
)
from .generation_service import bridge_embeddings, bridge_gap_report, bridge_validation_pairs, generate
from .models import AUDIO_SIDE, REAL, EmbeddingSet
from .plotting import cmd_plot
from .settings import configure_logging, get_settings
from .synth_data import TRAIN, VALIDATION, TrackDataset, write_manifest
from .training import Trainer, checkpoint_path

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.load(path)


def _out_dir(args: argparse.Namespace, config: ExperimentConfig) -> Path:
    return Path(args.out or config.output_dir)


def _seed(args: argparse.Namespace, config: ExperimentConfig) -> int:
    return config.seeds[0] if args.seed is None else args.seed


def cmd_gen_data(args: argparse.Namespace, config: ExperimentConfig) -> int:
    """Manifest plus reference and matched-pair embeddings of the synthetic corpus"""
    out = _out_dir(args, config) / "data"
    seed = _seed(args, config)
    space = get_gap_space(config.gap, config.synth)
    dataset = TrackDataset(config.synth)
    counts = {
        TRAIN: len(dataset.split_indices(TRAIN)),
        VALIDATION: len(dataset.split_indices(VALIDATION)),
    }
    write_manifest(out / "manifest.json", config.synth, config.data_hash, counts)

    meta = config.artifact_meta(seed=seed)
    sample = real_sample(config, space, config.evaluation.reference_size, seed)
    reference = write_embeddings(out / "reference.emb", EmbeddingSet(sample.audio, AUDIO_SIDE, REAL))
    write_meta(reference, meta)
    text, audio = bridge_validation_pairs(config, space, config.evaluation.batch_size, seed)
    for name, embeddings in (("pairs_text.emb", text), ("pairs_audio.emb", audio)):
        write_meta(write_embeddings(out / name, embeddings), meta)

    print(f"✅ Synthetic corpus: {counts[TRAIN]} training / {counts[VALIDATION]} validation track sets")
    print(f"📁 Wrote manifest and embeddings to {out}")
    print(f"🔑 Data hash: {config.data_hash}")
    return EXIT_OK


def _train(args: argparse.Namespace, config: ExperimentConfig, variant: str) -> Trainer:
    seed = _seed(args, config)
    if args.steps is not None:
        config = config.with_steps(args.steps)
    trainer = Trainer(config, variant, seed, _out_dir(args, config))
    result = trainer.train(resume=args.resume)
    losses = result.losses
    print(f"✅ Trained {variant} (seed {seed}) to step {result.steps}")
    if result.resumed_from:
        print(f"↩️ Resumed from step {result.resumed_from}")
    if losses:
        print(f"📉 Final loss: {losses[-1]:.5f}")
    print(f"💾 Checkpoint: {result.checkpoint}")
    return trainer


def cmd_train(args: argparse.Namespace, config: ExperimentConfig) -> int:
    variant = args.variant or config.model_variant
    _train(args, config, variant)
    return EXIT_OK


def cmd_bridge_train(args: argparse.Namespace, config: ExperimentConfig) -> int:
    trainer = _train(args, config, BRIDGE)
    trainer.model.eval()
    space = get_gap_space(config.gap, config.synth)
    report = bridge_gap_report(trainer.model, config, space, trainer.seed)
    path = _out_dir(args, config) / f"gap_report_seed{trainer.seed}.json"
    payload = dict(report.to_dict(), **config.artifact_meta(seed=trainer.seed))
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding='utf-8')
    print(f"📏 Centroid distance: {report.before.centroid_distance:.4f} -> {report.after.centroid_distance:.4f}")
    print(f"🔗 Matched cosine: {report.before.mean_pairwise_cosine:.4f} -> {report.after.mean_pairwise_cosine:.4f}")
    print(f"📄 Gap report: {path}")
    return EXIT_OK


def cmd_sample(args: argparse.Namespace, config: ExperimentConfig) -> int:
    variant = args.variant or config.model_variant
    conditioning = args.conditioning or config.conditioning[0]
    seed = _seed(args, config)
    out = _out_dir(args, config)
    models = load_variant_models(config, args.checkpoints or out, seed)
    space = get_gap_space(config.gap, config.synth)
    result = generate(models, config, space, variant, conditioning, args.count, seed, args.steps)

    stem = out / "samples" / f"{variant}_{conditioning}_seed{seed}"
    meta = config.artifact_meta(
        variant=variant, conditioning=conditioning, seed=seed, count=args.count, evaluations=result.evaluations,
    )
    save_checkpoint(stem.with_suffix(".lcl"), {"latents": result.latents}, meta)
    write_meta(write_embeddings(stem.with_suffix(".emb"), result.audio), meta)
    per_sample = result.evaluations / result.chunks if result.chunks else 0
    print(f"✅ Generated {args.count} samples ({variant}, {conditioning})")
    print(f"🔢 Network evaluations per sample batch: {per_sample:g}")
    print(f"📁 Output: {stem}.lcl / {stem}.emb")
    return EXIT_OK


def cmd_bridge_sample(args: argparse.Namespace, config: ExperimentConfig) -> int:
    seed = _seed(args, config)
    out = _out_dir(args, config)
    path = checkpoint_path(args.checkpoints or out, BRIDGE, seed)
    models = load_variant_models(config, args.checkpoints or out, seed)
    if models.bridge is None:
        raise UsageError(f"no bridge checkpoint at {path}")
    space = get_gap_space(config.gap, config.synth)
    text, _ = bridge_validation_pairs(config, space, args.count, seed)
    bridged = bridge_embeddings(models.bridge, config, text, seed)
    meta = config.artifact_meta(variant=BRIDGE, seed=seed, count=args.count)
    target = out / "samples" / f"bridge_seed{seed}.emb"
    write_meta(write_embeddings(out / "samples" / f"bridge_seed{seed}.text.emb", text), meta)
    write_meta(write_embeddings(target, bridged), meta)
    print(f"✅ Bridged {args.count} text-side embeddings")
    print(f"📁 Output: {target}")
    return EXIT_OK


def cmd_ablate_command(args: argparse.Namespace, config: ExperimentConfig) -> int:
    out = _out_dir(args, config)
    report = cmd_ablate(config, args.checkpoints or out, _seed(args, config))
    paths = write_report(report, out)
    absent = [c for c in report.cells if c.status == "absent"]
    if absent:
        print(f"⚠️ {len(absent)} cell(s) marked absent (missing checkpoints)")
    print(f"✅ Ablation report with {len(report.cells)} rows")
    for path in paths:
        print(f"📄 {path}")
    print(report.to_table())
    return EXIT_OK


def cmd_plot_command(args: argparse.Namespace, config: ExperimentConfig) -> int:
    out = _out_dir(args, config)
    report = Path(args.report) if args.report else out / "report.csv"
    written = cmd_plot(report, out / "charts")
    print(f"✅ Wrote {len(written)} chart(s) to {out / 'charts'}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, ExperimentConfig], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "ablate": cmd_ablate_command,
    "plot": cmd_plot_command,
    "bridge-train": cmd_bridge_train,
    "bridge-sample": cmd_bridge_sample,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-lab", description="Latent accompaniment lab")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", help="experiment config JSON")
        sub.add_argument("--seed", type=int, help="run seed (default: first config seed)")
        sub.add_argument("--out", help="output directory (default: config output_dir)")
        if name in ("train", "bridge-train", "sample"):
            sub.add_argument("--steps", type=int, help="training steps, or sampler steps for sample")
        if name in ("train", "bridge-train"):
            sub.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
        if name in ("train", "sample"):
            sub.add_argument("--variant", choices=VARIANTS)
        if name == "sample":
            sub.add_argument("--conditioning", choices=CONDITIONINGS)
        if name in ("sample", "bridge-sample"):
            sub.add_argument("--count", type=int, default=16)
        if name in ("sample", "bridge-sample", "ablate"):
            sub.add_argument("--checkpoints", help="checkpoint directory (default: --out)")
        if name == "plot":
            sub.add_argument("--report", help="report CSV (default: <out>/report.csv)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    settings = get_settings()
    configure_logging(settings)
    torch.set_num_threads(settings.torch_threads)

    try:
        config = load_config(args.config)
        count = getattr(args, "count", None)
        if count is not None and count < 0:
            raise UsageError("--count must be non-negative")
        if getattr(args, "steps", None) is not None and args.steps < 1:
            raise UsageError("--steps must be positive")
        return COMMANDS[args.command](args, config)
    except (UsageError, ContractViolation, ConfigMismatchError, ValidationError) as e:
        print(f"❌ {e}")
        return EXIT_USAGE
    except TrainingDivergenceError as e:
        print(f"❌ {e}")
        print(f"   step: {e.step}, last checkpoint: {e.last_checkpoint or 'none'}")
        return EXIT_NUMERICAL
    except NumericalInstabilityError as e:
        print(f"❌ Numerical failure: {e}")
        return EXIT_NUMERICAL
    except (OSError, CorruptionError, ReportParseError, PartialReportError) as e:
        print(f"❌ I/O error: {e}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
