"""Command-line entry point: scene, captions, embed, train, eval, plot, experiment and serve."""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import uvicorn

from app.captions import caption_stats, load_bank, store_bank
from app.config import Config, configure_logging
from app.embeddings import EmbeddingBank, class_prompt_bank, encode_records, get_encoder
from app.exceptions import CaptionDAError, StageError
from app.experiments import (ablation_variants, caption_dataset, load_config, parse_config, refine_bank,
                             run_experiment, run_single, split_bank, variant_banks)
from app.metrics import evaluate
from app.network import load_checkpoint
from app.plots import emit_plots, plot_token_histograms
from app.scene_synth import build_dataset, export_dataset, load_dataset
from app.schemas import ExperimentPreset, RunSettings
from app.tokenizers import get_tokenizer

logger = logging.getLogger(__name__)

ABLATIONS = ["no-lang", "pixel-align", "class-prompt", "lambda-sweep", "caption-mode"]


def _settings(args) -> RunSettings:
    settings = load_config(args.config, RunSettings) if args.config else RunSettings()
    overrides = {}
    if getattr(args, "provider", None):
        overrides["captions"] = {**settings.captions.model_dump(mode="json"), "provider": args.provider}
    if getattr(args, "backend", None):
        overrides["embedding"] = {**settings.embedding.model_dump(mode="json"), "backend": args.backend}
    if overrides:
        settings = parse_config({**settings.model_dump(mode="json"), **overrides}, RunSettings)
    return settings


def cmd_scene_build(args) -> int:
    preset = load_config(args.config, ExperimentPreset)
    if preset.scene is None:
        raise CaptionDAError(f"{args.config} defines no scene")
    shift = preset.conditions if preset.conditions else preset.shift
    dataset = build_dataset(preset.scene, args.n_source or preset.n_source, args.n_target or preset.n_target,
                            shift, seed=preset.scene.seed)
    manifest = export_dataset(dataset, args.out)
    print(manifest)
    return 0


def cmd_captions_generate(args) -> int:
    settings = _settings(args)
    dataset = load_dataset(args.manifest, with_eval=False)
    records = caption_dataset(dataset, settings.captions, args.splits, refine=not args.no_refine)
    print(store_bank(records, args.out))
    return 0


def cmd_captions_refine(args) -> int:
    settings = _settings(args)
    records = load_bank(args.bank)
    if args.manifest:
        class_set = load_dataset(args.manifest, with_eval=False).class_set
    else:
        class_set = sorted({name for record in records for name in record.class_names})
    records = refine_bank(records, settings.captions, class_set)
    print(store_bank(records, args.out or args.bank))
    return 0


def cmd_captions_stats(args) -> int:
    records = load_bank(args.bank)
    stats = caption_stats(records).to_dict()
    text = json.dumps(stats, indent=2)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    if args.plot:
        plot_token_histograms(records, args.plot)
    print(text)
    return 0


def cmd_embed(args) -> int:
    settings = _settings(args)
    records = load_bank(args.bank)
    encoder = get_encoder(settings.embedding, records, get_tokenizer(settings.captions.tokenizer))
    if args.class_prompts:
        dataset = load_dataset(args.manifest, with_eval=False)
        bank = class_prompt_bank(records, dataset.class_set, encoder)
    else:
        bank = encode_records(records, encoder)
    print(bank.store(args.out))
    return 0


def cmd_train(args) -> int:
    settings = _settings(args)
    dataset = load_dataset(args.data)
    records = load_bank(args.captions, dataset.class_set) if args.captions else []
    bank = EmbeddingBank.load(args.embeddings) if args.embeddings else None
    variants = ablation_variants(args.ablation, settings.train, settings.embedding)
    if args.ablation is None:
        variants[0].name = "train"

    for variant in variants:
        if variant.text == "captions" and bank is not None:
            mode = variant.train.caption_mode
            banks = (split_bank(bank, [s.id for s in dataset.source]) if mode != "target_only" else None,
                     split_bank(bank, [s.id for s in dataset.target]) if mode != "source_only" else None,
                     None)
        else:
            banks = variant_banks(variant, dataset, records, settings.captions.tokenizer)
        run_dir = Path(args.out) if len(variants) == 1 else Path(args.out) / variant.name
        outcome = run_single(variant, settings.train.seed, settings, dataset, banks, run_dir)
        print(f"{variant.name}: target mIoU {outcome.miou:.1f} ({run_dir})")
    return 0


def cmd_eval(args) -> int:
    pair, step = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    if not dataset.target_masks:
        raise CaptionDAError(f"{args.data} has no evaluation masks")
    report = evaluate(pair.student, dataset.target, dataset.target_masks, dataset.class_set)
    report.write(args.out)
    print(report.render_table(f"step {step}"))
    return 0


def cmd_plot(args) -> int:
    if args.run:
        paths = emit_plots(args.run, args.captions)
    else:
        out = Path(args.out or "tokens.png")
        paths = [plot_token_histograms(load_bank(args.captions), out)]
    for path in paths:
        print(path)
    return 0


def cmd_experiment_run(args) -> int:
    preset = load_config(args.preset, ExperimentPreset)
    out = Path(args.out) if args.out else Path("runs") / preset.name
    summary = run_experiment(preset, out)
    for name, row in summary.items():
        if name != "paired_delta":
            print(f"{name}: {row['mean']:.1f} +- {row['std']:.1f}")
    return 0


def cmd_serve(args) -> int:
    uvicorn.run('app.main:app', host=args.host, port=args.port, reload=args.reload, log_level='info')
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="captionda", description=Config.APP_DESCRIPTION)
    parser.add_argument("--log-level", default=None)
    commands = parser.add_subparsers(dest="command", required=True)

    scene = commands.add_parser("scene").add_subparsers(dest="action", required=True)
    build = scene.add_parser("build")
    build.add_argument("--config", type=Path, required=True)
    build.add_argument("--out", type=Path, required=True)
    build.add_argument("--n-source", type=int)
    build.add_argument("--n-target", type=int)
    build.set_defaults(func=cmd_scene_build, stage="scene")

    captions = commands.add_parser("captions").add_subparsers(dest="action", required=True)
    generate = captions.add_parser("generate")
    generate.add_argument("--manifest", "--data", dest="manifest", type=Path, required=True)
    generate.add_argument("--provider", choices=["vlm", "mock"])
    generate.add_argument("--out", type=Path, required=True)
    generate.add_argument("--config", type=Path)
    generate.add_argument("--splits", nargs="+", choices=["source", "target"], default=["source"])
    generate.add_argument("--no-refine", action="store_true")
    generate.set_defaults(func=cmd_captions_generate, stage="captions")
    refine = captions.add_parser("refine")
    refine.add_argument("--bank", type=Path, required=True)
    refine.add_argument("--manifest", "--data", dest="manifest", type=Path)
    refine.add_argument("--provider", choices=["vlm", "mock"])
    refine.add_argument("--out", type=Path)
    refine.add_argument("--config", type=Path)
    refine.set_defaults(func=cmd_captions_refine, stage="captions")
    stats = captions.add_parser("stats")
    stats.add_argument("--bank", type=Path, required=True)
    stats.add_argument("--out", type=Path)
    stats.add_argument("--plot", type=Path)
    stats.set_defaults(func=cmd_captions_stats, stage="captions")

    embed = commands.add_parser("embed")
    embed.add_argument("--bank", "--captions", dest="bank", type=Path, required=True)
    embed.add_argument("--backend", choices=["hash", "file", "remote"])
    embed.add_argument("--out", type=Path, required=True)
    embed.add_argument("--config", type=Path)
    embed.add_argument("--class-prompts", action="store_true")
    embed.add_argument("--manifest", "--data", dest="manifest", type=Path)
    embed.set_defaults(func=cmd_embed, stage="embed")

    train = commands.add_parser("train")
    train.add_argument("--config", type=Path)
    train.add_argument("--data", type=Path, required=True)
    train.add_argument("--captions", type=Path)
    train.add_argument("--embeddings", type=Path)
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--ablation", choices=ABLATIONS)
    train.set_defaults(func=cmd_train, stage="train")

    evaluation = commands.add_parser("eval")
    evaluation.add_argument("--checkpoint", type=Path, required=True)
    evaluation.add_argument("--data", type=Path, required=True)
    evaluation.add_argument("--out", type=Path, required=True)
    evaluation.set_defaults(func=cmd_eval, stage="eval")

    plot = commands.add_parser("plot")
    plot.add_argument("--run", type=Path)
    plot.add_argument("--captions", type=Path)
    plot.add_argument("--out", type=Path)
    plot.set_defaults(func=cmd_plot, stage="plot")

    experiment = commands.add_parser("experiment").add_subparsers(dest="action", required=True)
    run = experiment.add_parser("run")
    run.add_argument("preset", type=Path)
    run.add_argument("--out", type=Path)
    run.set_defaults(func=cmd_experiment_run, stage="experiment")

    serve = commands.add_parser("serve")
    serve.add_argument("--host", default=Config.SERVICE_HOST)
    serve.add_argument("--port", type=int, default=Config.SERVICE_PORT)
    serve.add_argument("--reload", action="store_true")
    serve.set_defaults(func=cmd_serve, stage="serve")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    if args.command == "plot" and not (args.run or args.captions):
        parser.error("plot needs --run or --captions")
    if args.command == "embed" and args.class_prompts and args.manifest is None:
        parser.error("--class-prompts needs --manifest")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"[{exc.stage}] {exc}", file=sys.stderr)
    except (CaptionDAError, OSError) as exc:
        print(f"[{args.stage}] {exc}", file=sys.stderr)
    return 1
