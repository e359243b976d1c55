"""Config files, experiment presets and the captions -> embeddings -> train -> eval pipeline."""
import asyncio
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Type, TypeVar

import numpy as np
import yaml
from pydantic import BaseModel, ValidationError

from app.captions import CaptionCache, CaptionPipeline, class_names_from_mask, store_bank
from app.clients import GroundedMockLlm, TemplateMockVlm, llm_client_from_env, vlm_client_from_env
from app.config import Config
from app.embeddings import (EmbeddingBank, class_prompt_bank, class_prompt_matrix, encode_records,
                            get_encoder)
from app.engine import DTYPES, Trainer
from app.exceptions import CaptionDAError, ConfigError, StageError
from app.metrics import EvalReport, evaluate, render_table
from app.network import ModelPair
from app.scene_synth import SceneDataset, build_dataset, export_dataset, load_dataset
from app.schemas import (CaptionRecord, CaptionSettings, EmbeddingSettings, ExperimentPreset, RunSettings,
                         TrainConfig)
from app.tokenizers import get_tokenizer

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)


def config_error(exc: ValidationError) -> ConfigError:
    error = exc.errors()[0]
    ctx = error.get("ctx") or {}
    if "key" in ctx and "bound" in ctx:
        return ConfigError(ctx["key"], ctx["bound"], error["msg"])
    key = ".".join(str(part) for part in error["loc"]) or "config"
    if error["type"] == "extra_forbidden":
        return ConfigError(key, "known keys", f"unknown key '{key}'")
    return ConfigError(key, error["type"], f"{key}: {error['msg']}")


def parse_config(data: dict, model: Type[ModelT] = ExperimentPreset) -> ModelT:
    try:
        return model.model_validate(data or {})
    except ValidationError as exc:
        raise config_error(exc) from exc


def load_config(path: Path, model: Type[ModelT] = ExperimentPreset) -> ModelT:
    """Read a YAML config and validate it strictly against ``model``."""
    try:
        with open(path, encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), "yaml", f"{path} is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(str(path), "mapping", f"{path} must hold a mapping at the top level")
    return parse_config(data, model)


def dump_config(config: BaseModel, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        yaml.safe_dump(config.model_dump(mode="json"), handle, sort_keys=False)
    return path


def _stage(stage: str, seed: Optional[int], fn: Callable, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except CaptionDAError as exc:
        raise StageError(stage, seed, exc) from exc


def chat_clients(settings: CaptionSettings, class_set: Sequence[str]):
    if settings.provider == "mock":
        return TemplateMockVlm(list(class_set)), GroundedMockLlm(list(class_set))
    return vlm_client_from_env(), llm_client_from_env()


async def _caption(samples, class_names, settings: CaptionSettings, class_set, cache_uri, refine):
    vlm, llm = chat_clients(settings, class_set)
    async with CaptionCache(cache_uri) as cache:
        pipeline = CaptionPipeline(vlm, llm, get_tokenizer(settings.tokenizer), cache, class_set,
                                   refine_attempts=settings.refine_attempts, workers=settings.workers)
        records = await pipeline.caption_samples(samples, class_names, refine=refine)
        logger.info("Captioned %d images (cache hits %d, misses %d)", len(records), cache.hits, cache.misses)
        return records


def caption_dataset(dataset: SceneDataset, settings: CaptionSettings, splits: Iterable[str] = ("source",),
                    cache_uri: Optional[str] = None, refine: bool = True) -> List[CaptionRecord]:
    """Caption the chosen splits; source prompts list the mask's classes, target prompts do not."""
    splits = set(splits)
    samples, class_names = [], {}
    if "source" in splits:
        for sample in dataset.source:
            samples.append(sample)
            class_names[sample.id] = class_names_from_mask(sample.mask, dataset.class_set)
    if "target" in splits:
        for sample in dataset.target:
            samples.append(sample)
            class_names[sample.id] = None
    return asyncio.run(_caption(samples, class_names, settings, dataset.class_set,
                                cache_uri or Config.CACHE_DATABASE_URI, refine))


async def _refine(records, settings: CaptionSettings, class_set, cache_uri):
    vlm, llm = chat_clients(settings, class_set)
    async with CaptionCache(cache_uri) as cache:
        pipeline = CaptionPipeline(vlm, llm, get_tokenizer(settings.tokenizer), cache, class_set,
                                   refine_attempts=settings.refine_attempts, workers=settings.workers)
        return await pipeline.refine_records(records)


def refine_bank(records: Sequence[CaptionRecord], settings: CaptionSettings, class_set: Sequence[str],
                cache_uri: Optional[str] = None) -> List[CaptionRecord]:
    return asyncio.run(_refine(list(records), settings, list(class_set), cache_uri or Config.CACHE_DATABASE_URI))


def split_bank(bank: EmbeddingBank, ids: Iterable[str]) -> EmbeddingBank:
    part = EmbeddingBank(bank.backend_id, bank.dim)
    for image_id in ids:
        if image_id in bank:
            part.add(image_id, bank.get(image_id))
    return part


@dataclass
class Variant:
    name: str
    train: TrainConfig
    embedding: EmbeddingSettings
    text: str = "captions"

    def columns(self) -> Dict[str, bool]:
        language = self.text != "none" and self.train.lambda_p > 0
        return {
            "context_captions": language and self.text == "captions",
            "class_prompts": language and self.text == "class-prompts",
            "image_level": language and self.train.alignment == "image",
            "pixel_level": language and self.train.alignment == "pixel",
        }


def ablation_variants(ablation: Optional[str], train: TrainConfig, embedding: EmbeddingSettings,
                      sweep: Sequence[float] = (2.0, 1.0, 0.1, 0.01, 0.0),
                      encoders: Sequence[EmbeddingSettings] = ()) -> List[Variant]:
    full = Variant("guided", train, embedding)
    baseline = Variant("baseline", train.model_copy(update={"lambda_p": 0.0}), embedding, text="none")
    if ablation is None:
        return [full]
    if ablation == "no-lang":
        return [baseline, full]
    if ablation == "class-prompt":
        prompts = train.model_copy(update={"caption_mode": "source_only"})
        return [baseline, Variant("class-prompt", prompts, embedding, text="class-prompts"), full]
    if ablation == "pixel-align":
        pixel = train.model_copy(update={"alignment": "pixel", "caption_mode": "source_only"})
        return [baseline, Variant("pixel-align", pixel, embedding, text="class-prompts"), full]
    if ablation == "lambda-sweep":
        return [Variant(f"lambda_p={value:g}", train.model_copy(update={"lambda_p": value}), embedding)
                for value in sweep]
    if ablation == "caption-mode":
        return [Variant(mode, train.model_copy(update={"caption_mode": mode}), embedding)
                for mode in ("source_only", "target_only", "source_and_target")]
    if ablation == "encoder-swap":
        return [Variant(f"encoder-{i}-{enc.backend}", train, enc) for i, enc in enumerate(encoders)]
    raise ConfigError("ablation", "known ablations", f"unknown ablation '{ablation}'")


def expand_variants(preset: ExperimentPreset) -> List[Variant]:
    return ablation_variants(preset.ablation, preset.train, preset.embedding, preset.sweep, preset.encoders)


def prepare_dataset(preset: ExperimentPreset, out_dir: Path) -> SceneDataset:
    """Load the preset's manifest, or build, export and reload its synthetic scenes."""
    if preset.manifest is not None:
        return load_dataset(preset.manifest)
    shift = preset.conditions if preset.conditions else preset.shift
    dataset = build_dataset(preset.scene, preset.n_source, preset.n_target, shift, seed=preset.scene.seed)
    return load_dataset(export_dataset(dataset, Path(out_dir) / "data"))


def variant_banks(variant: Variant, dataset: SceneDataset, records: Sequence[CaptionRecord],
                  tokenizer_name: str):
    """Embedding inputs of one variant: (source bank, target bank, class prompt matrix)."""
    if variant.text == "none":
        return None, None, None
    encoder = get_encoder(variant.embedding, records, get_tokenizer(tokenizer_name))
    if variant.train.alignment == "pixel":
        return None, None, class_prompt_matrix(dataset.class_set, encoder)
    source_ids = {s.id for s in dataset.source}
    source_records = [r for r in records if r.image_id in source_ids]
    if variant.text == "class-prompts":
        return class_prompt_bank(source_records, dataset.class_set, encoder), None, None
    mode = variant.train.caption_mode
    source_bank = target_bank = None
    if mode != "target_only":
        source_bank = encode_records(source_records, encoder)
    if mode != "source_only":
        target_bank = encode_records([r for r in records if r.image_id not in source_ids], encoder)
    return source_bank, target_bank, None


@dataclass
class RunOutcome:
    variant: str
    seed: int
    miou: float
    report: EvalReport
    run_dir: Path


def run_single(variant: Variant, seed: int, base: RunSettings, dataset: SceneDataset,
               banks, run_dir: Path, label: str = "train") -> RunOutcome:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    train_cfg = variant.train.model_copy(update={"seed": seed})
    network_cfg = base.network.model_copy(update={"seed": seed})
    settings = RunSettings(train=train_cfg, network=network_cfg, captions=base.captions,
                           embedding=variant.embedding)
    snapshot = {"preset": label, "variant": variant.name, "seed": seed, "text": variant.text,
                "settings": settings.model_dump(mode="json")}
    (run_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True), encoding="utf-8")

    def fit():
        pair = ModelPair(network_cfg, dtype=DTYPES[train_cfg.precision])
        return Trainer(train_cfg, dataset, pair, *banks, run_dir=run_dir).run()

    result = _stage("train", seed, fit)
    report = _stage("eval", seed, evaluate, result.pair.student, dataset.target, dataset.target_masks,
                    dataset.class_set, DTYPES[train_cfg.precision])
    report.write(run_dir / "eval_report.json")
    (run_dir / "per_class.txt").write_text(report.render_table(variant.name) + "\n", encoding="utf-8")
    return RunOutcome(variant.name, seed, report.miou, report, run_dir)


def summarize(outcomes: Sequence[RunOutcome], variants: Sequence[Variant]) -> dict:
    summary = {}
    for variant in variants:
        runs = [o for o in outcomes if o.variant == variant.name]
        scores = np.array([o.miou for o in runs])
        summary[variant.name] = {
            "per_seed": {str(o.seed): o.miou for o in runs},
            "mean": float(scores.mean()),
            "std": float(scores.std()),
            "columns": variant.columns(),
        }
    if "baseline" in summary and "guided" in summary:
        base, full = summary["baseline"]["per_seed"], summary["guided"]["per_seed"]
        deltas = {seed: full[seed] - base[seed] for seed in full if seed in base}
        summary["paired_delta"] = {"per_seed": deltas, "mean": float(np.mean(list(deltas.values())))}
    return summary


def comparison_table(summary: dict) -> str:
    """Variant rows with the language-guidance columns and mIoU mean +- std."""
    marks = {True: "x", False: "-"}
    header = (f"{'Variant':<24} | {'Context':>7} | {'Prompts':>7} | {'Image':>5} | {'Pixel':>5} | "
              f"{'mIoU':>12}")
    lines = [header, "-" * len(header)]
    for name, row in summary.items():
        if name == "paired_delta":
            continue
        cols = row["columns"]
        lines.append(f"{name:<24} | {marks[cols['context_captions']]:>7} | {marks[cols['class_prompts']]:>7} | "
                     f"{marks[cols['image_level']]:>5} | {marks[cols['pixel_level']]:>5} | "
                     f"{row['mean']:5.1f} +- {row['std']:4.1f}")
    return "\n".join(lines)


def run_experiment(preset: ExperimentPreset, out_dir: Path, cache_uri: Optional[str] = None) -> dict:
    """Run every variant of ``preset`` for every seed and write the aggregate summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(preset, out_dir / "preset.yaml")
    variants = expand_variants(preset)

    dataset = _stage("scene", None, prepare_dataset, preset, out_dir)
    splits = {"source"}
    if any(v.text == "captions" and v.train.caption_mode != "source_only" for v in variants):
        splits.add("target")
    cache_uri = cache_uri or f"sqlite+aiosqlite:///{(out_dir / 'captions_cache.db').resolve()}"
    records = _stage("captions", None, caption_dataset, dataset, preset.captions, sorted(splits), cache_uri)
    store_bank(records, out_dir / "captions.jsonl")

    outcomes, per_class = [], {}
    for variant in variants:
        banks = _stage("embed", None, variant_banks, variant, dataset, records, preset.captions.tokenizer)
        if banks[0] is not None:
            banks[0].store(out_dir / "embeddings" / f"{variant.name}.ldeb")
        for seed in preset.seeds:
            logger.info("Running %s seed %d", variant.name, seed)
            outcome = run_single(variant, seed, preset.settings(), dataset, banks,
                                 out_dir / "runs" / variant.name / f"seed_{seed}", label=preset.name)
            outcomes.append(outcome)
            per_class.setdefault(variant.name, outcome.report)

    summary = summarize(outcomes, variants)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    if len(variants) > 1:
        (out_dir / "comparison.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
        (out_dir / "comparison.txt").write_text(comparison_table(summary) + "\n", encoding="utf-8")
    (out_dir / "per_class.txt").write_text(render_table(per_class, dataset.class_set) + "\n", encoding="utf-8")
    return summary
