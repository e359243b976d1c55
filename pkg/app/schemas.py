import hashlib
import math
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, ValidationInfo, field_validator, model_validator
from pydantic_core import PydanticCustomError

MAX_CAPTION_TOKENS = 77


def check_range(key: str, value: float, bound: str) -> float:
    """Check ``value`` against an interval written as e.g. ``(0,1)`` or ``[0,inf)``."""
    lo_text, hi_text = bound[1:-1].split(",")
    lo, hi = float(lo_text), float(hi_text)
    ok_lo = value > lo if bound[0] == "(" else value >= lo
    ok_hi = value < hi if bound[-1] == ")" else value <= hi
    if not (ok_lo and ok_hi) or (isinstance(value, float) and math.isnan(value)):
        raise PydanticCustomError(
            "range", "{key}={value} outside {bound}", {"key": key, "value": value, "bound": bound})
    return value


def check_path(key: str, path: Optional[Path]) -> Optional[Path]:
    if path is not None and not Path(path).exists():
        raise PydanticCustomError(
            "missing_path", "{key}: {path} does not exist", {"key": key, "bound": "existing path", "path": str(path)})
    return path


class StrictModel(BaseModel):
    class Config:
        extra = "forbid"


class LayoutRule(StrictModel):
    kind: Literal["band", "band_above", "blob"]
    cls: str
    anchor: Optional[str] = None
    start: float = 0.0
    stop: float = 1.0
    extent: float = 0.2
    size: Tuple[float, float] = (0.1, 0.1)
    count: int = 1
    jitter: float = 0.0

    @property
    def name(self) -> str:
        if self.anchor:
            return f"{self.kind}:{self.cls}@{self.anchor}"
        return f"{self.kind}:{self.cls}"

    @model_validator(mode="after")
    def check_geometry(self):
        check_range("jitter", self.jitter, "[0,0.5]")
        if self.kind == "band":
            check_range("start", self.start, "[0,1)")
            check_range("stop", self.stop, "(0,1]")
            if self.start >= self.stop:
                raise ValueError(f"{self.name}: start must be below stop")
        elif self.anchor is None:
            raise ValueError(f"{self.name}: an anchor class is required")
        if self.kind == "band_above":
            check_range("extent", self.extent, "(0,1)")
        if self.kind == "blob":
            check_range("size", self.size[0], "(0,1)")
            check_range("size", self.size[1], "(0,1)")
            check_range("count", self.count, "[1,inf)")
        return self


class SceneSpec(StrictModel):
    height: int = 32
    width: int = 32
    class_set: List[str]
    layout_rules: List[LayoutRule] = Field(default_factory=list)
    background: Optional[str] = None
    color_jitter: float = 0.02
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.class_set)

    @property
    def ignore_index(self) -> int:
        return len(self.class_set)

    @property
    def background_id(self) -> int:
        return self.class_set.index(self.background) if self.background else 0

    def spec_hash(self) -> str:
        return hashlib.sha256(self.model_dump_json(exclude={"seed"}).encode("utf-8")).hexdigest()

    @model_validator(mode="after")
    def check_classes(self):
        check_range("height", self.height, "[1,inf)")
        check_range("width", self.width, "[1,inf)")
        check_range("seed", self.seed, f"[0,{2 ** 64 - 1}]")
        check_range("color_jitter", self.color_jitter, "[0,inf)")
        if not self.class_set:
            raise ValueError("class_set must not be empty")
        if len(set(self.class_set)) != len(self.class_set):
            raise ValueError("class_set contains duplicate names")
        known = set(self.class_set)
        if self.background is not None and self.background not in known:
            raise ValueError(f"background '{self.background}' is not in class_set")
        for rule in self.layout_rules:
            for ref in (rule.cls, rule.anchor):
                if ref is not None and ref not in known:
                    raise ValueError(f"{rule.name} references unknown class '{ref}'")
        return self


class DomainShift(StrictModel):
    hue_shift: float = 0.0
    brightness_scale: float = 1.0
    noise_sigma: float = 0.0
    texture_freq: float = 0.0
    texture_amplitude: float = 0.15

    @property
    def is_neutral(self) -> bool:
        return (self.hue_shift % 360.0 == 0.0 and self.brightness_scale == 1.0
                and self.noise_sigma == 0.0 and self.texture_freq == 0.0)

    @model_validator(mode="after")
    def check_ranges(self):
        check_range("brightness_scale", self.brightness_scale, "(0,inf)")
        check_range("noise_sigma", self.noise_sigma, "[0,inf)")
        check_range("texture_freq", self.texture_freq, "[0,inf)")
        check_range("texture_amplitude", self.texture_amplitude, "[0,1)")
        return self


class CaptionRecord(StrictModel):
    image_id: str
    class_names: List[str] = Field(default_factory=list)
    raw_caption: str
    raw_tokens: int
    refined_caption: str = ""
    refined_tokens: int = 0
    provider: Literal["vlm+llm", "template-mock"]
    split: Literal["source", "target"] = "source"
    truncated: bool = False
    created_at: datetime

    @property
    def completed(self) -> bool:
        return bool(self.refined_caption)

    @model_validator(mode="after")
    def check_budget(self, info: ValidationInfo):
        check_range("refined_tokens", self.refined_tokens, f"[0,{MAX_CAPTION_TOKENS}]")
        check_range("raw_tokens", self.raw_tokens, "[0,inf)")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError(f"class_names of '{self.image_id}' repeat a class")
        class_set = (info.context or {}).get("class_set")
        if class_set is not None:
            unknown = [name for name in self.class_names if name not in class_set]
            if unknown:
                raise PydanticCustomError(
                    "unknown_class", "{key}: {names} not in the class set",
                    {"key": "class_names", "bound": "class_set", "names": ", ".join(unknown)})
        return self


class ChatMessage(StrictModel):
    role: Literal["system", "user", "assistant"]
    content: str
    images: List[str] = Field(default_factory=list)


class ChatRequest(StrictModel):
    model: str
    messages: List[ChatMessage]
    temperature: float = 0.0
    seed: int = 0


class ChatResponse(BaseModel):
    text: str


class EmbedRequest(StrictModel):
    texts: List[str]


class EmbedResponse(BaseModel):
    vectors: List[List[float]]


class NetworkConfig(StrictModel):
    in_channels: int = 3
    num_classes: int = 6
    widths: Tuple[int, ...] = (16, 32, 48, 64)
    decoder_width: int = 32
    embed_dim: int = 512
    pool_heads: int = 4
    pool_max_tokens: int = 64
    adapter_on_text: bool = False
    seed: int = 0

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @model_validator(mode="after")
    def check_shapes(self):
        check_range("num_classes", self.num_classes, "[2,inf)")
        check_range("in_channels", self.in_channels, "[1,inf)")
        check_range("decoder_width", self.decoder_width, "[1,inf)")
        check_range("embed_dim", self.embed_dim, "[1,inf)")
        check_range("pool_heads", self.pool_heads, "[1,inf)")
        check_range("pool_max_tokens", self.pool_max_tokens, "[1,inf)")
        if not self.widths:
            raise ValueError("widths must list at least one stage")
        for width in self.widths:
            check_range("widths", width, "[1,inf)")
        if self.feature_dim % self.pool_heads:
            raise ValueError(f"feature_dim {self.feature_dim} is not divisible by pool_heads {self.pool_heads}")
        return self


class TrainConfig(StrictModel):
    tau: float = 0.968
    alpha: float = 0.999
    lambda_p: float = 0.1
    loss_weight: float = 1.0
    lr_encoder: float = 6e-5
    lr_decoder: float = 6e-4
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    warmup_steps: int = 1500
    total_steps: int = 2000
    batch_size: int = 2
    caption_mode: Literal["source_only", "target_only", "source_and_target"] = "source_only"
    alignment: Literal["image", "pixel"] = "image"
    rcs_enabled: bool = True
    rcs_temperature: float = 0.01
    mix_enabled: bool = True
    eval_interval: int = 200
    checkpoint_interval: int = 1000
    precision: Literal["float32", "float64"] = "float32"
    seed: int = 0

    @model_validator(mode="after")
    def check_ranges(self):
        check_range("tau", self.tau, "(0,1)")
        check_range("alpha", self.alpha, "[0,1)")
        check_range("lambda_p", self.lambda_p, "[0,inf)")
        check_range("loss_weight", self.loss_weight, "[0,inf)")
        check_range("lr_encoder", self.lr_encoder, "(0,inf)")
        check_range("lr_decoder", self.lr_decoder, "(0,inf)")
        check_range("weight_decay", self.weight_decay, "[0,inf)")
        check_range("betas", self.betas[0], "[0,1)")
        check_range("betas", self.betas[1], "[0,1)")
        check_range("warmup_steps", self.warmup_steps, "[0,inf)")
        check_range("total_steps", self.total_steps, "[0,inf)")
        check_range("batch_size", self.batch_size, "[1,inf)")
        check_range("rcs_temperature", self.rcs_temperature, "(0,inf)")
        check_range("eval_interval", self.eval_interval, "[1,inf)")
        check_range("checkpoint_interval", self.checkpoint_interval, "[1,inf)")
        return self


class CaptionSettings(StrictModel):
    provider: Literal["mock", "vlm"] = "mock"
    tokenizer: Literal["whitespace", "bpe"] = "whitespace"
    refine_attempts: int = 3
    workers: int = 4

    @field_validator("refine_attempts", "workers")
    @classmethod
    def at_least_one(cls, value, info):
        return check_range(info.field_name, value, "[1,inf)")


class EmbeddingSettings(StrictModel):
    backend: Literal["hash", "file", "remote"] = "hash"
    dim: int = 512
    seed: int = 0
    path: Optional[Path] = None

    @model_validator(mode="after")
    def check_backend(self):
        check_range("dim", self.dim, "[1,inf)")
        if self.backend == "file":
            if self.path is None:
                raise PydanticCustomError(
                    "missing_path", "{key}: the file backend needs a path", {"key": "path", "bound": "existing path"})
            check_path("path", self.path)
        return self


Ablation = Literal["no-lang", "pixel-align", "class-prompt", "lambda-sweep", "caption-mode", "encoder-swap"]


class RunSettings(StrictModel):
    """Everything one training run needs besides its data."""

    train: TrainConfig = Field(default_factory=TrainConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    captions: CaptionSettings = Field(default_factory=CaptionSettings)
    embedding: EmbeddingSettings = Field(default_factory=EmbeddingSettings)

    @model_validator(mode="after")
    def check_dims(self):
        if self.embedding.dim != self.network.embed_dim:
            raise ValueError(
                f"embedding.dim {self.embedding.dim} differs from network.embed_dim {self.network.embed_dim}")
        return self


class ExperimentPreset(RunSettings):
    name: str
    scene: Optional[SceneSpec] = None
    manifest: Optional[Path] = None
    shift: DomainShift = Field(default_factory=DomainShift)
    conditions: Optional[Dict[str, DomainShift]] = None
    n_source: int = 200
    n_target: int = 200
    ablation: Optional[Ablation] = None
    sweep: List[float] = Field(default_factory=lambda: [2.0, 1.0, 0.1, 0.01, 0.0])
    encoders: List[EmbeddingSettings] = Field(default_factory=list)
    seeds: List[int] = Field(default_factory=lambda: [0])

    @model_validator(mode="after")
    def check_preset(self):
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if self.scene is None and self.manifest is None:
            raise ValueError("either scene or manifest is required")
        check_path("manifest", self.manifest)
        check_range("n_source", self.n_source, "[1,inf)")
        check_range("n_target", self.n_target, "[1,inf)")
        if self.scene is not None and self.scene.num_classes != self.network.num_classes:
            raise ValueError(
                f"network.num_classes {self.network.num_classes} differs from scene class count "
                f"{self.scene.num_classes}")
        if self.ablation == "lambda-sweep":
            for value in self.sweep:
                check_range("sweep", value, "[0,inf)")
        if self.ablation == "encoder-swap":
            if not self.encoders:
                raise ValueError("the encoder-swap ablation needs a non-empty encoders list")
            for encoder in self.encoders:
                if encoder.dim != self.network.embed_dim:
                    raise ValueError(f"encoder dim {encoder.dim} differs from network.embed_dim "
                                     f"{self.network.embed_dim}")
        return self

    def settings(self) -> RunSettings:
        return RunSettings(train=self.train, network=self.network, captions=self.captions, embedding=self.embedding)


class ManifestEntry(StrictModel):
    id: str
    split: Literal["source", "target"]
    image: str
    mask: Optional[str] = None
    group: Optional[str] = None


class Manifest(StrictModel):
    spec_hash: str
    class_set: List[str]
    ignore_index: int
    entries: List[ManifestEntry]
