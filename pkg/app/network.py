"""Student/teacher segmentation networks, attention pooling and the text-space adapter."""
import copy
import io
import json
import math
import zipfile
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.exceptions import ConfigError, ShapeError
from app.schemas import NetworkConfig

ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class SegNet(nn.Module):
    """Strided convolutional encoder with a multi-level all-1x1 decoder.

    ``forward`` returns per-pixel class logits at input resolution together with
    the bottleneck feature map that feeds attention pooling.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        stages, c_in = [], config.in_channels
        for width in config.widths:
            stages.append(nn.Sequential(nn.Conv2d(c_in, width, 3, stride=2, padding=1), nn.GELU()))
            c_in = width
        self.encoder = nn.ModuleList(stages)
        self.decoder = nn.ModuleList(nn.Conv2d(width, config.decoder_width, 1) for width in config.widths)
        self.classifier = nn.Conv2d(config.decoder_width, config.num_classes, 1)

    def encoder_parameters(self) -> List[nn.Parameter]:
        return list(self.encoder.parameters())

    def decoder_parameters(self) -> List[nn.Parameter]:
        return list(self.decoder.parameters()) + list(self.classifier.parameters())

    def forward(self, image: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.dim() != 4 or image.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected images shaped [B, {self.config.in_channels}, H, W], got {tuple(image.shape)}")
        if image.shape[-1] < 1 or image.shape[-2] < 1:
            raise ShapeError("image has an empty spatial extent")

        features, x = [], image
        for stage in self.encoder:
            x = stage(x)
            features.append(x)
        size = features[0].shape[-2:]
        fused = self.decoder[0](features[0])
        for proj, feat in zip(self.decoder[1:], features[1:]):
            fused = fused + F.interpolate(proj(feat), size=size, mode="bilinear", align_corners=False)
        logits = self.classifier(F.gelu(fused))
        logits = F.interpolate(logits, size=image.shape[-2:], mode="bilinear", align_corners=False)
        return logits, features[-1]


class AttentionPool(nn.Module):
    """Single-query multi-head attention: the mean token attends over positioned spatial tokens."""

    def __init__(self, dim: int, heads: int, max_tokens: int):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"dimension {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.positional = nn.Parameter(torch.randn(max_tokens, dim) / math.sqrt(dim))
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def pool_tokens(self, tokens: torch.Tensor, positional: torch.Tensor) -> torch.Tensor:
        batch, count, dim = tokens.shape
        head_dim = dim // self.heads
        query = self.q_proj(tokens.mean(dim=1, keepdim=True))
        keyed = tokens + positional.unsqueeze(0)
        keys, values = self.k_proj(keyed), self.v_proj(keyed)

        query = query.view(batch, 1, self.heads, head_dim).transpose(1, 2)
        keys = keys.view(batch, count, self.heads, head_dim).transpose(1, 2)
        values = values.view(batch, count, self.heads, head_dim).transpose(1, 2)
        weights = torch.softmax(query @ keys.transpose(-2, -1) / math.sqrt(head_dim), dim=-1)
        pooled = (weights @ values).transpose(1, 2).reshape(batch, dim)
        return self.out_proj(pooled)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.dim() == 3:
            features = features.unsqueeze(0)
        tokens = features.flatten(2).transpose(1, 2)
        if tokens.shape[1] > self.positional.shape[0]:
            raise ShapeError(f"{tokens.shape[1]} spatial tokens exceed the positional table of "
                             f"{self.positional.shape[0]}")
        if tokens.shape[1] < 1:
            raise ShapeError("feature map has no spatial positions")
        return self.pool_tokens(tokens, self.positional[:tokens.shape[1]])


class Adapter(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, activation: bool = True):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.act = nn.GELU() if activation else nn.Identity()
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class LanguageHead(nn.Module):
    """Attention pooling plus adapter on the image side, optional adapter on the text side."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.pool = AttentionPool(config.feature_dim, config.pool_heads, config.pool_max_tokens)
        self.adapter = Adapter(config.feature_dim, config.embed_dim)
        self.text_adapter = Adapter(config.embed_dim, config.embed_dim) if config.adapter_on_text else None

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.adapter(self.pool(features))

    def project_text(self, vectors: torch.Tensor) -> torch.Tensor:
        vectors = vectors.detach()
        return vectors if self.text_adapter is None else self.text_adapter(vectors)


def attention_pool(head: LanguageHead, features: torch.Tensor) -> torch.Tensor:
    return head.pool(features)


def adapter_project(head: LanguageHead, pooled: torch.Tensor) -> torch.Tensor:
    return head.adapter(pooled)


def _init_weights(module: nn.Module):
    for sub in module.modules():
        if isinstance(sub, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(sub.weight, mode="fan_in", nonlinearity="relu")
            if sub.bias is not None:
                nn.init.zeros_(sub.bias)


class ModelPair:
    """Student ``g_theta``, EMA teacher ``h_phi`` and the student-side language head."""

    def __init__(self, config: NetworkConfig, dtype: torch.dtype = torch.float32):
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.student = SegNet(config)
            _init_weights(self.student)
            self.head = LanguageHead(config)
            _init_weights(self.head)
        self.student.to(dtype)
        self.head.to(dtype)
        self.teacher = copy.deepcopy(self.student)
        self.teacher.requires_grad_(False)
        self.teacher.eval()

    @property
    def dtype(self) -> torch.dtype:
        return next(self.student.parameters()).dtype

    def parameter_groups(self, lr_encoder: float, lr_decoder: float) -> List[dict]:
        return [
            {"params": self.student.encoder_parameters(), "lr": lr_encoder, "name": "encoder"},
            {"params": self.student.decoder_parameters(), "lr": lr_decoder, "name": "decoder"},
            {"params": list(self.head.parameters()), "lr": lr_decoder, "name": "head"},
        ]

    def named_tensors(self) -> Dict[str, torch.Tensor]:
        tensors = {}
        for group, module in (("student", self.student), ("teacher", self.teacher), ("head", self.head)):
            for name, param in module.named_parameters():
                tensors[f"{group}/{name}"] = param
        return tensors

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.student.parameters()) + sum(p.numel() for p in self.head.parameters())


def ema_update(pair: ModelPair, alpha: float) -> ModelPair:
    """phi <- alpha * phi + (1 - alpha) * theta for every parameter tensor."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha", "[0,1]", f"alpha={alpha} outside [0,1]")
    teacher = list(pair.teacher.named_parameters())
    student = list(pair.student.named_parameters())
    if len(teacher) != len(student):
        raise ShapeError("teacher and student have different parameter counts")
    with torch.no_grad():
        for (t_name, phi), (s_name, theta) in zip(teacher, student):
            if t_name != s_name or phi.shape != theta.shape:
                raise ShapeError(f"teacher '{t_name}' {tuple(phi.shape)} is incongruent with "
                                 f"student '{s_name}' {tuple(theta.shape)}")
            phi.copy_(alpha * phi + (1.0 - alpha) * theta)
    return pair


def _zip_entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(pair: ModelPair, path: Path, step: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = pair.named_tensors()
    index = []
    with zipfile.ZipFile(path, "w") as archive:
        archive.writestr(_zip_entry("network_config.json"), pair.config.model_dump_json())
        for name in sorted(tensors):
            payload = tensors[name].detach().cpu().numpy().astype("<f4")
            index.append({"name": name, "shape": list(payload.shape)})
            archive.writestr(_zip_entry(f"tensors/{name}"), payload.tobytes())
        archive.writestr(_zip_entry("index.json"), json.dumps({"step": step, "tensors": index}, sort_keys=True))
    return path


def load_checkpoint(path: Path, dtype: torch.dtype = torch.float32) -> Tuple[ModelPair, int]:
    with zipfile.ZipFile(path) as archive:
        config = NetworkConfig.model_validate_json(archive.read("network_config.json"))
        index = json.loads(archive.read("index.json"))
        pair = ModelPair(config, dtype=dtype)
        tensors = pair.named_tensors()
        stored = {entry["name"]: entry["shape"] for entry in index["tensors"]}
        if set(stored) != set(tensors):
            missing = sorted(set(tensors) ^ set(stored))
            raise ShapeError(f"checkpoint tensors do not match the network: {', '.join(missing[:5])}")
        with torch.no_grad():
            for name, shape in stored.items():
                payload = np.frombuffer(archive.read(f"tensors/{name}"), dtype="<f4").reshape(shape)
                if tuple(shape) != tuple(tensors[name].shape):
                    raise ShapeError(f"'{name}' has shape {shape}, network expects {tuple(tensors[name].shape)}")
                tensors[name].copy_(torch.from_numpy(payload.copy()))
    return pair, int(index["step"])


def checkpoint_bytes(pair: ModelPair, step: int = 0) -> bytes:
    buffer = io.BytesIO()
    tensors = pair.named_tensors()
    for name in sorted(tensors):
        buffer.write(tensors[name].detach().cpu().numpy().astype("<f4").tobytes())
    buffer.write(str(step).encode("ascii"))
    return buffer.getvalue()
