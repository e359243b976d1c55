"""Online self-training: rare-class sampling, class mixing and the student/teacher training loop."""
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from app.embeddings import EmbeddingBank
from app.exceptions import CaptionDAError, EmbeddingError, LossError, TrainingError
from app.losses import (PseudoLabelBatch, language_consistency_loss, pixel_alignment_loss, pseudo_labels,
                        quality_estimate, supervised_loss, target_loss, total_loss)
from app.metrics import evaluate
from app.network import ModelPair, ema_update, save_checkpoint
from app.scene_synth import SceneDataset, SegSample
from app.schemas import NetworkConfig, TrainConfig

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ["step", "L_S", "L_T", "L_p", "q_T", "lr"]
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class RareClassSampler:
    class_ids: np.ndarray
    class_probs: np.ndarray
    image_probs: np.ndarray
    frequencies: np.ndarray

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(len(self.image_probs), size=size, p=self.image_probs)


def rare_class_sampler(masks: Sequence[np.ndarray], num_classes: int, temperature: float) -> RareClassSampler:
    """Sample classes with probability softmax((1 - f_c) / T), then an image holding that class uniformly."""
    if temperature <= 0:
        raise TrainingError(f"rcs temperature must be positive, got {temperature}")
    if not masks:
        raise TrainingError("rare class sampling needs at least one source mask")
    pixels = np.zeros(num_classes, dtype=np.float64)
    holders = np.zeros((len(masks), num_classes), dtype=bool)
    for i, mask in enumerate(masks):
        counts = np.bincount(mask[mask < num_classes].ravel(), minlength=num_classes)[:num_classes]
        pixels += counts
        holders[i] = counts > 0
    if pixels.sum() == 0:
        raise TrainingError("source masks hold no labelled pixels")
    freq = pixels / pixels.sum()

    present = np.flatnonzero(holders.any(axis=0))
    for class_id in sorted(set(range(num_classes)) - set(present.tolist())):
        logger.warning("Class %d never appears in the source set and is excluded from sampling", class_id)
    logits = (1.0 - freq[present]) / temperature
    class_probs = np.exp(logits - logits.max())
    class_probs /= class_probs.sum()

    image_probs = np.zeros(len(masks), dtype=np.float64)
    for p, class_id in zip(class_probs, present):
        members = holders[:, class_id]
        image_probs[members] += p / members.sum()
    return RareClassSampler(present, class_probs, image_probs / image_probs.sum(), freq)


@dataclass
class MixedSample:
    image: torch.Tensor
    labels: torch.Tensor
    mix_mask: torch.Tensor


def classmix(source_image: torch.Tensor, source_mask: torch.Tensor, target_image: torch.Tensor,
             target_labels: torch.Tensor, rng: Optional[np.random.Generator] = None,
             classes: Optional[Sequence[int]] = None, ignore_index: Optional[int] = None) -> MixedSample:
    """Paste the pixels of half the source classes onto the target image and its pseudo-labels.

    ``classes`` fixes the pasted classes instead of drawing them from ``rng``.
    """
    if source_image.shape != target_image.shape or source_mask.shape != target_labels.shape:
        raise TrainingError("source and target shapes disagree for class mixing")
    if classes is None:
        present = [c for c in torch.unique(source_mask).tolist() if c != ignore_index]
        rng = rng or np.random.default_rng()
        count = math.ceil(len(present) / 2)
        classes = sorted(rng.choice(present, size=count, replace=False).tolist()) if count else []
    mix_mask = torch.isin(source_mask, torch.as_tensor(list(classes), dtype=source_mask.dtype))
    image = torch.where(mix_mask.unsqueeze(0), source_image, target_image)
    labels = torch.where(mix_mask, source_mask, target_labels)
    return MixedSample(image=image, labels=labels, mix_mask=mix_mask)


def warmup_factor(warmup_steps: int):
    def factor(index: int) -> float:
        if warmup_steps <= 0:
            return 1.0
        return min(1.0, (index + 1) / warmup_steps)
    return factor


@dataclass
class TrainResult:
    history: List[Dict[str, float]] = field(default_factory=list)
    eval_curve: List[Tuple[int, float]] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    pair: Optional[ModelPair] = None


class Trainer:
    """Runs the per-step schedule: source CE, teacher pseudo-labels, mixing, target CE, alignment, EMA."""

    def __init__(self, config: TrainConfig, dataset: SceneDataset, pair: ModelPair,
                 source_bank: Optional[EmbeddingBank] = None, target_bank: Optional[EmbeddingBank] = None,
                 class_prompts: Optional[np.ndarray] = None, run_dir: Optional[Path] = None):
        self.config = config
        self.dataset = dataset
        self.pair = pair
        self.dtype = pair.dtype
        self.num_classes = dataset.spec.num_classes
        self.ignore_index = dataset.spec.ignore_index
        self.run_dir = Path(run_dir) if run_dir else None
        if pair.config.num_classes != self.num_classes:
            raise TrainingError(f"network predicts {pair.config.num_classes} classes, "
                                f"dataset has {self.num_classes}")

        self.source_vectors = self._vectors(source_bank, [s.id for s in dataset.source],
                                            config.caption_mode != "target_only" and config.alignment == "image")
        self.target_vectors = self._vectors(target_bank, [s.id for s in dataset.target],
                                            config.caption_mode != "source_only" and config.alignment == "image")
        self.class_prompts = None
        if config.alignment == "pixel":
            if class_prompts is None:
                raise EmbeddingError("pixel-level alignment needs class prompt embeddings")
            self._check_dim(class_prompts.shape[1])
            self.class_prompts = torch.as_tensor(class_prompts, dtype=self.dtype)
        self.language = (self.class_prompts is not None or self.source_vectors is not None
                         or self.target_vectors is not None)

        self.rng = np.random.default_rng(config.seed)
        self.sampler = (rare_class_sampler([s.mask for s in dataset.source], self.num_classes,
                                           config.rcs_temperature) if config.rcs_enabled else None)
        self.optimizer = torch.optim.AdamW(pair.parameter_groups(config.lr_encoder, config.lr_decoder),
                                           betas=config.betas, weight_decay=config.weight_decay)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, warmup_factor(config.warmup_steps))
        self.step = 0

    def _check_dim(self, dim: int):
        if dim != self.pair.config.embed_dim:
            raise EmbeddingError(f"embedding dimension {dim} does not match the adapter output "
                                 f"{self.pair.config.embed_dim}")

    def _vectors(self, bank: Optional[EmbeddingBank], ids: List[str], needed: bool) -> Optional[Dict]:
        if bank is None or not needed:
            if needed and self.config.lambda_p > 0:
                raise EmbeddingError("language alignment is enabled but no embedding bank was given")
            return None
        self._check_dim(bank.dim)
        missing = [i for i in ids if i not in bank]
        if missing:
            raise EmbeddingError(f"no embedding for image '{missing[0]}' ({len(missing)} missing)")
        return {i: torch.as_tensor(bank.get(i).values, dtype=self.dtype) for i in ids}

    def _stack(self, samples: Sequence[SegSample]) -> torch.Tensor:
        return torch.as_tensor(np.stack([s.image for s in samples]), dtype=self.dtype)

    def _lookup(self, vectors: Dict[str, torch.Tensor], samples: Sequence[SegSample]) -> torch.Tensor:
        try:
            return torch.stack([vectors[s.id] for s in samples])
        except KeyError as exc:
            raise TrainingError(f"no embedding for sampled image {exc}", self.step) from None

    def _draw(self) -> Tuple[List[SegSample], List[SegSample]]:
        size = self.config.batch_size
        if self.sampler is not None:
            src_idx = self.sampler.sample(self.rng, size)
        else:
            src_idx = self.rng.integers(0, len(self.dataset.source), size=size)
        tgt_idx = self.rng.integers(0, len(self.dataset.target), size=size)
        return [self.dataset.source[i] for i in src_idx], [self.dataset.target[i] for i in tgt_idx]

    def _image_alignment(self, features: torch.Tensor, vectors: Dict[str, torch.Tensor],
                         samples: Sequence[SegSample]) -> torch.Tensor:
        head = self.pair.head
        return language_consistency_loss(head(features), head.project_text(self._lookup(vectors, samples)))

    def train_step(self) -> Dict[str, float]:
        self.step += 1
        cfg, student, teacher = self.config, self.pair.student, self.pair.teacher
        sources, targets = self._draw()
        src_img = self._stack(sources)
        src_mask = torch.as_tensor(np.stack([s.mask for s in sources]), dtype=torch.long)
        tgt_img = self._stack(targets)

        student.train()
        src_logits, src_features = student(src_img)
        l_s = supervised_loss(src_logits, src_mask, self.ignore_index)

        with torch.no_grad():
            probs = torch.softmax(teacher(tgt_img)[0], dim=1)
            onehot = pseudo_labels(probs)
            quality = quality_estimate(probs, cfg.tau)

        tgt_features = None
        if cfg.mix_enabled:
            mixed = [classmix(src_img[b], src_mask[b], tgt_img[b], onehot[b].argmax(dim=0), self.rng,
                              ignore_index=self.ignore_index) for b in range(len(sources))]
            mix_img = torch.stack([m.image for m in mixed])
            mix_labels = torch.stack([m.labels for m in mixed])
            mix_onehot = F.one_hot(mix_labels, self.num_classes).permute(0, 3, 1, 2).to(self.dtype)
            tgt_logits, _ = student(mix_img)
            l_t = target_loss(tgt_logits, PseudoLabelBatch(mix_onehot, quality))
        else:
            tgt_logits, tgt_features = student(tgt_img)
            l_t = target_loss(tgt_logits, PseudoLabelBatch(onehot, quality))

        l_p = torch.zeros((), dtype=self.dtype)
        if self.class_prompts is not None:
            l_p = pixel_alignment_loss(src_features, src_mask, self.pair.head.adapter, self.class_prompts,
                                       self.ignore_index)
        else:
            if self.source_vectors is not None:
                l_p = l_p + self._image_alignment(src_features, self.source_vectors, sources)
            if self.target_vectors is not None:
                if tgt_features is None:
                    _, tgt_features = student(tgt_img)
                l_p = l_p + self._image_alignment(tgt_features, self.target_vectors, targets)

        try:
            loss = total_loss(l_s, l_t, l_p, cfg.lambda_p, cfg.loss_weight)
        except LossError as exc:
            raise TrainingError(str(exc), self.step) from exc

        lr = self.optimizer.param_groups[0]["lr"]
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.scheduler.step()
        ema_update(self.pair, cfg.alpha)
        return {"step": self.step, "L_S": float(l_s), "L_T": float(l_t), "L_p": float(l_p),
                "q_T": float(quality.mean()), "lr": float(lr)}

    def _checkpoint(self, name: str) -> Optional[Path]:
        if self.run_dir is None:
            return None
        return save_checkpoint(self.pair, self.run_dir / "checkpoints" / name, step=self.step)

    def _evaluate(self) -> Optional[float]:
        masks = self.dataset.target_masks
        if not masks:
            return None
        return evaluate(self.pair.student, self.dataset.target, masks, self.dataset.class_set, self.dtype).miou

    def run(self, total_steps: Optional[int] = None) -> TrainResult:
        total = self.config.total_steps if total_steps is None else total_steps
        result = TrainResult(pair=self.pair)
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)

        for _ in tqdm(range(total), desc="train", disable=total < 2):
            try:
                record = self.train_step()
            except TrainingError:
                raise
            except CaptionDAError as exc:
                raise TrainingError(str(exc), self.step) from exc
            result.history.append(record)
            if self.step % self.config.eval_interval == 0:
                score = self._evaluate()
                if score is not None:
                    result.eval_curve.append((self.step, score))
                    logger.info("step %d: target mIoU %.1f", self.step, score)
            if self.step % self.config.checkpoint_interval == 0 and self.step != total:
                self._checkpoint(f"step_{self.step:06d}.zip")

        result.checkpoint = self._checkpoint("final.zip")
        if self.run_dir is not None:
            write_history(result.history, self.run_dir / "history.csv")
            (self.run_dir / "eval_curve.json").write_text(
                json.dumps([{"step": s, "miou": m} for s, m in result.eval_curve], indent=2), encoding="utf-8")
        return result


def write_history(history: Sequence[Dict[str, float]], path: Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({key: repr(row[key]) if isinstance(row[key], float) else row[key]
                             for key in HISTORY_FIELDS})
    return path


def read_history(path: Path) -> List[Dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as handle:
        return [{key: int(row[key]) if key == "step" else float(row[key]) for key in HISTORY_FIELDS}
                for row in csv.DictReader(handle)]


def train(config: TrainConfig, dataset: SceneDataset, pair: Optional[ModelPair] = None,
          source_bank: Optional[EmbeddingBank] = None, target_bank: Optional[EmbeddingBank] = None,
          class_prompts: Optional[np.ndarray] = None, run_dir: Optional[Path] = None,
          network_config: Optional[NetworkConfig] = None) -> TrainResult:
    if pair is None:
        if network_config is None:
            raise TrainingError("either a model pair or a network config is required")
        pair = ModelPair(network_config, dtype=DTYPES[config.precision])
    return Trainer(config, dataset, pair, source_bank, target_bank, class_prompts, run_dir).run()
