"""Self-training objectives: source cross-entropy, quality-weighted pseudo-label loss and the caption alignment loss."""
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from app.exceptions import LossError

PROB_TOLERANCE = 1e-6


@dataclass
class PseudoLabelBatch:
    labels: torch.Tensor
    quality: torch.Tensor

    @property
    def class_ids(self) -> torch.Tensor:
        return self.labels.argmax(dim=1)


def _batched(tensor: torch.Tensor, dims: int) -> torch.Tensor:
    return tensor.unsqueeze(0) if tensor.dim() == dims - 1 else tensor


def supervised_loss(logits: torch.Tensor, labels: torch.Tensor, ignore_index: int) -> torch.Tensor:
    """Mean cross-entropy over the pixels whose label is not ``ignore_index``.

    ``logits`` is [B, K, H, W] (or [K, H, W]); ``labels`` holds integer class ids.
    """
    logits, labels = _batched(logits, 4), _batched(labels, 3).long()
    if logits.shape[0] != labels.shape[0] or logits.shape[-2:] != labels.shape[-2:]:
        raise LossError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    if not (labels != ignore_index).any():
        raise LossError("every pixel is ignored")
    return F.cross_entropy(logits, labels, ignore_index=ignore_index)


def pseudo_labels(teacher_probs: torch.Tensor) -> torch.Tensor:
    """One-hot argmax of the teacher's class probabilities; ties go to the lowest class id."""
    with torch.no_grad():
        probs = _batched(teacher_probs.detach(), 4)
        if torch.isnan(probs).any():
            raise LossError("teacher probabilities contain NaN")
        sums = probs.sum(dim=1)
        if (sums - 1).abs().max() > PROB_TOLERANCE:
            raise LossError("teacher probabilities do not sum to 1")
        # torch.argmax returns the first maximal index
        ids = probs.argmax(dim=1)
        return F.one_hot(ids, probs.shape[1]).permute(0, 3, 1, 2).to(probs.dtype)


def quality_estimate(teacher_probs: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-image share of pixels whose top probability strictly exceeds ``tau``."""
    with torch.no_grad():
        probs = _batched(teacher_probs.detach(), 4)
        confident = probs.max(dim=1).values > tau
        return confident.to(probs.dtype).mean(dim=(-2, -1))


def pixel_cross_entropy(logits: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
    return -(onehot * F.log_softmax(logits, dim=1)).sum(dim=1)


def target_loss(student_logits: torch.Tensor, pseudo: PseudoLabelBatch) -> torch.Tensor:
    logits = _batched(student_logits, 4)
    labels = _batched(pseudo.labels, 4).to(logits.dtype)
    if labels.shape != logits.shape:
        raise LossError(f"pseudo-labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    per_image = pixel_cross_entropy(logits, labels).mean(dim=(-2, -1))
    return (pseudo.quality.to(logits.dtype) * per_image).mean()


def language_consistency_loss(f_pool: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``1 - cos(f_pool, v)``; ``v`` is treated as a constant."""
    f_pool = _batched(f_pool, 2)
    v = _batched(v.detach(), 2).to(f_pool.dtype)
    if f_pool.shape != v.shape:
        raise LossError(f"pooled features {tuple(f_pool.shape)} and embeddings {tuple(v.shape)} disagree")
    f_norm = f_pool.norm(dim=-1)
    v_norm = v.norm(dim=-1)
    if (f_norm == 0).any():
        raise LossError("pooled image feature has zero norm")
    if (v_norm == 0).any():
        raise LossError("text embedding has zero norm")
    cosine = (f_pool * v).sum(dim=-1) / (f_norm * v_norm)
    return (1.0 - cosine).mean()


def pixel_alignment_loss(features: torch.Tensor, labels: torch.Tensor, project: Callable,
                         prompts: torch.Tensor, ignore_index: int) -> torch.Tensor:
    """Align each present class's mean pixel feature with that class's prompt embedding."""
    features = _batched(features, 4)
    labels = _batched(labels, 3)
    small = F.interpolate(labels[:, None].to(features.dtype), size=features.shape[-2:], mode="nearest")
    small = small[:, 0].long()
    pooled, targets = [], []
    for b in range(features.shape[0]):
        for class_id in torch.unique(small[b]).tolist():
            if class_id == ignore_index:
                continue
            region = small[b] == class_id
            pooled.append(features[b][:, region].mean(dim=1))
            targets.append(prompts[class_id])
    if not pooled:
        raise LossError("no labelled pixels survive at feature resolution")
    return language_consistency_loss(project(torch.stack(pooled)), torch.stack(targets))


def total_loss(l_s: torch.Tensor, l_t: torch.Tensor, l_p: torch.Tensor, lambda_p: float,
               loss_weight: float = 1.0) -> torch.Tensor:
    total = l_s + loss_weight * l_t + lambda_p * l_p
    if not torch.isfinite(torch.as_tensor(total)).all():
        raise LossError(f"non-finite loss (L_S={float(l_s)}, L_T={float(l_t)}, L_p={float(l_p)})")
    return total
