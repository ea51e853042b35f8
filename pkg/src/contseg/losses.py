"""Training objectives: cross-entropy, distillation, LwF, CIL, prior penalty.

All losses consume posterior probabilities (the model's forward contract) and
take logs internally with a 1e-12 floor. Every loss normalizes by its count
of contributing pixels rather than H*W, so fully ignored regions do not
dilute gradients; a loss with no contributing pixels is defined as 0 and
flagged with EmptyLossWarning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

from contseg.errors import EmptyLossWarning, LayoutMismatchError, ShapeMismatchError

LOG_FLOOR = 1e-12


@dataclass
class LossConfig:
    """Balance weight and the class/pixel bookkeeping the composite losses need.

    lam weights the auxiliary term (distillation or parameter penalty);
    pixel_weights is a per-channel positive weight vector for CIL's
    cross-entropy side; distill_channels lists the posterior channels of the
    previous task's classes, shared between student and teacher layouts.
    """

    lam: float = 1.0
    pixel_weights: torch.Tensor | None = None
    distill_channels: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be nonnegative, got {self.lam}")
        if self.pixel_weights is not None:
            self.pixel_weights = torch.as_tensor(self.pixel_weights, dtype=torch.float64)
            if (self.pixel_weights <= 0).any():
                raise ValueError("pixel weights must all be positive")


@dataclass
class LossBreakdown:
    """Composite loss with its parts; `total` carries the autograd graph."""

    total: torch.Tensor
    ce: float
    aux: float


def _check_labels(posteriors: torch.Tensor, labels: torch.Tensor, ignore_id: int):
    if labels.shape != (posteriors.shape[0], posteriors.shape[2], posteriors.shape[3]):
        raise ShapeMismatchError(
            f"labels {tuple(labels.shape)} do not match posteriors "
            f"{tuple(posteriors.shape)}"
        )
    live = labels[labels != ignore_id]
    if live.numel() and (live.min() < 0 or live.max() >= posteriors.shape[1]):
        raise ValueError(
            f"label values must be channel indices in [0, {posteriors.shape[1]}) "
            f"or ignore_id {ignore_id}"
        )


def cross_entropy(
    posteriors: torch.Tensor, labels: torch.Tensor, ignore_id: int = 255
) -> torch.Tensor:
    """Mean negative log-posterior of the true class over labeled pixels."""
    _check_labels(posteriors, labels, ignore_id)
    mask = labels != ignore_id
    n = int(mask.sum())
    if n == 0:
        warnings.warn("cross_entropy: every pixel ignored", EmptyLossWarning)
        return posteriors.sum() * 0.0  # graph-connected zero
    safe = torch.where(mask, labels, torch.zeros_like(labels))
    logp = torch.log(posteriors.clamp(min=LOG_FLOOR))
    picked = logp.gather(1, safe.unsqueeze(1).long()).squeeze(1)
    return -(picked * mask).sum() / n


def weighted_cross_entropy(
    posteriors: torch.Tensor,
    labels: torch.Tensor,
    pixel_weights: torch.Tensor,
    ignore_id: int = 255,
) -> torch.Tensor:
    """Cross-entropy where each pixel is scaled by its label class's weight."""
    _check_labels(posteriors, labels, ignore_id)
    mask = labels != ignore_id
    n = int(mask.sum())
    if n == 0:
        warnings.warn("weighted_cross_entropy: every pixel ignored", EmptyLossWarning)
        return posteriors.sum() * 0.0
    if pixel_weights.numel() != posteriors.shape[1]:
        raise LayoutMismatchError(
            f"{pixel_weights.numel()} pixel weights for {posteriors.shape[1]} channels"
        )
    safe = torch.where(mask, labels, torch.zeros_like(labels)).long()
    w = pixel_weights.to(posteriors.dtype)[safe]
    logp = torch.log(posteriors.clamp(min=LOG_FLOOR))
    picked = logp.gather(1, safe.unsqueeze(1)).squeeze(1)
    return -(picked * w * mask).sum() / n


def distillation_loss(
    student_posteriors: torch.Tensor,
    teacher_posteriors: torch.Tensor,
    distill_channels=None,
    pixel_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Soft cross-entropy against the teacher over the previous classes.

    Student and teacher must agree spatially and share channel meaning over
    `distill_channels` (defaults to every teacher channel; appended student
    heads keep old channels in place, so indices transfer). `pixel_mask`
    restricts the averaged pixels; None means all of them.
    """
    if student_posteriors.shape[0] != teacher_posteriors.shape[0] or (
        student_posteriors.shape[2:] != teacher_posteriors.shape[2:]
    ):
        raise ShapeMismatchError(
            f"student {tuple(student_posteriors.shape)} vs teacher "
            f"{tuple(teacher_posteriors.shape)}"
        )
    if distill_channels is None:
        distill_channels = tuple(range(teacher_posteriors.shape[1]))
    channels = torch.as_tensor(sorted(distill_channels), dtype=torch.long)
    if channels.numel() == 0:
        raise ValueError("distill channel set must be nonempty")
    if int(channels.max()) >= min(
        student_posteriors.shape[1], teacher_posteriors.shape[1]
    ):
        raise LayoutMismatchError(
            f"distill channels {distill_channels} exceed tensor channel counts"
        )

    if pixel_mask is None:
        pixel_mask = torch.ones(
            (student_posteriors.shape[0], *student_posteriors.shape[2:]),
            dtype=torch.bool,
        )
    n = int(pixel_mask.sum())
    if n == 0:
        warnings.warn("distillation_loss: empty pixel mask", EmptyLossWarning)
        return student_posteriors.sum() * 0.0

    t = teacher_posteriors.detach().index_select(1, channels)
    logs = torch.log(
        student_posteriors.index_select(1, channels).clamp(min=LOG_FLOOR)
    )
    per_pixel = -(t * logs).sum(dim=1)
    return (per_pixel * pixel_mask).sum() / n


def lwf_loss(
    posteriors: torch.Tensor,
    labels: torch.Tensor,
    teacher_posteriors: torch.Tensor,
    config: LossConfig,
    ignore_id: int = 255,
) -> LossBreakdown:
    """Cross-entropy on new labels plus lam * full-image distillation."""
    ce = cross_entropy(posteriors, labels, ignore_id)
    kd = distillation_loss(posteriors, teacher_posteriors, config.distill_channels)
    return LossBreakdown(
        total=ce + config.lam * kd, ce=float(ce.detach()), aux=float(kd.detach())
    )


def cil_loss(
    posteriors: torch.Tensor,
    labels: torch.Tensor,
    teacher_posteriors: torch.Tensor,
    config: LossConfig,
    ignore_id: int = 255,
) -> LossBreakdown:
    """Class-weighted cross-entropy plus distillation on unlabeled pixels only."""
    if config.pixel_weights is not None:
        ce = weighted_cross_entropy(posteriors, labels, config.pixel_weights, ignore_id)
    else:
        ce = cross_entropy(posteriors, labels, ignore_id)
    unlabeled = labels == ignore_id
    if int(unlabeled.sum()) == 0:
        kd = posteriors.sum() * 0.0  # nothing unlabeled: distillation term is 0
    else:
        kd = distillation_loss(
            posteriors, teacher_posteriors, config.distill_channels, unlabeled
        )
    return LossBreakdown(
        total=ce + config.lam * kd, ce=float(ce.detach()), aux=float(kd.detach())
    )


def reg_penalty(params, old_params, importance) -> torch.Tensor:
    """Importance-weighted squared drift from the previous task's parameters."""
    params = list(params)
    old_params = list(old_params)
    importance = list(importance)
    if not (len(params) == len(old_params) == len(importance)):
        raise LayoutMismatchError(
            f"collection lengths differ: {len(params)} params, "
            f"{len(old_params)} old, {len(importance)} importance"
        )
    total = None
    for p, old, om in zip(params, old_params, importance):
        if p.shape != old.shape or p.shape != om.shape:
            raise LayoutMismatchError(
                f"shape mismatch {tuple(p.shape)} / {tuple(old.shape)} / "
                f"{tuple(om.shape)}"
            )
        term = (om.detach() * (p - old.detach()) ** 2).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def inverse_log_frequency_weights(
    pixel_counts, floor: float = 0.5, ceil: float = 10.0, offset: float = 1.02
) -> torch.Tensor:
    """Per-class weights 1/ln(offset + f) from pixel frequencies, clamped.

    Rare classes get larger weights; classes absent from the counts hit the
    ceiling.
    """
    counts = torch.as_tensor(pixel_counts, dtype=torch.float64)
    total = counts.sum()
    freq = counts / total if total > 0 else counts
    w = 1.0 / torch.log(offset + freq)
    return w.clamp(min=floor, max=ceil)
