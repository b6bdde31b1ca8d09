"""Loss terms and the warm-up schedule for the consistency weight.

The total objective is

    L = L_sup + lambda(t) * (L_fdc + L_mrsc + L_pix)

where L_sup is the mean of cross-entropy and foreground Dice loss on labeled
data, the three consistency terms are mean squared differences between
teacher and student (frequency features, region similarity matrices, pixel
probabilities) on unlabeled data, and lambda ramps up with a Gaussian
warm-up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import torch

from .errors import ConfigError, DataError, NumericError

PROB_CLAMP = 1e-7


@dataclass
class LossWeights:
    """Consistency weighting: lambda(t) = lambda_max * exp(-5 (1 - t/t_max)^2).

    ``warmup_steps`` is t_max; leaving it None lets the trainer resolve it to
    40% of the total step budget.
    """

    lambda_max: float = 1.0
    warmup_steps: int | None = None
    smooth_eps: float = 1e-5

    def validate(self) -> None:
        if self.lambda_max < 0:
            raise ConfigError(f"lambda_max must be >= 0, got {self.lambda_max}")
        if self.warmup_steps is not None and self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.smooth_eps <= 0:
            raise ConfigError(f"smooth_eps must be > 0, got {self.smooth_eps}")


@dataclass
class LossReport:
    """Scalar component values of one training step, for logging."""

    sup: float
    fdc: float
    mrsc: float
    pix: float
    lambda_t: float
    total: float


def _check_match(teacher: torch.Tensor, student: torch.Tensor, what: str) -> None:
    if teacher.shape != student.shape:
        raise ValueError(
            f"{what}: teacher shape {tuple(teacher.shape)} != student shape "
            f"{tuple(student.shape)}")


def _mse(teacher: torch.Tensor, student: torch.Tensor) -> torch.Tensor:
    return torch.mean((teacher.detach() - student) ** 2)


def supervised_loss(probs: torch.Tensor, labels: torch.Tensor,
                    smooth_eps: float = 1e-5) -> torch.Tensor:
    """Mean of cross-entropy and foreground Dice loss.

    Args:
        probs: (B, K, H, W) class probabilities.
        labels: (B, H, W) integer labels in [0, K).
        smooth_eps: Dice smoothing added to numerator and denominator.

    Cross-entropy averages over all pixels; Dice loss is computed per sample
    on the foreground channel and averaged over the batch. Probabilities are
    clamped away from 0 and 1 before the log.
    """
    if probs.dim() != 4:
        raise ValueError(f"expected (B, K, H, W) probabilities, got {tuple(probs.shape)}")
    b, k, h, w = probs.shape
    if labels.shape != (b, h, w):
        raise ValueError(
            f"labels shape {tuple(labels.shape)} does not match probs {tuple(probs.shape)}")
    if k < 2:
        raise ValueError(f"need at least 2 classes, got {k}")
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(
            f"labels must lie in [0, {k}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]")
    clamped = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    ce = -clamped.log().gather(1, labels.unsqueeze(1).long()).mean()
    fg = clamped[:, 1]
    target = (labels == 1).to(probs.dtype)
    intersection = (fg * target).sum(dim=(1, 2))
    denom = fg.sum(dim=(1, 2)) + target.sum(dim=(1, 2))
    dice_loss = 1.0 - (2.0 * intersection + smooth_eps) / (denom + smooth_eps)
    return 0.5 * (ce + dice_loss.mean())


def fdc_loss(teacher_freq: torch.Tensor, student_freq: torch.Tensor) -> torch.Tensor:
    """Frequency consistency: MSE between teacher and student enhanced features.

    The teacher tensor is detached, so gradients flow only into the student.
    """
    _check_match(teacher_freq, student_freq, "frequency features")
    return _mse(teacher_freq, student_freq)


def mrsc_loss(teacher_sims: Mapping[int, torch.Tensor],
              student_sims: Mapping[int, torch.Tensor]) -> torch.Tensor:
    """Region similarity consistency, summed over granularities.

    Each granularity contributes the MSE between teacher and student
    similarity matrices. Empty mappings yield an exact zero.
    """
    t_keys, s_keys = set(teacher_sims), set(student_sims)
    if t_keys != s_keys:
        raise ValueError(
            f"granularity mismatch: teacher has {sorted(t_keys)}, "
            f"student has {sorted(s_keys)}")
    if not t_keys:
        return torch.zeros(())
    total = None
    for g in sorted(t_keys):
        _check_match(teacher_sims[g], student_sims[g], f"similarity matrices at g={g}")
        term = _mse(teacher_sims[g], student_sims[g])
        total = term if total is None else total + term
    return total


def pixel_consistency_loss(teacher_probs: torch.Tensor,
                           student_probs: torch.Tensor) -> torch.Tensor:
    """Pixel-level consistency: MSE between teacher and student probabilities."""
    _check_match(teacher_probs, student_probs, "probability maps")
    return _mse(teacher_probs, student_probs)


def lambda_schedule(step: int, weights: LossWeights) -> float:
    """Gaussian warm-up weight at a given global step.

    lambda(t) = lambda_max * exp(-5 (1 - t/t_max)^2) for t < t_max, then
    lambda_max forever after.
    """
    weights.validate()
    if weights.warmup_steps is None:
        raise ConfigError("warmup_steps is unresolved; set it or let the trainer do it")
    t = float(min(max(step, 0), weights.warmup_steps))
    phase = 1.0 - t / weights.warmup_steps
    return weights.lambda_max * math.exp(-5.0 * phase * phase)


def total_loss(sup: torch.Tensor, fdc: torch.Tensor | float,
               mrsc: torch.Tensor | float, pix: torch.Tensor | float,
               lambda_t: float) -> tuple[torch.Tensor, LossReport]:
    """Combine the terms; returns the backprop tensor and a scalar report.

    Any non-finite component aborts with an error naming the offending term.
    """
    values = {}
    for name, term in (("supervised", sup), ("frequency consistency", fdc),
                       ("region consistency", mrsc), ("pixel consistency", pix)):
        value = float(term.detach()) if torch.is_tensor(term) else float(term)
        if not math.isfinite(value):
            raise NumericError(f"{name} loss is non-finite ({value})")
        values[name] = value
    total = sup + lambda_t * (fdc + mrsc + pix)
    report = LossReport(
        sup=values["supervised"],
        fdc=values["frequency consistency"],
        mrsc=values["region consistency"],
        pix=values["pixel consistency"],
        lambda_t=lambda_t,
        total=values["supervised"] + lambda_t * (values["frequency consistency"]
                                                 + values["region consistency"]
                                                 + values["pixel consistency"]),
    )
    return total, report
