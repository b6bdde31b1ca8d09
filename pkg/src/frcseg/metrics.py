"""Evaluation metrics and the CSV training log.

All four metrics (MAE, accuracy, Dice, IoU) are computed per image, averaged
over the set and reported as percentages. Empty-vs-empty masks score a
perfect 1.0 for Dice and IoU. MAE uses the soft foreground probability by
default; ``soft_mae=False`` switches to the binarized prediction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import DataError
from .losses import LossReport

CSV_COLUMNS = ("epoch", "step", "lambda", "sup", "fdc", "mrsc", "pix", "total",
               "mae", "acc", "dice", "iou")


@dataclass
class MetricReport:
    """Percentages in [0, 100], averaged per image over ``n_images``."""

    mae: float
    acc: float
    dice: float
    iou: float
    n_images: int


def _check_binary(mask: torch.Tensor) -> torch.Tensor:
    mask = mask.detach()
    bad = ((mask != 0) & (mask != 1)).any()
    if bool(bad):
        raise DataError("ground truth masks must be binary (values 0 and 1)")
    return mask.bool()


def per_image_metrics(pred: torch.Tensor, target: torch.Tensor,
                      soft_mae: bool = True) -> np.ndarray:
    """Per-image (mae, acc, dice, iou) fractions, shape (B, 4).

    ``pred`` is either (B, K, H, W) class probabilities or an already
    binarized (B, H, W) mask; ``target`` is a binary (B, H, W) mask.
    """
    target = _check_binary(target)
    if pred.dim() == 4:
        probs = pred.detach()
        fg_prob = probs[:, 1].double()
        hard = probs.argmax(dim=1) == 1
    elif pred.dim() == 3:
        hard = _check_binary(pred)
        fg_prob = hard.double()
    else:
        raise ValueError(f"unsupported prediction shape {tuple(pred.shape)}")
    if hard.shape != target.shape:
        raise ValueError(
            f"prediction shape {tuple(hard.shape)} does not match "
            f"target {tuple(target.shape)}")
    t = target.double()
    h = hard.double()
    if not soft_mae:
        fg_prob = h
    mae = (fg_prob - t).abs().mean(dim=(1, 2))
    acc = (hard == target).double().mean(dim=(1, 2))
    inter = (h * t).sum(dim=(1, 2))
    psum = h.sum(dim=(1, 2))
    gsum = t.sum(dim=(1, 2))
    union = psum + gsum - inter
    dice = torch.where(psum + gsum > 0, 2.0 * inter / (psum + gsum).clamp(min=1e-300),
                       torch.ones_like(inter))
    iou = torch.where(union > 0, inter / union.clamp(min=1e-300), torch.ones_like(inter))
    return torch.stack([mae, acc, dice, iou], dim=1).cpu().numpy()


def compute_metrics(pred: torch.Tensor, target: torch.Tensor,
                    soft_mae: bool = True) -> MetricReport:
    """Average per-image metrics over a batch, scaled to percentages."""
    values = per_image_metrics(pred, target, soft_mae)
    return report_from_rows(values)


def report_from_rows(rows: np.ndarray) -> MetricReport:
    """Build a report from stacked per-image (mae, acc, dice, iou) rows."""
    if rows.ndim != 2 or rows.shape[1] != 4 or rows.shape[0] == 0:
        raise ValueError(f"expected (n, 4) metric rows, got {rows.shape}")
    mean = rows.mean(axis=0) * 100.0
    return MetricReport(mae=float(mean[0]), acc=float(mean[1]),
                        dice=float(mean[2]), iou=float(mean[3]),
                        n_images=int(rows.shape[0]))


class MetricsLog:
    """Append-only CSV log: one row per training step.

    Loss columns are filled every step; metric columns only on evaluation
    steps and stay empty otherwise. Rows carry no timestamps, so identical
    runs produce byte-identical files.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(CSV_COLUMNS)

    def log(self, epoch: int, step: int, report: LossReport,
            metrics: MetricReport | None = None) -> None:
        row = [str(epoch), str(step),
               f"{report.lambda_t:.6f}", f"{report.sup:.6f}", f"{report.fdc:.6f}",
               f"{report.mrsc:.6f}", f"{report.pix:.6f}", f"{report.total:.6f}"]
        if metrics is None:
            row += ["", "", "", ""]
        else:
            row += [f"{metrics.mae:.4f}", f"{metrics.acc:.4f}",
                    f"{metrics.dice:.4f}", f"{metrics.iou:.4f}"]
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(row)


def read_metrics_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def final_metrics(path: str | Path) -> dict[str, float]:
    """Last row of a run log that carries metric values."""
    rows = [r for r in read_metrics_csv(path) if r.get("dice")]
    if not rows:
        raise DataError(f"{path} has no rows with metric values")
    last = rows[-1]
    return {k: float(last[k]) for k in ("mae", "acc", "dice", "iou")}


def average_metrics_csvs(paths: Sequence[str | Path]) -> dict[str, float]:
    """Mean of the final metric rows of several runs (for seed averaging)."""
    if not paths:
        raise ValueError("no csv paths given")
    finals = [final_metrics(p) for p in paths]
    return {k: float(np.mean([f[k] for f in finals]))
            for k in ("mae", "acc", "dice", "iou")}
