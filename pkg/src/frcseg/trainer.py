"""Training and evaluation loops for the mean-teacher model.

One training step draws a labeled batch (supervised cross-entropy + Dice)
and, when consistency is active, an unlabeled batch that both student and
teacher process. Three consistency terms (frequency features, region
similarity matrices, pixel probabilities) are weighted by the warm-up
schedule and added to the supervised loss. After every optimizer step the
teacher takes one EMA step.

Everything is deterministic for a fixed config: data order is a pure
function of (seed, stream, epoch), model init follows the global seed, and
optional student input noise is re-seeded per step, so identical runs write
byte-identical metric CSVs and interrupted runs resume exactly.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .backbone import FreezePolicy, trainable_parameter_filter
from .config import TrainConfig, architecture_hash, save_config
from .data import (FolderSource, SplitManifest, cycling_batches, load_batch,
                   make_split, scan_dataset, synth_dataset)
from .errors import ConfigError, DataError, NumericError
from .losses import (LossReport, fdc_loss, lambda_schedule, mrsc_loss,
                     pixel_consistency_loss, supervised_loss, total_loss)
from .mean_teacher import EmaTeacher
from .metrics import MetricReport, MetricsLog, per_image_metrics, report_from_rows
from .model import SegModel

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainResult:
    out_dir: str
    steps: int
    best_dice: float
    final_metrics: MetricReport | None
    last_checkpoint: str
    best_checkpoint: str | None
    metrics_csv: str


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def build_model(config: TrainConfig) -> SegModel:
    return SegModel(config.backbone, config.region, config.fem)


def resolve_policy(config: TrainConfig) -> FreezePolicy:
    """'auto' fine-tunes selectively only when starting from stored weights."""
    policy = config.finetune_policy
    if policy == "auto":
        policy = "selective" if config.init_from else "all"
    if policy == "all":
        return FreezePolicy.train_all()
    return FreezePolicy.selective_finetune()


def build_optimizer(model: SegModel, config: TrainConfig,
                    policy: FreezePolicy | None = None) -> torch.optim.AdamW:
    policy = policy if policy is not None else resolve_policy(config)
    params = trainable_parameter_filter(model.parameter_groups(), policy)
    if not params:
        raise ConfigError("freeze policy leaves no trainable parameters")
    opt = config.optimizer
    return torch.optim.AdamW(params, lr=opt.lr, betas=(opt.beta1, opt.beta2),
                             weight_decay=opt.weight_decay)


def prepare_data(config: TrainConfig):
    """Build the sample source and the split manifest for a config."""
    d = config.data
    if d.layout == "synth":
        source = synth_dataset(d.synth_n, d.synth_size, config.seed)
        manifest = make_split(source.ids(), d.ratio, config.seed, d.test_fraction)
        return source, manifest
    root = d.root or os.environ.get("FRCSEG_DATA_ROOT")
    if not root:
        raise DataError(
            "no dataset root: set data.root in the config, pass --data-root, "
            "or export FRCSEG_DATA_ROOT")
    index = scan_dataset(root, d.layout)
    source = FolderSource(index.entries)
    manifest = make_split(index, d.ratio, config.seed, d.test_fraction)
    return source, manifest


def save_checkpoint(path: str | Path, model: SegModel, teacher: EmaTeacher,
                    step: int, config: TrainConfig, best_dice: float,
                    optimizer: torch.optim.Optimizer | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "architecture_hash": architecture_hash(config),
        "step": step,
        "best_dice": best_dice,
        "student": model.state_dict(),
        "teacher": teacher.state_dict(),
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def checkpoint_config(payload: dict) -> TrainConfig:
    return TrainConfig.from_dict(payload["config"])


def _student_noise(images: torch.Tensor, std: float, seed: int, step: int) -> torch.Tensor:
    if std <= 0:
        return images
    gen = torch.Generator(device="cpu").manual_seed((seed * 1_000_003 + step) % 2 ** 63)
    noise = torch.randn(images.shape, generator=gen, dtype=images.dtype) * std
    return (images + noise.to(images.device)).clamp(0.0, 1.0)


@torch.no_grad()
def evaluate_model(model: SegModel, source, ids: Sequence[str], config: TrainConfig,
                   batch_size: int | None = None) -> MetricReport:
    """Metrics of a model over a fixed id list, batched without shuffling."""
    if not ids:
        raise DataError("nothing to evaluate: empty id list")
    batch_size = batch_size or config.eval_batch
    was_training = model.training
    model.eval()
    rows = []
    for start in range(0, len(ids), batch_size):
        chunk = list(ids[start:start + batch_size])
        images, masks = load_batch(source, chunk, config.backbone.input_size)
        outputs = model(images)
        rows.append(per_image_metrics(outputs.probs, masks, config.soft_mae))
    if was_training:
        model.train()
    return report_from_rows(np.concatenate(rows, axis=0))


def _consistency_terms(model: SegModel, teacher: EmaTeacher, images: torch.Tensor,
                       student_images: torch.Tensor, config: TrainConfig):
    student_out = model(student_images)
    teacher_out = teacher.forward(images)
    zero = student_out.probs.new_zeros(())
    fdc = zero
    if config.enable_fdc:
        if config.fdc_low_only:
            t_f, s_f = teacher_out.freq.enhanced_low, student_out.freq.enhanced_low
        elif config.fdc_high_only:
            t_f, s_f = teacher_out.freq.enhanced_high, student_out.freq.enhanced_high
        else:
            t_f, s_f = teacher_out.freq.enhanced, student_out.freq.enhanced
        fdc = fdc_loss(t_f, s_f)
    mrsc = zero
    if config.enable_mrsc and config.region.granularities:
        student_sims = model.region_similarities(student_out.decoder_features)
        with torch.no_grad():
            teacher_sims = teacher.model.region_similarities(teacher_out.decoder_features)
        mrsc = mrsc_loss(teacher_sims, student_sims)
    pix = zero
    if config.enable_pix:
        pix = pixel_consistency_loss(teacher_out.probs, student_out.probs)
    return fdc, mrsc, pix


def train(config: TrainConfig, resume: str | Path | None = None) -> TrainResult:
    """Run the full training loop; returns paths and the best test Dice.

    Raises NumericError when any loss term goes non-finite; the most recent
    periodic checkpoint on disk is left as the last good state.
    """
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(config.seed)

    source, manifest = prepare_data(config)
    manifest.save(out_dir / "split.json")
    save_config(config, out_dir / "config.yaml")

    labeled = manifest.labeled_ids
    unlabeled = manifest.unlabeled_ids
    consistency_on = bool(unlabeled) and (config.enable_fdc or config.enable_mrsc
                                          or config.enable_pix)
    if unlabeled:
        steps_per_epoch = max(1, len(unlabeled) // config.batch_unlabeled)
    else:
        steps_per_epoch = max(1, len(labeled) // config.batch_labeled)
    total_steps = config.max_steps if config.max_steps is not None \
        else config.epochs * steps_per_epoch
    weights = config.loss
    if weights.warmup_steps is None:
        weights = replace(weights, warmup_steps=max(1, round(0.4 * total_steps)))

    model = build_model(config)
    if config.init_from:
        payload = load_checkpoint(config.init_from)
        if payload["architecture_hash"] != architecture_hash(config):
            raise ConfigError(
                f"init_from checkpoint {config.init_from} was built for a "
                "different architecture")
        model.load_state_dict(payload["student"])
    optimizer = build_optimizer(model, config)
    teacher = EmaTeacher(model, config.ema_decay)

    start_step = 0
    best_dice = float("-inf")
    if resume is not None:
        payload = load_checkpoint(resume)
        if payload["architecture_hash"] != architecture_hash(config):
            raise ConfigError(f"cannot resume from {resume}: architecture differs")
        model.load_state_dict(payload["student"])
        teacher.load_state_dict(payload["teacher"])
        if "optimizer" in payload:
            optimizer.load_state_dict(payload["optimizer"])
        start_step = int(payload["step"])
        best_dice = float(payload.get("best_dice", float("-inf")))
        logger.info("resumed from %s at step %d", resume, start_step)

    labeled_stream = cycling_batches(labeled, config.batch_labeled, config.seed, stream=1)
    unlabeled_stream = cycling_batches(unlabeled, config.batch_unlabeled, config.seed,
                                       stream=2) if consistency_on else None
    # fast-forward the streams so a resumed run sees the same batches
    for _ in range(start_step):
        next(labeled_stream)
        if unlabeled_stream is not None:
            next(unlabeled_stream)

    log = MetricsLog(out_dir / "metrics.csv")
    last_path = out_dir / "last.pt"
    best_path = out_dir / "best.pt"
    size = config.backbone.input_size
    final_report: MetricReport | None = None

    model.train()
    for step in range(start_step, total_steps):
        epoch = step // steps_per_epoch
        batch_ids = next(labeled_stream)
        images_l, masks_l = load_batch(source, batch_ids, size)
        student_out = model(images_l)
        sup = supervised_loss(student_out.probs, masks_l, weights.smooth_eps)

        if unlabeled_stream is not None:
            unlabeled_ids = next(unlabeled_stream)
            images_u, _ = load_batch(source, unlabeled_ids, size, with_masks=False)
            student_in = _student_noise(images_u, config.student_noise_std,
                                        config.seed, step)
            fdc, mrsc, pix = _consistency_terms(model, teacher, images_u,
                                                student_in, config)
        else:
            zero = sup.new_zeros(())
            fdc, mrsc, pix = zero, zero, zero

        lam = lambda_schedule(step, weights)
        try:
            loss, report = total_loss(sup, fdc, mrsc, pix, lam)
        except NumericError:
            logger.error("non-finite loss at step %d; last good checkpoint: %s",
                         step, last_path if last_path.exists() else "none")
            raise
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        teacher.update(model)

        do_eval = (step + 1) % config.eval_every == 0 or step + 1 == total_steps
        eval_report = None
        if do_eval:
            if manifest.test_ids:
                eval_report = evaluate_model(model, source, manifest.test_ids, config)
                final_report = eval_report
            if eval_report is not None and eval_report.dice > best_dice:
                best_dice = eval_report.dice
                save_checkpoint(best_path, model, teacher, step + 1, config, best_dice)
            save_checkpoint(last_path, model, teacher, step + 1, config,
                            best_dice, optimizer)
            logger.info("step %d/%d epoch %d loss %.4f%s", step + 1, total_steps,
                        epoch, report.total,
                        f" dice {eval_report.dice:.2f}" if eval_report else "")
        log.log(epoch, step, report, eval_report)

    save_checkpoint(last_path, model, teacher, total_steps, config, best_dice, optimizer)
    return TrainResult(
        out_dir=str(out_dir),
        steps=total_steps,
        best_dice=best_dice if best_dice > float("-inf") else float("nan"),
        final_metrics=final_report,
        last_checkpoint=str(last_path),
        best_checkpoint=str(best_path) if best_path.exists() else None,
        metrics_csv=str(out_dir / "metrics.csv"),
    )


def evaluate_checkpoint(path: str | Path, split: str = "test",
                        use_teacher: bool = False, batch_size: int | None = None,
                        data_root: str | None = None,
                        config: TrainConfig | None = None) -> MetricReport:
    """Evaluate a stored checkpoint on one side of its own split.

    The data source and split are rebuilt from the configuration stored in
    the checkpoint, so results are reproducible from the file alone. A
    ``config`` argument, when given, must describe the same architecture.
    """
    payload = load_checkpoint(path)
    stored = checkpoint_config(payload)
    if config is not None and architecture_hash(config) != payload["architecture_hash"]:
        raise ConfigError(
            f"checkpoint {path} holds architecture {payload['architecture_hash']}, "
            f"requested {architecture_hash(config)}")
    if data_root:
        stored = replace(stored, data=replace(stored.data, root=data_root))
    source, manifest = prepare_data(stored)
    ids = {"test": manifest.test_ids, "labeled": manifest.labeled_ids,
           "unlabeled": manifest.unlabeled_ids}.get(split)
    if ids is None:
        raise ConfigError(f"unknown split '{split}', expected test, labeled or unlabeled")
    model = build_model(stored)
    if use_teacher:
        model.load_state_dict(payload["teacher"]["model"])
    else:
        model.load_state_dict(payload["student"])
    return evaluate_model(model, source, ids, stored, batch_size)


def _to_heatmap(feature: torch.Tensor, out_size: tuple[int, int]) -> np.ndarray:
    """Channel-mean magnitude of a feature map as an 8-bit grayscale image."""
    heat = feature.detach().abs().mean(dim=1, keepdim=True)
    heat = torch.nn.functional.interpolate(heat, size=out_size, mode="bilinear",
                                           align_corners=False)[0, 0]
    lo, hi = float(heat.min()), float(heat.max())
    if hi > lo:
        heat = (heat - lo) / (hi - lo)
    else:
        heat = torch.zeros_like(heat)
    return (heat * 255.0).round().to(torch.uint8).cpu().numpy()


def dump_feature_response(checkpoint: str | Path, image: "str | Path | np.ndarray",
                          out_dir: str | Path, use_teacher: bool = False
                          ) -> tuple[Path, Path]:
    """Write encoder and frequency-branch response heatmaps for one image.

    Returns the two written paths (encoder_response.png,
    frequency_response.png), both at the source image's resolution.
    """
    payload = load_checkpoint(checkpoint)
    stored = checkpoint_config(payload)
    model = build_model(stored)
    model.load_state_dict(payload["teacher"]["model"] if use_teacher
                          else payload["student"])
    model.eval()

    if isinstance(image, (str, Path)):
        try:
            with Image.open(image) as im:
                array = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except Exception as exc:
            raise DataError(f"cannot read image {image}: {exc}") from exc
    else:
        array = np.asarray(image, dtype=np.float32)
    if array.ndim != 3 or array.shape[-1] != 3:
        raise DataError(f"expected an (H, W, 3) image, got shape {array.shape}")
    full_size = array.shape[:2]
    tensor = torch.from_numpy(np.ascontiguousarray(array)).permute(2, 0, 1)[None]
    size = stored.backbone.input_size
    if tensor.shape[-2:] != (size, size):
        tensor = torch.nn.functional.interpolate(tensor, size=(size, size),
                                                 mode="bilinear", align_corners=False)
    with torch.no_grad():
        outputs = model(tensor.clamp(0.0, 1.0))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    encoder_path = out_dir / "encoder_response.png"
    frequency_path = out_dir / "frequency_response.png"
    Image.fromarray(_to_heatmap(outputs.encoder_features, full_size), mode="L").save(encoder_path)
    Image.fromarray(_to_heatmap(outputs.freq.enhanced, full_size), mode="L").save(frequency_path)
    return encoder_path, frequency_path
