"""Two-stage training: contrastive pre-training, then classifier fine-tuning
(full or frozen-trunk), with per-stage lr schedules, run logging, and
non-finite-loss rescue. Also batched inference for evaluation."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Batch, Corpus, assemble_batch, make_batches
from .errors import ConfigError, NumericError
from .losses import classification_loss, contrastive_loss, feature_loss, stage_loss
from .metrics import build_report
from .model import AnticipationModel, save_checkpoint
from .optim import SgdMomentum, lr_at
from .rngstream import rng_stream

log = logging.getLogger(__name__)

_SALT_TRAIN = 303
_SALT_EVAL = 404

RUN_LOG_HEADER = "epoch,lr,loss_cross,loss_feat,loss_cls,total,seconds"


@dataclass
class StageSettings:
    stage: str  # "pretrain" | "finetune"
    epochs: int = 30
    warmup: int = 6
    base_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-6
    batch_size: int = 16
    mode: str = "full"  # "full" | "frozen"; frozen trains the classifier only
    beta: float = 0.0  # feature-loss weight during finetune
    seed: int = 0
    grad_clip: float = 5.0
    dedup_classes: bool = False
    corrupt_keep: float = 1.0
    modalities: Optional[tuple] = None  # None: every modality the model knows

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"stage must be pretrain|finetune, got '{self.stage}'")
        if self.mode not in ("full", "frozen"):
            raise ConfigError(f"mode must be full|frozen, got '{self.mode}'")
        if self.mode == "frozen" and self.stage != "finetune":
            raise ConfigError("frozen mode applies to the finetune stage only")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not (0 <= self.warmup <= self.epochs):
            raise ConfigError(f"need 0 <= warmup <= epochs, got warmup={self.warmup}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.modalities is not None:
            self.modalities = tuple(self.modalities)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["modalities"] is not None:
            d["modalities"] = list(d["modalities"])
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "StageSettings":
        unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown stage settings keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss_cross: Optional[float]
    loss_feat: Optional[float]
    loss_cls: Optional[float]
    total: float
    seconds: float


def write_run_log(path, history: Sequence[EpochStats]) -> None:
    def cell(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(RUN_LOG_HEADER + "\n")
        for row in history:
            f.write(
                f"{row.epoch},{repr(row.lr)},{cell(row.loss_cross)},{cell(row.loss_feat)},"
                f"{cell(row.loss_cls)},{repr(row.total)},{row.seconds:.3f}\n"
            )


def batch_loss(model: AnticipationModel, batch: Batch, stage: str, beta: float = 0.0):
    """Stage objective for one batch; returns the scalar loss tensor and the
    float values of its parts."""
    out = model.forward(batch.model_features(), stage=stage)
    parts: dict = {"cross": None, "feat": None, "cls": None}
    if stage == "pretrain":
        video = model.video_embed(out["state"])
        text = model.text_embed(*batch.descriptions)
        cross = contrastive_loss(video, text, model.log_temp).cross
        feat = feature_loss(out["anticipated"], out["fused"])
        total = stage_loss("pretrain", cross=cross, feat=feat)
        parts["cross"], parts["feat"] = float(cross.data), float(feat.data)
    else:
        cls = classification_loss(out["logits"], batch.targets)
        feat = None
        if beta > 0:
            feat = feature_loss(out["anticipated"], out["fused"])
            parts["feat"] = float(feat.data)
        total = stage_loss("finetune", cls=cls, feat=feat, beta=beta)
        parts["cls"] = float(cls.data)
    return total, parts


def run_stage(model: AnticipationModel, corpus: Corpus, settings: StageSettings,
              log_path=None, rescue_path=None) -> list:
    """Train one stage over the corpus train split. On a non-finite loss the
    parameters roll back to the last completed epoch, a rescue checkpoint is
    written if a path was given, and the failure propagates."""
    modalities = settings.modalities or model.config.modalities()
    descriptors = corpus.segments("train")
    if not descriptors:
        raise ConfigError("corpus has no training segments")
    model.set_frozen(settings.stage == "finetune" and settings.mode == "frozen")
    opt = SgdMomentum(
        model.params(), lr=settings.base_lr, momentum=settings.momentum,
        weight_decay=settings.weight_decay, clip_norm=settings.grad_clip,
    )
    rng = rng_stream(settings.seed, _SALT_TRAIN)

    history: list[EpochStats] = []
    snapshot = model.snapshot()

    def rescue(epoch, batch_index, reason):
        model.restore(snapshot)
        if rescue_path is not None:
            save_checkpoint(model, rescue_path)
            where = f"; last-good parameters saved to {rescue_path}"
        else:
            where = ""
        raise NumericError(
            f"{reason} at epoch {epoch}, batch {batch_index}; "
            f"parameters rolled back to the last completed epoch{where}"
        )

    for epoch in range(settings.epochs):
        t0 = time.time()
        opt.lr = lr_at(epoch, settings.base_lr, settings.epochs, settings.warmup)
        batches = make_batches(
            descriptors, settings.batch_size, rng, shuffle=True,
            dedup_classes=settings.dedup_classes,
            class_key=(lambda d: d.action) if settings.dedup_classes else None,
        )
        sums = {"cross": 0.0, "feat": 0.0, "cls": 0.0, "total": 0.0}
        seen = {"cross": 0, "feat": 0, "cls": 0}
        for i, group in enumerate(batches):
            batch = assemble_batch(
                corpus, group, modalities, settings.stage, rng,
                model.config.hash_buckets, corrupt_keep=settings.corrupt_keep,
            )
            with T.recording() as tape:
                total, parts = batch_loss(model, batch, settings.stage, settings.beta)
                if not math.isfinite(float(total.data)):
                    rescue(epoch, i, "non-finite loss")
                T.backward(tape, total)
            try:
                opt.step()
            except NumericError:
                rescue(epoch, i, "non-finite gradients")
            sums["total"] += float(total.data)
            for key in ("cross", "feat", "cls"):
                if parts[key] is not None:
                    sums[key] += parts[key]
                    seen[key] += 1
        n = len(batches)
        stats = EpochStats(
            epoch=epoch,
            lr=opt.lr,
            loss_cross=sums["cross"] / seen["cross"] if seen["cross"] else None,
            loss_feat=sums["feat"] / seen["feat"] if seen["feat"] else None,
            loss_cls=sums["cls"] / seen["cls"] if seen["cls"] else None,
            total=sums["total"] / n,
            seconds=time.time() - t0,
        )
        history.append(stats)
        snapshot = model.snapshot()
        log.info(
            "%s epoch %d/%d: lr %.2e, loss %.4f (%.1fs)",
            settings.stage, epoch + 1, settings.epochs, stats.lr, stats.total, stats.seconds,
        )
    if log_path is not None:
        write_run_log(log_path, history)
    return history


def pretrain(model: AnticipationModel, corpus: Corpus, settings: StageSettings,
             log_path=None, rescue_path=None) -> list:
    if settings.stage != "pretrain":
        raise ConfigError(f"pretrain called with stage '{settings.stage}'")
    return run_stage(model, corpus, settings, log_path=log_path, rescue_path=rescue_path)


def finetune(model: AnticipationModel, corpus: Corpus, settings: StageSettings,
             log_path=None, rescue_path=None) -> list:
    if settings.stage != "finetune":
        raise ConfigError(f"finetune called with stage '{settings.stage}'")
    return run_stage(model, corpus, settings, log_path=log_path, rescue_path=rescue_path)


def collect_scores(model: AnticipationModel, corpus: Corpus, split: str = "eval",
                   modalities: Optional[Sequence[str]] = None, batch_size: int = 32,
                   seed: int = 0, corrupt_keep: float = 1.0) -> dict:
    """Deterministic inference over a split: class logits plus the per-sample
    fields the metric report needs. No tape, no shuffling."""
    modalities = tuple(modalities) if modalities is not None else model.config.modalities()
    descriptors = corpus.segments(split)
    rng = rng_stream(seed, _SALT_EVAL)
    scores, targets, verbs, nouns, parts, last, names = [], [], [], [], [], [], []
    for i in range(0, len(descriptors), batch_size):
        batch = assemble_batch(
            corpus, descriptors[i:i + batch_size], modalities, "finetune", rng,
            model.config.hash_buckets, corrupt_keep=corrupt_keep,
        )
        out = model.forward(batch.model_features(), stage="finetune")
        scores.append(out["logits"].data.astype(np.float64))
        targets.append(batch.targets)
        verbs.append(batch.verb_targets)
        nouns.append(batch.noun_targets)
        parts.append(batch.participants)
        last.append(batch.last_actions)
        names.extend(batch.narration_ids)
    cat = lambda xs: np.concatenate(xs) if xs else np.array([], dtype=np.int64)
    return {
        "scores": np.concatenate(scores) if scores else np.zeros((0, model.config.classes)),
        "targets": cat(targets),
        "verb_targets": cat(verbs),
        "noun_targets": cat(nouns),
        "participants": cat(parts),
        "last_actions": cat(last),
        "narration_ids": names,
    }


def evaluate(model: AnticipationModel, corpus: Corpus, split: str = "eval",
             modalities: Optional[Sequence[str]] = None, batch_size: int = 32,
             seed: int = 0, corrupt_keep: float = 1.0,
             marginal_mode: str = "sum") -> tuple[dict, dict]:
    """Score a split and build the full metric report; returns (report, raw)."""
    raw = collect_scores(
        model, corpus, split=split, modalities=modalities, batch_size=batch_size,
        seed=seed, corrupt_keep=corrupt_keep,
    )
    report = build_report(
        raw["scores"], raw["targets"], raw["verb_targets"], raw["noun_targets"],
        raw["participants"], corpus.vocab.verb_of, corpus.vocab.noun_of,
        corpus.train_frequencies(), sorted(corpus.held_out_participants()),
        marginal_mode=marginal_mode,
    )
    return report, raw
