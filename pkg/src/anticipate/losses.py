"""Training objectives: the symmetric video/text contrastive loss, the
next-feature regression loss, classification loss, and the per-stage totals."""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


class ContrastiveParts(NamedTuple):
    v2t: Tensor
    t2v: Tensor
    cross: Tensor


def contrastive_loss(video: Tensor, text: Tensor, log_temp: Tensor,
                     norm_tol: float = 1e-3) -> ContrastiveParts:
    """Symmetric InfoNCE over a batch of paired unit embeddings.

    Row i of ``video`` pairs with row i of ``text``; similarity is cosine over
    temperature exp(log_temp). Both softmax directions are averaged over the
    batch, and their sum is the combined loss. Same-class rows elsewhere in
    the batch still count as negatives; deduplication is the batch sampler's
    job.
    """
    if video.data.ndim != 2 or text.data.ndim != 2:
        raise ContractError(
            f"contrastive_loss expects 2-d embeddings, got {video.shape} / {text.shape}"
        )
    if video.shape != text.shape:
        raise ContractError(f"embedding shapes differ: {video.shape} vs {text.shape}")
    b = video.shape[0]
    if b < 1:
        raise ContractError("contrastive_loss needs at least one pair")
    for name, emb in (("video", video), ("text", text)):
        norms = np.linalg.norm(emb.data, axis=1)
        if np.abs(norms - 1.0).max(initial=0.0) > norm_tol:
            raise ContractError(f"{name} embeddings are not unit-norm (max |n-1| = "
                                f"{np.abs(norms - 1.0).max():.2e})")

    inv_temp = T.exp(T.scale(log_temp, -1.0))
    sims = T.mul(T.matmul(video, T.transpose(text)), inv_temp)
    labels = np.arange(b)
    v2t = T.cross_entropy_with_logits(sims, labels)
    t2v = T.cross_entropy_with_logits(T.transpose(sims), labels)
    return ContrastiveParts(v2t=v2t, t2v=t2v, cross=T.add(v2t, t2v))


def feature_loss(anticipated: Tensor, fused: Tensor) -> Tensor:
    """Mean squared error between each predicted feature and the next actual
    fused feature; targets are detached so no gradient reaches them.

    A single-frame sequence has no next feature; the loss is zero then.
    """
    if anticipated.shape != fused.shape:
        raise ContractError(f"shapes differ: {anticipated.shape} vs {fused.shape}")
    t = anticipated.shape[1]
    if t < 2:
        return Tensor(np.zeros((), dtype=anticipated.dtype))
    pred = T.narrow(anticipated, 1, 0, t - 1)
    target = Tensor(fused.data[:, 1:, :])  # plain data: the detach
    return T.mse(pred, target)


def classification_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    return T.cross_entropy_with_logits(logits, np.asarray(targets))


def stage_loss(stage: str, cross: Optional[Tensor] = None, feat: Optional[Tensor] = None,
               cls: Optional[Tensor] = None, beta: float = 0.0) -> Tensor:
    """pretrain: cross + feat. finetune: cls + beta * feat (beta 0 drops it)."""
    if stage == "pretrain":
        if cross is None or feat is None:
            raise ContractError("pretrain total needs both the contrastive and feature terms")
        return T.add(cross, feat)
    if stage == "finetune":
        if cls is None:
            raise ContractError("finetune total needs the classification term")
        if beta == 0.0:
            return cls
        if feat is None:
            raise ContractError("finetune with beta != 0 needs the feature term")
        return T.add(cls, T.scale(feat, beta))
    raise ContractError(f"unknown stage '{stage}'")
