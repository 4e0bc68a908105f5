"""Evaluation metrics over action-score tables: top-k accuracy, class-mean
variants, verb/noun scores derived from action scores, split masks
(overall / unseen / tail), and report serialization."""

from __future__ import annotations

import json
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DataError

TAIL_MASS_FRACTION = 0.2
REPORT_KS = (1, 5)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def rank_of_target(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """0-based rank of each sample's true class under descending score,
    ties resolved toward the lower class id."""
    scores = np.asarray(scores)
    targets = np.asarray(targets, dtype=np.int64)
    if scores.ndim != 2:
        raise ContractError(f"scores must be (n, classes), got shape {scores.shape}")
    n, c = scores.shape
    if targets.shape != (n,):
        raise ContractError(f"targets shape {targets.shape} does not match {n} samples")
    if len(targets) and (targets.min() < 0 or targets.max() >= c):
        raise DataError("target class id outside the score table")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores contain non-finite values")
    order = np.argsort(-scores, axis=1, kind="stable")
    position = np.empty_like(order)
    np.put_along_axis(position, order, np.broadcast_to(np.arange(c), (n, c)).copy(), axis=1)
    return position[np.arange(n), targets]


def topk_hits(scores: np.ndarray, targets: np.ndarray, k: int) -> np.ndarray:
    c = np.asarray(scores).shape[-1]
    if not (1 <= k <= c):
        raise ContractError(f"k must be in [1, {c}], got {k}")
    return rank_of_target(scores, targets) < k


def topk_accuracy(scores: np.ndarray, targets: np.ndarray, k: int) -> float:
    hits = topk_hits(scores, targets, k)
    if len(hits) == 0:
        raise ContractError("topk_accuracy over zero samples")
    return float(hits.mean())


def class_mean_accuracy(scores: np.ndarray, targets: np.ndarray, k: int) -> float:
    """Per-class top-k hit rate, averaged unweighted over the classes that
    appear among the targets."""
    hits = topk_hits(scores, targets, k)
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) == 0:
        raise ContractError("class_mean_accuracy over zero samples")
    present = np.unique(targets)
    per_class = [hits[targets == cls].mean() for cls in present]
    return float(np.mean(per_class))


def derive_group_scores(action_scores: np.ndarray, group_of: np.ndarray,
                        mode: str = "sum") -> np.ndarray:
    """Turn action logits into group (verb or noun) probabilities: softmax
    over actions, then per-group sum (the marginal) or max."""
    if mode not in ("sum", "max"):
        raise ContractError(f"mode must be sum|max, got '{mode}'")
    probs = softmax_rows(action_scores)
    group_of = np.asarray(group_of, dtype=np.int64)
    if group_of.shape != (probs.shape[-1],):
        raise ContractError(
            f"group map covers {group_of.shape} actions, scores have {probs.shape[-1]}"
        )
    n_groups = int(group_of.max()) + 1
    out = np.zeros((probs.shape[0], n_groups), dtype=np.float64)
    if mode == "sum":
        for g in range(n_groups):
            out[:, g] = probs[:, group_of == g].sum(axis=1)
    else:
        for g in range(n_groups):
            out[:, g] = probs[:, group_of == g].max(axis=1)
    return out


def tail_classes(train_freq: np.ndarray, fraction: float = TAIL_MASS_FRACTION) -> np.ndarray:
    """Smallest set of classes, rarest first (ties to the lower id), whose
    training-set mass reaches the given fraction of all training samples."""
    freq = np.asarray(train_freq, dtype=np.int64)
    if freq.ndim != 1:
        raise ContractError(f"train frequencies must be 1-d, got shape {freq.shape}")
    total = int(freq.sum())
    if total == 0:
        return np.array([], dtype=np.int64)
    order = np.lexsort((np.arange(len(freq)), freq))
    cum = np.cumsum(freq[order])
    need = fraction * total - 1e-9
    n_tail = int(np.searchsorted(cum, need, side="left")) + 1
    return np.sort(order[:n_tail])


def split_masks(targets: np.ndarray, participants: np.ndarray,
                train_freq: np.ndarray, held_out: Sequence[int]) -> dict:
    targets = np.asarray(targets, dtype=np.int64)
    participants = np.asarray(participants, dtype=np.int64)
    if targets.shape != participants.shape:
        raise ContractError("targets and participants differ in length")
    tail = tail_classes(train_freq)
    return {
        "overall": np.ones(len(targets), dtype=bool),
        "unseen": np.isin(participants, np.asarray(sorted(held_out), dtype=np.int64)),
        "tail": np.isin(targets, tail),
    }


def _cell(scores: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> dict:
    """One task x split cell; absent (null) metrics when the split is empty."""
    n = int(mask.sum())
    if n == 0:
        return {"count": 0, "top1": None, "top5": None,
                "class_mean_top1": None, "class_mean_recall5": None}
    s, t = scores[mask], targets[mask]
    k5 = min(5, scores.shape[-1])
    return {
        "count": n,
        "top1": topk_accuracy(s, t, 1),
        "top5": topk_accuracy(s, t, k5),
        "class_mean_top1": class_mean_accuracy(s, t, 1),
        "class_mean_recall5": class_mean_accuracy(s, t, k5),
    }


def build_report(action_scores: np.ndarray, targets: np.ndarray,
                 verb_targets: np.ndarray, noun_targets: np.ndarray,
                 participants: np.ndarray, verb_of: np.ndarray, noun_of: np.ndarray,
                 train_freq: np.ndarray, held_out: Sequence[int],
                 marginal_mode: str = "sum") -> dict:
    """Full metric tree: {action, verb, noun} x {overall, unseen, tail},
    each with top-1/top-5 and their class-mean variants, plus split counts."""
    action_scores = np.asarray(action_scores, dtype=np.float64)
    if action_scores.ndim != 2 or len(action_scores) == 0:
        raise ContractError("build_report needs a nonempty (n, classes) score table")
    masks = split_masks(targets, participants, train_freq, held_out)
    tables = {
        "action": (action_scores, np.asarray(targets, dtype=np.int64)),
        "verb": (derive_group_scores(action_scores, verb_of, marginal_mode),
                 np.asarray(verb_targets, dtype=np.int64)),
        "noun": (derive_group_scores(action_scores, noun_of, marginal_mode),
                 np.asarray(noun_targets, dtype=np.int64)),
    }
    report: dict = {
        "n_eval": int(len(action_scores)),
        "splits": {
            "unseen_count": int(masks["unseen"].sum()),
            "seen_count": int((~masks["unseen"]).sum()),
            "tail_count": int(masks["tail"].sum()),
            "tail_classes": tail_classes(train_freq).tolist(),
            "held_out_participants": sorted(int(p) for p in held_out),
        },
        "marginal_mode": marginal_mode,
    }
    for task, (scores, tgts) in tables.items():
        report[task] = {split: _cell(scores, tgts, mask) for split, mask in masks.items()}
    return report


def report_to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"


def report_to_csv(report: dict) -> str:
    """Flat companion format: one row per task x split x metric cell."""
    lines = ["task,split,metric,value,count"]
    for task in ("action", "verb", "noun"):
        for split in ("overall", "unseen", "tail"):
            cell = report[task][split]
            for metric in ("top1", "top5", "class_mean_top1", "class_mean_recall5"):
                value = cell[metric]
                text = "" if value is None else repr(float(value))
                lines.append(f"{task},{split},{metric},{text},{cell['count']}")
    return "\n".join(lines) + "\n"


def load_report(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read report {path}: {e}") from None


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation with average ranks on ties."""
    from scipy import stats

    rho = stats.spearmanr(np.asarray(x, dtype=float), np.asarray(y, dtype=float)).statistic
    return float(rho)
