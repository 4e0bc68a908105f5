"""Text handling: tokenization, the deterministic hash-bag featurizer that
stands in for a pre-trained text encoder, prompt templates for the object and
action modalities, and per-action description banks."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError

_TOKEN_RE = re.compile(r"[a-z0-9]+")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

DEFAULT_BUCKETS = 4096

OBJECT_PROMPT = "A video containing the following objects: {}"
ACTION_PROMPT = "A video containing the following actions: {}"
NO_ACTION = "no action"


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs; empties dropped."""
    return _TOKEN_RE.findall(text.lower())


def fnv1a64(token: str) -> int:
    h = FNV_OFFSET
    for byte in token.encode("utf-8"):
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def bucket_and_sign(token: str, buckets: int) -> tuple[int, int]:
    # sign from the hash's population-count parity: even -> +1, odd -> -1
    h = fnv1a64(token)
    sign = 1 if (bin(h).count("1") % 2 == 0) else -1
    return h % buckets, sign


def hash_bag(tokens: Iterable[str], buckets: int = DEFAULT_BUCKETS) -> tuple[np.ndarray, np.ndarray]:
    """Sparse signed-bag feature: (bucket ids, L2-normalized weights).

    Buckets whose +1/-1 contributions cancel are dropped. Empty token lists
    give empty arrays (the all-zero vector).
    """
    acc: dict[int, int] = {}
    for tok in tokens:
        b, s = bucket_and_sign(tok, buckets)
        acc[b] = acc.get(b, 0) + s
    items = sorted((b, c) for b, c in acc.items() if c != 0)
    if not items:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float32)
    ids = np.array([b for b, _ in items], dtype=np.int64)
    counts = np.array([c for _, c in items], dtype=np.float64)
    weights = counts / np.linalg.norm(counts)
    return ids, weights.astype(np.float32)


def hash_embed(tokens: Iterable[str], buckets: int = DEFAULT_BUCKETS) -> np.ndarray:
    """Dense form of hash_bag: fixed-width signed bag, L2-normalized."""
    vec = np.zeros(buckets, dtype=np.float32)
    ids, weights = hash_bag(tokens, buckets)
    vec[ids] = weights
    return vec


def render_object_prompt(names: Sequence[str]) -> str:
    listed = ", ".join(names) if names else "none"
    return OBJECT_PROMPT.format(listed)


def render_action_prompt(names: Sequence[str]) -> str:
    """Absent annotation (empty list) renders the no-action tag."""
    listed = ", ".join(names) if names else NO_ACTION
    return ACTION_PROMPT.format(listed)


class DescriptionBank:
    """action class id -> list of description strings (>= 1 each)."""

    def __init__(self, entries: dict[int, list[str]]):
        for cls, descs in entries.items():
            if not descs:
                raise DataError(f"description bank: class {cls} has no descriptions")
            if any(not d for d in descs):
                raise DataError(f"description bank: class {cls} contains an empty string")
        self.entries = {int(k): list(v) for k, v in entries.items()}

    def __contains__(self, cls: int) -> bool:
        return cls in self.entries

    def classes(self) -> list[int]:
        return sorted(self.entries)

    def sample(self, cls: int, rng: np.random.Generator, mode: str = "train") -> str:
        """train: uniform draw via rng; eval: first entry, deterministic."""
        if cls not in self.entries:
            raise DataError(f"description bank: unknown action class {cls}")
        descs = self.entries[cls]
        if mode == "eval":
            return descs[0]
        return descs[int(rng.integers(len(descs)))]

    def validate_against(self, class_ids: Iterable[int]) -> None:
        missing = sorted(set(class_ids) - set(self.entries))
        if missing:
            raise DataError(f"description bank missing classes: {missing}")

    def save(self, path) -> None:
        payload = {str(k): self.entries[k] for k in sorted(self.entries)}
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, denylist: Optional[Sequence[str]] = None) -> "DescriptionBank":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read description bank {path}: {e}") from None
        entries: dict[int, list[str]] = {}
        for key, descs in raw.items():
            try:
                cls_id = int(key)
            except ValueError:
                raise DataError(f"description bank {path}: non-integer class key '{key}'") from None
            if not isinstance(descs, list):
                raise DataError(f"description bank {path}: class {key} value is not a list")
            kept = descs
            if denylist:
                kept = [d for d in descs if not _denied(d, denylist)]
            if not kept:
                raise DataError(
                    f"description bank {path}: class {key} has no usable descriptions"
                    + (" after denylist filtering" if denylist else "")
                )
            entries[cls_id] = kept
        return cls(entries)


def _denied(text: str, denylist: Sequence[str]) -> bool:
    lowered = text.lower()
    return any(bad in lowered for bad in denylist)


def load_denylist(path) -> list[str]:
    """Newline-separated lowercase substrings; blank lines ignored."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


TOOL_WORDS = ["sponge", "towel", "tongs", "spatula", "ladle", "brush"]
LOCATION_WORDS = ["sink", "counter", "stove", "table", "shelf", "cupboard"]

_TEMPLATES = [
    "{verb} the {noun} using a {tool} near the {location}",
    "a person {verb}s the {noun} with a {tool} by the {location}",
    "someone {verb}s a {noun} at the {location}",
    "the {noun} is {verb}ed carefully next to the {location}",
    "{verb} a {noun} while holding a {tool}",
    "hands {verb} the {noun} on the {location} using a {tool}",
    "the {noun} gets {verb}ed with help from a {tool}",
    "{verb} the {noun} right beside the {location}",
    "quickly {verb} the {noun} using the {tool}",
    "a {noun} being {verb}ed close to the {location}",
]


def generate_bank(action_names: Sequence[tuple[str, str]], rng: np.random.Generator,
                  n_descriptions: int = 10) -> DescriptionBank:
    """Template-based bank: one entry list per action, built from its verb and
    noun plus randomly chosen tool and location words.

    ``action_names`` is an ordered list of (verb, noun) pairs; position is the
    action class id.
    """
    entries: dict[int, list[str]] = {}
    for cls, (verb, noun) in enumerate(action_names):
        descs = []
        for i in range(n_descriptions):
            template = _TEMPLATES[i % len(_TEMPLATES)]
            descs.append(template.format(
                verb=verb,
                noun=noun,
                tool=TOOL_WORDS[int(rng.integers(len(TOOL_WORDS)))],
                location=LOCATION_WORDS[int(rng.integers(len(LOCATION_WORDS)))],
            ))
        entries[cls] = descs
    return DescriptionBank(entries)
