"""Corpus plumbing: annotation parsing, observation-window arithmetic,
feature-file and frame-table I/O, object thresholding, label corruption,
batching, and batch assembly for the model."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError, FormatError
from .text import (
    DescriptionBank,
    hash_bag,
    load_denylist,
    render_action_prompt,
    render_object_prompt,
    tokenize,
)

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"AFB1"

ANNOTATION_COLUMNS = [
    "narration_id", "video_id", "participant_id", "start_frame",
    "stop_frame", "verb_class", "noun_class", "action_class",
]

TEXT_MODALITIES = ("obj_text", "act_text")

OBJECT_SCORE_THRESHOLD = 0.15
OBJECT_TOP_K = 5


@dataclass(frozen=True)
class WindowConfig:
    """Observation window: tau_o seconds of history ending tau_a seconds
    before the target action starts."""

    tau_a: float = 1.0
    tau_o: float = 16.0
    fps: float = 1.0

    def frames(self) -> int:
        t = self.tau_o * self.fps
        if abs(t - round(t)) > 1e-9 or round(t) < 1:
            raise ConfigError(f"tau_o * fps must be a positive whole frame count, got {t}")
        return int(round(t))

    def first_frame(self, start_frame: int) -> int:
        return math.floor(start_frame - (self.tau_a + self.tau_o) * self.fps)


@dataclass(frozen=True)
class SegmentDescriptor:
    narration_id: str
    video_id: str
    participant_id: int
    start_frame: int
    stop_frame: int
    verb: int
    noun: int
    action: int


class ActionVocab:
    """Dense action ids over verb/noun pairs, with name lookups."""

    def __init__(self, verbs: list, nouns: list, pairs: list):
        self.verbs = list(verbs)
        self.nouns = list(nouns)
        self.pairs = [tuple(p) for p in pairs]
        self.verb_of = np.array([v for v, _ in self.pairs], dtype=np.int64)
        self.noun_of = np.array([n for _, n in self.pairs], dtype=np.int64)
        if len(set(self.pairs)) != len(self.pairs):
            raise ConfigError("duplicate verb/noun pair in action vocabulary")
        if set(self.verb_of.tolist()) != set(range(len(self.verbs))):
            raise ConfigError("every verb must appear in at least one action")
        if set(self.noun_of.tolist()) != set(range(len(self.nouns))):
            raise ConfigError("every noun must appear in at least one action")

    @property
    def n_actions(self) -> int:
        return len(self.pairs)

    @property
    def n_verbs(self) -> int:
        return len(self.verbs)

    @property
    def n_nouns(self) -> int:
        return len(self.nouns)

    def action_name(self, action_id: int) -> str:
        v, n = self.pairs[action_id]
        return f"{self.verbs[v]} {self.nouns[n]}"

    def action_words(self) -> list:
        return [(self.verbs[v], self.nouns[n]) for v, n in self.pairs]


def load_vocab(path) -> ActionVocab:
    path = Path(path)
    verbs: dict[int, str] = {}
    nouns: dict[int, str] = {}
    actions: dict[int, tuple[int, int]] = {}
    try:
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or reader.fieldnames != ["kind", "id", "name", "verb_id", "noun_id"]:
                raise FormatError(f"{path}: unexpected vocabulary header {reader.fieldnames}")
            for row in reader:
                kind, idx = row["kind"], int(row["id"])
                if kind == "verb":
                    verbs[idx] = row["name"]
                elif kind == "noun":
                    nouns[idx] = row["name"]
                elif kind == "action":
                    actions[idx] = (int(row["verb_id"]), int(row["noun_id"]))
                else:
                    raise FormatError(f"{path}: unknown vocab kind '{kind}'")
    except OSError as e:
        raise DataError(f"cannot read vocabulary {path}: {e}") from None
    if sorted(actions) != list(range(len(actions))):
        raise DataError(f"{path}: action ids are not dense from 0")
    verb_list = [verbs[i] for i in sorted(verbs)]
    noun_list = [nouns[i] for i in sorted(nouns)]
    pair_list = [actions[i] for i in sorted(actions)]
    return ActionVocab(verb_list, noun_list, pair_list)


# ---------------------------------------------------------------------------
# annotation parsing and windows


def parse_annotations(path, window: WindowConfig) -> tuple[list[SegmentDescriptor], int]:
    """Read an annotation CSV; rows without enough observed history are
    skipped (the skip count is returned alongside the descriptors)."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            header = reader.fieldnames or []
            for col in ANNOTATION_COLUMNS:
                if col not in header:
                    raise FormatError(f"{path}: missing column '{col}'")
            rows = list(reader)
    except OSError as e:
        raise DataError(f"cannot read annotations {path}: {e}") from None

    out: list[SegmentDescriptor] = []
    skipped = 0
    for lineno, row in enumerate(rows, start=2):  # line 1 is the header
        try:
            desc = SegmentDescriptor(
                narration_id=row["narration_id"],
                video_id=row["video_id"],
                participant_id=int(row["participant_id"]),
                start_frame=int(row["start_frame"]),
                stop_frame=int(row["stop_frame"]),
                verb=int(row["verb_class"]),
                noun=int(row["noun_class"]),
                action=int(row["action_class"]),
            )
        except (TypeError, ValueError):
            raise DataError(f"{path}: malformed integer field at line {lineno}") from None
        if window.first_frame(desc.start_frame) < 0:
            skipped += 1
            continue
        out.append(desc)
    if skipped:
        log.info("%s: skipped %d segments with insufficient history", path.name, skipped)
    return out, skipped


def extract_observation(desc: SegmentDescriptor, window: WindowConfig) -> np.ndarray:
    first = window.first_frame(desc.start_frame)
    if first < 0:
        raise DataError(
            f"segment {desc.narration_id}: window would start at frame {first}"
        )
    return np.arange(first, first + window.frames())


# ---------------------------------------------------------------------------
# file formats


def write_features(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim != 2:
        raise DataError(f"feature arrays are (frames, dim), got shape {array.shape}")
    rows, dim = arr.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(np.array([rows, dim], dtype="<u4").tobytes())
        f.write(arr.tobytes())


def read_features(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read feature file {path}: {e}") from None
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated feature header")
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    rows, dim = np.frombuffer(blob, dtype="<u4", count=2, offset=4)
    expected = 12 + int(rows) * int(dim) * 4
    if len(blob) != expected:
        raise FormatError(f"{path}: size {len(blob)} != expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", count=int(rows) * int(dim), offset=12)
    return data.reshape(int(rows), int(dim)).copy()


def write_frame_table(path, labels: np.ndarray, objects: Sequence[Sequence[str]]) -> None:
    if len(labels) != len(objects):
        raise DataError("frame labels and object lists differ in length")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("frame_idx,action_class,objects\n")
        for i, (lab, objs) in enumerate(zip(labels, objects)):
            f.write(f"{i},{int(lab)},{'|'.join(objs)}\n")


def read_frame_table(path) -> tuple[np.ndarray, list]:
    path = Path(path)
    labels = []
    objects = []
    try:
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != ["frame_idx", "action_class", "objects"]:
                raise FormatError(f"{path}: unexpected frame-table header {reader.fieldnames}")
            for lineno, row in enumerate(reader, start=2):
                try:
                    idx = int(row["frame_idx"])
                    labels.append(int(row["action_class"]))
                except (TypeError, ValueError):
                    raise DataError(f"{path}: malformed row at line {lineno}") from None
                if idx != lineno - 2:
                    raise DataError(f"{path}: frame indices not consecutive at line {lineno}")
                cell = row["objects"] or ""
                objects.append([o for o in cell.split("|") if o])
    except OSError as e:
        raise DataError(f"cannot read frame table {path}: {e}") from None
    return np.array(labels, dtype=np.int64), objects


# ---------------------------------------------------------------------------
# small pure helpers


def top_objects(scores: dict, threshold: float = OBJECT_SCORE_THRESHOLD,
                k: int = OBJECT_TOP_K) -> list:
    """Names scoring at least the threshold, best first (ties by name),
    truncated to the k strongest."""
    kept = [(name, s) for name, s in scores.items() if s >= threshold]
    kept.sort(key=lambda item: (-item[1], item[0]))
    return [name for name, _ in kept[:k]]


def corrupt_actions(labels: np.ndarray, keep_prob: float, rng: np.random.Generator,
                    n_classes: int) -> np.ndarray:
    """Per frame: keep the label with probability keep_prob, otherwise draw a
    uniform replacement over all classes. Absent labels (negative) pass
    through untouched. Draw counts are fixed so streams stay aligned."""
    if not (0.0 <= keep_prob <= 1.0):
        raise ConfigError(f"keep probability must be in [0, 1], got {keep_prob}")
    labels = np.asarray(labels, dtype=np.int64)
    keep = rng.random(labels.shape) < keep_prob
    replacement = rng.integers(0, n_classes, size=labels.shape)
    out = labels.copy()
    swap = (~keep) & (labels >= 0)
    out[swap] = replacement[swap]
    return out


def make_batches(items: Sequence, batch_size: int, rng: np.random.Generator,
                 shuffle: bool = True, dedup_classes: bool = False,
                 class_key: Optional[Callable] = None) -> list:
    """Chunk items into an epoch-complete list of batches.

    With dedup_classes, items are dealt round-robin from per-class queues so
    no batch repeats a target class; when fewer distinct classes than
    batch_size remain, batches simply come up short (logged once).
    """
    if batch_size < 1:
        raise ContractError(f"batch size must be >= 1, got {batch_size}")
    n = len(items)
    if not dedup_classes:
        order = rng.permutation(n) if shuffle else np.arange(n)
        return [[items[j] for j in order[i:i + batch_size]] for i in range(0, n, batch_size)]

    if class_key is None:
        raise ContractError("dedup_classes needs a class_key")
    queues: dict = {}
    for item in items:
        queues.setdefault(class_key(item), []).append(item)
    for cls in queues:
        if shuffle:
            queue = queues[cls]
            perm = rng.permutation(len(queue))
            queues[cls] = [queue[int(i)] for i in perm]
    if len(queues) < batch_size:
        log.warning(
            "dedup batching: only %d distinct classes for batch size %d; "
            "batches will run short", len(queues), batch_size,
        )
    batches = []
    while queues:
        classes = sorted(queues)
        if shuffle:
            perm = rng.permutation(len(classes))
            classes = [classes[int(i)] for i in perm]
        for i in range(0, len(classes), batch_size):
            chunk = classes[i:i + batch_size]
            batches.append([queues[c].pop() for c in chunk])
        queues = {c: q for c, q in queues.items() if q}
    return batches


# ---------------------------------------------------------------------------
# corpus access


@dataclass
class Segment:
    descriptor: SegmentDescriptor
    frames: np.ndarray  # (T,) absolute frame indices
    features: dict  # dense modality -> (T, dim) float32
    labels: np.ndarray  # (T,) frame action labels over the window
    objects: list  # (T) object name lists

    @property
    def last_action(self) -> int:
        return int(self.labels[-1])


@dataclass
class Batch:
    dense: dict  # modality -> (B, T, dim)
    text: dict  # modality -> (ids, weights), each (B, T, K)
    descriptions: Optional[tuple]  # (ids, weights), each (B, K); pretrain only
    targets: np.ndarray
    verb_targets: np.ndarray
    noun_targets: np.ndarray
    last_actions: np.ndarray
    participants: np.ndarray
    narration_ids: list

    @property
    def size(self) -> int:
        return len(self.targets)

    def model_features(self) -> dict:
        merged = dict(self.dense)
        merged.update(self.text)
        return merged


def select_modalities(batch: Batch, keep: Iterable[str]) -> Batch:
    """Restrict a batch view to the named modalities; the rest are absent
    (the fuser substitutes their missing tokens)."""
    keep = set(keep)
    if not keep:
        raise ConfigError("modality selection is empty")
    known = set(batch.dense) | set(batch.text)
    unknown = keep - known
    if unknown:
        raise ConfigError(f"selecting unknown modalities: {sorted(unknown)}")
    return Batch(
        dense={m: v for m, v in batch.dense.items() if m in keep},
        text={m: v for m, v in batch.text.items() if m in keep},
        descriptions=batch.descriptions,
        targets=batch.targets,
        verb_targets=batch.verb_targets,
        noun_targets=batch.noun_targets,
        last_actions=batch.last_actions,
        participants=batch.participants,
        narration_ids=batch.narration_ids,
    )


def _pad_bags(grid: list) -> tuple[np.ndarray, np.ndarray]:
    """grid is a nested list of (ids, weights) pairs; returns rectangular
    arrays with zero-weight padding (id 0 is safe: weight 0 contributes 0)."""

    def depth_iter(node):
        if isinstance(node, tuple):
            yield node
        else:
            for sub in node:
                yield from depth_iter(sub)

    width = max((len(ids) for ids, _ in depth_iter(grid)), default=0)
    width = max(width, 1)

    def build(node):
        if isinstance(node, tuple):
            ids, weights = node
            pad_ids = np.zeros(width, dtype=np.int64)
            pad_w = np.zeros(width, dtype=np.float32)
            pad_ids[:len(ids)] = ids
            pad_w[:len(weights)] = weights
            return pad_ids, pad_w
        built = [build(sub) for sub in node]
        return (np.stack([b[0] for b in built]), np.stack([b[1] for b in built]))

    return build(grid)


class Corpus:
    """On-disk corpus opened for reading; feature and frame tables are cached
    in memory after first touch."""

    def __init__(self, root, window: Optional[WindowConfig] = None):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DataError(f"corpus directory {self.root} does not exist")
        meta = self._load_meta()
        if window is None:
            if meta and "window" in meta:
                window = WindowConfig(**meta["window"])
            else:
                window = WindowConfig()
        self.window = window
        self.meta = meta
        self.vocab = load_vocab(self.root / "vocab.csv")

        denylist = None
        deny_path = self.root / "denylist.txt"
        if deny_path.exists():
            denylist = load_denylist(deny_path)
        self.bank = DescriptionBank.load(self.root / "descriptions.json", denylist=denylist)
        self.bank.validate_against(range(self.vocab.n_actions))

        self._descriptors: dict[str, list[SegmentDescriptor]] = {}
        for split in ("train", "eval"):
            path = self.root / f"annotations_{split}.csv"
            if path.exists():
                descs, _ = parse_annotations(path, self.window)
                for d in descs:
                    if not (0 <= d.action < self.vocab.n_actions):
                        raise DataError(f"{path}: action id {d.action} outside vocabulary")
                self._descriptors[split] = descs
            else:
                self._descriptors[split] = []

        self._features: dict = {}
        self._frame_tables: dict = {}
        self._bag_cache: dict = {}
        self.dense_modalities = self._scan_modalities()

    def _load_meta(self) -> Optional[dict]:
        path = self.root / "world.json"
        if not path.exists():
            return None
        import json

        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise DataError(f"cannot read {path}: {e}") from None

    def _scan_modalities(self) -> tuple:
        feat_dir = self.root / "features"
        names = set()
        if feat_dir.is_dir():
            for p in feat_dir.glob("*.bin"):
                stem = p.stem  # "<video>_<modality>", video ids have no underscore
                if "_" in stem:
                    names.add(stem.split("_", 1)[1])
        return tuple(sorted(names))

    @property
    def modalities(self) -> tuple:
        return tuple(sorted(set(self.dense_modalities) | set(TEXT_MODALITIES)))

    def held_out_participants(self) -> set:
        if self.meta and "held_out_participants" in self.meta:
            return set(self.meta["held_out_participants"])
        train = {d.participant_id for d in self._descriptors["train"]}
        return {d.participant_id for d in self._descriptors["eval"]} - train

    def segments(self, split: str) -> list:
        if split not in self._descriptors:
            raise DataError(f"unknown split '{split}'")
        return list(self._descriptors[split])

    def train_frequencies(self) -> np.ndarray:
        freq = np.zeros(self.vocab.n_actions, dtype=np.int64)
        for d in self._descriptors["train"]:
            freq[d.action] += 1
        return freq

    def features_for(self, video_id: str, modality: str) -> np.ndarray:
        key = (video_id, modality)
        if key not in self._features:
            self._features[key] = read_features(
                self.root / "features" / f"{video_id}_{modality}.bin"
            )
        return self._features[key]

    def frame_table(self, video_id: str) -> tuple[np.ndarray, list]:
        if video_id not in self._frame_tables:
            self._frame_tables[video_id] = read_frame_table(
                self.root / "frames" / f"{video_id}.csv"
            )
        return self._frame_tables[video_id]

    def last_observed(self, desc: SegmentDescriptor) -> int:
        """Action label on the final frame of the observation window, without
        touching feature files."""
        idx = extract_observation(desc, self.window)
        labels, _ = self.frame_table(desc.video_id)
        if idx[-1] >= len(labels):
            raise DataError(
                f"segment {desc.narration_id}: window ends past the video"
            )
        return int(labels[idx[-1]])

    def segment(self, desc: SegmentDescriptor) -> Segment:
        idx = extract_observation(desc, self.window)
        labels, objects = self.frame_table(desc.video_id)
        if idx[-1] >= len(labels):
            raise DataError(
                f"segment {desc.narration_id}: window ends at frame {idx[-1]} "
                f"but video has {len(labels)} frames"
            )
        feats = {}
        for m in self.dense_modalities:
            table = self.features_for(desc.video_id, m)
            feats[m] = table[idx]
        return Segment(
            descriptor=desc,
            frames=idx,
            features=feats,
            labels=labels[idx],
            objects=[objects[i] for i in idx],
        )

    # -- hash-bag caching --------------------------------------------------

    def _bag(self, kind: str, key, prompt: str, buckets: int):
        cache_key = (kind, key, buckets)
        hit = self._bag_cache.get(cache_key)
        if hit is None:
            hit = hash_bag(tokenize(prompt), buckets)
            self._bag_cache[cache_key] = hit
        return hit

    def object_bag(self, names: Sequence[str], buckets: int):
        names = tuple(names)
        return self._bag("obj", names, render_object_prompt(names), buckets)

    def action_bag(self, action_id: int, buckets: int):
        names = [] if action_id < 0 else [self.vocab.action_name(action_id)]
        return self._bag("act", int(action_id), render_action_prompt(names), buckets)

    def description_bag(self, description: str, buckets: int):
        return self._bag("desc", description, description, buckets)


def assemble_batch(corpus: Corpus, descriptors: Sequence[SegmentDescriptor],
                   modalities: Iterable[str], stage: str, rng: np.random.Generator,
                   hash_buckets: int, corrupt_keep: float = 1.0) -> Batch:
    """Materialize one batch: stacked dense features, padded text hash bags
    (after optional action-label corruption), and, for pretraining, one
    sampled description bag per segment."""
    modalities = list(modalities)
    if not modalities:
        raise ConfigError("modality selection is empty")
    unknown = set(modalities) - set(corpus.modalities)
    if unknown:
        raise ConfigError(f"unknown modalities requested: {sorted(unknown)}")
    dense_names = [m for m in modalities if m in corpus.dense_modalities]
    text_names = [m for m in modalities if m in TEXT_MODALITIES]

    segments = [corpus.segment(d) for d in descriptors]
    n_classes = corpus.vocab.n_actions

    dense = {
        m: np.stack([seg.features[m] for seg in segments]).astype(np.float32)
        for m in dense_names
    }

    text: dict = {}
    if "act_text" in text_names:
        grid = []
        for seg in segments:
            labels = seg.labels
            if corrupt_keep < 1.0:
                labels = corrupt_actions(labels, corrupt_keep, rng, n_classes)
            grid.append([corpus.action_bag(int(a), hash_buckets) for a in labels])
        text["act_text"] = _pad_bags(grid)
    if "obj_text" in text_names:
        grid = [
            [corpus.object_bag(objs, hash_buckets) for objs in seg.objects]
            for seg in segments
        ]
        text["obj_text"] = _pad_bags(grid)

    descriptions = None
    if stage == "pretrain":
        bags = []
        for seg in segments:
            sampled = corpus.bank.sample(seg.descriptor.action, rng, mode="train")
            bags.append(corpus.description_bag(sampled, hash_buckets))
        descriptions = _pad_bags(bags)

    return Batch(
        dense=dense,
        text=text,
        descriptions=descriptions,
        targets=np.array([s.descriptor.action for s in segments], dtype=np.int64),
        verb_targets=np.array([s.descriptor.verb for s in segments], dtype=np.int64),
        noun_targets=np.array([s.descriptor.noun for s in segments], dtype=np.int64),
        last_actions=np.array([s.last_action for s in segments], dtype=np.int64),
        participants=np.array([s.descriptor.participant_id for s in segments], dtype=np.int64),
        narration_ids=[s.descriptor.narration_id for s in segments],
    )
