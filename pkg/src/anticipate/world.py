"""Synthetic multi-modal world: Markov action dynamics with dwell times,
per-modality Gaussian emissions, a noisy object detector, corpus export in
the pinned file formats, and the brute-force oracle baselines that make
learned accuracy checkable."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .data import ActionVocab, WindowConfig, top_objects, write_features, write_frame_table
from .errors import ConfigError, DataError
from .rngstream import rng_stream, video_stream
from .text import generate_bank

VERB_WORDS = ["take", "wash", "cut", "open", "close", "pour", "shake", "stack"]
NOUN_WORDS = ["plate", "knife", "cup", "board", "pan", "jar"]

# salts separating the world's independent rng streams
_SALT_WORLD = 101
_SALT_BANK = 202


@dataclass
class EmissionConfig:
    informs: str  # "action" | "verb" | "noun"
    dim: int
    sigma: float


@dataclass
class WorldConfig:
    n_verbs: int = 6
    n_nouns: int = 4
    n_actions: int = 24
    successors: int = 3  # nonzero transition targets per row
    dwell_min: int = 3
    dwell_max: int = 8
    emissions: dict = field(default_factory=lambda: {
        "rgb": EmissionConfig("action", 32, 2.0),
        "flow": EmissionConfig("verb", 16, 1.0),
        "audio": EmissionConfig("verb", 16, 1.5),
        "obj_feat": EmissionConfig("noun", 16, 1.0),
    })
    object_hit_prob: float = 0.9
    distractor_rate: float = 1.0
    participants: int = 10
    held_out: int = 2

    def __post_init__(self):
        fixed = {}
        for name, em in self.emissions.items():
            fixed[name] = em if isinstance(em, EmissionConfig) else EmissionConfig(**em)
            if fixed[name].informs not in ("action", "verb", "noun"):
                raise ConfigError(f"emission '{name}' informs must be action|verb|noun")
            if fixed[name].sigma < 0:
                raise ConfigError(f"emission '{name}' sigma must be >= 0")
        self.emissions = fixed
        if self.n_actions > self.n_verbs * self.n_nouns:
            raise ConfigError(
                f"{self.n_actions} actions cannot come from "
                f"{self.n_verbs} verbs x {self.n_nouns} nouns"
            )
        if not (1 <= self.successors <= self.n_actions):
            raise ConfigError(f"successors must be in [1, {self.n_actions}]")
        if not (1 <= self.dwell_min <= self.dwell_max):
            raise ConfigError("need 1 <= dwell_min <= dwell_max")
        if not (0 <= self.held_out <= self.participants):
            raise ConfigError("held_out participants exceed participant count")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["emissions"] = {k: asdict(v) for k, v in self.emissions.items()}
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "WorldConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class WorldSpec:
    config: WorldConfig
    vocab: ActionVocab
    transitions: np.ndarray  # (C, C) row-stochastic
    initial: np.ndarray  # (C,)
    emission_means: dict  # modality -> (informed classes, dim) float32
    held_out_participants: tuple
    seed: int

    @property
    def n_actions(self) -> int:
        return self.vocab.n_actions


@dataclass
class Episode:
    video_id: str
    participant_id: int
    actions: np.ndarray  # (frames,) action id per frame
    objects: list  # per frame: list of object names
    features: dict  # modality -> (frames, dim) float32


def _word_list(base: list[str], n: int, kind: str) -> list[str]:
    if n <= len(base):
        return base[:n]
    return base + [f"{kind}{i}" for i in range(len(base), n)]


def _informed_count(informs: str, cfg: WorldConfig) -> int:
    return {"action": cfg.n_actions, "verb": cfg.n_verbs, "noun": cfg.n_nouns}[informs]


def build_world(config: WorldConfig, seed: int) -> WorldSpec:
    """Deterministic world from (config, seed): vocabulary, sparse random
    transition matrix with Dirichlet row weights, and fixed emission means."""
    rng = rng_stream(seed, _SALT_WORLD)
    verbs = _word_list(VERB_WORDS, config.n_verbs, "verb")
    nouns = _word_list(NOUN_WORDS, config.n_nouns, "noun")

    all_pairs = [(v, n) for v in range(config.n_verbs) for n in range(config.n_nouns)]
    if config.n_actions == len(all_pairs):
        pairs = all_pairs
    else:
        # cover every verb and noun first, then fill randomly
        cover = []
        for i in range(max(config.n_verbs, config.n_nouns)):
            cover.append((i % config.n_verbs, i % config.n_nouns))
        cover = list(dict.fromkeys(cover))
        if len(cover) > config.n_actions:
            raise ConfigError(
                f"{config.n_actions} actions cannot cover {config.n_verbs} verbs "
                f"and {config.n_nouns} nouns"
            )
        rest = [p for p in all_pairs if p not in set(cover)]
        extra_idx = rng.choice(len(rest), size=config.n_actions - len(cover), replace=False)
        pairs = cover + [rest[i] for i in sorted(extra_idx)]
    vocab = ActionVocab(verbs, nouns, pairs)

    c = config.n_actions
    transitions = np.zeros((c, c), dtype=np.float64)
    for a in range(c):
        succ = rng.choice(c, size=config.successors, replace=False)
        weights = rng.dirichlet(np.ones(config.successors))
        transitions[a, succ] = weights
    initial = np.full(c, 1.0 / c)

    means = {}
    for name in sorted(config.emissions):
        em = config.emissions[name]
        k = _informed_count(em.informs, config)
        means[name] = rng.standard_normal((k, em.dim)).astype(np.float32)

    held = tuple(range(config.participants - config.held_out, config.participants))
    return WorldSpec(
        config=config, vocab=vocab, transitions=transitions, initial=initial,
        emission_means=means, held_out_participants=held, seed=seed,
    )


def generate_episode(world: WorldSpec, frames: int, rng: np.random.Generator,
                     video_id: str = "v0000", participant_id: int = 0) -> Episode:
    """Sample one video: an action chain with dwell times, noisy per-modality
    features around the informed class means, and noisy object detections."""
    cfg = world.config
    labels = np.empty(frames, dtype=np.int64)
    filled = 0
    action = int(rng.choice(world.n_actions, p=world.initial))
    while filled < frames:
        dwell = int(rng.integers(cfg.dwell_min, cfg.dwell_max + 1))
        run = min(dwell, frames - filled)
        labels[filled:filled + run] = action
        filled += run
        action = int(rng.choice(world.n_actions, p=world.transitions[action]))

    features = {}
    for name in sorted(cfg.emissions):
        em = cfg.emissions[name]
        cls = {
            "action": labels,
            "verb": world.vocab.verb_of[labels],
            "noun": world.vocab.noun_of[labels],
        }[em.informs]
        noise = rng.standard_normal((frames, em.dim)).astype(np.float32)
        features[name] = world.emission_means[name][cls] + em.sigma * noise

    nouns = world.vocab.nouns
    objects = []
    for t in range(frames):
        active = int(world.vocab.noun_of[labels[t]])
        scores: dict[str, float] = {}
        if rng.random() < cfg.object_hit_prob:
            scores[nouns[active]] = 0.5 + 0.5 * float(rng.random())
        else:
            scores[nouns[active]] = 0.12 * float(rng.random())  # a miss, below threshold
        n_distract = int(rng.poisson(cfg.distractor_rate))
        others = [i for i in range(len(nouns)) if i != active]
        if n_distract > 0 and others:
            picked = rng.choice(len(others), size=min(n_distract, len(others)), replace=False)
            for i in picked:
                scores[nouns[others[int(i)]]] = 0.2 + 0.4 * float(rng.random())
        objects.append(top_objects(scores))
    return Episode(video_id, participant_id, labels, objects, features)


def action_starts(labels: np.ndarray) -> list[int]:
    """Frame indices where a new action run begins (frame 0 included)."""
    if len(labels) == 0:
        return []
    changes = np.flatnonzero(np.diff(labels) != 0) + 1
    return [0] + changes.tolist()


def _segment_rows(episode: Episode, window: WindowConfig) -> list[dict]:
    starts = action_starts(episode.actions)
    min_start = (window.tau_a + window.tau_o) * window.fps
    rows = []
    for k, t0 in enumerate(starts):
        if t0 < min_start:
            continue
        stop = starts[k + 1] if k + 1 < len(starts) else len(episode.actions)
        rows.append({
            "narration_id": f"{episode.video_id}_{k:03d}",
            "video_id": episode.video_id,
            "participant_id": episode.participant_id,
            "start_frame": int(t0),
            "stop_frame": int(stop),
            "action": int(episode.actions[t0]),
        })
    return rows


def export_corpus(world: WorldSpec, out_dir, n_videos: int, frames_per_video: int,
                  window: Optional[WindowConfig] = None,
                  train_cap: Optional[int] = None, eval_cap: Optional[int] = None) -> dict:
    """Write the full on-disk corpus; returns summary counts.

    Videos are dealt round-robin over participants; held-out participants go
    entirely to the eval split, and every fourth round of the remaining
    participants' videos is also held for eval so the seen/eval cells are
    populated.
    """
    window = window or WindowConfig()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "frames").mkdir(exist_ok=True)

    cfg = world.config
    vocab = world.vocab
    with open(out / "vocab.csv", "w", encoding="utf-8", newline="\n") as f:
        f.write("kind,id,name,verb_id,noun_id\n")
        for i, v in enumerate(vocab.verbs):
            f.write(f"verb,{i},{v},,\n")
        for i, n in enumerate(vocab.nouns):
            f.write(f"noun,{i},{n},,\n")
        for a in range(vocab.n_actions):
            f.write(f"action,{a},{vocab.action_name(a)},{vocab.verb_of[a]},{vocab.noun_of[a]}\n")

    bank = generate_bank(vocab.action_words(), rng_stream(world.seed, _SALT_BANK))
    bank.save(out / "descriptions.json")

    header = "narration_id,video_id,participant_id,start_frame,stop_frame,verb_class,noun_class,action_class\n"
    train_rows, eval_rows = [], []
    eval_videos = []
    for i in range(n_videos):
        participant = i % cfg.participants
        episode = generate_episode(
            world, frames_per_video, video_stream(world.seed, i),
            video_id=f"v{i:04d}", participant_id=participant,
        )
        for name, feats in sorted(episode.features.items()):
            write_features(out / "features" / f"{episode.video_id}_{name}.bin", feats)
        write_frame_table(out / "frames" / f"{episode.video_id}.csv",
                          episode.actions, episode.objects)

        is_eval = participant in world.held_out_participants or (i // cfg.participants) % 4 == 3
        if is_eval:
            eval_videos.append(episode.video_id)
        bucket = eval_rows if is_eval else train_rows
        bucket.extend(_segment_rows(episode, window))

    if train_cap is not None:
        train_rows = train_rows[:train_cap]
    if eval_cap is not None:
        eval_rows = eval_rows[:eval_cap]

    for fname, rows in (("annotations_train.csv", train_rows),
                        ("annotations_eval.csv", eval_rows)):
        with open(out / fname, "w", encoding="utf-8", newline="\n") as f:
            f.write(header)
            for r in rows:
                f.write(
                    f"{r['narration_id']},{r['video_id']},{r['participant_id']},"
                    f"{r['start_frame']},{r['stop_frame']},"
                    f"{vocab.verb_of[r['action']]},{vocab.noun_of[r['action']]},{r['action']}\n"
                )

    world_meta = {
        "seed": world.seed,
        "config": cfg.to_dict(),
        "held_out_participants": list(world.held_out_participants),
        "eval_videos": eval_videos,
        "transitions": world.transitions.tolist(),
        "initial": world.initial.tolist(),
        "window": {"tau_a": window.tau_a, "tau_o": window.tau_o, "fps": window.fps},
    }
    (out / "world.json").write_text(
        json.dumps(world_meta, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    return {
        "train_segments": len(train_rows),
        "eval_segments": len(eval_rows),
        "videos": n_videos,
        "eval_videos": len(eval_videos),
    }


def load_world(corpus_dir) -> WorldSpec:
    """Rebuild the WorldSpec recorded next to an exported corpus."""
    path = Path(corpus_dir) / "world.json"
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read world metadata {path}: {e}") from None
    config = WorldConfig.from_dict(meta["config"])
    world = build_world(config, int(meta["seed"]))
    # trust the stored matrix over a rebuild so tampering is at least visible
    stored = np.asarray(meta["transitions"], dtype=np.float64)
    if stored.shape != world.transitions.shape or not np.allclose(stored, world.transitions):
        raise DataError(f"{path}: stored transitions disagree with rebuilt world")
    return world


def oracle_accuracy(world: WorldSpec, last_actions, targets) -> dict:
    """Best label-informed predictor: argmax of the transition row of the
    last observed action (ties to the lowest id), scored against the true
    targets, next to the uniform-chance floor."""
    last = np.asarray(last_actions, dtype=np.int64)
    tgt = np.asarray(targets, dtype=np.int64)
    if last.shape != tgt.shape:
        raise DataError(f"oracle inputs differ in length: {last.shape} vs {tgt.shape}")
    preds = np.argmax(world.transitions, axis=1)  # argmax takes lowest index on ties
    top1 = float((preds[last] == tgt).mean()) if len(last) else 0.0
    return {"label_oracle_top1": top1, "chance": 1.0 / world.n_actions}
