"""Full anticipation model: per-modality projections, token fusion, the
causal future-feature decoder, contrastive heads, and the action classifier,
plus the binary checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .blocks import CausalDecoder, Linear, Module, normal_param, zeros_param
from .errors import ConfigError, ContractError, DataError, FormatError, ShapeError
from .fusion import TokenFuser
from .rngstream import rng_stream
from .tensor import DEFAULT_DTYPE, Tensor

# canonical ordering for every registered modality; text modalities arrive as
# sparse hash bags, the rest as dense per-frame feature rows
MODALITY_ORDER = ("rgb", "flow", "audio", "obj_feat", "obj_text", "act_text")

INIT_TEMPERATURE = 0.07

CHECKPOINT_MAGIC = b"ANTC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    fuser_depth: int = 2
    decoder_depth: int = 4
    contrast_dim: int = 64
    n_fuse: int = 1
    frames: int = 16
    classes: int = 24
    hash_buckets: int = 4096
    modality_dims: dict = field(
        default_factory=lambda: {"rgb": 32, "flow": 16, "audio": 16, "obj_feat": 16}
    )
    text_modalities: tuple = ("obj_text", "act_text")
    attend_self: bool = True
    contrast_anchor: str = "anticipated"  # "anticipated" (decoder output) or "fused"

    def __post_init__(self):
        self.text_modalities = tuple(self.text_modalities)
        if self.contrast_anchor not in ("anticipated", "fused"):
            raise ConfigError(f"contrast_anchor must be anticipated|fused, got {self.contrast_anchor}")
        for m in list(self.modality_dims) + list(self.text_modalities):
            if m not in MODALITY_ORDER:
                raise ConfigError(f"unknown modality '{m}'; known: {MODALITY_ORDER}")
        overlap = set(self.modality_dims) & set(self.text_modalities)
        if overlap:
            raise ConfigError(f"modalities declared both dense and text: {sorted(overlap)}")

    def modalities(self) -> tuple:
        """All registered modalities in canonical order."""
        mine = set(self.modality_dims) | set(self.text_modalities)
        return tuple(m for m in MODALITY_ORDER if m in mine)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "heads": self.heads,
            "fuser_depth": self.fuser_depth,
            "decoder_depth": self.decoder_depth,
            "contrast_dim": self.contrast_dim,
            "n_fuse": self.n_fuse,
            "frames": self.frames,
            "classes": self.classes,
            "hash_buckets": self.hash_buckets,
            "modality_dims": dict(self.modality_dims),
            "text_modalities": list(self.text_modalities),
            "attend_self": self.attend_self,
            "contrast_anchor": self.contrast_anchor,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = set(cls().to_dict())
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class ModelState:
    """One forward pass over a batch: fused frames and their anticipated
    successors, both (batch, time, dim)."""

    fused: Tensor
    anticipated: Tensor


class HashProjector(Module):
    """Linear map applied to a sparse hash-bag vector.

    Stored as a (buckets, out_dim) table so the product is a weighted row
    gather instead of a dense multiply against mostly-zero input.
    """

    def __init__(self, buckets: int, out_dim: int, rng, dtype=DEFAULT_DTYPE):
        self.table = normal_param(rng, (buckets, out_dim), dtype=dtype)
        self.bias = zeros_param((out_dim,), dtype=dtype)

    def __call__(self, ids: np.ndarray, weights: np.ndarray) -> Tensor:
        return T.add(T.bag_project(self.table, ids, weights), self.bias)


TextInput = tuple  # (ids array, weights array), trailing axis = bag slots
BatchFeatures = dict  # modality name -> (B, T, native) array or TextInput


class AnticipationModel(Module):
    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None,
                 dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else rng_stream(0)
        self.config = config
        self.dtype = dtype
        d = config.dim

        self.projectors = {
            m: Linear(config.modality_dims[m], d, rng, dtype=dtype)
            for m in sorted(config.modality_dims)
        }
        self.text_projectors = {
            m: HashProjector(config.hash_buckets, d, rng, dtype=dtype)
            for m in sorted(config.text_modalities)
        }
        self.fuser = TokenFuser(
            d, config.heads, config.fuser_depth, modalities=config.modalities(),
            n_fuse=config.n_fuse, rng=rng, dtype=dtype,
        )
        self.decoder = CausalDecoder(
            d, config.heads, config.decoder_depth, max_len=config.frames,
            rng=rng, attend_self=config.attend_self, dtype=dtype,
        )
        self.video_head = Linear(d, config.contrast_dim, rng, dtype=dtype)
        self.text_head = HashProjector(config.hash_buckets, config.contrast_dim, rng, dtype=dtype)
        self.log_temp = Tensor(np.asarray(np.log(INIT_TEMPERATURE), dtype=dtype),
                               requires_grad=True, dtype=dtype)
        self.classifier = Linear(d, config.classes, rng, dtype=dtype)

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for m in sorted(self.projectors):
            out.extend(self.projectors[m].named_params(f"{prefix}projector.{m}."))
        for m in sorted(self.text_projectors):
            out.extend(self.text_projectors[m].named_params(f"{prefix}text_projector.{m}."))
        out.extend(self.fuser.named_params(f"{prefix}fuser."))
        out.extend(self.decoder.named_params(f"{prefix}decoder."))
        out.extend(self.video_head.named_params(f"{prefix}video_head."))
        out.extend(self.text_head.named_params(f"{prefix}text_head."))
        out.append((f"{prefix}log_temp", self.log_temp))
        out.extend(self.classifier.named_params(f"{prefix}classifier."))
        return out

    # -- forward pieces ----------------------------------------------------

    def project(self, features: BatchFeatures) -> dict[str, Tensor]:
        tokens: dict[str, Tensor] = {}
        for m, value in features.items():
            if value is None:
                continue
            if m in self.text_projectors:
                ids, weights = value
                tokens[m] = self.text_projectors[m](ids, weights)
            elif m in self.projectors:
                x = T.as_tensor(value)
                if x.shape[-1] != self.config.modality_dims[m]:
                    raise ShapeError(
                        f"modality '{m}': native dim {x.shape[-1]} != "
                        f"{self.config.modality_dims[m]}"
                    )
                tokens[m] = self.projectors[m](x)
            else:
                raise ConfigError(f"modality '{m}' is not registered in the model config")
        return tokens

    def encode(self, features: BatchFeatures) -> ModelState:
        fused = self.fuser(self.project(features))
        return ModelState(fused=fused, anticipated=self.decoder(fused))

    def _last_step(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return T.reshape(T.narrow(x, 1, t - 1, t), (b, d))

    def contrast_anchor(self, state: ModelState) -> Tensor:
        source = state.anticipated if self.config.contrast_anchor == "anticipated" else state.fused
        return self._last_step(source)

    def video_embed(self, state: ModelState) -> Tensor:
        return T.l2_normalize(self.video_head(self.contrast_anchor(state)), axis=-1)

    def text_embed(self, ids: np.ndarray, weights: np.ndarray) -> Tensor:
        return T.l2_normalize(self.text_head(ids, weights), axis=-1)

    def classify(self, state: ModelState) -> Tensor:
        return self.classifier(self._last_step(state.anticipated))

    def forward(self, features: BatchFeatures, stage: str) -> dict:
        if stage not in ("pretrain", "finetune"):
            raise ContractError(f"stage must be pretrain|finetune, got '{stage}'")
        state = self.encode(features)
        out = {"fused": state.fused, "anticipated": state.anticipated, "state": state}
        if stage == "pretrain":
            out["video"] = self.video_embed(state)
        else:
            out["logits"] = self.classify(state)
        return out

    # -- parameter management ---------------------------------------------

    def classifier_param_ids(self) -> set[int]:
        return {id(t) for t in self.classifier.params()}

    def set_frozen(self, frozen: bool) -> None:
        """Frozen mode trains the classifier only; everything else keeps its
        values and drops off the tape."""
        head = self.classifier_param_ids()
        for _, p in self.named_params():
            p.requires_grad = (id(p) in head) if frozen else True

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_params()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, p in self.named_params():
            p.data[...] = snap[name]


# -- checkpoint format -----------------------------------------------------
# magic "ANTC" | u32 version | u32 header length | header JSON | f32 payload
# header: {"config": model config dict, "manifest": [{"name", "shape"}...]}
# payload: each manifest tensor, row-major little-endian float32, in order


def save_checkpoint(model: AnticipationModel, path: Union[str, Path]) -> None:
    named = model.named_params()
    manifest = [{"name": name, "shape": list(p.shape)} for name, p in named]
    header = json.dumps(
        {"config": model.config.to_dict(), "manifest": manifest},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for _, p in named:
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path: Union[str, Path], dtype=DEFAULT_DTYPE) -> AnticipationModel:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from None
    if len(blob) < 12:
        raise FormatError(f"checkpoint {path}: truncated before header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"checkpoint {path}: bad magic {blob[:4]!r}")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint {path}: unsupported version {version}")
    if len(blob) < 12 + header_len:
        raise FormatError(f"checkpoint {path}: truncated header")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"checkpoint {path}: unreadable header: {e}") from None

    config = ModelConfig.from_dict(header["config"])
    model = AnticipationModel(config, rng=rng_stream(0), dtype=dtype)
    by_name = dict(model.named_params())

    manifest = header["manifest"]
    names_in_file = [entry["name"] for entry in manifest]
    if sorted(names_in_file) != sorted(by_name):
        extra = sorted(set(names_in_file) - set(by_name))
        missing = sorted(set(by_name) - set(names_in_file))
        raise DataError(
            f"checkpoint {path}: manifest mismatch; unexpected={extra} missing={missing}"
        )
    mismatched = [
        f"{e['name']}: file {tuple(e['shape'])} vs model {by_name[e['name']].shape}"
        for e in manifest
        if tuple(e["shape"]) != by_name[e["name"]].shape
    ]
    if mismatched:
        raise DataError(f"checkpoint {path}: shape mismatches: " + "; ".join(mismatched))

    offset = 12 + header_len
    for entry in manifest:
        name, shape = entry["name"], tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise FormatError(f"checkpoint {path}: truncated payload at tensor '{name}'")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        by_name[name].data[...] = arr.astype(dtype)
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"checkpoint {path}: {len(blob) - offset} trailing bytes")
    return model
