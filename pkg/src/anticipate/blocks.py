"""Transformer building blocks: linear layers, multi-head attention with
optional masking, pre-norm encoder blocks, and the causal decoder stack."""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import DEFAULT_DTYPE, Tensor

log = logging.getLogger(__name__)

INIT_STD = 0.02


def normal_param(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True, dtype=dtype)


def zeros_param(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, dtype=dtype)


def ones_param(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, dtype=dtype)


class Module:
    """Minimal parameter-container base: children discovered by attribute."""

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            key = f"{prefix}{name}" if prefix else name
            if isinstance(value, Tensor):
                out.append((key, value))
            elif isinstance(value, Module):
                out.extend(value.named_params(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{key}{i}."))
                    elif isinstance(item, Tensor):
                        out.append((f"{key}{i}", item))
            elif isinstance(value, dict):
                for k in sorted(value):
                    item = value[k]
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{key}.{k}."))
                    elif isinstance(item, Tensor):
                        out.append((f"{key}.{k}", item))
        return out

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]


class Linear(Module):
    """Affine map; weight stored (out_dim, in_dim), applied as x @ W^T + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 std: float = INIT_STD, dtype=DEFAULT_DTYPE):
        self.weight = normal_param(rng, (out_dim, in_dim), std, dtype)
        self.bias = zeros_param((out_dim,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, T.transpose(self.weight)), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=DEFAULT_DTYPE):
        self.gamma = ones_param((dim,), dtype)
        self.beta = zeros_param((dim,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.mul(T.layer_norm(x), self.gamma), self.beta)


def causal_mask(n: int, include_self: bool = True) -> np.ndarray:
    """Boolean (n, n) mask; True = query row may attend that key column.

    include_self=True lets position t see 1..t; False restricts to the strict
    past, which leaves row 0 with no keys at all (callers must opt into
    zero-fill for that variant).
    """
    if n < 0:
        raise ShapeError(f"causal_mask: negative size {n}")
    offset = 0 if include_self else -1
    return np.tril(np.ones((n, n), dtype=bool), k=offset)


class MultiHeadAttention(Module):
    """Scaled dot-product attention, k heads over model dim d (d % k == 0)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        if dim % heads != 0:
            raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng, dtype=dtype)
        self.k_proj = Linear(dim, dim, rng, dtype=dtype)
        self.v_proj = Linear(dim, dim, rng, dtype=dtype)
        self.out_proj = Linear(dim, dim, rng, dtype=dtype)

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name in ("q_proj", "k_proj", "v_proj", "out_proj"):
            out.extend(getattr(self, name).named_params(f"{prefix}{name}."))
        return out

    def __call__(
        self,
        q_seq: Tensor,
        k_seq: Optional[Tensor] = None,
        v_seq: Optional[Tensor] = None,
        mask: Optional[np.ndarray] = None,
        allow_empty_rows: bool = False,
        return_weights: bool = False,
    ):
        k_seq = q_seq if k_seq is None else k_seq
        v_seq = k_seq if v_seq is None else v_seq
        if q_seq.shape[-1] != self.dim or k_seq.shape[-1] != self.dim:
            raise ShapeError(
                f"attention: sequences must end in dim {self.dim}, "
                f"got {q_seq.shape} / {k_seq.shape}"
            )
        b, lq = q_seq.shape[0], q_seq.shape[1]
        lk = k_seq.shape[1]
        h, dh = self.heads, self.dim // self.heads

        empty_rows = None
        if mask is not None:
            if mask.shape != (lq, lk):
                raise ShapeError(f"attention: mask shape {mask.shape} != ({lq}, {lk})")
            row_alive = mask.any(axis=1)
            if not row_alive.all():
                if not allow_empty_rows:
                    raise ContractError(
                        "attention: some query rows have every key masked; "
                        "pass allow_empty_rows=True to zero-fill them"
                    )
                empty_rows = ~row_alive
                log.debug("attention: zero-filling %d fully masked rows", int(empty_rows.sum()))

        def split_heads(x, length):
            x = T.reshape(x, (b, length, h, dh))
            return T.transpose(x, (0, 2, 1, 3))  # (b, h, len, dh)

        q = split_heads(self.q_proj(q_seq), lq)
        k = split_heads(self.k_proj(k_seq), lk)
        v = split_heads(self.v_proj(v_seq), lk)

        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh))
        if mask is not None:
            fill = np.where(mask, 0.0, -1e9).astype(q_seq.dtype)
            scores = T.add(scores, Tensor(fill))
        att = T.softmax(scores, axis=-1)  # (b, h, lq, lk)

        ctx = T.matmul(att, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, lq, self.dim))
        if empty_rows is not None:
            # masked-out queries get defined zero context instead of the
            # uniform average softmax produces on an all -1e9 row
            keep = np.where(empty_rows, 0.0, 1.0).astype(q_seq.dtype)[None, :, None]
            ctx = T.mul(ctx, Tensor(keep))
        out = self.out_proj(ctx)
        if return_weights:
            return out, att.data
        return out


class FeedForward(Module):
    def __init__(self, dim: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.expand = Linear(dim, 4 * dim, rng, dtype=dtype)
        self.contract = Linear(4 * dim, dim, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.contract(T.gelu(self.expand(x)))


class EncoderBlock(Module):
    """Pre-norm residual block: x + MHA(LN(x)), then x + FF(LN(x))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.norm_attn = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm_ff = LayerNorm(dim, dtype)
        self.ff = FeedForward(dim, rng, dtype)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None,
                 allow_empty_rows: bool = False) -> Tensor:
        x = T.add(x, self.attn(self.norm_attn(x), mask=mask, allow_empty_rows=allow_empty_rows))
        return T.add(x, self.ff(self.norm_ff(x)))


class CausalDecoder(Module):
    """Stack of masked encoder blocks over a fused frame sequence.

    Adds a learned absolute position table, applies depth blocks under a
    causal mask, then a final norm. Output at position t depends only on
    inputs at positions <= t (< t with attend_self off).
    """

    def __init__(self, dim: int, heads: int, depth: int, max_len: int,
                 rng: np.random.Generator, attend_self: bool = True, dtype=DEFAULT_DTYPE):
        self.pos_table = normal_param(rng, (max_len, dim), dtype=dtype)
        self.blocks = [EncoderBlock(dim, heads, rng, dtype) for _ in range(depth)]
        self.final_norm = LayerNorm(dim, dtype)
        self.attend_self = attend_self
        self.max_len = max_len

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}pos_table", self.pos_table)]
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named_params(f"{prefix}block{i}."))
        out.extend(self.final_norm.named_params(f"{prefix}final_norm."))
        return out

    def __call__(self, z: Tensor) -> Tensor:
        if z.data.ndim != 3:
            raise ShapeError(f"decoder input must be (batch, time, dim), got {z.shape}")
        n = z.shape[1]
        if n > self.max_len:
            raise ShapeError(f"sequence length {n} exceeds position table size {self.max_len}")
        pos = T.embedding_lookup(self.pos_table, np.arange(n))
        x = T.add(z, pos)
        mask = causal_mask(n, include_self=self.attend_self)
        for blk in self.blocks:
            x = blk(x, mask=mask, allow_empty_rows=not self.attend_self)
        return self.final_norm(x)
