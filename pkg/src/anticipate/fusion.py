"""Per-time-step multi-modal fusion: learnable fusion tokens attend over the
projected modality tokens through a small encoder stack, and the mean of the
fusion tokens' final states becomes the fused frame vector."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .blocks import EncoderBlock, Module, normal_param
from .errors import ContractError, ShapeError
from .tensor import DEFAULT_DTYPE, Tensor


class TokenFuser(Module):
    """One shared parameter set applied independently at every time step.

    The per-step token sequence is [fusion tokens, modality tokens + type
    embeddings]; a modality that is absent contributes its learned missing
    token instead, so sequence length never varies. No attention mask: order
    carries no meaning beyond the type embeddings.
    """

    def __init__(self, dim: int, heads: int, depth: int, modalities: tuple[str, ...],
                 n_fuse: int = 1, rng: Optional[np.random.Generator] = None,
                 use_missing_tokens: bool = True, dtype=DEFAULT_DTYPE):
        if n_fuse < 1:
            raise ContractError(f"need at least one fusion token, got {n_fuse}")
        if not modalities:
            raise ContractError("fuser needs at least one registered modality")
        self.dim = dim
        self.n_fuse = n_fuse
        self.modalities = tuple(modalities)
        self.use_missing_tokens = use_missing_tokens
        self.fusion_tokens = normal_param(rng, (n_fuse, dim), dtype=dtype)
        self.type_embeds = {m: normal_param(rng, (dim,), dtype=dtype) for m in self.modalities}
        self.missing_tokens = {m: normal_param(rng, (dim,), dtype=dtype) for m in self.modalities}
        self.blocks = [EncoderBlock(dim, heads, rng, dtype) for _ in range(depth)]
        self.dtype = dtype

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}fusion_tokens", self.fusion_tokens)]
        for m in self.modalities:
            out.append((f"{prefix}type.{m}", self.type_embeds[m]))
        for m in self.modalities:
            out.append((f"{prefix}missing.{m}", self.missing_tokens[m]))
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named_params(f"{prefix}block{i}."))
        return out

    def __call__(self, features: dict[str, Tensor]) -> Tensor:
        """Fuse (batch, time, dim) tensors per modality into one (batch, time,
        dim) sequence; steps are processed independently (flattened to rows).
        """
        unknown = set(features) - set(self.modalities)
        if unknown:
            raise ContractError(f"unregistered modalities passed to fuser: {sorted(unknown)}")
        present = [m for m in self.modalities if m in features]
        if not present:
            if not self.use_missing_tokens:
                raise ContractError("no present modalities and missing tokens are disabled")
            raise ShapeError("at least one present modality is needed to size the batch")
        missing = [m for m in self.modalities if m not in features]
        if missing and not self.use_missing_tokens:
            raise ContractError(
                f"modalities {missing} absent and missing tokens are disabled"
            )

        first = T.as_tensor(features[present[0]])
        if first.data.ndim != 3 or first.shape[2] != self.dim:
            raise ShapeError(f"fuser expects (batch, time, {self.dim}), got {first.shape}")
        b, t = first.shape[0], first.shape[1]
        rows = b * t

        def spread(x: Tensor) -> Tensor:
            # broadcast a (1, s, d) parameter across all rows, on the tape
            pad = Tensor(np.zeros((rows, 1, 1), dtype=self.dtype))
            return T.add(x, pad)

        parts = [spread(T.reshape(self.fusion_tokens, (1, self.n_fuse, self.dim)))]
        for m in self.modalities:
            type_vec = T.reshape(self.type_embeds[m], (1, 1, self.dim))
            if m in features:
                x = T.as_tensor(features[m])
                if x.shape != (b, t, self.dim):
                    raise ShapeError(
                        f"modality '{m}' shape {x.shape} != {(b, t, self.dim)}"
                    )
                token = T.add(T.reshape(x, (rows, 1, self.dim)), type_vec)
            else:
                token = spread(T.add(T.reshape(self.missing_tokens[m], (1, 1, self.dim)), type_vec))
            parts.append(token)

        seq = T.concat(parts, axis=1)  # (rows, n_fuse + M, dim)
        for blk in self.blocks:
            seq = blk(seq)
        fused = T.mean(T.narrow(seq, 1, 0, self.n_fuse), axis=1)
        return T.reshape(fused, (b, t, self.dim))

    def step(self, features: dict[str, Tensor]) -> Tensor:
        """Single time step: dim-vectors in, fused dim-vector out."""
        lifted = {m: T.reshape(T.as_tensor(x), (1, 1, self.dim)) for m, x in features.items()}
        return T.reshape(self(lifted), (self.dim,))
