"""Scaled dot-product attention, multi-head attention and Transformer-XL pieces.

Shapes follow the (batch..., length, width) convention. Head-split tensors
are (batch..., heads, length, head_dim). ``d`` is the per-head width and
``dh = d * heads`` the model width.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import IndivisibleHeads, OddDimension, ShapeMismatch


@dataclass
class AttentionParams:
    """Per-head projections stacked as (heads, d, d); ``wo`` is (dh, dh).

    Stacking the per-head blocks is the same as a block-diagonal (dh, dh)
    projection applied to the head-split input.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    wkr: Optional[Tensor] = None
    u: Optional[Tensor] = None
    v: Optional[Tensor] = None

    def __post_init__(self):
        h, d, d2 = self.wq.shape
        if d != d2 or self.wk.shape != (h, d, d) or self.wv.shape != (h, d, d):
            raise ShapeMismatch("per-head projections must all be (heads, d, d)")
        if self.wo.shape != (h * d, h * d):
            raise ShapeMismatch(f"wo must be ({h * d}, {h * d}), got {self.wo.shape}")
        rel = [self.wkr is not None, self.u is not None, self.v is not None]
        if any(rel) and not all(rel):
            raise ShapeMismatch("wkr, u and v must be given together")
        if all(rel):
            if self.wkr.shape != (h, d, d) or self.u.shape != (h, d) or self.v.shape != (h, d):
                raise ShapeMismatch("relative params must be wkr (h,d,d), u (h,d), v (h,d)")

    @property
    def heads(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1]

    @property
    def relative(self) -> bool:
        return self.wkr is not None

    def named(self) -> Dict[str, Tensor]:
        out = {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}
        if self.relative:
            out.update(wkr=self.wkr, u=self.u, v=self.v)
        return out


# ---------------------------------------------------------------------------
# positional encodings and masks
# ---------------------------------------------------------------------------
def sinusoid_table(positions: Sequence[float], dim: int, dtype=np.float64) -> np.ndarray:
    if dim % 2:
        raise OddDimension(f"sinusoidal encoding needs an even width, got {dim}")
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    i2 = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / dim)
    out = np.empty((pos.shape[0], dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out.astype(dtype)


def absolute_pe(length: int, dh: int, dtype=None) -> Tensor:
    """Sinusoidal position table of shape (length, dh); added to embeddings."""
    return Tensor(sinusoid_table(np.arange(length), dh), dtype=dtype)


def causal_mask(length: int, mem: int = 0) -> np.ndarray:
    """Boolean (length, length+mem) array, True where attention is forbidden.

    Query i sits at key position mem+i and may see keys 0..mem+i.
    """
    i = np.arange(length)[:, None]
    j = np.arange(length + mem)[None, :]
    return j > mem + i


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------
def attention_weights(scores: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    if mask is not None:
        if mask.shape != scores.shape[-2:]:
            raise ShapeMismatch(f"mask {mask.shape} vs scores {scores.shape[-2:]}")
        scores = ad.masked_fill(scores, mask, -np.inf)
    return ad.softmax(scores, axis=-1)


def dpa(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None,
        return_weights: bool = False):
    """softmax(Q K^T / sqrt(d) + mask) V."""
    d = q.shape[-1]
    if d == 0 or k.shape[-1] != d:
        raise ShapeMismatch(f"dpa: query width {d} vs key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"dpa: {k.shape[-2]} keys but {v.shape[-2]} values")
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d))
    w = attention_weights(scores, mask)
    out = ad.matmul(w, v)
    return (out, w) if return_weights else out


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, width = x.shape
    if width % heads:
        raise IndivisibleHeads(f"width {width} is not divisible by {heads} heads")
    d = width // heads
    y = ad.reshape(x, (*lead, length, heads, d))
    nl = len(lead)
    return ad.transpose(y, (*range(nl), nl + 1, nl, nl + 2))


def merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, d = x.shape
    nl = len(lead)
    y = ad.transpose(x, (*range(nl), nl + 1, nl, nl + 2))
    return ad.reshape(y, (*lead, length, heads * d))


def mhdpa(x: Tensor, params: AttentionParams, heads: int,
          mask: Optional[np.ndarray] = None) -> Tensor:
    """Multi-head self-attention; head i attends over the i-th d-slice of x."""
    if x.shape[-1] % heads:
        raise IndivisibleHeads(f"width {x.shape[-1]} is not divisible by {heads} heads")
    if heads != params.heads:
        raise ShapeMismatch(f"params were built for {params.heads} heads, not {heads}")
    xh = split_heads(x, heads)
    q = ad.matmul(xh, params.wq)
    k = ad.matmul(xh, params.wk)
    v = ad.matmul(xh, params.wv)
    if mask is None:
        mask = causal_mask(x.shape[-2])
    out = dpa(q, k, v, mask)
    return ad.matmul(merge_heads(out), params.wo)


def relative_index(length: int, mem: int) -> np.ndarray:
    """Row of the relative table used by each (query, key) pair.

    Row r encodes distance ``mem + length - 1 - r``. Masked pairs (negative
    distance) are clipped onto the distance-0 row; their scores are masked.
    """
    i = np.arange(length)[:, None]
    j = np.arange(length + mem)[None, :]
    dist = mem + i - j
    return (mem + length - 1) - np.maximum(dist, 0)


def relative_table(length: int, mem: int, d: int, dtype=None) -> Tensor:
    """Sinusoids at distances mem+length-1 ... 0, shape (length+mem, d)."""
    return Tensor(sinusoid_table(np.arange(mem + length - 1, -1, -1), d), dtype=dtype)


def relative_scores(q: Tensor, k: Tensor, r: Tensor, wkr: Tensor, u: Tensor,
                    v: Tensor) -> Tensor:
    """Unscaled relative-position scores, shape (..., L, L+M).

    content  q_i.k_j
    + positional  q_i.(W R_{i-j})
    + global content bias  u.k_j
    + global positional bias  v.(W R_{i-j})

    ``wkr`` is (..., d, d) and ``u``, ``v`` are (..., d); leading axes
    broadcast against the heads axis of ``q``/``k``. Row-vector convention:
    the projected encoding is R @ wkr.
    """
    length, d = q.shape[-2], q.shape[-1]
    klen = k.shape[-2]
    mem = klen - length
    if mem < 0 or k.shape[-1] != d:
        raise ShapeMismatch(f"relative_scores: q {q.shape} vs k {k.shape}")
    if r.shape != (klen, d):
        raise ShapeMismatch(f"relative table must be ({klen}, {d}), got {r.shape}")
    if wkr.shape[-2:] != (d, d) or u.shape[-1] != d or v.shape[-1] != d:
        raise ShapeMismatch("relative_scores: wkr/u/v widths do not match head width")

    idx = relative_index(length, mem)
    rk = ad.matmul(r, wkr)                                # (..., L+M, d)
    rg = ad.index_select(rk, (Ellipsis, idx, slice(None)))  # (..., L, L+M, d)

    content = ad.matmul(q, ad.transpose(k))
    qi = ad.reshape(q, (*q.shape[:-1], 1, d))             # (..., L, 1, d)
    pos = ad.matmul(qi, ad.transpose(rg))                  # (..., L, 1, L+M)
    pos = ad.reshape(pos, (*pos.shape[:-2], klen))

    u_col = ad.reshape(u, (*u.shape, 1))
    glob_c = ad.transpose(ad.matmul(k, u_col))             # (..., 1, L+M)

    v_col = ad.reshape(v, (*v.shape[:-1], 1, v.shape[-1], 1))
    glob_p = ad.matmul(rg, v_col)                          # (..., L, L+M, 1)
    glob_p = ad.reshape(glob_p, glob_p.shape[:-1])
    return content + pos + glob_c + glob_p


def xl_attention(x: Tensor, mem: Optional[Tensor], params: AttentionParams,
                 heads: int) -> Tensor:
    """Relative multi-head attention over [memory; current segment].

    Queries come from ``x`` only. ``mem`` is (..., M, dh) and is wrapped in
    stop_gradient here as well, so no gradient ever reaches it.
    """
    if not params.relative:
        raise ShapeMismatch("xl_attention needs relative-position parameters")
    dh = x.shape[-1]
    if dh % heads:
        raise IndivisibleHeads(f"width {dh} is not divisible by {heads} heads")
    length = x.shape[-2]
    if mem is not None and mem.shape[-2] > 0:
        if mem.shape[-1] != dh or mem.shape[:-2] != x.shape[:-2]:
            raise ShapeMismatch(f"memory {mem.shape} does not match input {x.shape}")
        kv_in = ad.concat([ad.stop_gradient(mem), x], axis=-2)
    else:
        kv_in = x
    m = kv_in.shape[-2] - length
    d = dh // heads

    qh = ad.matmul(split_heads(x, heads), params.wq)
    kvh = split_heads(kv_in, heads)
    kh = ad.matmul(kvh, params.wk)
    vh = ad.matmul(kvh, params.wv)

    r = relative_table(length, m, d, dtype=x.dtype)
    scores = relative_scores(qh, kh, r, params.wkr, params.u, params.v)
    w = attention_weights(ad.scale(scores, 1.0 / math.sqrt(d)), causal_mask(length, m))
    out = ad.matmul(w, vh)
    return ad.matmul(merge_heads(out), params.wo)


# ---------------------------------------------------------------------------
# segment memory
# ---------------------------------------------------------------------------
@dataclass
class SegmentMemory:
    """Cached per-layer inputs of the previous segment(s)."""

    mem_len: int
    layers: List[Optional[Tensor]] = field(default_factory=list)

    @classmethod
    def empty(cls, n_layers: int, mem_len: int) -> "SegmentMemory":
        return cls(mem_len, [None] * n_layers)

    def layer(self, n: int) -> Optional[Tensor]:
        return self.layers[n] if n < len(self.layers) else None

    def current_length(self, n: int = 0) -> int:
        t = self.layer(n)
        return 0 if t is None else t.shape[-2]


def update_memory(mem: SegmentMemory, hidden: Sequence[Tensor]) -> SegmentMemory:
    """Keep the last ``mem_len`` rows of [old memory; hidden] per layer, detached."""
    new_layers: List[Optional[Tensor]] = []
    for n, h in enumerate(hidden):
        if mem.mem_len == 0:
            new_layers.append(None)
            continue
        old = mem.layer(n)
        joined = h.data if old is None else np.concatenate([old.data, h.data], axis=-2)
        kept = joined[..., -mem.mem_len:, :]
        new_layers.append(ad.stop_gradient(Tensor(kept, dtype=h.dtype)))
    return SegmentMemory(mem.mem_len, new_layers)
