"""Transformer, Transformer-XL and R-Transformer language models with gates."""
from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .attention import (
    AttentionParams,
    SegmentMemory,
    absolute_pe,
    causal_mask,
    mhdpa,
    update_memory,
    xl_attention,
)
from .autodiff import Tensor
from .errors import ConfigError, InvalidPlacement, OutOfVocab, ShapeMismatch
from .gating import (
    GateKind,
    GateParams,
    gated_mhdpa_combine,
    highway_gate,
    sdu,
    sdu_param_count,
)

VARIANTS = ("vanilla", "xl", "rt")
RNN_CELLS = ("gru", "lstm")
INITS = ("uniform", "gaussian", "paper-literal")


@dataclass(frozen=True)
class GatePlacement:
    """Which (layer, sublayer) slots carry a gate. Layers are 1-based."""

    kind: GateKind = GateKind.NONE
    layers: FrozenSet[int] = frozenset()
    include_ffn: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", GateKind.parse(self.kind)
                           if isinstance(self.kind, str) else self.kind)
        object.__setattr__(self, "layers", frozenset(int(n) for n in self.layers))

    @classmethod
    def none(cls) -> "GatePlacement":
        return cls(GateKind.NONE, frozenset(), True)

    @classmethod
    def on(cls, kind, layers, include_ffn: bool = True) -> "GatePlacement":
        return cls(kind, frozenset(layers), include_ffn)

    def covers(self, layer: int, sublayer: str = "att") -> bool:
        if self.kind is GateKind.NONE or layer not in self.layers:
            return False
        return sublayer == "att" or self.include_ffn

    def problems(self, n_layers: int) -> List[str]:
        out = []
        if self.kind is GateKind.NONE and self.layers:
            out.append("gate_layers must be empty when gate=none")
        if self.kind is not GateKind.NONE and not self.layers:
            out.append("gate_layers must name at least one layer")
        bad = sorted(n for n in self.layers if not 1 <= n <= n_layers)
        if bad:
            out.append(f"gate_layers {bad} outside 1..{n_layers}")
        return out


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "vanilla"
    n_layers: int = 3
    dh: int = 128
    heads: int = 8
    d_ffn: int = 512
    vocab_size: int = 256
    mem_len: int = 0
    local_window: int = 7
    rnn_cell: str = "gru"
    dropout_sublayer: float = 0.0
    dropout_embed: float = 0.0
    gate: GatePlacement = field(default_factory=GatePlacement.none)
    init: str = "uniform"
    init_scale: float = 0.1
    precision: str = "single"
    ln_eps: float = 1e-5

    @property
    def head_dim(self) -> int:
        return self.dh // self.heads

    @property
    def dtype(self):
        return ad.dtype_of(self.precision)

    def problems(self) -> List[str]:
        out = []
        if self.variant not in VARIANTS:
            out.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_layers < 1:
            out.append("n_layers must be >= 1")
        if self.dh < 1 or self.heads < 1:
            out.append("dh and heads must be positive")
        elif self.dh % self.heads:
            out.append(f"dh={self.dh} is not divisible by heads={self.heads}")
        elif self.variant == "xl" and self.head_dim % 2:
            out.append("xl needs an even per-head width for the relative sinusoid")
        if self.variant == "vanilla" and self.dh % 2:
            out.append("vanilla needs an even dh for the absolute sinusoid")
        if self.d_ffn < 1:
            out.append("d_ffn must be >= 1")
        if self.vocab_size < 1:
            out.append("vocab_size must be >= 1")
        if self.mem_len < 0:
            out.append("mem_len must be >= 0")
        if self.local_window < 1:
            out.append("local_window must be >= 1")
        if self.rnn_cell not in RNN_CELLS:
            out.append(f"rnn_cell must be one of {RNN_CELLS}")
        for name in ("dropout_sublayer", "dropout_embed"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                out.append(f"{name} must be in [0, 1)")
        if self.init not in INITS:
            out.append(f"init must be one of {INITS}")
        if self.init_scale <= 0 and self.init != "paper-literal":
            out.append("init_scale must be positive")
        if self.precision not in ad.PRECISIONS:
            out.append("precision must be single or double")
        if self.ln_eps <= 0:
            out.append("ln_eps must be positive")
        out.extend(self.gate.problems(self.n_layers))
        return out

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self


def default_init(variant: str, level: str = "char") -> Tuple[str, float]:
    """Initializer per variant: U(-0.1, 0.1) char, U(-0.01, 0.01) word, N(0, 0.02^2) XL."""
    if variant == "xl":
        return "gaussian", 0.02
    return ("uniform", 0.1) if level == "char" else ("uniform", 0.01)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------
@dataclass
class RNNParams:
    kind: str
    wx: Tensor
    wh: Tensor
    b: Tensor
    un: Optional[Tensor] = None  # GRU candidate recurrence (applied to r * h)

    def named(self) -> Dict[str, Tensor]:
        out = {"wx": self.wx, "wh": self.wh, "b": self.b}
        if self.un is not None:
            out["un"] = self.un
        return out


@dataclass
class LayerParams:
    attn: AttentionParams
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    gate_att: Optional[GateParams] = None
    gate_ffn: Optional[GateParams] = None
    rnn: Optional[RNNParams] = None

    def named(self) -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        if self.rnn is not None:
            for k, t in self.rnn.named().items():
                out[f"rnn.{k}"] = t
        for k, t in self.attn.named().items():
            out[f"attn.{k}"] = t
        out.update({
            "ln1.gamma": self.ln1_gamma, "ln1.beta": self.ln1_beta,
            "ffn.w1": self.ffn_w1, "ffn.b1": self.ffn_b1,
            "ffn.w2": self.ffn_w2, "ffn.b2": self.ffn_b2,
            "ln2.gamma": self.ln2_gamma, "ln2.beta": self.ln2_beta,
        })
        for prefix, g in (("gate_att", self.gate_att), ("gate_ffn", self.gate_ffn)):
            if g is not None:
                for k, t in g.named().items():
                    out[f"{prefix}.{k}"] = t
        return out


class _Init:
    """Draws weights in a fixed order from one seeded generator.

    Gates draw from their own per-slot streams so that the shared weights of
    a gated and an ungated model with the same seed are identical.
    """

    def __init__(self, cfg: ModelConfig, seed: int):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.dtype = cfg.dtype
        self.kind = cfg.init
        self.scale = 1.0 if cfg.init == "paper-literal" else cfg.init_scale

    def weight(self, *shape, rng: Optional[np.random.Generator] = None) -> Tensor:
        rng = rng or self.rng
        if self.kind == "uniform":
            w = rng.uniform(-self.scale, self.scale, size=shape)
        else:
            w = rng.normal(0.0, self.scale, size=shape)
        return Tensor(w, requires_grad=True, dtype=self.dtype)

    def zeros(self, *shape) -> Tensor:
        return Tensor(np.zeros(shape), requires_grad=True, dtype=self.dtype)

    def ones(self, *shape) -> Tensor:
        return Tensor(np.ones(shape), requires_grad=True, dtype=self.dtype)

    def gate(self, dh: int, layer: int, slot: int) -> GateParams:
        rng = np.random.default_rng([self.seed, 1, layer, slot])
        return GateParams(self.weight(dh, dh, rng=rng), self.zeros(dh),
                          self.weight(dh, dh, rng=rng), self.zeros(dh))


def init_rnn(init: _Init, kind: str, dh: int) -> RNNParams:
    if kind == "gru":
        return RNNParams("gru", init.weight(dh, 3 * dh), init.weight(dh, 2 * dh),
                         init.zeros(3 * dh), init.weight(dh, dh))
    return RNNParams("lstm", init.weight(dh, 4 * dh), init.weight(dh, 4 * dh), init.zeros(4 * dh))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------
def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else ad.add(y, b)


def ffn(u: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Position-wise FF(ReLU(FF(u)))."""
    if u.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise ShapeMismatch(f"ffn: input {u.shape}, w1 {w1.shape}, w2 {w2.shape}")
    return linear(ad.relu(linear(u, w1, b1)), w2, b2)


def rnn_cell_step(kind: str, p: RNNParams, state, x: Tensor):
    """One recurrent update.

    GRU:  z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br),
          n = tanh(x Wn + (r*h) Un + bn),  h' = (1 - z) * h + z * n
    LSTM: i, f, o = sig(.), g = tanh(.),  c' = f*c + i*g,  h' = o * tanh(c')
    The LSTM state is the pair (h, c).
    """
    dh = x.shape[-1]
    if kind == "gru":
        h = state
        gx = linear(x, p.wx, p.b)
        gh = ad.matmul(h, p.wh)
        z = ad.sigmoid(ad.add(gx[..., :dh], gh[..., :dh]))
        r = ad.sigmoid(ad.add(gx[..., dh:2 * dh], gh[..., dh:]))
        n = ad.tanh(ad.add(gx[..., 2 * dh:], ad.matmul(ad.mul(r, h), p.un)))
        return ad.add(ad.mul(ad.one_minus(z), h), ad.mul(z, n))
    if kind == "lstm":
        h, c = state
        pre = ad.add(linear(x, p.wx, p.b), ad.matmul(h, p.wh))
        i = ad.sigmoid(pre[..., :dh])
        f = ad.sigmoid(pre[..., dh:2 * dh])
        g = ad.tanh(pre[..., 2 * dh:3 * dh])
        o = ad.sigmoid(pre[..., 3 * dh:])
        c2 = ad.add(ad.mul(f, c), ad.mul(i, g))
        return ad.mul(o, ad.tanh(c2)), c2
    raise ValueError(f"unknown rnn cell {kind!r}")


def zero_state(kind: str, like: Tensor):
    z = Tensor(np.zeros(like.shape), dtype=like.dtype)
    return (z, Tensor(np.zeros(like.shape), dtype=like.dtype)) if kind == "lstm" else z


def local_rnn(e: Tensor, p: RNNParams, window: int) -> Tensor:
    """Output t is the final hidden state after running the cell over
    e[max(0, t-window+1) .. t] from a zero state. All positions advance
    together, one window offset per step."""
    if window < 1:
        raise ValueError("window must be >= 1")
    length = e.shape[-2]
    steps = min(window, length)
    t = np.arange(length)
    state = zero_state(p.kind, e)
    for s in range(steps):
        src = t - (steps - 1) + s
        valid = (src >= 0)[:, None]
        x = ad.index_select(e, (Ellipsis, np.maximum(src, 0), slice(None)))
        new = rnn_cell_step(p.kind, p, state, x)
        if valid.all():
            state = new
        elif p.kind == "lstm":
            state = (ad.where_mask(valid, new[0], state[0]), ad.where_mask(valid, new[1], state[1]))
        else:
            state = ad.where_mask(valid, new, state)
    return state[0] if p.kind == "lstm" else state


DropFn = Callable[[Tensor, str], Tensor]


def _no_drop(x: Tensor, site: str) -> Tensor:
    return x


def _attend(x: Tensor, p: LayerParams, heads: int, mem: Optional[Tensor]) -> Tensor:
    if p.attn.relative:
        return xl_attention(x, mem, p.attn, heads)
    return mhdpa(x, p.attn, heads, causal_mask(x.shape[-2]))


def transformer_layer(x: Tensor, p: LayerParams, heads: int, *, mem: Optional[Tensor] = None,
                      drop: DropFn = _no_drop, site: str = "", eps: float = 1e-5) -> Tensor:
    """U = LN(X + Att(X)); O = LN(U + FFN(U))."""
    att = drop(_attend(x, p, heads, mem), f"{site}.att")
    u = ad.layer_norm(ad.add(x, att), p.ln1_gamma, p.ln1_beta, eps)
    f = drop(ffn(u, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2), f"{site}.ffn")
    return ad.layer_norm(ad.add(u, f), p.ln2_gamma, p.ln2_beta, eps)


def gated_transformer_layer(x: Tensor, p: LayerParams, g: GatePlacement, heads: int, *,
                            mem: Optional[Tensor] = None, drop: DropFn = _no_drop,
                            site: str = "", eps: float = 1e-5) -> Tensor:
    """Transformer layer with the gate of ``g.kind`` on the attention sublayer.

    SDU:          U = LN(X + Att + SDU(X))
    highway:      U = LN(o(X) + Att),  o = (1-T) X + T f(X)
    gated MHDPA:  U = LN(o + X),       o = (1-T) Att + T f(X)
    The FFN sublayer gets O = LN(U + FFN(U) + SDU(U)) when ``p.gate_ffn`` is
    present (sigmoid SDU for the highway-style kinds), else LN(U + FFN(U)).
    """
    if g.kind is GateKind.NONE:
        raise InvalidPlacement("gated_transformer_layer called with gate kind none")
    if p.gate_att is None:
        raise InvalidPlacement("layer has no attention gate parameters")
    att = drop(_attend(x, p, heads, mem), f"{site}.att")
    if g.kind.is_sdu:
        s = drop(sdu(x, p.gate_att, g.kind.psi), f"{site}.sdu_att")
        pre = ad.add(ad.add(x, att), s)
    elif g.kind is GateKind.HIGHWAY:
        pre = ad.add(highway_gate(x, p.gate_att), att)
    else:
        pre = ad.add(gated_mhdpa_combine(att, x, p.gate_att), x)
    u = ad.layer_norm(pre, p.ln1_gamma, p.ln1_beta, eps)

    f = drop(ffn(u, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2), f"{site}.ffn")
    pre = ad.add(u, f)
    if p.gate_ffn is not None:
        pre = ad.add(pre, drop(sdu(u, p.gate_ffn, g.kind.psi), f"{site}.sdu_ffn"))
    return ad.layer_norm(pre, p.ln2_gamma, p.ln2_beta, eps)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------
class DropoutStream:
    """Counter-based dropout masks: one Philox stream per (seed, step, site)."""

    def __init__(self, seed: int, step: int = 0):
        self.seed = int(seed)
        self.step = int(step)

    def rng(self, site: str) -> np.random.Generator:
        site_id = zlib.crc32(site.encode("utf-8"))
        bitgen = np.random.Philox(key=self.seed & (2 ** 64 - 1),
                                  counter=[self.step, site_id, 0, 0])
        return np.random.Generator(bitgen)


@dataclass
class Model:
    cfg: ModelConfig
    embed: Tensor
    layers: List[LayerParams]
    head_w: Tensor
    head_b: Tensor

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        out["embed.weight"] = self.embed
        for n, lp in enumerate(self.layers):
            for k, t in lp.named().items():
                out[f"layers.{n}.{k}"] = t
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def gates(self) -> List[Tuple[str, GateParams]]:
        """(tag, params) per gate instance: a<k> on attention, b<k> on FFN."""
        out = []
        for n, lp in enumerate(self.layers, start=1):
            if lp.gate_att is not None:
                out.append((f"a{n}", lp.gate_att))
            if lp.gate_ffn is not None:
                out.append((f"b{n}", lp.gate_ffn))
        return out

    def empty_memory(self) -> Optional[SegmentMemory]:
        if self.cfg.variant != "xl":
            return None
        return SegmentMemory.empty(self.cfg.n_layers, self.cfg.mem_len)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    cfg.validate()
    init = _Init(cfg, seed)
    dh, h, d = cfg.dh, cfg.heads, cfg.head_dim
    embed = init.weight(cfg.vocab_size, dh)
    layers = []
    for n in range(1, cfg.n_layers + 1):
        rnn = init_rnn(init, cfg.rnn_cell, dh) if cfg.variant == "rt" else None
        rel = {}
        if cfg.variant == "xl":
            rel = dict(wkr=init.weight(h, d, d), u=init.weight(h, d), v=init.weight(h, d))
        attn = AttentionParams(init.weight(h, d, d), init.weight(h, d, d), init.weight(h, d, d),
                               init.weight(dh, dh), **rel)
        lp = LayerParams(
            attn=attn,
            ffn_w1=init.weight(dh, cfg.d_ffn), ffn_b1=init.zeros(cfg.d_ffn),
            ffn_w2=init.weight(cfg.d_ffn, dh), ffn_b2=init.zeros(dh),
            ln1_gamma=init.ones(dh), ln1_beta=init.zeros(dh),
            ln2_gamma=init.ones(dh), ln2_beta=init.zeros(dh),
            rnn=rnn,
        )
        if cfg.gate.covers(n, "att"):
            lp.gate_att = init.gate(dh, n, 0)
        if cfg.gate.covers(n, "ffn"):
            lp.gate_ffn = init.gate(dh, n, 1)
        layers.append(lp)
    head_w = init.weight(dh, cfg.vocab_size)
    head_b = init.zeros(cfg.vocab_size)
    return Model(cfg, embed, layers, head_w, head_b)


def forward_lm(model: Model, tokens, mem: Optional[SegmentMemory] = None, *,
               training: bool = False, dropout: Optional[DropoutStream] = None,
               return_hidden: bool = False):
    """Next-token logits (batch, L, vocab) and the updated XL memory (or None)."""
    cfg = model.cfg
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ShapeMismatch(f"tokens must be (batch, L), got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise OutOfVocab(f"token ids must lie in [0, {cfg.vocab_size})")
    if cfg.variant != "xl" and mem is not None:
        raise ValueError("segment memory is only used by the xl variant")
    if cfg.variant == "xl" and mem is None:
        mem = model.empty_memory()

    use_drop = training and dropout is not None

    def drop(x: Tensor, site: str, p: float = cfg.dropout_sublayer) -> Tensor:
        if not use_drop or p <= 0.0:
            return x
        return ad.dropout(x, p, True, dropout.rng(site))

    length = tokens.shape[1]
    x = ad.embedding(model.embed, tokens)
    if cfg.variant == "vanilla":
        x = ad.add(x, absolute_pe(length, cfg.dh, dtype=cfg.dtype))
    x = drop(x, "embed", cfg.dropout_embed)

    inputs = []
    for n, lp in enumerate(model.layers, start=1):
        site = f"layers.{n}"
        if cfg.variant == "rt":
            x = local_rnn(x, lp.rnn, cfg.local_window)
        inputs.append(x)
        layer_mem = mem.layer(n - 1) if mem is not None else None
        if lp.gate_att is not None:
            x = gated_transformer_layer(x, lp, cfg.gate, cfg.heads, mem=layer_mem,
                                        drop=drop, site=site, eps=cfg.ln_eps)
        else:
            x = transformer_layer(x, lp, cfg.heads, mem=layer_mem, drop=drop, site=site,
                                  eps=cfg.ln_eps)
    logits = linear(x, model.head_w, model.head_b)
    new_mem = update_memory(mem, inputs) if mem is not None else None
    if return_hidden:
        return logits, new_mem, x
    return logits, new_mem


def lm_loss(model: Model, inputs, targets, mem: Optional[SegmentMemory] = None, **kw):
    logits, new_mem = forward_lm(model, inputs, mem, **kw)
    return ad.cross_entropy(logits, np.asarray(targets).reshape(logits.shape[:-1])), new_mem


def count_parameters(model: Model) -> "OrderedDict[str, int]":
    """Exact parameter counts per component plus ``total``."""
    out: "OrderedDict[str, int]" = OrderedDict()
    out["embedding"] = model.embed.size
    for n, lp in enumerate(model.layers, start=1):
        if lp.rnn is not None:
            out[f"layer{n}.rnn"] = sum(t.size for t in lp.rnn.named().values())
        out[f"layer{n}.attention"] = sum(t.size for t in lp.attn.named().values())
        out[f"layer{n}.ffn"] = lp.ffn_w1.size + lp.ffn_b1.size + lp.ffn_w2.size + lp.ffn_b2.size
        out[f"layer{n}.ln"] = sum(t.size for t in (lp.ln1_gamma, lp.ln1_beta,
                                                   lp.ln2_gamma, lp.ln2_beta))
        if lp.gate_att is not None:
            out[f"layer{n}.gate_att"] = lp.gate_att.num_parameters()
        if lp.gate_ffn is not None:
            out[f"layer{n}.gate_ffn"] = lp.gate_ffn.num_parameters()
    out["head"] = model.head_w.size + model.head_b.size
    out["total"] = sum(out.values())
    return out


def expected_gate_delta(cfg: ModelConfig) -> int:
    """Parameters the placement adds over the ungated model."""
    g = cfg.gate
    if g.kind is GateKind.NONE:
        return 0
    per_layer = 2 if g.include_ffn else 1
    return len(g.layers) * per_layer * sdu_param_count(cfg.dh)


def with_gate(cfg: ModelConfig, gate: GatePlacement) -> ModelConfig:
    return replace(cfg, gate=gate)
