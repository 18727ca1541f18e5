"""The standard gradient-check cases: every op, then whole models."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, causal_mask, dpa, mhdpa, relative_scores, xl_attention
from .autodiff import Tensor
from .gating import GateKind, GateParams, gated_mhdpa_combine, highway_gate, sdu
from .gradcheck import check_model_gradients, finite_diff_check
from .model import (
    GatePlacement,
    ModelConfig,
    RNNParams,
    build_model,
    forward_lm,
    local_rnn,
)

VARIANTS = ("vanilla", "xl", "rt")
GATE_KINDS = tuple(k.value for k in GateKind)


@dataclass
class CaseResult:
    name: str
    max_rel_err: float
    seconds: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def op_cases(seed: int = 0):
    """(name, fn, x) triples; ``fn(x)`` is a scalar that depends on x generically."""
    rng = np.random.default_rng(seed)

    def r(*shape, away: float = 0.0):
        x = rng.normal(size=shape)
        if away:
            x = np.sign(x) * (np.abs(x) + away)
        return x

    def weighted(f, shape_out):
        w = _t(r(*shape_out))
        return lambda x: ad.tsum(ad.mul(f(x), w))

    cases = []

    def add_case(name, f, x_arr, out_shape):
        cases.append((name, weighted(f, out_shape), _t(x_arr)))

    a, b = r(3, 4), r(3, 4)
    add_case("add", lambda x: ad.add(x, _t(b)), a, (3, 4))
    add_case("add.broadcast", lambda x: ad.add(_t(a), x), r(4), (3, 4))
    add_case("sub", lambda x: ad.sub(_t(a), x), b, (3, 4))
    add_case("mul", lambda x: ad.mul(x, _t(b)), a, (3, 4))
    add_case("div.num", lambda x: ad.div(x, _t(b + 3.0 * np.sign(b))), a, (3, 4))
    add_case("div.den", lambda x: ad.div(_t(a), x), r(3, 4, away=0.5), (3, 4))
    add_case("neg", ad.neg, a, (3, 4))
    add_case("scale", lambda x: ad.scale(x, 0.37), a, (3, 4))
    m2 = r(4, 5)
    add_case("matmul.left", lambda x: ad.matmul(x, _t(m2)), a, (3, 5))
    add_case("matmul.right", lambda x: ad.matmul(_t(a), x), m2, (3, 5))
    m3 = r(2, 4, 3)
    add_case("matmul.batched", lambda x: ad.matmul(x, _t(m3)), r(2, 3, 4), (2, 3, 3))
    add_case("transpose", ad.transpose, r(2, 3, 4), (2, 4, 3))
    add_case("reshape", lambda x: ad.reshape(x, (4, 3)), a, (4, 3))
    idx = np.array([0, 2, 2, 1])
    add_case("index_select", lambda x: ad.index_select(x, (idx,)), a, (4, 4))
    add_case("concat", lambda x: ad.concat([x, _t(b)], axis=0), a, (6, 4))
    add_case("tsum", lambda x: ad.tsum(x, axis=1), a, (3,))
    add_case("mean", lambda x: ad.mean(x, axis=0, keepdims=True), a, (1, 4))
    add_case("sigmoid", ad.sigmoid, a, (3, 4))
    add_case("tanh", ad.tanh, a, (3, 4))
    add_case("relu", ad.relu, r(3, 4, away=0.1), (3, 4))
    add_case("exp", ad.exp, a, (3, 4))
    add_case("log", ad.log, np.abs(a) + 0.5, (3, 4))
    add_case("one_minus", ad.one_minus, a, (3, 4))
    mask = np.triu(np.ones((3, 4), dtype=bool), 2)
    add_case("masked_softmax", lambda x: ad.softmax(ad.masked_fill(x, mask, -np.inf)), a, (3, 4))
    add_case("softmax", ad.softmax, a, (3, 4))
    add_case("log_softmax", ad.log_softmax, a, (3, 4))
    g, be = r(4), r(4)
    add_case("layer_norm.x", lambda x: ad.layer_norm(x, _t(g), _t(be)), a, (3, 4))
    add_case("layer_norm.gamma", lambda x: ad.layer_norm(_t(a), x, _t(be)), g, (3, 4))
    add_case("layer_norm.beta", lambda x: ad.layer_norm(_t(a), _t(g), x), be, (3, 4))
    ids = np.array([[1, 0, 3], [2, 2, 4]])
    add_case("embedding", lambda x: ad.embedding(x, ids), r(5, 4), (2, 3, 4))
    tg = np.array([1, 0, 3])
    cases.append(("cross_entropy", lambda x: ad.cross_entropy(x, tg), _t(a)))
    cases.append(("l2_norm", ad.l2_norm, _t(a)))
    drop_seed = int(rng.integers(1 << 30))
    add_case("dropout",
             lambda x: ad.dropout(x, 0.3, True, np.random.default_rng(drop_seed)), a, (3, 4))
    keep = rng.random((3, 1)) < 0.5
    add_case("where_mask", lambda x: ad.where_mask(keep, x, _t(b)), a, (3, 4))

    # attention and gating blocks
    L, dh, h = 4, 8, 2
    d = dh // h
    q, k, v = r(2, L, d), r(2, L, d), r(2, L, d)
    cm = causal_mask(L)
    add_case("dpa.q", lambda x: dpa(x, _t(k), _t(v), cm), q, (2, L, d))
    add_case("dpa.k", lambda x: dpa(_t(q), x, _t(v), cm), k, (2, L, d))
    add_case("dpa.v", lambda x: dpa(_t(q), _t(k), x, cm), v, (2, L, d))
    pw = {n: r(*s) for n, s in (("wq", (h, d, d)), ("wk", (h, d, d)), ("wv", (h, d, d)),
                               ("wo", (dh, dh)), ("wkr", (h, d, d)), ("u", (h, d)), ("v", (h, d)))}

    def params(**over):
        kw = {n: over.get(n, _t(val)) for n, val in pw.items()}
        return AttentionParams(**kw)

    xa = r(2, L, dh)
    plain = {n: val for n, val in pw.items() if n in ("wq", "wk", "wv", "wo")}
    add_case("mhdpa.x", lambda x: mhdpa(x, AttentionParams(**{n: _t(val) for n, val in plain.items()}),
                                        h, cm), xa, (2, L, dh))
    for n in ("wq", "wk", "wv", "wo"):
        add_case(f"mhdpa.{n}",
                 lambda x, n=n: mhdpa(_t(xa), AttentionParams(**{m: (x if m == n else _t(val))
                                                                for m, val in plain.items()}),
                                      h, cm),
                 pw[n], (2, L, dh))
    mem = r(2, 3, dh)
    add_case("xl_attention.x", lambda x: xl_attention(x, _t(mem), params(), h), xa, (2, L, dh))
    for n in ("wkr", "u", "v", "wq"):
        add_case(f"xl_attention.{n}",
                 lambda x, n=n: xl_attention(_t(xa), _t(mem), params(**{n: x}), h), pw[n],
                 (2, L, dh))
    rr, kr = r(L + 3, d), r(2, L + 3, d)
    add_case("relative_scores.r",
             lambda x: relative_scores(_t(q), _t(kr), x, _t(pw["wkr"][0]),
                                       _t(pw["u"][0]), _t(pw["v"][0])), rr, (2, L, L + 3))
    gp = {n: r(*s) for n, s in (("w1", (dh, dh)), ("b1", (dh,)), ("w2", (dh, dh)), ("b2", (dh,)))}

    def gparams(**over):
        return GateParams(**{n: over.get(n, _t(val)) for n, val in gp.items()})

    att = r(2, L, dh)
    for psi in ("sigmoid", "tanh"):
        add_case(f"sdu.{psi}.x", lambda x, psi=psi: sdu(x, gparams(), psi), xa, (2, L, dh))
        for n in gp:
            add_case(f"sdu.{psi}.{n}",
                     lambda x, n=n, psi=psi: sdu(_t(xa), gparams(**{n: x}), psi), gp[n],
                     (2, L, dh))
    add_case("highway.x", lambda x: highway_gate(x, gparams()), xa, (2, L, dh))
    add_case("highway.w1", lambda x: highway_gate(_t(xa), gparams(w1=x)), gp["w1"], (2, L, dh))
    add_case("gated_mhdpa.att", lambda x: gated_mhdpa_combine(x, _t(xa), gparams()), att,
             (2, L, dh))
    add_case("gated_mhdpa.x", lambda x: gated_mhdpa_combine(_t(att), x, gparams()), xa,
             (2, L, dh))
    for cell, nx, nh in (("gru", 3, 2), ("lstm", 4, 4)):
        rp = {"wx": r(dh, nx * dh) * 0.5, "wh": r(dh, nh * dh) * 0.5, "b": r(nx * dh) * 0.5}
        if cell == "gru":
            rp["un"] = r(dh, dh) * 0.5

        def rnn_params(over, cell=cell, rp=rp):
            return RNNParams(cell, **{n: over.get(n, _t(val)) for n, val in rp.items()})

        add_case(f"local_rnn.{cell}.x", lambda x, f=rnn_params: local_rnn(x, f({}), 3), xa,
                 (2, L, dh))
        add_case(f"local_rnn.{cell}.wh", lambda x, f=rnn_params: local_rnn(_t(xa), f({"wh": x}), 3),
                 rp["wh"], (2, L, dh))
    return cases


def model_case_config(variant: str, kind: str, init_scale: float = 0.5) -> ModelConfig:
    gate = GatePlacement.none() if kind == "none" else GatePlacement.on(kind, [1, 2])
    return ModelConfig(variant=variant, n_layers=2, dh=8, heads=2, d_ffn=16, vocab_size=11,
                       mem_len=5, local_window=3, gate=gate, init="uniform",
                       init_scale=init_scale, precision="double")


def run_model_case(variant: str, kind: str, coords_per_tensor: Optional[int] = 24,
                   h: float = 1e-5, seed: int = 1) -> float:
    """Worst relative error over all parameters of one (variant, gate) model.

    L=5, vocab=11, dh=8, two heads. XL starts from a non-empty memory so the
    cached path is exercised too.
    """
    model = build_model(model_case_config(variant, kind), seed=seed)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, 11, (2, 5))
    targets = rng.integers(0, 11, (2, 5))
    mem = None
    if variant == "xl":
        with ad.no_grad():
            _, mem = forward_lm(model, rng.integers(0, 11, (2, 5)))
    errs = check_model_gradients(model, tokens, targets, mem, h=h,
                                 coords_per_tensor=coords_per_tensor, seed=seed)
    return max(errs.values())


def run_suite(h: float = 1e-5, coords_per_tensor: Optional[int] = 24,
              report: Optional[Callable[[CaseResult], None]] = None) -> List[CaseResult]:
    results = []

    def record(name, fn):
        t0 = time.perf_counter()
        err = fn()
        res = CaseResult(name, err, time.perf_counter() - t0)
        results.append(res)
        if report is not None:
            report(res)

    for name, fn, x in op_cases():
        record(f"op:{name}", lambda fn=fn, x=x: finite_diff_check(fn, x, h))
    for variant in VARIANTS:
        for kind in GATE_KINDS:
            record(f"model:{variant}/{kind}",
                   lambda v=variant, k=kind: run_model_case(v, k, coords_per_tensor, h))
    return results
