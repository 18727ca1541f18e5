"""Flat ``key = value`` run configuration and gate layer specs."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Tuple

from .errors import ConfigError
from .gating import GateKind
from .harness import TrainConfig
from .model import GatePlacement, ModelConfig, default_init

FFN_SUFFIX = "\\ffn"


def parse_layer_spec(text: str, n_layers: Optional[int] = None) -> Tuple[FrozenSet[int], bool]:
    """Parse ``all``, ``1-3``, ``1,2,6`` or any of these with a ``\\ffn`` suffix.

    Returns (layers, include_ffn). The suffix means the FFN sublayers stay
    ungated; on its own it stands for ``all\\ffn``. A leading ``L`` as in
    ``L1-3`` is accepted.
    """
    spec = text.strip()
    include_ffn = True
    if spec.lower().endswith(FFN_SUFFIX):
        include_ffn = False
        spec = spec[: -len(FFN_SUFFIX)].strip() or "all"
    if spec[:1] in ("L", "l") and spec[1:2].isdigit():
        spec = spec[1:]
    if not spec:
        raise ValueError("empty gate layer spec")
    if spec.lower() == "all":
        if n_layers is None:
            raise ValueError("'all' needs the number of layers")
        return frozenset(range(1, n_layers + 1)), include_ffn
    layers = set()
    for part in spec.split(","):
        part = part.strip()
        try:
            if "-" in part:
                a, b = (int(v) for v in part.split("-", 1))
                if a > b:
                    raise ValueError(part)
                layers.update(range(a, b + 1))
            else:
                layers.add(int(part))
        except ValueError:
            raise ValueError(f"bad gate layer range {part!r} in {text!r}") from None
    if n_layers is not None:
        bad = sorted(n for n in layers if not 1 <= n <= n_layers)
        if bad:
            raise ValueError(f"layers {bad} outside 1..{n_layers}")
    return frozenset(layers), include_ffn


def format_layer_spec(layers, include_ffn: bool = True) -> str:
    """Canonical text: sorted, consecutive runs collapsed (``1-3,6``)."""
    nums = sorted(set(layers))
    if not nums:
        raise ValueError("no layers to format")
    parts = []
    start = prev = nums[0]
    for n in nums[1:] + [None]:
        if n is not None and n == prev + 1:
            prev = n
            continue
        parts.append(str(start) if start == prev else f"{start}-{prev}")
        if n is not None:
            start = prev = n
    return ",".join(parts) + ("" if include_ffn else FFN_SUFFIX)


@dataclass
class RunConfig:
    # data
    level: str = "char"
    train: str = ""
    valid: str = ""
    test: str = ""
    # model
    variant: str = "vanilla"
    n_layers: int = 3
    dh: int = 128
    heads: int = 8
    d_ffn: int = 512
    mem_len: int = 0
    local_window: int = 7
    rnn_cell: str = "gru"
    dropout_sublayer: float = 0.0
    dropout_embed: float = 0.0
    gate: str = "none"
    gate_layers: str = ""
    gate_ffn: bool = True
    init: str = "auto"
    init_scale: float = 0.0  # 0: the variant/level default
    precision: str = "single"
    ln_eps: float = 1e-5
    # training
    optimizer: str = "sgd"
    lr: float = 2.0
    clip_norm: float = 0.15
    decay_factor: float = 0.25
    patience: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    seq_len: int = 64
    max_steps: int = 0
    epochs: int = 1
    eval_interval: int = 100
    checkpoint_interval: int = 0
    seed: int = 0
    wall_clock: bool = False

    # -- construction -----------------------------------------------------
    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def updated(self, values: Dict[str, str], base_dir: Optional[Path] = None) -> "RunConfig":
        """New config with string ``values`` coerced onto the field types.

        Unknown keys and unparsable values are collected into one ConfigError.
        Relative corpus paths are resolved against ``base_dir``.
        """
        types = {f.name: f.type for f in fields(self)}
        problems = []
        changes = {}
        for key, raw in values.items():
            if key not in types:
                problems.append(f"unknown key {key!r}")
                continue
            try:
                val = _coerce(types[key], raw)
            except ValueError:
                problems.append(f"{key}: cannot parse {raw!r} as {types[key]}")
                continue
            if key in ("train", "valid", "test") and val and base_dir is not None:
                p = Path(val)
                val = str(p if p.is_absolute() else (base_dir / p).resolve())
            changes[key] = val
        if problems:
            raise ConfigError(problems)
        return dataclasses.replace(self, **changes)

    # -- resolution -------------------------------------------------------
    def gate_placement(self) -> GatePlacement:
        kind = GateKind.parse(self.gate)
        if kind is GateKind.NONE:
            if self.gate_layers.strip():
                raise ValueError("gate_layers must be empty when gate=none")
            return GatePlacement.none()
        spec = self.gate_layers.strip() or "all"
        layers, ffn = parse_layer_spec(spec, self.n_layers if _is_all(spec) else None)
        return GatePlacement.on(kind, layers, ffn and self.gate_ffn)

    def resolved_init(self) -> Tuple[str, float]:
        init, scale = default_init(self.variant, self.level)
        if self.init != "auto":
            init = self.init
        if self.init_scale > 0:
            scale = self.init_scale
        return init, scale

    def model_config(self, vocab_size: int) -> ModelConfig:
        problems = []
        try:
            gate = self.gate_placement()
        except ValueError as e:
            problems.append(f"gate_layers: {e}" if "layer" in str(e) else f"gate: {e}")
            gate = GatePlacement.none()
        init, scale = self.resolved_init()
        cfg = ModelConfig(variant=self.variant, n_layers=self.n_layers, dh=self.dh,
                          heads=self.heads, d_ffn=self.d_ffn, vocab_size=vocab_size,
                          mem_len=self.mem_len, local_window=self.local_window,
                          rnn_cell=self.rnn_cell, dropout_sublayer=self.dropout_sublayer,
                          dropout_embed=self.dropout_embed, gate=gate, init=init,
                          init_scale=scale, precision=self.precision, ln_eps=self.ln_eps)
        problems.extend(cfg.problems())
        if problems:
            raise ConfigError(problems)
        return cfg

    def train_config(self) -> TrainConfig:
        tc = TrainConfig(optimizer=self.optimizer, lr=self.lr, clip_norm=self.clip_norm,
                         decay_factor=self.decay_factor, patience=self.patience,
                         beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                         batch_size=self.batch_size, seq_len=self.seq_len,
                         max_steps=self.max_steps, epochs=self.epochs,
                         eval_interval=self.eval_interval, seed=self.seed,
                         wall_clock=self.wall_clock)
        problems = tc.problems()
        if self.level not in ("char", "word"):
            problems.append("level must be char or word")
        if problems:
            raise ConfigError(problems)
        return tc

    def canonical(self) -> "RunConfig":
        """Same run with derived settings written out explicitly."""
        init, scale = self.resolved_init()
        out = dataclasses.replace(self, init=init, init_scale=scale)
        gate = self.gate_placement()
        if gate.kind is GateKind.NONE:
            return dataclasses.replace(out, gate="none", gate_layers="", gate_ffn=True)
        return dataclasses.replace(out, gate=gate.kind.value,
                                   gate_layers=format_layer_spec(gate.layers),
                                   gate_ffn=gate.include_ffn)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(getattr(self, k))}\n" for k in self.keys())


def _is_all(spec: str) -> bool:
    s = spec.strip().lower()
    return s in ("all", "all" + FFN_SUFFIX, FFN_SUFFIX)


def _coerce(typ: str, raw: str):
    raw = raw.strip()
    if typ == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(raw)
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out: Dict[str, str] = {}
    problems = []
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {n}: expected key = value")
            continue
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            problems.append(f"line {n}: duplicate key {key!r}")
        out[key] = value.strip()
    if problems:
        raise ConfigError(problems)
    return out


def load_run_config(path=None, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides`` (CLI flags)."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError([f"cannot read config {path}: {e.strerror or e}"]) from None
        cfg = cfg.updated(parse_config_text(text), base_dir=p.resolve().parent)
    if overrides:
        cfg = cfg.updated(overrides, base_dir=Path.cwd())
    return cfg
