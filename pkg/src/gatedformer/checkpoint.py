"""Binary checkpoints with a CRC32 trailer.

Layout (all integers little-endian):
    b"GFCK" | u32 version | u32 n + n bytes of config text | u32 tensor count
    per tensor: u16 name length | name | u8 rank | u32 dims | raw payload
    u32 CRC32 of everything before it
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .autodiff import dtype_of
from .config import format_layer_spec, parse_layer_spec
from .data import Vocab
from .errors import ChecksumMismatch, CheckpointError, VersionMismatch
from .gating import GateKind
from .model import GatePlacement, Model, ModelConfig, build_model
from .optim import Adam, SGDAnneal

MAGIC = b"GFCK"
VERSION = 1


@dataclass
class Checkpoint:
    model: Model
    optimizer: Optional[object] = None
    step: int = 0
    seed: int = 0
    vocab: Optional[Vocab] = None
    run: Dict[str, str] = field(default_factory=dict)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def model_config_items(cfg: ModelConfig) -> Dict[str, str]:
    out = {}
    for f in fields(cfg):
        if f.name == "gate":
            continue
        out[f.name] = _fmt(getattr(cfg, f.name))
    g = cfg.gate
    out["gate"] = g.kind.value
    out["gate_layers"] = format_layer_spec(g.layers) if g.layers else ""
    out["gate_ffn"] = _fmt(g.include_ffn)
    return out


def model_config_from_items(items: Dict[str, str]) -> ModelConfig:
    kw = {}
    for f in fields(ModelConfig):
        if f.name == "gate":
            continue
        raw = items[f.name]
        kw[f.name] = int(raw) if f.type == "int" else float(raw) if f.type == "float" else raw
    kind = GateKind.parse(items["gate"])
    if kind is GateKind.NONE:
        gate = GatePlacement.none()
    else:
        layers, _ = parse_layer_spec(items["gate_layers"])
        gate = GatePlacement.on(kind, layers, items["gate_ffn"] == "true")
    return ModelConfig(gate=gate, **kw)


def _config_text(model: Model, optimizer, step: int, seed: int, vocab: Optional[Vocab],
                 run: Dict[str, str]) -> str:
    lines = [f"model.{k} = {v}" for k, v in model_config_items(model.cfg).items()]
    lines.append(f"state.step = {int(step)}")
    lines.append(f"state.seed = {int(seed)}")
    if vocab is not None:
        lines.append(f"vocab.level = {vocab.level}")
        lines.append(f"vocab.tokens = {json.dumps(vocab.to_list(), ensure_ascii=True)}")
    if optimizer is not None:
        lines.append(f"opt.kind = {optimizer.kind}")
        for k, v in optimizer.scalars().items():
            lines.append(f"opt.{k} = {_fmt(v)}")
    for k, v in run.items():
        lines.append(f"run.{k} = {v}")
    return "\n".join(lines) + "\n"


def _parse_text(text: str) -> Dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line:
            k, v = line.split(" = ", 1) if " = " in line else (line.rstrip(" ="), "")
            out[k] = v
    return out


def _pack_tensor(name: str, arr: np.ndarray, dtype) -> bytes:
    nb = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, model: Model, optimizer=None, step: int = 0, seed: int = 0,
                    vocab: Optional[Vocab] = None, run: Optional[Dict[str, str]] = None) -> Path:
    """Write model weights, optimizer state and counters to ``path``.

    Dropout masks are counter-based, so (seed, step) is the whole RNG state.
    """
    dtype = dtype_of(model.cfg.precision)
    text = _config_text(model, optimizer, step, seed, vocab, run or {}).encode("utf-8")
    tensors = [(k, p.data) for k, p in model.named_parameters().items()]
    if optimizer is not None:
        tensors += [(f"opt.{k}", v) for k, v in optimizer.tensors().items()]
    body = bytearray(MAGIC)
    body += struct.pack("<I", VERSION)
    body += struct.pack("<I", len(text)) + text
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        body += _pack_tensor(name, arr, dtype)
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    path = Path(path)
    try:
        path.write_bytes(bytes(body))
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e.strerror or e}") from None
    return path


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ChecksumMismatch("checkpoint ends early")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    """Validated (config items, tensors) of a checkpoint file."""
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror or e}") from None
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    if len(buf) < 12:
        raise ChecksumMismatch("checkpoint ends early")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads {VERSION}")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("checkpoint CRC32 does not match its contents")
    r = _Reader(buf[:-4], 8)
    (n,) = r.unpack("<I")
    items = _parse_text(r.take(n).decode("utf-8"))
    dtype = np.dtype(dtype_of(items["model.precision"])).newbyteorder("<")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(size), dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after the last tensor")
    return items, tensors


def load_checkpoint(path) -> Checkpoint:
    items, tensors = read_checkpoint(path)
    sub = lambda prefix: {k[len(prefix):]: v for k, v in items.items() if k.startswith(prefix)}
    cfg = model_config_from_items(sub("model."))
    model = build_model(cfg, seed=0)
    named = model.named_parameters()
    missing = [k for k in named if k not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {missing[:3]}")
    for k, p in named.items():
        if tensors[k].shape != p.shape:
            raise CheckpointError(f"{k}: shape {tensors[k].shape}, model expects {p.shape}")
        p.data = tensors[k].copy()
    opt = None
    scal = sub("opt.")
    if scal:
        kind = scal.pop("kind")
        opt = SGDAnneal() if kind == "sgd" else Adam()
        opt.load(scal, {k[4:]: v for k, v in tensors.items() if k.startswith("opt.")})
    vocab = None
    if "vocab.level" in items:
        vocab = Vocab(items["vocab.level"], json.loads(items["vocab.tokens"]))
    return Checkpoint(model, opt, int(items["state.step"]), int(items["state.seed"]), vocab,
                      sub("run."))
