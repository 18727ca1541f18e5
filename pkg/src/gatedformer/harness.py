"""Training loop, evaluation metrics, CSV logging and gate-bias export."""
from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, TextIO, Tuple, Union

import numpy as np

from . import autodiff as ad
from .attention import SegmentMemory
from .data import Corpus, make_batches, segments
from .errors import DivergedLoss, NoGates
from .model import DropoutStream, Model, lm_loss
from .optim import Adam, SGDAnneal, clip_grad_norm

LN2 = math.log(2.0)
CSV_HEADER = "step,epoch,split,loss,ppl,bpc,lr,wall_ms"


def to_bpc(loss_nats: float) -> float:
    """Bits per token: mean NLL in nats divided by ln 2."""
    if loss_nats < 0:
        raise ValueError("loss must be non-negative")
    return loss_nats / LN2


def to_ppl(loss_nats: float) -> float:
    if loss_nats < 0:
        raise ValueError("loss must be non-negative")
    return math.exp(loss_nats)


@dataclass
class TrainConfig:
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
    max_steps: int = 0  # 0: run ``epochs`` full passes instead
    epochs: int = 1
    eval_interval: int = 100
    seed: int = 0
    wall_clock: bool = False  # False writes wall_ms=0 so the CSV is reproducible

    def problems(self) -> List[str]:
        out = []
        if self.optimizer not in ("sgd", "adam"):
            out.append(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.lr <= 0:
            out.append("lr must be > 0")
        if self.optimizer == "sgd" and self.clip_norm <= 0:
            out.append("clip_norm must be > 0 for sgd")
        if self.clip_norm < 0:
            out.append("clip_norm must be >= 0")
        if not 0 < self.decay_factor <= 1:
            out.append("decay_factor must be in (0, 1]")
        if self.patience < 1:
            out.append("patience must be >= 1")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.seq_len < 1:
            out.append("seq_len must be >= 1")
        if self.max_steps < 0:
            out.append("max_steps must be >= 0")
        if self.max_steps == 0 and self.epochs < 1:
            out.append("epochs must be >= 1 when max_steps is 0")
        if self.eval_interval < 0:
            out.append("eval_interval must be >= 0")
        return out

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return SGDAnneal(self.lr, self.clip_norm, self.decay_factor, self.patience)
        return Adam(self.lr, self.beta1, self.beta2, self.eps, self.clip_norm)


def _g(x: float) -> str:
    return f"{x:.6g}"


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    split: str
    loss: float
    ppl: float
    bpc: float
    lr: float
    wall_ms: int

    @classmethod
    def from_loss(cls, step: int, epoch: int, split: str, loss: float, lr: float,
                  wall_ms: int = 0) -> "MetricsRecord":
        return cls(step, epoch, split, loss, to_ppl(loss), to_bpc(loss), lr, wall_ms)

    def csv_row(self) -> str:
        return ",".join([str(self.step), str(self.epoch), self.split, _g(self.loss),
                         _g(self.ppl), _g(self.bpc), _g(self.lr), str(self.wall_ms)])


class CsvSink:
    """Append-only metrics CSV. Writes the header on open."""

    def __init__(self, target: Union[str, Path, TextIO]):
        if isinstance(target, (str, Path)):
            self._fh = open(target, "w", encoding="utf-8", newline="\n")
            self._owned = True
        else:
            self._fh = target
            self._owned = False
        self._fh.write(CSV_HEADER + "\n")

    def write(self, rec: MetricsRecord) -> None:
        self._fh.write(rec.csv_row() + "\n")

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self.flush()
        if self._owned:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def evaluate(model: Model, corpus: Union[Corpus, np.ndarray], seq_len: int,
             mem_len: Optional[int] = None, batch_size: int = 1) -> Tuple[float, float, float]:
    """Mean token NLL (nats) over the whole split, with ppl and bpc.

    Non-XL models score fixed ``seq_len`` chunks, ``batch_size`` at a time.
    XL threads memory through the chunks in order, so it runs them one by one.
    """
    ids = corpus.ids if isinstance(corpus, Corpus) else np.asarray(corpus)
    if ids.shape[0] < 2:
        raise ValueError("need at least two tokens to evaluate")
    segs = segments(ids, seq_len)
    total = 0.0
    count = 0
    with ad.no_grad():
        if model.cfg.variant == "xl":
            mem = SegmentMemory.empty(model.cfg.n_layers,
                                      model.cfg.mem_len if mem_len is None else mem_len)
            for x, y in segs:
                loss, mem = lm_loss(model, x[None], y[None], mem)
                total += float(loss.data) * x.shape[0]
                count += x.shape[0]
        else:
            full = [s for s in segs if s[0].shape[0] == seq_len]
            rest = [s for s in segs if s[0].shape[0] != seq_len]
            groups = [full[i:i + batch_size] for i in range(0, len(full), batch_size)]
            groups += [[s] for s in rest]
            for g in groups:
                x = np.stack([s[0] for s in g])
                y = np.stack([s[1] for s in g])
                loss, _ = lm_loss(model, x, y)
                total += float(loss.data) * x.size
                count += x.size
    loss = total / count
    return loss, to_ppl(loss), to_bpc(loss)


def train(model: Model, corpus: Corpus, cfg: TrainConfig, valid: Optional[Corpus] = None,
          sink: Optional[CsvSink] = None, optimizer=None,
          on_checkpoint: Optional[Callable[[int, object], None]] = None,
          checkpoint_interval: int = 0,
          clock: Callable[[], float] = time.perf_counter) -> List[MetricsRecord]:
    """Run SGD/Adam over contiguous batches and return every metrics record.

    Each step: forward, cross-entropy, backward, global-norm clip, update.
    XL memory carries across batches and is reset at each epoch start.
    ``valid`` is scored every ``eval_interval`` steps and after the last step.
    """
    problems = cfg.problems()
    if problems:
        raise ValueError("; ".join(problems))
    if corpus.vocab is not None and len(corpus.vocab) > model.cfg.vocab_size:
        raise ValueError("corpus vocabulary is larger than the model's")
    batches = make_batches(corpus, cfg.batch_size, cfg.seq_len)
    opt = optimizer if optimizer is not None else cfg.make_optimizer()
    named = model.named_parameters()
    params = list(named.values())
    total = cfg.max_steps if cfg.max_steps else cfg.epochs * len(batches)
    t0 = clock()
    last_ms = 0

    def wall() -> int:
        nonlocal last_ms
        if cfg.wall_clock:
            last_ms = max(last_ms, int((clock() - t0) * 1000))
        return last_ms

    def emit(rec: MetricsRecord) -> None:
        records.append(rec)
        if sink is not None:
            sink.write(rec)

    records: List[MetricsRecord] = []
    step = 0
    epoch = 0
    # overflow shows up as a non-finite loss, reported via DivergedLoss
    quiet = np.errstate(over="ignore", invalid="ignore")
    try:
        quiet.__enter__()
        while step < total:
            epoch += 1
            mem = model.empty_memory()
            for x, y in batches:
                if step >= total:
                    break
                step += 1
                lr = opt.lr
                loss, mem = lm_loss(model, x, y, mem, training=True,
                                    dropout=DropoutStream(cfg.seed, step))
                value = float(loss.data)
                if not math.isfinite(value):
                    err = DivergedLoss(step, value)
                    err.records = records
                    raise err
                model.zero_grad()
                loss.backward()
                if opt.clip_norm > 0:
                    clip_grad_norm(params, opt.clip_norm)
                opt.step(named)
                emit(MetricsRecord.from_loss(step, epoch, "train", value, lr, wall()))
                due = cfg.eval_interval and step % cfg.eval_interval == 0
                if valid is not None and (due or step == total):
                    vloss = evaluate(model, valid, cfg.seq_len, batch_size=cfg.batch_size)[0]
                    emit(MetricsRecord.from_loss(step, epoch, "valid", vloss, opt.lr, wall()))
                    opt.on_validation(vloss)
                    if sink is not None:
                        sink.flush()
                if on_checkpoint is not None and (
                        (checkpoint_interval and step % checkpoint_interval == 0)
                        or step == total):
                    on_checkpoint(step, opt)
    finally:
        quiet.__exit__(None, None, None)
        if sink is not None:
            sink.flush()
    return records


def format_gate_biases(model: Model) -> str:
    gates = model.gates()
    if not gates:
        raise NoGates("model has no gates to export")
    buf = io.StringIO()
    for tag, g in gates:
        buf.write(tag + "\t" + "\t".join(repr(float(v)) for v in g.b1.data) + "\n")
    return buf.getvalue()


def export_gate_biases(model: Model, path) -> Path:
    """Write one TSV row per gate: tag, then the b1 bias values."""
    text = format_gate_biases(model)
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    return path
