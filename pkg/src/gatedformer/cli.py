"""Command-line entry point: train, eval, gradcheck, compare, export-gates.

Exit codes: 0 success, 1 config or I/O error, 2 diverged loss, 3 gradcheck failure.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .data import load_corpus, load_splits
from .errors import (
    CheckpointError,
    ConfigError,
    CorpusTooSmall,
    DivergedLoss,
    EmptyCorpus,
    GatedFormerError,
    NoGates,
    OutOfVocab,
)
from .gating import GateKind
from .harness import CsvSink, MetricsRecord, evaluate, export_gate_biases, train
from .model import build_model

log = logging.getLogger("gatedformer")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_GRADCHECK = 3

COMPARE_HEADER = "variant,step,train_loss,valid_loss,valid_bpc"
THREADS_ENV = "GATEDFORMER_THREADS"


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _overrides(args) -> Dict[str, str]:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = str(args.seed)
    if getattr(args, "precision", None) is not None:
        out["precision"] = args.precision
    if getattr(args, "gate", None) is not None:
        out["gate"] = args.gate
        if args.gate == "none" and getattr(args, "gate_layers", None) is None:
            out["gate_layers"] = ""
    if getattr(args, "gate_layers", None) is not None:
        out["gate_layers"] = args.gate_layers
    if getattr(args, "gate_ffn", None) is not None:
        out["gate_ffn"] = args.gate_ffn
    for key in getattr(args, "set", None) or []:
        if "=" not in key:
            raise ConfigError([f"--set expects key=value, got {key!r}"])
        k, v = key.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve(args) -> RunConfig:
    return load_run_config(args.config, _overrides(args))


def _splits(run: RunConfig):
    if not run.train:
        raise ConfigError(["train: no training corpus path given"])
    paths = {"train": run.train}
    if run.valid:
        paths["valid"] = run.valid
    for split, p in paths.items():
        if not Path(p).is_file():
            raise ConfigError([f"{split}: corpus file {p} not found"])
    return load_splits(paths, run.level)


def _train_run(run: RunConfig, out: Optional[Path], corpora=None,
               checkpoints: bool = True) -> List[MetricsRecord]:
    """Train one resolved run; writes resolved.cfg, metrics.csv and checkpoints under ``out``."""
    run = run.canonical()
    corpora = corpora or _splits(run)
    vocab = corpora["train"].vocab
    mcfg = run.model_config(len(vocab))
    tcfg = run.train_config()
    model = build_model(mcfg, seed=run.seed)
    sink = None
    on_ckpt = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved.cfg").write_text(run.to_text(), encoding="utf-8")
        sink = CsvSink(out / "metrics.csv")
        run_items = dict(line.split(" = ", 1) for line in run.to_text().splitlines())
        if checkpoints:
            def on_ckpt(step, opt):
                save_checkpoint(out / "checkpoint.gfck", model, opt, step, run.seed, vocab,
                                run_items)
    try:
        return train(model, corpora["train"], tcfg, valid=corpora.get("valid"), sink=sink,
                     on_checkpoint=on_ckpt, checkpoint_interval=run.checkpoint_interval)
    finally:
        if sink is not None:
            sink.close()


def cmd_train(args) -> int:
    run = _resolve(args)
    out = Path(args.out or "run")
    try:
        records = _train_run(run, out)
    except DivergedLoss as e:
        raise _Fail(EXIT_DIVERGED, str(e)) from None
    last = [r for r in records if r.split == "train"][-1]
    print(f"trained {last.step} steps; final train loss {last.loss:.6g}; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if args.path:
        path, split = args.path, args.split
    else:
        path = ck.run.get(args.split, "")
        split = args.split
        if not path:
            raise _Fail(EXIT_CONFIG, f"checkpoint records no {args.split} corpus; pass --path")
    if not Path(path).is_file():
        raise _Fail(EXIT_CONFIG, f"{split}: corpus file {path} not found")
    if ck.vocab is None:
        raise _Fail(EXIT_CONFIG, "checkpoint has no vocabulary")
    corpus = load_corpus(path, ck.vocab.level, vocab=ck.vocab, split=split)
    seq_len = args.seq_len or int(ck.run.get("seq_len", 64))
    loss, _, _ = evaluate(ck.model, corpus, seq_len)
    lr = ck.optimizer.lr if ck.optimizer is not None else 0.0
    print(MetricsRecord.from_loss(ck.step, 0, split, loss, lr, 0).csv_row())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    tol = args.tolerance
    t0 = time.perf_counter()

    def show(res):
        mark = "ok  " if res.passed(tol) else "FAIL"
        print(f"{mark} {res.name:<32} max_rel_err={res.max_rel_err:.3e}")

    results = run_suite(h=args.step, coords_per_tensor=args.coords or None, report=show)
    failed = [r for r in results if not r.passed(tol)]
    worst = max(r.max_rel_err for r in results)
    print(f"{len(results)} cases, worst {worst:.3e}, tolerance {tol:g}, "
          f"{time.perf_counter() - t0:.1f}s")
    if failed:
        print("failing cases: " + ", ".join(r.name for r in failed))
        return EXIT_GRADCHECK
    return EXIT_OK


def _parse_variant(text: str):
    """``kind`` or ``kind:layerspec``, e.g. ``sdu-tanh:1-2``."""
    kind, _, spec = text.partition(":")
    GateKind.parse(kind)
    return text, kind.strip(), spec.strip()


def _compare_one(run: RunConfig):
    try:
        records = _train_run(run, None, checkpoints=False)
        return records, "ok"
    except DivergedLoss as e:
        return getattr(e, "records", []), f"diverged at step {e.step}"


def cmd_compare(args) -> int:
    base = _resolve(args)
    variants = [_parse_variant(v) for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise ConfigError(["variants: at least one gate variant is required"])
    steps = args.steps or base.max_steps
    if steps < 1:
        raise ConfigError(["steps: must be >= 1"])
    runs = []
    for label, kind, spec in variants:
        layers = "" if kind == "none" else (spec or base.gate_layers or "all")
        run = dataclasses.replace(base, gate=kind, gate_layers=layers, max_steps=steps)
        run.canonical()
        runs.append((label, run))
    _splits(base)  # fail early on missing corpora
    workers = max(1, int(os.environ.get(THREADS_ENV, "1") or 1))
    if workers > 1 and len(runs) > 1:
        with concurrent.futures.ProcessPoolExecutor(min(workers, len(runs))) as pool:
            outcomes = list(pool.map(_compare_one, [r for _, r in runs]))
    else:
        outcomes = [_compare_one(r) for _, r in runs]

    out = Path(args.out or "compare")
    out.mkdir(parents=True, exist_ok=True)
    lines = [COMPARE_HEADER]
    summary = []
    for (label, _), (records, status) in zip(runs, outcomes):
        valid = {r.step: r for r in records if r.split == "valid"}
        last = None
        for r in records:
            if r.split != "train":
                continue
            v = valid.get(r.step)
            vl = f"{v.loss:.6g}" if v else ""
            vb = f"{v.bpc:.6g}" if v else ""
            lines.append(f"{label},{r.step},{r.loss:.6g},{vl},{vb}")
            last = r
        summary.append((label, status, last))
    (out / "compare.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    ok = [s for s in summary if s[1] == "ok"]
    ok.sort(key=lambda s: s[2].loss)
    print(f"final-step ranking at step {steps} (train loss):")
    for rank, (label, _, last) in enumerate(ok, start=1):
        print(f"  {rank}. {label:<24} {last.loss:.6g}")
    for label, status, _ in summary:
        if status != "ok":
            print(f"  -  {label:<24} {status}")
    return EXIT_OK if len(ok) == len(summary) else EXIT_DIVERGED


def cmd_export_gates(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    out = Path(args.out or "gate_biases.tsv")
    export_gate_biases(ck.model, out)
    print(f"wrote {len(ck.model.gates())} gate rows to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (file for export-gates)")
    common.add_argument("--precision", choices=["single", "double"])
    common.add_argument("--gate", choices=[k.value for k in GateKind])
    common.add_argument("--gate-layers", dest="gate_layers", help="e.g. all, 1-3, 1,2,6, 1-6\\ffn")
    common.add_argument("--gate-ffn", dest="gate_ffn", choices=["true", "false"])
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gatedformer",
                                     description="Gated Transformer language models on numpy.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a split")
    p.add_argument("checkpoint")
    p.add_argument("split", nargs="?", default="valid", choices=["train", "valid", "test"])
    p.add_argument("--path", help="corpus file (default: the path recorded for the split)")
    p.add_argument("--seq-len", dest="seq_len", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step h")
    p.add_argument("--coords", type=int, default=24,
                   help="sampled coordinates per parameter tensor (0 = all)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", parents=[common], help="train gate variants side by side")
    p.add_argument("--variants", default="none,sdu-sigmoid,sdu-tanh",
                   help="comma list of gate kinds, optionally kind:layers")
    p.add_argument("--steps", type=int, default=0)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export-gates", parents=[common], help="write gate biases as TSV")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_export_gates)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except _Fail as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointError, NoGates, EmptyCorpus, CorpusTooSmall, OutOfVocab,
            GatedFormerError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
