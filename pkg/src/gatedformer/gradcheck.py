"""Central finite-difference oracle for the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
import copy
from typing import Callable, Dict, Iterable, Optional

import numpy as np

from .autodiff import Tensor, dtype_of, graph_nodes, stop_gradient
from .errors import NondeterministicFunction


@dataclass
class GradCheckReport:
    max_rel_err: float
    analytic: np.ndarray
    numeric: np.ndarray
    coords: np.ndarray
    # True when the loss reaches x through a stop_gradient; numeric and
    # analytic gradients are then expected to disagree.
    stop_gradient_divergence: bool = False

    def __float__(self) -> float:
        return self.max_rel_err


def _reaches_through_stop_gradient(loss: Tensor, x: Tensor) -> bool:
    for node in graph_nodes(loss, through_stop_gradient=True):
        if node.op == "stop_gradient":
            if any(n is x for s in node._severed for n in graph_nodes(s, True)):
                return True
    return False


def finite_diff_report(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                       coords: Optional[Iterable[int]] = None) -> GradCheckReport:
    """Compare ``x.grad`` from backprop with central differences of ``fn``.

    ``fn`` must return a scalar tensor and be deterministic. ``coords``
    restricts the check to the given flat indices of ``x`` (all by default).
    """
    if x.dtype != np.float64:
        raise ValueError("finite-difference checks need double precision tensors")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    loss = fn(x)
    again = fn(x)
    if loss.data.tobytes() != again.data.tobytes():
        raise NondeterministicFunction("two evaluations at the same point differ")
    loss.backward()
    analytic_full = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    divergent = _reaches_through_stop_gradient(loss, x)

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(list(coords), dtype=int)
    numeric = np.empty(idx.size)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x).data)
        flat[i] = orig - h
        fm = float(fn(x).data)
        flat[i] = orig
        numeric[k] = (fp - fm) / (2 * h)
    x.requires_grad = was
    analytic = analytic_full.reshape(-1)[idx]
    rel = relative_errors(analytic, numeric)
    return GradCheckReport(float(rel.max()) if rel.size else 0.0, analytic, numeric, idx,
                           divergent)


def finite_diff_check(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      coords: Optional[Iterable[int]] = None) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return finite_diff_report(fn, x, h, coords).max_rel_err


def sample_coords(size: int, limit: Optional[int], rng: np.random.Generator) -> np.ndarray:
    """Up to ``limit`` distinct flat indices, sorted; all of them if ``limit`` is None."""
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))


def cast_model(model, precision: str):
    """Deep copy of ``model`` with every parameter stored at ``precision``."""
    from dataclasses import replace

    twin = copy.deepcopy(model)
    dtype = dtype_of(precision)
    twin.cfg = replace(model.cfg, precision=precision)
    for p in twin.parameters():
        p.data = p.data.astype(dtype)
        p.grad = None
    return twin


def cast_memory(mem, precision: str):
    if mem is None:
        return None
    dtype = dtype_of(precision)
    layers = [None if t is None else stop_gradient(Tensor(t.data, dtype=dtype))
              for t in mem.layers]
    return type(mem)(mem.mem_len, layers)


def check_model_gradients(model, inputs, targets, mem=None, h: float = 1e-5,
                          coords_per_tensor: Optional[int] = None, seed: int = 0,
                          oracle_precision: str = "extended") -> Dict[str, float]:
    """Max relative error per parameter tensor of the LM loss.

    Analytic gradients come from one backward pass of ``model`` (double).
    The central differences are evaluated on a copy held at
    ``oracle_precision`` so that roundoff in the loss stays far below h**2.
    """
    from .model import lm_loss

    if model.cfg.precision != "double":
        raise ValueError("gradient checks need a double-precision model")
    model.zero_grad()
    loss, _ = lm_loss(model, inputs, targets, mem)
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for k, p in model.named_parameters().items()}
    model.zero_grad()

    twin = cast_model(model, oracle_precision)
    twin_mem = cast_memory(mem, oracle_precision)
    for p in twin.parameters():
        p.requires_grad = False

    def f() -> float:
        return lm_loss(twin, inputs, targets, twin_mem)[0].data

    base = f()
    if f() != base:
        raise NondeterministicFunction("two evaluations at the same point differ")
    rng = np.random.default_rng(seed)
    out: Dict[str, float] = {}
    for name, p in twin.named_parameters().items():
        flat = p.data.reshape(-1)
        idx = sample_coords(flat.size, coords_per_tensor, rng)
        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            numeric[k] = float((fp - fm) / (2 * h))
        a = analytic[name].reshape(-1)[idx]
        out[name] = float(relative_errors(a, numeric).max()) if idx.size else 0.0
    return out
