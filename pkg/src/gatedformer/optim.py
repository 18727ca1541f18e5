"""Optimizers: SGD with validation-plateau annealing, and Adam."""
from __future__ import annotations

import math
from typing import Dict, Iterable, Mapping

import numpy as np

from .autodiff import Tensor


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64)
            total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping. The scale carries a few ulps of margin
    so rounding in low precision cannot push the result back over the limit.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    params = [p for p in params if p.grad is not None]
    norm = global_grad_norm(params)
    if norm > max_norm:
        for p in params:
            eps = np.finfo(p.grad.dtype).eps
            factor = max_norm / norm * (1.0 - 4 * eps)
            p.grad = (p.grad.astype(np.float64) * factor).astype(p.grad.dtype)
    return norm


class SGDAnneal:
    """Plain SGD whose learning rate decays when validation stops improving.

    After ``patience`` consecutive evaluations without a new best validation
    loss, ``lr`` is multiplied by ``decay_factor``.
    """

    kind = "sgd"

    def __init__(self, lr: float = 2.0, clip_norm: float = 0.15, decay_factor: float = 0.25,
                 patience: int = 1):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if clip_norm <= 0:
            raise ValueError("clip_norm must be positive for SGD")
        self.lr = float(lr)
        self.clip_norm = float(clip_norm)
        self.decay_factor = float(decay_factor)
        self.patience = int(patience)
        self.best = math.inf
        self.bad_evals = 0
        self.t = 0

    def step(self, named: Mapping[str, Tensor]) -> None:
        self.t += 1
        for p in named.values():
            if p.grad is not None:
                p.data -= p.data.dtype.type(self.lr) * p.grad

    def on_validation(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad_evals = 0
        else:
            self.bad_evals += 1
            if self.bad_evals >= self.patience:
                self.lr *= self.decay_factor
                self.bad_evals = 0
        return self.lr

    def scalars(self) -> Dict[str, float]:
        return {"lr": self.lr, "clip_norm": self.clip_norm, "decay_factor": self.decay_factor,
                "patience": self.patience, "best": self.best, "bad_evals": self.bad_evals,
                "t": self.t}

    def tensors(self) -> Dict[str, np.ndarray]:
        return {}

    def load(self, scalars: Mapping[str, float], tensors: Mapping[str, np.ndarray]) -> None:
        self.lr = float(scalars["lr"])
        self.clip_norm = float(scalars["clip_norm"])
        self.decay_factor = float(scalars["decay_factor"])
        self.patience = int(scalars["patience"])
        self.best = float(scalars["best"])
        self.bad_evals = int(scalars["bad_evals"])
        self.t = int(scalars["t"])


class Adam:
    """Adam with bias correction and a constant learning rate (no warm-up)."""

    kind = "adam"

    def __init__(self, lr: float = 0.00025, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.clip_norm = float(clip_norm)
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, named: Mapping[str, Tensor]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in named.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name] = m.astype(p.dtype)
            self.v[name] = v.astype(p.dtype)
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= step.astype(p.dtype)

    def on_validation(self, loss: float) -> float:
        return self.lr

    def scalars(self) -> Dict[str, float]:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "clip_norm": self.clip_norm, "t": self.t}

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load(self, scalars: Mapping[str, float], tensors: Mapping[str, np.ndarray]) -> None:
        self.lr = float(scalars["lr"])
        self.beta1 = float(scalars["beta1"])
        self.beta2 = float(scalars["beta2"])
        self.eps = float(scalars["eps"])
        self.clip_norm = float(scalars["clip_norm"])
        self.t = int(scalars["t"])
        self.m = {k[2:]: v for k, v in tensors.items() if k.startswith("m.")}
        self.v = {k[2:]: v for k, v in tensors.items() if k.startswith("v.")}


def make_optimizer(kind: str, **kw):
    if kind == "sgd":
        return SGDAnneal(**{k: kw[k] for k in ("lr", "clip_norm", "decay_factor", "patience")
                            if k in kw})
    if kind == "adam":
        return Adam(**{k: kw[k] for k in ("lr", "beta1", "beta2", "eps", "clip_norm") if k in kw})
    raise ValueError(f"unknown optimizer {kind!r}")
