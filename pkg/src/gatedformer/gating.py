"""Self-dependency units, highway-style gates and gate diagnostics."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyTensor, ShapeMismatch


class GateKind(str, enum.Enum):
    NONE = "none"
    SDU_SIGMOID = "sdu-sigmoid"
    SDU_TANH = "sdu-tanh"
    HIGHWAY = "highway"
    GATED_MHDPA = "gated-mhdpa"

    @classmethod
    def parse(cls, text: str) -> "GateKind":
        try:
            return cls(text.strip().lower())
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown gate kind {text!r}; expected one of {names}") from None

    @property
    def psi(self) -> str:
        """Gate function; the highway-style variants are always sigmoid."""
        return "tanh" if self is GateKind.SDU_TANH else "sigmoid"

    @property
    def is_sdu(self) -> bool:
        return self in (GateKind.SDU_SIGMOID, GateKind.SDU_TANH)


@dataclass
class GateParams:
    """Gate branch (w1, b1) and content branch (w2, b2), all at model width."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        dh = self.w1.shape[0]
        if (self.w1.shape != (dh, dh) or self.w2.shape != (dh, dh)
                or self.b1.shape != (dh,) or self.b2.shape != (dh,)):
            raise ShapeMismatch("gate params must be w (dh, dh) and b (dh,)")

    @property
    def width(self) -> int:
        return self.w1.shape[0]

    def named(self) -> Dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def num_parameters(self) -> int:
        return sum(t.size for t in self.named().values())


def _check_width(x: Tensor, p: GateParams) -> None:
    if x.shape[-1] != p.width:
        raise ShapeMismatch(f"gate of width {p.width} applied to input of shape {x.shape}")


def transform_gate(x: Tensor, p: GateParams, psi: str = "sigmoid") -> Tensor:
    _check_width(x, p)
    return ad.activation(psi, ad.add(ad.matmul(x, p.w1), p.b1))


def content_branch(x: Tensor, p: GateParams) -> Tensor:
    _check_width(x, p)
    return ad.add(ad.matmul(x, p.w2), p.b2)


def sdu(x: Tensor, p: GateParams, psi: str = "sigmoid") -> Tensor:
    """psi(x W1 + b1) * (x W2 + b2)."""
    if psi not in ("sigmoid", "tanh"):
        raise ValueError(f"SDU gate function must be sigmoid or tanh, got {psi!r}")
    return ad.mul(transform_gate(x, p, psi), content_branch(x, p))


def highway_gate(x: Tensor, p: GateParams) -> Tensor:
    """(1 - T) * x + T * f(x) with T = sigmoid(x W1 + b1), f(x) = x W2 + b2.

    The caller adds the attention output and normalizes.
    """
    t = transform_gate(x, p, "sigmoid")
    return ad.add(ad.mul(ad.one_minus(t), x), ad.mul(t, content_branch(x, p)))


def gated_mhdpa_combine(att: Tensor, x: Tensor, p: GateParams) -> Tensor:
    """(1 - T(x)) * att + T(x) * f(x); the caller normalizes ``o + x``."""
    if att.shape != x.shape:
        raise ShapeMismatch(f"attention output {att.shape} vs input {x.shape}")
    t = transform_gate(x, p, "sigmoid")
    return ad.add(ad.mul(ad.one_minus(t), att), ad.mul(t, content_branch(x, p)))


def sdu_param_count(dh: int) -> int:
    """Trainable parameters of one gate: two (dh, dh) weights and two biases."""
    if dh < 1:
        raise ValueError("dh must be >= 1")
    return 2 * dh * (dh + 1)


def product_rule_terms(f: np.ndarray, g: np.ndarray, df: np.ndarray, dg: np.ndarray,
                       psi: str = "sigmoid"):
    """Directional derivative of f * psi(g) split into its two product-rule terms.

    ``df``, ``dg`` are the derivatives of f and g along one direction. Returns
    (df * psi(g), f * psi'(g) * dg) so callers can sum them independently of
    the autodiff path.
    """
    if psi == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-g))
        ds = s * (1.0 - s)
    elif psi == "tanh":
        s = np.tanh(g)
        ds = 1.0 - s * s
    else:
        raise ValueError(f"unknown gate function {psi!r}")
    return df * s, f * ds * dg


def gate_saturation_stats(gate: Tensor, psi: str = "sigmoid") -> Dict[str, float]:
    """Fractions of gate activations below, inside and above the linear band.

    Sigmoid band is [0.1, 0.9]; tanh band is [-0.8, 0.8].
    """
    data = gate.data if isinstance(gate, Tensor) else np.asarray(gate)
    if data.size == 0:
        raise EmptyTensor("no gate activations to summarize")
    lo, hi = (0.1, 0.9) if psi == "sigmoid" else (-0.8, 0.8)
    n = data.size
    below = int(np.count_nonzero(data < lo))
    above = int(np.count_nonzero(data > hi))
    return {
        "frac_below": below / n,
        "frac_mid": (n - below - above) / n,
        "frac_above": above / n,
    }
