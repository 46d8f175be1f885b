"""Closed-form segmentation losses as functions of the ground-truth probability.

Every loss here is a scalar function ``L(p)`` of the probability ``p`` the
model assigns to the ground-truth class.  Values, exact derivatives and zero
points are available for each family member; :func:`pixelwise_loss` lifts a
scalar loss to a dense label map.

All functions accept Python floats or numpy arrays and compute in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from conslab.errors import DataError, DomainError

INV_E = 1.0 / math.e


class LossKind(str, Enum):
    CROSS_ENTROPY = "cross_entropy"
    FOCAL = "focal"
    CONSERVATIVE = "conservative"
    CUBIC1 = "cubic1"
    CUBIC2 = "cubic2"
    CUBIC3 = "cubic3"


# short names used in configs, CSV files and the CLI
_ALIASES = {
    "ce": LossKind.CROSS_ENTROPY,
    "fl": LossKind.FOCAL,
    "cl": LossKind.CONSERVATIVE,
}


def parse_kind(name: str) -> LossKind:
    key = name.strip().lower()
    if key in _ALIASES:
        return _ALIASES[key]
    try:
        return LossKind(key)
    except ValueError:
        raise DomainError(f"unknown loss kind {name!r}") from None


@dataclass(frozen=True)
class LossSpec:
    """One member of the loss family together with its parameters.

    Only the parameters relevant to ``kind`` are ever read.  ``lam`` is the
    balance weight of the Conservative Loss; ``clamp`` optionally clips the
    loss value into ``[lo, hi]`` (used for cold-start training).
    """

    kind: LossKind = LossKind.CROSS_ENTROPY
    a: float = math.e
    lam: float = 1.0
    alpha_t: float = 5.0
    gamma: float = 2.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    clamp: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.clamp is not None:
            lo, hi = (float(v) for v in self.clamp)
            if not lo < hi:
                raise DomainError(f"clamp bounds must satisfy lo < hi, got {self.clamp}")
            object.__setattr__(self, "clamp", (lo, hi))
        k = self.kind
        if k is LossKind.CONSERVATIVE:
            if not self.a > 1:
                raise DomainError(f"log base a must exceed 1, got {self.a}")
            _positive(lam=self.lam)
        elif k is LossKind.FOCAL:
            _positive(alpha_t=self.alpha_t)
            if not self.gamma >= 0:
                raise DomainError(f"gamma must be >= 0, got {self.gamma}")
        elif k is LossKind.CUBIC1:
            _positive(lambda1=self.lambda1)
        elif k is LossKind.CUBIC2:
            _positive(lambda2=self.lambda2)
        elif k is LossKind.CUBIC3:
            _positive(alpha=self.alpha, beta=self.beta)

    @classmethod
    def cross_entropy(cls, **kw) -> "LossSpec":
        return cls(kind=LossKind.CROSS_ENTROPY, **kw)

    @classmethod
    def focal(cls, alpha_t: float = 5.0, gamma: float = 2.0, **kw) -> "LossSpec":
        return cls(kind=LossKind.FOCAL, alpha_t=alpha_t, gamma=gamma, **kw)

    @classmethod
    def conservative(cls, a: float = math.e, lam: float = 1.0, **kw) -> "LossSpec":
        return cls(kind=LossKind.CONSERVATIVE, a=a, lam=lam, **kw)

    def with_clamp(self, clamp: Optional[Tuple[float, float]]) -> "LossSpec":
        return replace(self, clamp=clamp)

    @property
    def label(self) -> str:
        k = self.kind
        if k is LossKind.CONSERVATIVE:
            s = f"CL(a={self.a:.4g}, lam={self.lam:g})"
        elif k is LossKind.FOCAL:
            s = f"FL(alpha_t={self.alpha_t:g}, gamma={self.gamma:g})"
        elif k is LossKind.CROSS_ENTROPY:
            s = "CE"
        elif k is LossKind.CUBIC1:
            s = f"Cubic1(lambda1={self.lambda1:g})"
        elif k is LossKind.CUBIC2:
            s = f"Cubic2(lambda2={self.lambda2:g})"
        else:
            s = f"Cubic3(alpha={self.alpha:g}, beta={self.beta:g})"
        if self.clamp is not None:
            s += f" clamp[{self.clamp[0]:g},{self.clamp[1]:g}]"
        return s


def _positive(**kw):
    for name, v in kw.items():
        if not v > 0:
            raise DomainError(f"{name} must be > 0, got {v}")


@dataclass(frozen=True)
class ProbPolicy:
    """Probabilities entering a loss are clipped into ``[eps, 1 - eps]``."""

    eps: float = 1e-6

    def __post_init__(self):
        if not 0 < self.eps < 0.5:
            raise DomainError(f"eps must lie in (0, 0.5), got {self.eps}")


DEFAULT_POLICY = ProbPolicy()


def clamp_probability(p, policy: ProbPolicy = DEFAULT_POLICY):
    arr = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("probability must be finite")
    out = np.clip(arr, policy.eps, 1.0 - policy.eps)
    return float(out) if out.ndim == 0 else out


def _check_open_unit(p):
    arr = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise DomainError("p_t must lie in the open interval (0, 1)")
    return arr


def _raw_loss(spec: LossSpec, p: np.ndarray) -> np.ndarray:
    k = spec.kind
    if k is LossKind.CROSS_ENTROPY:
        return -np.log(p)
    if k is LossKind.FOCAL:
        return -spec.alpha_t * (1.0 - p) ** spec.gamma * np.log(p)
    if k is LossKind.CONSERVATIVE:
        ln_a = math.log(spec.a)
        u = np.log(p) / ln_a  # log_a p, negative on (0, 1)
        return spec.lam * (1.0 + u) ** 2 * (np.log(-u) / ln_a)
    if k is LossKind.CUBIC1:
        return -spec.lambda1 * (p - 0.5) ** 3
    if k is LossKind.CUBIC2:
        return -spec.lambda2 * (p - INV_E) ** 3
    w = np.where(p < INV_E, spec.alpha, spec.beta)
    return -w * (p - INV_E) ** 3


def _raw_grad(spec: LossSpec, p: np.ndarray) -> np.ndarray:
    k = spec.kind
    if k is LossKind.CROSS_ENTROPY:
        return -1.0 / p
    if k is LossKind.FOCAL:
        g = spec.gamma
        q = 1.0 - p
        # d/dp (1-p)^g = -g (1-p)^(g-1); guard g = 0
        dq = -g * q ** (g - 1.0) if g > 0 else np.zeros_like(p)
        return -spec.alpha_t * (dq * np.log(p) + q**g / p)
    if k is LossKind.CONSERVATIVE:
        ln_a = math.log(spec.a)
        u = np.log(p) / ln_a
        du = 1.0 / (p * ln_a)
        switch = np.log(-u) / ln_a
        d_switch = 1.0 / (u * ln_a)
        return spec.lam * du * (2.0 * (1.0 + u) * switch + (1.0 + u) ** 2 * d_switch)
    if k is LossKind.CUBIC1:
        return -3.0 * spec.lambda1 * (p - 0.5) ** 2
    if k is LossKind.CUBIC2:
        return -3.0 * spec.lambda2 * (p - INV_E) ** 2
    w = np.where(p < INV_E, spec.alpha, spec.beta)
    return -3.0 * w * (p - INV_E) ** 2


def _scalar_or_array(x: np.ndarray):
    return float(x) if x.ndim == 0 else x


def eval_loss(spec: LossSpec, p_t):
    """Loss value at ground-truth probability ``p_t`` (clipped if ``spec.clamp``)."""
    p = _check_open_unit(p_t)
    val = _raw_loss(spec, p)
    if spec.clamp is not None:
        val = np.clip(val, *spec.clamp)
    return _scalar_or_array(val)


def eval_grad(spec: LossSpec, p_t):
    """Exact derivative dL/dp_t; zero wherever a clamp bound binds."""
    p = _check_open_unit(p_t)
    g = _raw_grad(spec, p)
    if spec.clamp is not None:
        val = _raw_loss(spec, p)
        lo, hi = spec.clamp
        g = np.where((val < lo) | (val > hi), 0.0, g)
    return _scalar_or_array(g)


def zero_point(spec: LossSpec) -> Optional[float]:
    """Interior root of the loss on (0, 1), or None when there is none."""
    k = spec.kind
    if k is LossKind.CONSERVATIVE:
        return 1.0 / spec.a
    if k is LossKind.CUBIC1:
        return 0.5
    if k in (LossKind.CUBIC2, LossKind.CUBIC3):
        return INV_E
    return None


def is_sign_switching(spec: LossSpec) -> bool:
    return zero_point(spec) is not None


def pixelwise_loss(
    spec: LossSpec,
    probs: np.ndarray,
    labels: np.ndarray,
    policy: ProbPolicy = DEFAULT_POLICY,
    sign_switch: bool = False,
):
    """Mean loss over a label map and its gradient w.r.t. the probability map.

    ``probs`` has shape ``(H, W, K)``, ``labels`` shape ``(H, W)``.  The
    returned gradient is non-zero only at ground-truth channels.

    With ``sign_switch=True`` the per-pixel gradient is multiplied by the sign
    of that pixel's loss value.  Descending along the result decreases the loss
    where it is positive and increases it where it is negative, so a
    sign-switching loss pulls every ground-truth probability toward the zero
    point from both sides.  The returned mean loss is unaffected.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 3 or labels.shape != probs.shape[:2]:
        raise DataError(f"shape mismatch: probs {probs.shape}, labels {labels.shape}")
    K = probs.shape[2]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise DataError(f"labels must lie in [0, {K})")
    if not np.all(np.isfinite(probs)):
        raise DataError("probabilities must be finite")
    if np.any(np.abs(probs.sum(axis=2) - 1.0) > 1e-6):
        raise DataError("per-pixel probabilities must sum to 1 within 1e-6")

    lab = labels.astype(np.intp)
    rows, cols = np.indices(lab.shape)
    p_raw = probs[rows, cols, lab]
    p = np.clip(p_raw, policy.eps, 1.0 - policy.eps)
    vals = eval_loss(spec, p)
    g = np.asarray(eval_grad(spec, p))
    # clipping the probability has zero derivative where it binds
    g = np.where((p_raw < policy.eps) | (p_raw > 1.0 - policy.eps), 0.0, g)
    if sign_switch:
        g = g * np.sign(vals)
    n = lab.size
    grad = np.zeros_like(probs)
    grad[rows, cols, lab] = g / n
    return float(np.mean(vals)), grad
