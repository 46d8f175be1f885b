"""Finite-difference suites for the closed-form losses and for toy networks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from conslab.losses import LossKind, LossSpec, eval_grad, eval_loss, pixelwise_loss
from conslab.nn import Conv3x3, Dense, Network, ReLU, SoftmaxPerPixel, Tanh, finite_diff_check

LOSS_TOL = 1e-5
NET_TOL = 1e-4
LOSS_H = 1e-6
NET_H = 1e-5

SUITE_SPECS = [
    LossSpec.cross_entropy(),
    LossSpec.focal(alpha_t=5.0, gamma=2.0),
    LossSpec.conservative(lam=5.0),
    LossSpec(kind=LossKind.CUBIC1, lambda1=5.0),
    LossSpec(kind=LossKind.CUBIC2, lambda2=5.0),
    LossSpec(kind=LossKind.CUBIC3, alpha=5.0, beta=2.0),
]


@dataclass
class GradcheckReport:
    loss_errors: List[Tuple[str, float]] = field(default_factory=list)
    net_errors: List[Tuple[str, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e < LOSS_TOL for _, e in self.loss_errors) and all(e < NET_TOL for _, e in self.net_errors)

    def lines(self) -> List[str]:
        out = []
        for name, e in self.loss_errors:
            out.append(f"loss {name:14s} max_rel_err={e:.3e} {'ok' if e < LOSS_TOL else 'FAIL'}")
        for name, e in self.net_errors:
            out.append(f"net  {name:14s} max_rel_err={e:.3e} {'ok' if e < NET_TOL else 'FAIL'}")
        out.append("PASS" if self.passed else "FAIL")
        return out


def loss_suite(n_points: int = 100, seed: int = 0) -> List[Tuple[str, float]]:
    """Max of ``|analytic - central| / max(1, |analytic|)`` per loss kind."""
    rng = np.random.default_rng(seed)
    out = []
    for spec in SUITE_SPECS:
        p = rng.uniform(0.01, 0.99, size=n_points)
        analytic = eval_grad(spec, p)
        numeric = (eval_loss(spec, p + LOSS_H) - eval_loss(spec, p - LOSS_H)) / (2 * LOSS_H)
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
        out.append((spec.kind.value, float(err.max())))
    return out


def toy_net(seed: int) -> Network:
    rng = np.random.default_rng(seed)
    return Network(
        [
            Conv3x3(2, 4, rng),
            ReLU() if seed % 2 == 0 else Tanh(),
            Conv3x3(4, 4, rng, stride=2),
            Tanh(),
            Dense(4, 3, rng),
            SoftmaxPerPixel(),
        ],
        f"toy{seed}",
    )


def net_suite(n_nets: int = 3, seed: int = 0, plant_fault: bool = False) -> List[Tuple[str, float]]:
    """Backprop against finite differences on small conv nets under a CL head."""
    spec = LossSpec.conservative(lam=5.0)
    out = []
    for i in range(n_nets):
        rng = np.random.default_rng([seed, i])
        net = toy_net(seed * 100 + i)
        x = rng.normal(size=(6, 6, 2))
        labels = rng.integers(0, 3, size=(3, 3))

        def loss(probs):
            return pixelwise_loss(spec, probs, labels)

        transform = _double_largest if plant_fault else None
        out.append((net.name, finite_diff_check(net, x, loss, h=NET_H, grad_transform=transform)))
    return out


def _double_largest(grads: List[np.ndarray]):
    g = grads[0].reshape(-1)
    g[np.argmax(np.abs(g))] *= 2.0


def run_gradcheck(plant_fault: bool = False) -> GradcheckReport:
    return GradcheckReport(loss_suite(), net_suite(plant_fault=plant_fault))
