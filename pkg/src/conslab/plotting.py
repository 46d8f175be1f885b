"""SVG figures: loss curves, training curves and comparison bars.

Figures are built with the object-oriented matplotlib API (no pyplot state),
and saved with a fixed hash salt and no date so reruns give identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from matplotlib import rcParams
from matplotlib.figure import Figure

from conslab.losses import LossKind, LossSpec, eval_loss

rcParams["svg.hashsalt"] = "conslab"
rcParams["svg.fonttype"] = "path"

P_RANGE = (0.01, 0.99)
N_POINTS = 981  # step 0.001 over P_RANGE


@dataclass
class Curve:
    label: str
    p: np.ndarray
    values: np.ndarray


@dataclass
class LossFigure:
    """Curve data plus the x-axis geometry needed to reason in pixels."""

    curves: List[Curve]
    xlim: Tuple[float, float]
    axes_width_px: float
    ylim: Tuple[float, float] = (0.0, 0.0)

    def px_per_unit(self) -> float:
        return self.axes_width_px / (self.xlim[1] - self.xlim[0])


def _save(fig: Figure, out_path):
    fig.savefig(out_path, format="svg", metadata={"Date": None})


def base_label(a: float) -> str:
    return "a = e" if math.isclose(a, math.e) else f"a = {a:g}"


def homogeneous_roster(lam: float = 1.0) -> List[Tuple[str, LossSpec]]:
    return [
        ("Conservative", LossSpec.conservative(lam=lam)),
        ("Cubic1", LossSpec(kind=LossKind.CUBIC1, lambda1=lam)),
        ("Cubic2", LossSpec(kind=LossKind.CUBIC2, lambda2=lam)),
        ("Cubic3", LossSpec(kind=LossKind.CUBIC3, alpha=lam, beta=lam)),
    ]


def conservative_roster(bases: Sequence[float], lam: float = 1.0) -> List[Tuple[str, LossSpec]]:
    return [(base_label(a), LossSpec.conservative(a=a, lam=lam)) for a in bases]


def plot_loss_curves(roster: Sequence[Tuple[str, LossSpec]], out_path, title: str = "") -> LossFigure:
    p = np.linspace(*P_RANGE, N_POINTS)
    curves = [Curve(label, p, np.asarray(eval_loss(spec, p))) for label, spec in roster]
    fig = Figure(figsize=(6.4, 4.8), dpi=100)
    ax = fig.add_subplot()
    for c in curves:
        ax.plot(c.p, c.values, label=c.label, linewidth=1.2)
    ax.axhline(0.0, color="black", linewidth=0.6)
    ax.set_xlim(*P_RANGE)
    ax.set_xlabel("probability of the ground-truth class p")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend()
    bbox = ax.get_window_extent()
    out = LossFigure(curves, P_RANGE, float(bbox.width), tuple(ax.get_ylim()))
    _save(fig, out_path)
    return out


def plot_history(history, out_path, title: str = "") -> None:
    steps, tgt = history.target_curve()
    _, src = history.source_curve()
    fig = Figure(figsize=(6.4, 4.8), dpi=100)
    ax = fig.add_subplot()
    ax.plot(steps, src, marker="o", markersize=3, label="source mIoU")
    ax.plot(steps, tgt, marker="o", markersize=3, label="target mIoU")
    ax.set_xlabel("step")
    ax.set_ylabel("mIoU")
    ax.set_ylim(0.0, 1.0)
    if title:
        ax.set_title(title)
    ax.legend()
    _save(fig, out_path)


def plot_compare(names: Sequence[str], values: Sequence[Optional[float]], out_path) -> None:
    fig = Figure(figsize=(7.0, 0.35 * len(names) + 1.5), dpi=100)
    ax = fig.add_subplot()
    y = np.arange(len(names))
    ax.barh(y, [0.0 if v is None else v for v in values])
    ax.set_yticks(y, list(names))
    ax.invert_yaxis()
    ax.set_xlim(0.0, 1.0)
    ax.set_xlabel("final target mIoU (seed mean)")
    fig.tight_layout()
    _save(fig, out_path)
