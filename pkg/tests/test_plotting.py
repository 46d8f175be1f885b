import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from conslab import plotting
from conslab.engine import HistoryRow, RunHistory, StepLosses
from conslab.losses import LossSpec


def crossing(curve):
    """First sign change of the sampled curve, linearly interpolated."""
    v = curve.values
    idx = np.nonzero(np.sign(v[:-1]) != np.sign(v[1:]))[0]
    i = idx[0]
    p0, p1, v0, v1 = curve.p[i], curve.p[i + 1], v[i], v[i + 1]
    return p0 if v1 == v0 else p0 - v0 * (p1 - p0) / (v1 - v0)


def test_bases_cross_at_inverse_base(tmp_path):
    bases = [2.0, math.e, 3.0, 4.0]
    fig = plotting.plot_loss_curves(plotting.conservative_roster(bases), tmp_path / "b.svg")
    assert len(fig.curves) == 4
    for a, c in zip(bases, fig.curves):
        assert abs(crossing(c) - 1 / a) * fig.px_per_unit() < 1.0


def test_lambda_scaling(tmp_path):
    roster = [("1", LossSpec.conservative(lam=1.0)), ("5", LossSpec.conservative(lam=5.0))]
    fig = plotting.plot_loss_curves(roster, tmp_path / "l.svg")
    np.testing.assert_allclose(fig.curves[1].values, 5 * fig.curves[0].values, rtol=1e-12, atol=1e-12)


def test_homogeneous_zero_points(tmp_path):
    fig = plotting.plot_loss_curves(plotting.homogeneous_roster(), tmp_path / "h.svg")
    expected = [1 / math.e, 0.5, 1 / math.e, 1 / math.e]
    for want, c in zip(expected, fig.curves):
        assert abs(crossing(c) - want) * fig.px_per_unit() < 1.0


def test_svg_content_and_determinism(tmp_path):
    roster = plotting.conservative_roster([2.0, 3.0])
    plotting.plot_loss_curves(roster, tmp_path / "a.svg")
    plotting.plot_loss_curves(roster, tmp_path / "b.svg")
    a = (tmp_path / "a.svg").read_bytes()
    assert a == (tmp_path / "b.svg").read_bytes()
    root = ET.fromstring(a)
    assert root.tag.endswith("svg")
    assert b"Date" not in a


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        plotting.plot_loss_curves(plotting.homogeneous_roster(), tmp_path / "missing" / "x.svg")


def test_history_and_compare(tmp_path):
    h = RunHistory([HistoryRow(s, StepLosses(step=s), 0.5 + s / 100, 0.4 + s / 200, "cross_entropy") for s in (10, 20)])
    plotting.plot_history(h, tmp_path / "h1.svg")
    plotting.plot_history(h, tmp_path / "h2.svg")
    assert (tmp_path / "h1.svg").read_bytes() == (tmp_path / "h2.svg").read_bytes()
    plotting.plot_compare(["a", "b"], [0.7, None], tmp_path / "c.svg")
    ET.parse(tmp_path / "c.svg")
