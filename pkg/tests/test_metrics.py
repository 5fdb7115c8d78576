import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dgmlp import metrics
from dgmlp.errors import InsufficientData, RejectedInput
from dgmlp.gatenet import ActiveSet, Arch
from reference_data import CORRELATION_ROWS, GRID_OK_ROWS, SUMMARY_ROWS


def fsum_pearson(xs, ys):
    n = len(xs)
    mx, my = math.fsum(xs) / n, math.fsum(ys) / n
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    syy = math.fsum((y - my) ** 2 for y in ys)
    return sxy / math.sqrt(sxx * syy)


@pytest.mark.parametrize("row", GRID_OK_ROWS, ids=lambda r: f"{r[0]}-{r[1][0]}")
def test_reference_recovery_and_flops(row):
    _, _, before, after, rec, ar, flops = row
    assert abs(metrics.recovery(after, before) - rec) <= 0.01
    assert round(metrics.flops_proxy(ar), 2) == flops


@pytest.mark.parametrize("row", SUMMARY_ROWS, ids=lambda r: r[0])
def test_reference_summary_flops(row):
    assert round(metrics.flops_proxy(row[1]), 2) == row[2]


def test_clean_drop_sign():
    assert metrics.clean_drop(90.0, 95.0) == -5.0


def test_flip_pred():
    assert metrics.flip_pred([1, 2, 3, 4], [1, 0, 3, 0]) == 0.5
    with pytest.raises(RejectedInput):
        metrics.flip_pred([1, 2], [1])
    with pytest.raises(RejectedInput):
        metrics.flip_pred([], [])


@given(st.lists(st.integers(0, 9), min_size=1, max_size=30))
def test_flip_pred_bounds(preds):
    assert metrics.flip_pred(preds, preds) == 0.0
    shifted = [(p + 1) % 10 for p in preds]
    assert metrics.flip_pred(preds, shifted) == 1.0


def test_flip_routing_accepts_sets_indices_and_experts():
    before = [ActiveSet((0, 1), 0.0), (2,), 3]
    after = [(0, 1), ActiveSet((2,), 0.0), 1]
    assert metrics.flip_routing(before, after) == pytest.approx(1 / 3)
    with pytest.raises(RejectedInput):
        metrics.flip_routing([1], [])


def test_activation_ratio():
    masks = np.array([[1, 0, 0, 1], [1, 1, 1, 0]], dtype=float)
    assert metrics.activation_ratio(masks) == pytest.approx(0.625)
    soft = np.array([[0.5, 1e-4, 0.2]])
    assert metrics.activation_ratio(soft, tau=1e-3) == pytest.approx(2 / 3)
    with pytest.raises(RejectedInput):
        metrics.activation_ratio(np.zeros((0, 3)))


@given(st.floats(0, 1))
def test_flops_proxy_properties(ar):
    assert metrics.flops_proxy(ar) == ar
    full = metrics.flops_proxy(ar, "dg_hard", Arch(), full_accounting=True)
    assert ar <= full + 1e-12 and full <= 1.0 + 1e-12


def test_flops_proxy_full_accounting_values():
    arch = Arch()
    fixed = 784 * 256 + 256 * 256
    assert metrics.flops_proxy(0.5, "dg_soft", arch, True) == pytest.approx((fixed + 0.5 * 2560) / (fixed + 2560))
    assert metrics.flops_proxy(0.3, "dense", arch, True) == 1.0
    with pytest.raises(RejectedInput):
        metrics.flops_proxy(1.2)
    with pytest.raises(RejectedInput):
        metrics.flops_proxy(0.5, full_accounting=True)


def test_reference_correlation_against_fsum_oracle():
    r, points = metrics.correlate_flip_adaptacc(CORRELATION_ROWS)
    assert len(points) == 11
    want = fsum_pearson([p[2] for p in CORRELATION_ROWS], [p[3] for p in CORRELATION_ROWS])
    assert r == pytest.approx(want, abs=1e-12)


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=20, unique=True), st.floats(0.1, 10), st.floats(-5, 5))
def test_correlation_of_linear_rows_is_one(xs, a, b):
    rows = [("M", "B", x, a * x + b) for x in xs]
    if np.ptp(xs) < 1e-6:
        return
    r, _ = metrics.correlate_flip_adaptacc(rows)
    assert r == pytest.approx(1.0, abs=1e-9)


def test_correlation_skips_non_ok_and_needs_three():
    rows = [
        {"model": "A", "mode": "B", "flip_pred": "0.1", "adapt_acc": "50", "status": "OK"},
        {"model": "A", "mode": "C", "flip_pred": "0.2", "adapt_acc": "55", "status": "OK"},
        {"model": "A", "mode": "D", "flip_pred": "", "adapt_acc": "", "status": "SKIP(mode=x)"},
    ]
    with pytest.raises(InsufficientData):
        metrics.correlate_flip_adaptacc(rows)
    with pytest.raises(InsufficientData):
        metrics.pearson([1, 1, 1], [1, 2, 3])


def test_correlation_csv(tmp_path):
    _, points = metrics.correlate_flip_adaptacc(CORRELATION_ROWS)
    metrics.write_correlation_csv(tmp_path / "c.csv", points)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "model,mode,flip,adapt_acc" and len(lines) == 12
    assert lines[1] == "DG-Hard,C_w_inactive_only,0.106602,0.7467"
