"""Metric arithmetic for the drift-adaptation tables."""

import csv

import numpy as np

from .errors import InsufficientData, RejectedInput
from .gatenet import MOE_KINDS, ActiveSet, resolve_kind


def recovery(adapt_acc, drift_before):
    """Accuracy points regained by adaptation (``AdaptAcc - DriftBefore``)."""
    return adapt_acc - drift_before


def clean_drop(clean_after, clean_before):
    """Change in clean accuracy; negative means forgetting."""
    return clean_after - clean_before


def flip_pred(before, after):
    """Fraction of samples whose predicted class changed."""
    before = np.asarray(before)
    after = np.asarray(after)
    if before.shape != after.shape or before.ndim != 1 or before.size == 0:
        raise RejectedInput(f"prediction lists must be equal-length and nonempty, got {before.shape} vs {after.shape}")
    return float(np.count_nonzero(before != after) / before.size)


def _routing_key(r):
    if isinstance(r, ActiveSet):
        return r.indices
    if isinstance(r, (int, np.integer)):
        return (int(r),)
    return tuple(int(i) for i in r)


def flip_routing(before, after):
    """Fraction of samples whose routing (active set or top-1 expert) changed."""
    before, after = list(before), list(after)
    if len(before) != len(after) or not before:
        raise RejectedInput(f"routing lists must be aligned and nonempty, got {len(before)} vs {len(after)}")
    changed = sum(_routing_key(b) != _routing_key(a) for b, a in zip(before, after))
    return changed / len(before)


def activation_ratio(masks, tau=0.0):
    """Mean over samples of the fraction of mask entries above ``tau``."""
    masks = np.asarray(masks, dtype=np.float64)
    if masks.ndim != 2 or masks.shape[0] == 0 or masks.shape[1] == 0:
        raise RejectedInput(f"masks must be a nonempty (samples, units) array, got shape {masks.shape}")
    return float(np.mean(np.count_nonzero(masks > tau, axis=1) / masks.shape[1]))


def stage_costs(kind, arch):
    """Multiply-accumulates of the affine stages: ``(fixed, gated)``.

    ``gated`` is the work skipped for inactive units or experts; ``fixed``
    is everything else (shared encoder, gate/router at full cost).
    """
    kind = resolve_kind(kind)
    n, d, c = arch.n_in, arch.d_hidden, arch.n_classes
    if kind in MOE_KINDS:
        e = arch.experts or 4
        return n * d + d * e, e * d * c
    if kind == "dense":
        return n * d, d * c
    return n * d + d * d, d * c


def flops_proxy(ar, kind=None, arch=None, full_accounting=False):
    """Relative compute at activation ratio ``ar`` (1.0 = every unit runs).

    The default normalises over the conditionally executed stage only. Every
    unit (or expert) in that stage has the same cost, so the per-unit costs
    cancel and the proxy equals ``ar``. ``full_accounting=True`` also counts
    the shared encoder and the gate/router at full cost, relative to the same
    model with every unit active.
    """
    if not 0 <= ar <= 1:
        raise RejectedInput(f"activation ratio must lie in [0, 1], got {ar}")
    if not full_accounting:
        return float(ar)
    if kind is None or arch is None:
        raise RejectedInput("full accounting needs the model kind and architecture")
    fixed, gated = stage_costs(kind, arch)
    if resolve_kind(kind) == "dense":
        return 1.0
    return (fixed + ar * gated) / (fixed + gated)


def pearson(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    xc, yc = xs - xs.mean(), ys - ys.mean()
    denom = np.sqrt((xc @ xc) * (yc @ yc))
    if denom == 0:
        raise InsufficientData("correlation undefined for a constant column")
    return float((xc @ yc) / denom)


def _point(rec, flip_field):
    if isinstance(rec, dict):
        return rec["model"], rec["mode"], float(rec[flip_field]), float(rec["adapt_acc"])
    if isinstance(rec, (tuple, list)):
        return rec[0], rec[1], float(rec[2]), float(rec[3])
    return rec.model, rec.mode, float(getattr(rec, flip_field)), float(rec.adapt_acc)


def correlate_flip_adaptacc(records, flip_field="flip_pred"):
    """Pearson r between flip ratio and AdaptAcc over OK rows, plus the points.

    ``records`` may hold :class:`~dgmlp.driftlab.MetricsRecord` objects,
    dicts with ``model, mode, <flip_field>, adapt_acc`` keys, or
    ``(model, mode, flip, adapt_acc)`` tuples.
    """
    points = []
    for rec in records:
        status = rec.get("status", "OK") if isinstance(rec, dict) else getattr(rec, "status", "OK")
        if status != "OK":
            continue
        points.append(_point(rec, flip_field))
    if len(points) < 3:
        raise InsufficientData(f"insufficient data: {len(points)} OK rows, need at least 3")
    r = pearson([p[2] for p in points], [p[3] for p in points])
    return r, points


CORRELATION_HEADER = ("model", "mode", "flip", "adapt_acc")


def write_correlation_csv(path, points):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CORRELATION_HEADER)
        for model, mode, flip, acc in points:
            w.writerow([model, mode, repr(flip), repr(acc)])
