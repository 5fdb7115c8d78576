"""Online adaptation: predict with the current parameters, then update.

Modes select which parameters a step may touch:

* ``A_none``: nothing.
* ``B_theta_only``: routing tensors only; representation tensors are shared,
  untouched, with the previous version.
* ``C_w_inactive_only``: representation rows of units that are *inactive*
  for the current input.
* ``D_theta_and_w_inactive``: B and C together.
* ``X_w_active_only``: representation rows of *active* units plus tensors
  shared by all units, using the gradient of the masked forward.

The prediction of step ``t`` is always computed from the version-``t``
parameters before any update, so every emitted output is a forward pass of
one recorded parameter state.
"""

import csv
import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ModeSkip, RejectedInput
from .gatenet import ActiveSet, active_set, anneal_step, masked_forward, predict, unit_axes
from .graddiff import backward_batch, surrogate_backward, unmasked_backward


class AdaptationMode(str, enum.Enum):
    A_none = "A_none"
    B_theta_only = "B_theta_only"
    C_w_inactive_only = "C_w_inactive_only"
    D_theta_and_w_inactive = "D_theta_and_w_inactive"
    X_w_active_only = "X_w_active_only"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip()
        for m in cls:
            if key in (m.value, m.name, m.value[0]) or key.lower() == m.value.lower():
                return m
        raise RejectedInput(f"unknown adaptation mode {name!r}")

    @property
    def suffix(self):
        """``theta_only`` etc., as used in SKIP status strings."""
        return self.value[2:]

    @property
    def updates_theta(self):
        return self in (AdaptationMode.B_theta_only, AdaptationMode.D_theta_and_w_inactive)

    @property
    def updates_w(self):
        return self in (AdaptationMode.C_w_inactive_only, AdaptationMode.D_theta_and_w_inactive,
                        AdaptationMode.X_w_active_only)


GRID_MODES = tuple(AdaptationMode)[:4]


# where mode C/D get the gradient for inactive rows:
#   auto      surrogate for dg_hard, unmasked for moe_top1, masked for soft kinds
#   surrogate gradient of the STE-relaxed forward (hard kinds only)
#   unmasked  auxiliary forward with every unit switched on; MoE experts are
#             each trained as if the router had picked them
#   masked    the served forward's own gradient
INACTIVE_GRADS = ("auto", "surrogate", "unmasked", "masked")


@dataclass(frozen=True)
class AdaptConfig:
    eta: float = 0.001
    lam: float = 1e-3
    tau_inactive: float = 0.5  # soft kinds: units with mask <= this count as inactive
    ste_enabled: bool = False
    steps: int = 1000
    inactive_grad: str = "auto"

    def __post_init__(self):
        if not self.eta > 0:
            raise RejectedInput(f"eta must be positive, got {self.eta}")
        if self.lam < 0:
            raise RejectedInput(f"lambda must be >= 0, got {self.lam}")
        if not 0 <= self.tau_inactive < 1:
            raise RejectedInput(f"tau_inactive must lie in [0, 1), got {self.tau_inactive}")
        if self.inactive_grad not in INACTIVE_GRADS:
            raise RejectedInput(f"inactive_grad must be one of {INACTIVE_GRADS}, got {self.inactive_grad!r}")
        if self.steps < 1:
            raise RejectedInput("steps must be >= 1")


def check_mode(kind, mode, cfg):
    """Raise :class:`ModeSkip` if ``mode`` cannot run on a model of ``kind``."""
    mode = AdaptationMode.parse(mode)
    if mode is AdaptationMode.A_none:
        return
    if kind == "dense":
        raise ModeSkip(f"mode={mode.suffix}")
    # hard gates have no routing gradient unless STE is switched on; mode D
    # always takes its routing step through STE
    if mode is AdaptationMode.B_theta_only and kind in ("dg_hard", "moe_top1") and not cfg.ste_enabled:
        raise ModeSkip(f"mode={mode.suffix}")


def scope_mask(mode, active, d):
    """Unit indices whose representation rows ``mode`` may update."""
    mode = AdaptationMode.parse(mode)
    idx = active.indices if isinstance(active, ActiveSet) else tuple(active)
    if any(i < 0 or i >= d for i in idx):
        raise RejectedInput(f"active indices {idx} outside [0, {d})")
    if mode in (AdaptationMode.C_w_inactive_only, AdaptationMode.D_theta_and_w_inactive):
        act = set(idx)
        return tuple(i for i in range(d) if i not in act)
    if mode is AdaptationMode.X_w_active_only:
        return tuple(sorted(set(idx)))
    return ()


def _apply_rows(params, grads, units, eta, include_shared):
    """SGD on the rows of ``units``; coordinates outside keep their exact bits."""
    sel = np.zeros(params.arch.experts or params.arch.d_hidden, dtype=bool)
    sel[list(units)] = True
    out = {}
    for name, axis in unit_axes(params.kind).items():
        t, g = params[name], grads[name]
        if axis is None:
            if include_shared:
                out[name] = t - eta * g
            continue
        if not units:
            continue
        shape = [1] * t.ndim
        shape[axis] = sel.size
        out[name] = np.where(sel.reshape(shape), t - eta * g, t)
    return out


def inactive_gradient(X, Y, params, spec, cfg, grads):
    source = cfg.inactive_grad
    if source == "auto":
        source = {"dg_hard": "surrogate", "moe_top1": "unmasked"}.get(spec.kind, "masked")
    if source == "surrogate":
        if not spec.is_hard:
            raise RejectedInput(f"surrogate inactive gradients need a hard kind, not {spec.kind}")
        return surrogate_backward(X, Y, params, spec)
    if source == "unmasked":
        return unmasked_backward(X, Y, params, spec)
    return grads.d_w


class StepResult(NamedTuple):
    prediction: int
    logits: np.ndarray
    next_params: object
    loss: float
    mask: np.ndarray


def infer_then_update(x, y, params, mode, cfg, spec):
    """Predict ``x`` with ``params``, then take one mode-scoped SGD step.

    Mode A returns ``params`` itself. Other modes return a successor with
    ``version + 1``; tensors outside the mode's scope are shared, not copied.
    """
    mode = AdaptationMode.parse(mode)
    x = np.asarray(x, dtype=np.float64)
    logits, mask, _ = masked_forward(x, params, spec)
    prediction = int(np.argmax(logits))
    check_mode(params.kind, mode, cfg)

    use_ste = spec.is_hard and mode.updates_theta
    X, Y = x[None, :], [y]
    loss, grads, _ = backward_batch(X, Y, params, spec, cfg.lam, ste=use_ste)
    if mode is AdaptationMode.A_none:
        return StepResult(prediction, logits, params, loss, mask)

    updates = {}
    if mode.updates_theta:
        for name in params.routing_names:
            updates[name] = params[name] - cfg.eta * grads.d_theta[name]
    if mode.updates_w:
        active = active_set(mask, 0.0 if spec.is_hard else cfg.tau_inactive)
        units = scope_mask(mode, active, mask.shape[0])
        if mode is AdaptationMode.X_w_active_only:
            updates.update(_apply_rows(params, grads.d_w, units, cfg.eta, include_shared=True))
        else:
            d_w = inactive_gradient(X, Y, params, spec, cfg, grads)
            updates.update(_apply_rows(params, d_w, units, cfg.eta, include_shared=False))
    nxt = params.evolve(updates, version=params.version + 1)
    return StepResult(prediction, logits, nxt, loss, mask)


@dataclass
class StreamResult:
    final_params: object
    status: str = "OK"
    losses: list = field(default_factory=list)
    temperatures: list = field(default_factory=list)
    active_ratios: list = field(default_factory=list)
    predictions: list = field(default_factory=list)
    versions: list = field(default_factory=list)
    probe_before: np.ndarray = None
    probe_after: np.ndarray = None
    history: list = None  # params per step, when requested

    @property
    def ok(self):
        return self.status == "OK"


def run_stream(stream, params, mode, cfg, spec, probe=None, keep_history=False, anneal_offset=None):
    """Fold :func:`infer_then_update` over ``stream`` in order.

    ``stream`` is a sequence of ``(x, y)``. ``probe`` is an optional 2-D
    input array whose predictions are recorded before and after the run.
    For ``dg_anneal`` the temperature follows the schedule at step
    ``anneal_offset + t`` when ``anneal_offset`` is given.
    """
    mode = AdaptationMode.parse(mode)
    stream = list(stream)
    if not stream:
        raise RejectedInput("run_stream needs a nonempty stream")
    res = StreamResult(final_params=params, history=[] if keep_history else None)
    if probe is not None:
        res.probe_before = predict(probe, params, spec)[0]
    try:
        check_mode(params.kind, mode, cfg)
    except ModeSkip as skip:
        res.status = skip.status
        return res
    cur = params
    for t, (x, y) in enumerate(stream):
        step_spec = spec
        if spec.kind == "dg_anneal" and anneal_offset is not None:
            step_spec = anneal_step(spec, anneal_offset + t)
        if keep_history:
            res.history.append(cur)
        r = infer_then_update(x, y, cur, mode, cfg, step_spec)
        res.losses.append(r.loss)
        res.temperatures.append(step_spec.temperature)
        thr = 0.0 if spec.is_hard else spec.tau
        res.active_ratios.append(float(np.mean(r.mask > thr)))
        res.predictions.append(r.prediction)
        res.versions.append(cur.version)
        cur = r.next_params
    res.final_params = cur
    if probe is not None:
        res.probe_after = predict(probe, cur, spec)[0]
    return res


LOSS_TRACE_HEADER = ("step", "loss", "temperature", "active_ratio")


def write_loss_trace(path, result):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOSS_TRACE_HEADER)
        for t, (loss, temp, ar) in enumerate(zip(result.losses, result.temperatures, result.active_ratios)):
            w.writerow([t, repr(float(loss)), repr(float(temp)), repr(float(ar))])


def read_loss_trace(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        {"step": int(r["step"]), "loss": float(r["loss"]), "temperature": float(r["temperature"]),
         "active_ratio": float(r["active_ratio"])}
        for r in rows
    ]
