"""Hand-derived gradients for the two-layer gated topology.

The loss for one sample is ``CE(softmax(logits), y) + lam * mean(mask)``;
batched calls average it over the batch. Dense models have no mask term.

Hard gates are piecewise constant, so their plain gradient w.r.t. the routing
tensors is zero. :func:`ste_backward` swaps in the sigmoid (gated MLP) or
softmax (MoE) surrogate at temperature 1 for the routing gradient only.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import RejectedInput, UnsupportedOperation
from .gatenet import DG_KINDS, MOE_KINDS, ModelParams, forward_batch
from .mathcore import LOG_EPS, sigmoid, softmax

STE_TEMPERATURE = 1.0


@dataclass
class Grads:
    d_w: dict
    d_theta: dict

    def all(self):
        out = dict(self.d_w)
        out.update(self.d_theta)
        return out


def _labels(Y, batch, n_classes):
    Y = np.atleast_1d(np.asarray(Y)).astype(np.int64)
    if Y.shape != (batch,):
        raise RejectedInput(f"expected {batch} labels, got shape {Y.shape}")
    if np.any(Y < 0) or np.any(Y >= n_classes):
        raise RejectedInput(f"label out of range for {n_classes} classes")
    return Y


def _ce_terms(logits, Y):
    P = softmax(logits)
    rows = np.arange(len(Y))
    py = P[rows, Y]
    losses = -np.log(py + LOG_EPS)
    # exact derivative of -log(p_y + eps) w.r.t. the logits
    dlog = P.copy()
    dlog[rows, Y] -= 1.0
    dlog *= (py / (py + LOG_EPS))[:, None]
    return losses, dlog


def balance_term(gate_logits):
    """``E * sum_e mean_b(p_be)^2`` for router probabilities ``p`` at temperature 1.

    Equals 1 when the batch spreads evenly over the experts and ``E`` when
    every sample goes to one expert. Returns ``(value, d_logits)``.
    """
    P = softmax(gate_logits)
    B, E = P.shape
    pbar = P.mean(axis=0)
    dP = np.broadcast_to(2.0 * E * pbar / B, P.shape)
    d_logits = P * (dP - (P * dP).sum(axis=1, keepdims=True))
    return float(E * pbar @ pbar), d_logits


def loss_value(X, Y, params, spec, lam=0.0, mask=None, balance=0.0):
    """Mean regularised loss; ``mask`` pins the gate realisation.

    ``balance`` weights :func:`balance_term` (MoE kinds only).
    """
    tr = forward_batch(X, params, spec, mask=mask)
    Y = _labels(Y, tr.x.shape[0], params.arch.n_classes)
    losses, _ = _ce_terms(tr.logits, Y)
    if params.kind != "dense":
        losses = losses + lam * tr.mask.mean(axis=1)
    loss = float(losses.mean())
    if balance and params.kind in MOE_KINDS:
        loss += balance * balance_term(tr.gate_logits)[0]
    return loss


def backward_batch(X, Y, params, spec, lam=0.0, ste=False, mask=None, balance=0.0):
    """Mean loss and gradients over a batch.

    ``ste`` uses the surrogate routing gradient for hard kinds. ``mask``
    replaces the gate output by a constant (no routing gradient flows).
    ``balance`` adds :func:`balance_term` for MoE kinds; it is used in
    pretraining to keep the router from collapsing onto one expert.
    """
    if ste and not spec.is_hard:
        raise UnsupportedOperation(f"STE is only defined for hard kinds, not {spec.kind}")
    tr = forward_batch(X, params, spec, mask=mask)
    B = tr.x.shape[0]
    Y = _labels(Y, B, params.arch.n_classes)
    losses, dlog = _ce_terms(tr.logits, Y)
    dlog /= B
    d_w, d_theta = {}, {}
    h = tr.h

    if params.kind == "dense":
        d_w["w_out"] = dlog.T @ h
        d_w["b_out"] = dlog.sum(axis=0)
        dh = dlog @ params["w_out"]
        loss = losses.mean()
    else:
        m = tr.mask
        units = m.shape[1]
        loss = (losses + lam * m.mean(axis=1)).mean()
        if params.kind in DG_KINDS:
            d_w["w_out"] = dlog.T @ tr.gated
            d_w["b_out"] = dlog.sum(axis=0)
            du = dlog @ params["w_out"]
            dh = du * m
            dm = du * h + lam / (units * B)
        else:
            o = tr.expert_out
            d_w["expert_w"] = np.einsum("be,bc,bd->ecd", m, dlog, h)
            d_w["expert_b"] = np.einsum("be,bc->ec", m, dlog)
            dh = np.einsum("be,bc,ecd->bd", m, dlog, params["expert_w"])
            dm = np.einsum("bc,bec->be", dlog, o) + lam / (units * B)

        dg = None
        if mask is None and ste:
            if params.kind == "dg_hard":
                s = sigmoid((tr.gate_logits - spec.hard_threshold) / STE_TEMPERATURE)
                dg = dm * s * (1.0 - s) / STE_TEMPERATURE
            else:
                s = softmax(tr.gate_logits / STE_TEMPERATURE)
                dg = s * (dm - (s * dm).sum(axis=1, keepdims=True)) / STE_TEMPERATURE
        elif mask is None and not spec.is_hard:
            T = spec.temperature
            if params.kind in DG_KINDS:
                dg = dm * m * (1.0 - m) / T
            else:
                dg = m * (dm - (m * dm).sum(axis=1, keepdims=True)) / T
            # the soft gate reads h, so h also gets gradient through the gate
            dh = dh + dg @ params["gate_w"]
        if balance and params.kind in MOE_KINDS:
            b_val, b_grad = balance_term(tr.gate_logits)
            loss += balance * b_val
            b_grad = balance * b_grad
            dh = dh + b_grad @ params["gate_w"]
            dg = b_grad if dg is None else dg + b_grad

        if dg is None:
            d_theta["gate_w"] = np.zeros_like(params["gate_w"])
            d_theta["gate_b"] = np.zeros_like(params["gate_b"])
        else:
            d_theta["gate_w"] = dg.T @ h
            d_theta["gate_b"] = dg.sum(axis=0)

    dz1 = dh * (tr.z1 > 0)
    d_w["w_in"] = dz1.T @ tr.x
    d_w["b_in"] = dz1.sum(axis=0)
    return float(loss), Grads(d_w, d_theta), tr


def backward(x, y, params, spec, lam=0.0):
    """Loss and exact gradients for one sample.

    Hard kinds return a zero routing gradient; see :func:`ste_backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise RejectedInput(f"backward takes one sample, got shape {x.shape}")
    loss, grads, _ = backward_batch(x[None, :], [y], params, spec, lam)
    return loss, grads


def ste_backward(x, y, params, spec, lam=0.0):
    """Hard forward, surrogate routing gradient. ``d_w`` matches :func:`backward`."""
    if not spec.is_hard:
        raise UnsupportedOperation(f"ste_backward needs a hard kind; use backward for {spec.kind}")
    x = np.asarray(x, dtype=np.float64)
    loss, grads, _ = backward_batch(x[None, :], [y], params, spec, lam, ste=True)
    return loss, grads


def unmasked_backward(X, Y, params, spec):
    """Representation gradients as if every unit were active.

    Gated MLPs run the forward with an all-ones mask. MoE models train each
    expert on its own output, as if the router had picked it. The routing
    tensors get no gradient.
    """
    if params.kind == "dense":
        _, grads, _ = backward_batch(X, Y, params, spec)
        return grads.d_w
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    B = X.shape[0]
    if params.kind in DG_KINDS:
        _, grads, _ = backward_batch(X, Y, params, spec, lam=0.0, mask=np.ones((B, params.arch.d_hidden)))
        return grads.d_w
    tr = forward_batch(X, params, spec)
    Y = _labels(Y, B, params.arch.n_classes)
    # one CE term per expert; (batch, experts, classes)
    P = softmax(tr.expert_out)
    rows = np.arange(B)
    py = P[rows, :, Y]
    dlog = P.copy()
    dlog[rows, :, Y] -= 1.0
    dlog *= (py / (py + LOG_EPS))[:, :, None]
    dlog /= B
    d_w = {
        "expert_w": np.einsum("bec,bd->ecd", dlog, tr.h),
        "expert_b": dlog.sum(axis=0),
    }
    dh = np.einsum("bec,ecd->bd", dlog, params["expert_w"])
    dz1 = dh * (tr.z1 > 0)
    d_w["w_in"] = dz1.T @ X
    d_w["b_in"] = dz1.sum(axis=0)
    return d_w


def surrogate_backward(X, Y, params, spec):
    """Representation gradients of the relaxed model.

    The hard gate is replaced by its straight-through surrogate (sigmoid of
    ``logit - hard_threshold`` for gated MLPs, softmax for top-1 MoE, both
    at :data:`STE_TEMPERATURE`) in the forward as well as the backward.
    Inactive units then get a nonzero gradient, including the path through
    the gate, which reads the hidden vector.
    """
    if not spec.is_hard:
        raise UnsupportedOperation(f"surrogate gradients need a hard kind, not {spec.kind}")
    tensors = dict(params.tensors)
    if params.kind == "dg_hard":
        relaxed_kind = "dg_soft"
        tensors["gate_b"] = tensors["gate_b"] - spec.hard_threshold
    else:
        relaxed_kind = "moe_soft"
    relaxed = ModelParams(relaxed_kind, params.arch, tensors, params.version)
    rspec = dataclasses.replace(spec, kind=relaxed_kind, temperature=STE_TEMPERATURE)
    _, grads, _ = backward_batch(X, Y, relaxed, rspec)
    return grads.d_w


# ---------------------------------------------------------------------------
# finite differences


def central_difference(f, p, epsilon=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``p``."""
    p = np.array(p, dtype=np.float64)
    g = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        up = f(p)
        flat[i] = orig - epsilon
        down = f(p)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * epsilon)
    return g


def fd_gradient(x, y, params, spec, lam=0.0, epsilon=1e-5):
    """Finite-difference oracle for :func:`backward`.

    For hard kinds the gate realisation is frozen at its unperturbed value
    and routing coordinates are left out (``d_theta`` is empty): the loss is
    a step function of them.
    """
    if epsilon <= 0:
        raise RejectedInput("epsilon must be positive")
    x = np.asarray(x, dtype=np.float64)[None, :]
    mask = None
    if spec.is_hard:
        mask = forward_batch(x, params, spec).mask.copy()

    def grad_of(name):
        def f(t):
            return loss_value(x, [y], params.evolve({name: t}), spec, lam, mask=mask)
        return central_difference(f, params[name], epsilon)

    d_w = {n: grad_of(n) for n in params.representation_names}
    d_theta = {} if spec.is_hard else {n: grad_of(n) for n in params.routing_names}
    return Grads(d_w, d_theta)


def max_relative_error(analytic, numeric):
    """``max |a - n| / max(1, |n|)`` over the coordinates present in ``numeric``."""
    a_all, n_all = analytic.all(), numeric.all()
    worst = 0.0
    for name, n in n_all.items():
        a = a_all[name]
        worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n)))))
    return worst
