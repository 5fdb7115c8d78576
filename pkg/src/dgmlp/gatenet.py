"""Dense MLP and gated variants with a masked forward pass.

Every model shares a ``n_in -> d_hidden`` ReLU encoder. Gated MLPs (``dg_*``)
multiply the hidden vector by a mask produced from that hidden vector by a
``d_hidden -> d_hidden`` gate. MoE models feed the hidden vector to a
``d_hidden -> expert_count`` router and mix ``expert_count`` linear heads.

Parameters are split into routing tensors (``gate_w``, ``gate_b``) and
representation tensors (everything else).
"""

import dataclasses
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import RejectedInput, UnsupportedOperation
from .mathcore import affine, glorot_uniform, relu, rng_stream, sigmoid, softmax

KINDS = ("dense", "dg_hard", "dg_soft", "dg_anneal", "moe_top1", "moe_soft")
DG_KINDS = ("dg_hard", "dg_soft", "dg_anneal")
MOE_KINDS = ("moe_top1", "moe_soft")
HARD_KINDS = ("dg_hard", "moe_top1")
SOFT_KINDS = ("dg_soft", "dg_anneal", "moe_soft")

DISPLAY_NAMES = {
    "dense": "Dense",
    "dg_hard": "DG-Hard",
    "dg_soft": "DG-Soft",
    "dg_anneal": "DG-Anneal",
    "moe_top1": "MoE-Top1",
    "moe_soft": "MoE-Soft",
}

ROUTING_TENSORS = ("gate_w", "gate_b")


def resolve_kind(name):
    """Accept ``dg_hard``, ``DG-Hard``, ``dg-hard`` ... and return the kind id."""
    key = str(name).strip().lower().replace("-", "_")
    if key in KINDS:
        return key
    raise RejectedInput(f"unknown model {name!r}; expected one of {', '.join(KINDS)}")


@dataclass(frozen=True)
class GateSpec:
    kind: str
    temperature: float = 1.0
    anneal_schedule: tuple = (1.0, 0.1, 200)
    hard_threshold: float = 0.0
    expert_count: int = 4
    tau: float = 1e-3  # active-set threshold for soft masks

    def __post_init__(self):
        object.__setattr__(self, "kind", resolve_kind(self.kind))
        object.__setattr__(self, "anneal_schedule", tuple(self.anneal_schedule))
        t_start, t_end, steps = self.anneal_schedule
        if self.temperature <= 0:
            raise RejectedInput(f"temperature must be positive, got {self.temperature}")
        if not (t_end > 0 and t_end <= t_start):
            raise RejectedInput(f"anneal schedule needs 0 < T_end <= T_start, got {self.anneal_schedule}")
        if steps < 1:
            raise RejectedInput("anneal schedule needs at least one step")
        if self.kind in MOE_KINDS and self.expert_count < 2:
            raise RejectedInput("MoE models need expert_count >= 2")
        if not 0 <= self.tau < 1:
            raise RejectedInput(f"tau must lie in [0, 1), got {self.tau}")

    @classmethod
    def default(cls, kind, **overrides):
        kind = resolve_kind(kind)
        if kind == "dg_anneal":
            sched = overrides.get("anneal_schedule", (1.0, 0.1, 200))
            overrides.setdefault("temperature", sched[0])
        return cls(kind=kind, **overrides)

    @property
    def display_name(self):
        return DISPLAY_NAMES[self.kind]

    @property
    def is_hard(self):
        return self.kind in HARD_KINDS

    @property
    def is_moe(self):
        return self.kind in MOE_KINDS


@dataclass(frozen=True)
class Arch:
    n_in: int = 784
    d_hidden: int = 256
    n_classes: int = 10
    experts: int = 0  # 0 for dense / gated MLPs


def tensor_shapes(kind, arch):
    """Ordered ``name -> shape`` map; the order is the checkpoint order."""
    kind = resolve_kind(kind)
    n, d, c = arch.n_in, arch.d_hidden, arch.n_classes
    shapes = {"w_in": (d, n), "b_in": (d,)}
    if kind in MOE_KINDS:
        e = arch.experts
        shapes.update(gate_w=(e, d), gate_b=(e,), expert_w=(e, c, d), expert_b=(e, c))
    else:
        shapes.update(w_out=(c, d), b_out=(c,))
        if kind in DG_KINDS:
            shapes.update(gate_w=(d, d), gate_b=(d,))
    return shapes


def unit_axes(kind):
    """Axis along which each representation tensor is indexed by gate unit.

    ``None`` marks tensors shared by every unit (they contribute to every
    output, so they are always "active").
    """
    if resolve_kind(kind) in MOE_KINDS:
        return {"w_in": None, "b_in": None, "expert_w": 0, "expert_b": 0}
    return {"w_in": 0, "b_in": 0, "w_out": 1, "b_out": None}


def _freeze(a):
    a = np.array(a, dtype=np.float64, order="C", copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Immutable parameter set. Successors are built with :meth:`evolve`."""

    kind: str
    arch: Arch
    tensors: dict
    version: int = 0

    def __post_init__(self):
        kind = resolve_kind(self.kind)
        object.__setattr__(self, "kind", kind)
        expected = tensor_shapes(kind, self.arch)
        if set(expected) != set(self.tensors):
            raise RejectedInput(f"tensors {sorted(self.tensors)} do not match {kind} layout {sorted(expected)}")
        frozen = {}
        for name, shape in expected.items():
            t = self.tensors[name]
            if not (isinstance(t, np.ndarray) and not t.flags.writeable and t.dtype == np.float64):
                t = _freeze(t)
            if t.shape != shape:
                raise RejectedInput(f"{name} has shape {t.shape}, expected {shape}")
            frozen[name] = t
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def routing_names(self):
        return tuple(n for n in self.tensors if n in ROUTING_TENSORS)

    @property
    def representation_names(self):
        return tuple(n for n in self.tensors if n not in ROUTING_TENSORS)

    def evolve(self, updates=None, version=None):
        """New params with some tensors replaced; untouched tensors are shared."""
        tensors = dict(self.tensors)
        tensors.update(updates or {})
        return ModelParams(self.kind, self.arch, tensors, self.version if version is None else version)

    def digest(self):
        """blake2b-64 over every tensor's bytes, in layout order."""
        h = hashlib.blake2b(digest_size=8)
        for name in tensor_shapes(self.kind, self.arch):
            h.update(self.tensors[name].tobytes())
        return h.hexdigest()

    def equal(self, other):
        """Bitwise equality of all tensors (version ignored)."""
        if self.kind != other.kind or self.arch != other.arch:
            return False
        return all(self.tensors[n].tobytes() == other.tensors[n].tobytes() for n in self.tensors)


def init_params(kind, arch=None, seed=0, gate_bias=0.0):
    """Glorot-uniform weights, zero biases (gate bias set to ``gate_bias``)."""
    kind = resolve_kind(kind)
    arch = arch or Arch()
    if kind in MOE_KINDS and arch.experts < 2:
        arch = dataclasses.replace(arch, experts=4)
    if kind not in MOE_KINDS and arch.experts:
        arch = dataclasses.replace(arch, experts=0)
    rng = rng_stream(seed, 0)
    tensors = {}
    for name, shape in tensor_shapes(kind, arch).items():
        if name == "expert_w":
            tensors[name] = np.stack([glorot_uniform(rng, shape[1], shape[2]) for _ in range(shape[0])])
        elif len(shape) == 2:
            tensors[name] = glorot_uniform(rng, shape[0], shape[1])
        elif name == "gate_b":
            tensors[name] = np.full(shape, float(gate_bias))
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(kind, arch, tensors, 0)


def count_params(params, scope="both"):
    """Scalar count of routing (``theta``), representation (``w``) or both."""
    if scope not in ("theta", "w", "both"):
        raise RejectedInput(f"scope must be theta, w or both, got {scope!r}")
    theta = sum(params[n].size for n in params.routing_names)
    w = sum(params[n].size for n in params.representation_names)
    return {"theta": theta, "w": w, "both": theta + w}[scope]


# ---------------------------------------------------------------------------
# gating


def gate_mask_from_logits(logits, spec):
    """Map gate/router logits (``(..., units)``) to a mask."""
    kind = spec.kind
    if kind == "dense":
        raise UnsupportedOperation("dense models have no gate")
    if kind == "dg_hard":
        return (logits > spec.hard_threshold).astype(np.float64)
    if kind in ("dg_soft", "dg_anneal"):
        return sigmoid(logits / spec.temperature)
    if kind == "moe_soft":
        return softmax(logits / spec.temperature)
    # moe_top1: argmax picks the lowest index on ties
    idx = np.argmax(logits, axis=-1)
    mask = np.zeros_like(logits, dtype=np.float64)
    np.put_along_axis(mask, np.expand_dims(idx, -1), 1.0, axis=-1)
    return mask


def gate_forward(h_pre, params, spec):
    """Mask for a hidden activation vector (or a batch of them)."""
    if spec.kind == "dense":
        raise UnsupportedOperation("gate_forward is undefined for dense models")
    h = np.asarray(h_pre, dtype=np.float64)
    logits = affine(h, params["gate_w"], params["gate_b"])
    return gate_mask_from_logits(logits, spec)


@dataclass(frozen=True)
class ActiveSet:
    indices: tuple
    threshold_used: float

    def __contains__(self, i):
        return i in self.indices

    def __len__(self):
        return len(self.indices)


def active_set(mask, tau=0.0):
    """Indices ``i`` with ``mask[i] > tau``."""
    if not 0 <= tau < 1:
        raise RejectedInput(f"tau must lie in [0, 1), got {tau}")
    mask = np.asarray(mask, dtype=np.float64)
    return ActiveSet(tuple(int(i) for i in np.flatnonzero(mask > tau)), float(tau))


def anneal_step(spec, step):
    """Linear temperature schedule from ``T_start`` to ``T_end`` over ``steps``."""
    if spec.kind != "dg_anneal":
        raise UnsupportedOperation(f"anneal_step only applies to dg_anneal, not {spec.kind}")
    t_start, t_end, steps = spec.anneal_schedule
    frac = min(step / steps, 1.0)
    return dataclasses.replace(spec, temperature=t_start + (t_end - t_start) * frac)


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardTrace:
    """Intermediate values of a batched forward pass, kept for backprop."""

    x: np.ndarray
    z1: np.ndarray
    h: np.ndarray
    gate_logits: np.ndarray = None
    mask: np.ndarray = None
    gated: np.ndarray = None  # h * mask (gated MLPs)
    expert_out: np.ndarray = None  # (batch, experts, classes)
    logits: np.ndarray = None
    tau: float = 0.0
    extras: dict = field(default_factory=dict)

    def active_sets(self):
        return [active_set(m, self.tau) for m in self.mask]


def _check_input(X, arch):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != arch.n_in:
        raise RejectedInput(f"input has shape {X.shape}, model expects {arch.n_in} features")
    return X


def forward_batch(X, params, spec, mask=None):
    """Batched masked forward. ``mask`` overrides the gate (shape ``(batch, units)``)."""
    if spec.kind != params.kind:
        raise RejectedInput(f"spec kind {spec.kind} does not match params kind {params.kind}")
    X = _check_input(X, params.arch)
    z1 = affine(X, params["w_in"], params["b_in"])
    h = relu(z1)
    tr = ForwardTrace(x=X, z1=z1, h=h, tau=0.0 if spec.is_hard else spec.tau)
    if params.kind == "dense":
        tr.mask = np.ones_like(h)
        tr.logits = affine(h, params["w_out"], params["b_out"])
        return tr
    tr.gate_logits = affine(h, params["gate_w"], params["gate_b"])
    if mask is None:
        m = gate_mask_from_logits(tr.gate_logits, spec)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=np.float64), tr.gate_logits.shape)
    tr.mask = m
    if params.kind in DG_KINDS:
        tr.gated = h * m
        tr.logits = affine(tr.gated, params["w_out"], params["b_out"])
    else:
        # (batch, experts, classes)
        tr.expert_out = np.einsum("bd,ecd->bec", h, params["expert_w"]) + params["expert_b"][None]
        tr.logits = np.einsum("be,bec->bc", m, tr.expert_out)
    return tr


def masked_forward(x, params, spec, mask=None):
    """Single-sample forward: ``(logits, mask, trace)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise RejectedInput(f"masked_forward takes one sample, got shape {x.shape}")
    tr = forward_batch(x[None, :], params, spec, None if mask is None else np.asarray(mask)[None, :])
    return tr.logits[0], tr.mask[0], tr


def dense_forward(x, params):
    """Ungated forward using the same encoder/head tensors (DG and dense kinds)."""
    if params.kind in MOE_KINDS:
        raise UnsupportedOperation("dense_forward needs a w_out head")
    h = relu(affine(np.asarray(x, dtype=np.float64)[None, :], params["w_in"], params["b_in"]))
    return affine(h, params["w_out"], params["b_out"])[0]


def predict(X, params, spec, batch_size=512):
    """Class predictions and masks for a 2-D input array, in chunks."""
    X = np.asarray(X, dtype=np.float64)
    preds, masks = [], []
    for start in range(0, X.shape[0], batch_size):
        tr = forward_batch(X[start:start + batch_size], params, spec)
        preds.append(np.argmax(tr.logits, axis=1))
        masks.append(np.array(tr.mask))
    if not preds:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 0))
    return np.concatenate(preds), np.concatenate(masks)


# ---------------------------------------------------------------------------
# checkpoint file: b"DGMLP1", u64 version, then (u32 rows, u32 cols, f64[rows*cols]) per tensor

MAGIC = b"DGMLP1"


def _blocks(t):
    # vectors are stored as (len, 1); per-expert tensors as one block per expert
    if t.ndim == 1:
        return [t.reshape(-1, 1)]
    if t.ndim == 2:
        return [t]
    return [t[e] for e in range(t.shape[0])]


def save_checkpoint(path, params):
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", params.version))
        for name in tensor_shapes(params.kind, params.arch):
            t = params[name]
            blocks = [row.reshape(-1, 1) for row in t] if name == "expert_b" else _blocks(t)
            for b in blocks:
                f.write(struct.pack("<II", b.shape[0], b.shape[1]))
                f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return path


def load_checkpoint(path, kind):
    """Read a checkpoint written by :func:`save_checkpoint` for a model of ``kind``."""
    kind = resolve_kind(kind)
    data = Path(path).read_bytes()
    if data[:6] != MAGIC:
        raise RejectedInput(f"{path}: bad checkpoint magic {data[:6]!r}")
    (version,) = struct.unpack_from("<Q", data, 6)
    off = 14
    blocks = []
    while off < len(data):
        if off + 8 > len(data):
            raise RejectedInput(f"{path}: truncated block header at offset {off}")
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        nbytes = rows * cols * 8
        if off + nbytes > len(data):
            raise RejectedInput(f"{path}: truncated tensor payload at offset {off}")
        # copy out of the byte buffer: unaligned views take a different matmul path
        blocks.append(np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).copy())
        off += nbytes
    d, n = blocks[0].shape
    if kind in MOE_KINDS:
        e = blocks[2].shape[0]
        c = blocks[4].shape[0]
        arch = Arch(n, d, c, e)
        tensors = {
            "w_in": blocks[0], "b_in": blocks[1][:, 0], "gate_w": blocks[2], "gate_b": blocks[3][:, 0],
            "expert_w": np.stack(blocks[4:4 + e]),
            "expert_b": np.stack([b[:, 0] for b in blocks[4 + e:4 + 2 * e]]),
        }
    else:
        c = blocks[2].shape[0]
        arch = Arch(n, d, c, 0)
        tensors = {"w_in": blocks[0], "b_in": blocks[1][:, 0], "w_out": blocks[2], "b_out": blocks[3][:, 0]}
        if kind in DG_KINDS:
            tensors.update(gate_w=blocks[4], gate_b=blocks[5][:, 0])
    expected = len(tensor_shapes(kind, arch)) + (2 * arch.experts - 2 if kind in MOE_KINDS else 0)
    if len(blocks) != expected:
        raise RejectedInput(f"{path}: {len(blocks)} tensors, a {kind} checkpoint has {expected}")
    return ModelParams(kind, arch, tensors, version)
