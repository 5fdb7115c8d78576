"""Datasets, drift transforms, offline pretraining and the drift protocol.

The protocol, per model: pretrain on clean data, measure drifted accuracy,
then for each adaptation mode run an online stream of drifted samples and
measure drifted accuracy, clean-accuracy change, flips, activation ratio and
compute proxy afterwards.
"""

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .adapt import AdaptationMode, AdaptConfig, check_mode, run_stream
from .errors import IdxParseError, ModeSkip, RejectedInput
from .gatenet import (
    MOE_KINDS,
    Arch,
    GateSpec,
    active_set,
    anneal_step,
    count_params,
    init_params,
    predict,
    resolve_kind,
)
from .graddiff import backward_batch
from .mathcore import rng_stream

# ---------------------------------------------------------------------------
# datasets

SYNTHETIC_SPREAD = 1.0


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray  # (samples, dim)
    labels: np.ndarray  # (samples,) int64
    name: str = ""

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise RejectedInput(f"inputs {x.shape} and labels {y.shape} do not align")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self):
        return self.inputs.shape[1]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx, name=None):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], name or self.name)


def gen_synthetic(n_classes=10, dim=784, per_class=200, seed=0, sigma=0.5, spread=SYNTHETIC_SPREAD):
    """Isotropic Gaussian clusters (std ``sigma``) around seeded class means.

    Means are drawn uniformly from ``0.5 +- spread / 2`` per coordinate, so
    with ``spread=1`` they fill the unit cube.
    """
    if min(n_classes, dim, per_class) < 1:
        raise RejectedInput("n_classes, dim and per_class must all be >= 1")
    rng = rng_stream(seed, 10)
    means = 0.5 + spread * (rng.uniform(0.0, 1.0, size=(n_classes, dim)) - 0.5)
    labels = rng.permutation(np.repeat(np.arange(n_classes), per_class))
    inputs = means[labels] + sigma * rng.standard_normal((labels.size, dim))
    return Dataset(inputs, labels, f"synthetic-{n_classes}x{dim}-s{seed}")


# IDX files (big-endian): magic 0x00000803 + (count, rows, cols) + u8 pixels,
# or magic 0x00000801 + count + u8 labels.
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class BadMagic(IdxParseError):
    def __init__(self, path, offset, detail=""):
        super().__init__("bad magic", path, offset, detail)


class Truncated(IdxParseError):
    def __init__(self, path, offset, detail=""):
        super().__init__("truncated file", path, offset, detail)


class CountMismatch(IdxParseError):
    def __init__(self, path, offset, detail=""):
        super().__init__("count mismatch", path, offset, detail)


def _read_bytes(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(data, path, magic, ndims):
    header = 4 + 4 * ndims
    if len(data) < 4:
        raise Truncated(path, len(data), "file ends inside the magic number")
    (got,) = struct.unpack_from(">I", data, 0)
    if got != magic:
        raise BadMagic(path, 0, f"expected 0x{magic:08x}, found 0x{got:08x}")
    if len(data) < header:
        raise Truncated(path, len(data), f"header needs {header} bytes, file has {len(data)}")
    dims = struct.unpack_from(f">{ndims}I", data, 4)
    need = int(np.prod(dims, dtype=np.int64))
    have = len(data) - header
    if have < need:
        raise Truncated(path, len(data), f"payload needs {need} bytes after offset {header}, found {have}")
    payload = np.frombuffer(data, dtype=np.uint8, count=need, offset=header)
    return dims, payload


def load_idx(images_path, labels_path):
    """Parse an IDX image/label file pair; pixels are scaled to ``[0, 1]``."""
    (count, rows, cols), pixels = _parse_idx(_read_bytes(images_path), images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), labels = _parse_idx(_read_bytes(labels_path), labels_path, IDX_LABELS_MAGIC, 1)
    if n_labels != count:
        raise CountMismatch(labels_path, 4, f"{count} images but {n_labels} labels")
    inputs = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(inputs, labels.astype(np.int64), Path(images_path).name)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 ``images`` (count, rows, cols) and ``labels`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# drift

DRIFT_KINDS = ("pixel_permutation", "gaussian_noise", "mean_shift")


@dataclass(frozen=True)
class DriftSpec:
    kind: str = "pixel_permutation"
    severity: float = 0.85
    seed: int = 1

    def __post_init__(self):
        if self.kind not in DRIFT_KINDS:
            raise RejectedInput(f"unknown drift kind {self.kind!r}; expected one of {', '.join(DRIFT_KINDS)}")
        if self.severity < 0:
            raise RejectedInput(f"drift severity must be >= 0, got {self.severity}")


def drift_permutation(dim, spec):
    """Seeded permutation touching ``round(min(severity, 1) * dim)`` coordinates."""
    rng = rng_stream(spec.seed, 20)
    k = int(round(min(spec.severity, 1.0) * dim))
    perm = np.arange(dim)
    chosen = np.sort(rng.choice(dim, size=k, replace=False))
    perm[chosen] = rng.permutation(chosen)
    return perm


def apply_drift(ds, spec):
    """Drifted copy of ``ds``; labels are unchanged.

    * ``pixel_permutation``: a seeded permutation of a ``severity`` fraction of
      the coordinates (all of them for ``severity >= 1``).
    * ``gaussian_noise``: add ``N(0, severity^2)`` noise, clamp to ``[0, 1]``.
    * ``mean_shift``: add ``severity * u`` for a seeded unit vector ``u``.
    """
    if spec.severity == 0:
        return Dataset(ds.inputs.copy(), ds.labels.copy(), ds.name)
    x = ds.inputs
    if spec.kind == "pixel_permutation":
        out = x[:, drift_permutation(ds.dim, spec)]
    elif spec.kind == "gaussian_noise":
        noise = rng_stream(spec.seed, 21).standard_normal(x.shape)
        out = np.clip(x + spec.severity * noise, 0.0, 1.0)
    else:
        u = rng_stream(spec.seed, 22).standard_normal(ds.dim)
        u /= np.linalg.norm(u)
        out = x + spec.severity * u
    return Dataset(out, ds.labels.copy(), f"{ds.name}+{spec.kind}@{spec.severity:g}")


# ---------------------------------------------------------------------------
# training and evaluation


def pretrain_steps(n_samples, epochs, batch_size):
    return epochs * math.ceil(n_samples / batch_size)


def trained_spec(spec, n_samples, epochs, batch_size):
    """Gate spec in force at the end of pretraining (anneal schedule applied)."""
    if spec.kind != "dg_anneal":
        return spec
    return anneal_step(spec, pretrain_steps(n_samples, epochs, batch_size))


def pretrain(params, spec, ds, epochs=10, eta=0.05, seed=0, batch_size=16, lam=0.0, balance=0.0):
    """Minibatch SGD on every parameter, reshuffled each epoch.

    Hard kinds train their routing tensors through the STE surrogate;
    ``dg_anneal`` follows its temperature schedule over the SGD steps.
    Returns parameters with version 0.
    """
    if epochs < 1:
        raise RejectedInput("epochs must be >= 1")
    if ds.dim != params.arch.n_in:
        raise RejectedInput(f"dataset dim {ds.dim} does not match model input {params.arch.n_in}")
    step = 0
    tensors = {n: np.array(params[n]) for n in params.tensors}
    cur = params
    for epoch in range(epochs):
        order = rng_stream(seed, 30, epoch).permutation(len(ds))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            step_spec = anneal_step(spec, step) if spec.kind == "dg_anneal" else spec
            _, grads, _ = backward_batch(ds.inputs[idx], ds.labels[idx], cur, step_spec, lam, ste=spec.is_hard,
                                        balance=balance)
            for name, g in grads.all().items():
                tensors[name] -= eta * g
            cur = params.evolve(tensors)
            step += 1
    return params.evolve(tensors, version=0)


def evaluate(params, spec, ds):
    """``(accuracy %, predictions, masks)`` on ``ds``."""
    preds, masks = predict(ds.inputs, params, spec)
    if len(ds) == 0:
        return 0.0, preds, masks
    acc = 100.0 * np.count_nonzero(preds == ds.labels) / len(ds)
    return float(acc), preds, masks


def routing_keys(masks, spec):
    """Per-sample routing decision: top-1 expert id or the active index set."""
    if spec.kind == "moe_top1":
        return [int(i) for i in np.argmax(masks, axis=1)]
    tau = 0.0 if spec.is_hard else spec.tau
    return [active_set(m, tau) for m in masks]


# ---------------------------------------------------------------------------
# protocol


@dataclass(frozen=True)
class GateConfig:
    temperature: float = 0.25
    anneal_schedule: tuple = (1.0, 0.1, 200)
    hard_threshold: float = 0.0
    expert_count: int = 4
    tau: float = 1e-3
    # hard gates start mostly closed; soft gates start at bias 0
    hard_gate_bias: float = -1.5
    router_temperature: float = 1.0

    def spec_for(self, kind):
        kind = resolve_kind(kind)
        temp = self.temperature
        if kind == "dg_anneal":
            temp = self.anneal_schedule[0]
        elif kind == "moe_soft":
            temp = self.router_temperature
        return GateSpec(kind, temp, tuple(self.anneal_schedule), self.hard_threshold, self.expert_count, self.tau)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 10
    eta: float = 0.05
    batch_size: int = 16
    lam: float = 1e-3
    balance: float = 0.1  # router load balancing, MoE kinds only


@dataclass(frozen=True)
class SplitConfig:
    pretrain: float = 0.4
    clean_eval: float = 0.1
    stream: float = 0.25
    drift_eval: float = 0.25

    def __post_init__(self):
        parts = (self.pretrain, self.clean_eval, self.stream, self.drift_eval)
        if any(p <= 0 for p in parts) or sum(parts) > 1 + 1e-12:
            raise RejectedInput(f"split fractions must be positive and sum to at most 1, got {parts}")


# (kind, mode) pairs that the protocol skips beyond what the adaptation engine
# refuses: top-1 MoE adapts only in mode D, soft MoE has no inactive experts
PROTOCOL_SKIPS = {
    ("moe_top1", "C_w_inactive_only"),
    ("moe_soft", "C_w_inactive_only"),
}


@dataclass(frozen=True)
class ProtocolConfig:
    hidden: int = 256
    gate: GateConfig = field(default_factory=GateConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    probe_size: int = 500
    seed: int = 0


def split_indices(n, split, seed):
    """Disjoint seeded index partitions ``pretrain, clean_eval, stream, drift_eval``."""
    order = rng_stream(seed, 40).permutation(n)
    sizes = [int(n * f) for f in (split.pretrain, split.clean_eval, split.stream, split.drift_eval)]
    if min(sizes) < 1:
        raise RejectedInput(f"dataset of {n} samples is too small for split {split}")
    out, start = {}, 0
    for name, size in zip(("pretrain", "clean_eval", "stream", "drift_eval"), sizes):
        out[name] = order[start:start + size]
        start += size
    return out


def stream_order(stream_idx, steps, seed):
    """``steps`` indices cycling through seeded reshuffles of ``stream_idx``."""
    out = []
    p = 0
    while len(out) < steps:
        out.extend(rng_stream(seed, 41, p).permutation(stream_idx).tolist())
        p += 1
    return np.asarray(out[:steps], dtype=np.int64)


RESULTS_HEADER = (
    "model", "mode", "drift_before", "adapt_acc", "recovery", "clean_drop", "flip_pred",
    "flip_routing", "ar", "flops_proxy", "theta_params", "w_params", "status",
)


@dataclass
class MetricsRecord:
    model: str
    mode: str
    drift_before: float = None
    adapt_acc: float = None
    recovery: float = None
    clean_drop: float = None
    flip_pred: float = None
    flip_routing: float = None
    ar: float = None
    flops_proxy: float = None
    theta_params: int = 0
    w_params: int = 0
    status: str = "OK"
    # not part of results.csv
    clean_before: float = None
    clean_after: float = None
    trace: object = field(default=None, repr=False)

    @property
    def ok(self):
        return self.status == "OK"

    def row(self):
        def fmt(v, digits):
            return "" if v is None else f"{v:.{digits}f}"

        return [
            self.model, self.mode,
            fmt(self.drift_before, 4), fmt(self.adapt_acc, 4), fmt(self.recovery, 4), fmt(self.clean_drop, 4),
            fmt(self.flip_pred, 6), fmt(self.flip_routing, 6), fmt(self.ar, 6), fmt(self.flops_proxy, 6),
            str(self.theta_params), str(self.w_params), self.status,
        ]


def write_results_csv(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in records:
            w.writerow(r.row())


def read_results_csv(path):
    """Parse a results CSV back into :class:`MetricsRecord` objects."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in ("model", "mode", "status") if c not in (reader.fieldnames or [])]
        if missing:
            raise RejectedInput(f"{path}: missing columns {missing}")
        out = []
        for line, row in enumerate(reader, start=2):
            try:
                kw = {}
                for k in RESULTS_HEADER:
                    v = row.get(k, "")
                    if k in ("model", "mode", "status"):
                        kw[k] = v
                    elif k in ("theta_params", "w_params"):
                        kw[k] = int(v) if v else 0
                    else:
                        kw[k] = float(v) if v not in ("", None) else None
            except ValueError as e:
                raise RejectedInput(f"{path}:{line}: {e}") from None
            out.append(MetricsRecord(**kw))
    return out


def _skip_record(kind, mode, status, drift_before):
    return MetricsRecord(model=resolve_display(kind), mode=mode.value, drift_before=drift_before, status=status)


def resolve_display(kind):
    return GateSpec(resolve_kind(kind)).display_name


def skip_reason(kind, mode, adapt_cfg):
    """Status string for a skipped cell, or ``None`` if the cell runs."""
    mode = AdaptationMode.parse(mode)
    if mode is AdaptationMode.A_none:
        return "SKIP(no trainable params)"
    try:
        check_mode(kind, mode, adapt_cfg)
    except ModeSkip as skip:
        return skip.status
    if (kind, mode.value) in PROTOCOL_SKIPS:
        return f"SKIP(mode={mode.suffix})"
    return None


@dataclass
class PretrainedModel:
    kind: str
    params: object
    spec: GateSpec  # spec in force after pretraining
    clean_acc: float
    drift_acc: float
    drift_preds: np.ndarray
    drift_masks: np.ndarray


def prepare_data(clean, drift_spec, cfg):
    drifted = apply_drift(clean, drift_spec)
    parts = split_indices(len(clean), cfg.split, cfg.seed)
    return {
        "pretrain": clean.subset(parts["pretrain"], "pretrain"),
        "clean_eval": clean.subset(parts["clean_eval"], "clean_eval"),
        "stream": drifted.subset(stream_order(parts["stream"], cfg.adapt.steps, cfg.seed), "stream"),
        "drift_eval": drifted.subset(parts["drift_eval"], "drift_eval"),
        "indices": parts,
    }


def pretrain_model(kind, data, cfg):
    kind = resolve_kind(kind)
    ds = data["pretrain"]
    n_classes = max(int(data["pretrain"].labels.max()), int(data["drift_eval"].labels.max())) + 1
    arch = Arch(ds.dim, cfg.hidden, n_classes, cfg.gate.expert_count if kind in MOE_KINDS else 0)
    spec = cfg.gate.spec_for(kind)
    bias = cfg.gate.hard_gate_bias if kind == "dg_hard" else 0.0
    params = init_params(kind, arch, seed=cfg.seed, gate_bias=bias)
    pc = cfg.pretrain
    params = pretrain(params, spec, ds, pc.epochs, pc.eta, cfg.seed, pc.batch_size, pc.lam, pc.balance)
    spec = trained_spec(spec, len(ds), pc.epochs, pc.batch_size)
    clean_acc, _, _ = evaluate(params, spec, data["clean_eval"])
    drift_acc, drift_preds, drift_masks = evaluate(params, spec, data["drift_eval"])
    return PretrainedModel(kind, params, spec, clean_acc, drift_acc, drift_preds, drift_masks)


def run_cell(pm, mode, data, cfg):
    """One (model, mode) cell of the grid."""
    mode = AdaptationMode.parse(mode)
    status = skip_reason(pm.kind, mode, cfg.adapt)
    if status is not None:
        return _skip_record(pm.kind, mode, status, pm.drift_acc)
    stream = data["stream"]
    probe = data["drift_eval"].inputs[: cfg.probe_size]
    res = run_stream(zip(stream.inputs, stream.labels), pm.params, mode, cfg.adapt, pm.spec)
    if not res.ok:
        return _skip_record(pm.kind, mode, res.status, pm.drift_acc)
    final = res.final_params
    adapt_acc, preds_after, masks_after = evaluate(final, pm.spec, data["drift_eval"])
    clean_after, _, _ = evaluate(final, pm.spec, data["clean_eval"])
    n_probe = probe.shape[0]
    tau = 0.0 if pm.spec.is_hard else pm.spec.tau
    ar = metrics.activation_ratio(masks_after, tau)
    theta = count_params(final, "theta") if mode.updates_theta else 0
    w = count_params(final, "w") if mode.updates_w else 0
    return MetricsRecord(
        model=resolve_display(pm.kind),
        mode=mode.value,
        drift_before=pm.drift_acc,
        adapt_acc=adapt_acc,
        recovery=metrics.recovery(adapt_acc, pm.drift_acc),
        clean_drop=metrics.clean_drop(clean_after, pm.clean_acc),
        flip_pred=metrics.flip_pred(pm.drift_preds[:n_probe], preds_after[:n_probe]),
        flip_routing=metrics.flip_routing(routing_keys(pm.drift_masks[:n_probe], pm.spec),
                                          routing_keys(masks_after[:n_probe], pm.spec)),
        ar=ar,
        flops_proxy=metrics.flops_proxy(ar, pm.kind, final.arch),
        theta_params=theta,
        w_params=w,
        status="OK",
        clean_before=pm.clean_acc,
        clean_after=clean_after,
        trace=res,
    )


def run_protocol(model_list, mode_list, clean, drift_spec, cfg, pretrained=None):
    """Run every (model, mode) cell; returns records in grid order.

    ``pretrained`` optionally receives the per-model :class:`PretrainedModel`
    objects (a dict filled in place).
    """
    data = prepare_data(clean, drift_spec, cfg)
    records = []
    for kind in model_list:
        pm = pretrain_model(kind, data, cfg)
        if pretrained is not None:
            pretrained[pm.kind] = pm
        for mode in mode_list:
            records.append(run_cell(pm, mode, data, cfg))
    return records


SUMMARY_HEADER = ("model", "clean_acc", "drift_acc", "adapt_acc", "flip_routing", "ar", "flops_proxy", "theta_params")


def summary_rows(pretrained, records):
    """Per-model summary with theta-only adaptation (blank where mode B is skipped)."""
    by_cell = {(r.model, r.mode): r for r in records}
    rows = []
    for kind, pm in pretrained.items():
        name = resolve_display(kind)
        b = by_cell.get((name, AdaptationMode.B_theta_only.value))
        b_ok = b is not None and b.ok
        tau = 0.0 if pm.spec.is_hard else pm.spec.tau
        ar = metrics.activation_ratio(pm.drift_masks, tau) if kind != "dense" else 1.0
        rows.append([
            name, f"{pm.clean_acc:.4f}", f"{pm.drift_acc:.4f}",
            f"{b.adapt_acc:.4f}" if b_ok else "",
            f"{b.flip_routing:.6f}" if b_ok else "",
            f"{ar:.6f}", f"{metrics.flops_proxy(ar):.6f}",
            str(count_params(pm.params, "theta")),
        ])
    return rows


def write_summary_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerows(rows)
