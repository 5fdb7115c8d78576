"""Serve predictions from published snapshots while a trainer updates its own copy.

One writer, many readers. The trainer owns a private :class:`ModelParams`
chain; :meth:`SnapshotServer.publish_snapshot` freezes the current training
params into a :class:`Snapshot` and swaps the server's current-snapshot
reference in one assignment. A request reads that reference once and uses
the snapshot it got for the whole forward pass, so it sees either the old or
the new parameters, never a mixture. ``ModelParams`` tensors are read-only
arrays and training builds successors instead of writing in place, which is
what makes sharing them with a snapshot safe.

Every served request appends an :class:`AuditRecord`. :func:`audit_replay`
recomputes the forward pass from the archived snapshot and checks that the
prediction and the logits bits match.
"""

import csv
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numba
import numpy as np

from .adapt import AdaptationMode, AdaptConfig, infer_then_update
from .errors import RejectedInput, ServiceUnavailable
from .gatenet import GateSpec, load_checkpoint, masked_forward, save_checkpoint

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@numba.njit
def _fnv1a_bytes(data):
    h = np.uint64(FNV_OFFSET)
    prime = np.uint64(FNV_PRIME)
    for b in data:
        h = (h ^ np.uint64(b)) * prime
    return h


def fnv1a64(arr):
    """64-bit FNV-1a over ``arr``: raw bytes as given, arrays as little-endian float64."""
    if isinstance(arr, (bytes, bytearray)):
        return int(_fnv1a_bytes(np.frombuffer(bytes(arr), dtype=np.uint8)))
    a = np.ascontiguousarray(arr, dtype="<f8")
    return int(_fnv1a_bytes(a.reshape(-1).view(np.uint8)))


@dataclass(frozen=True)
class Snapshot:
    params: object
    version: int
    published_at: float
    checksum: str  # params.digest() at publication


class AuditRecord(NamedTuple):
    request_id: int
    version: int
    input_digest: int
    prediction: int
    logits_digest: int

    def line(self):
        return f"{self.request_id},{self.version},{self.input_digest:016x},{self.prediction},{self.logits_digest:016x}"


class ReplayResult(NamedTuple):
    ok: bool
    reason: str  # "ok", "gap", "mismatch" or "input"

    def __bool__(self):
        return self.ok


class SnapshotServer:
    """Serving snapshots plus a private training copy.

    ``keep_inputs`` stores a copy of every served input (by request id) so
    the run can be replayed later from disk.
    """

    def __init__(self, params, spec, mode=AdaptationMode.B_theta_only, cfg=None, keep_inputs=False):
        self.spec = spec
        self.mode = AdaptationMode.parse(mode)
        self.cfg = cfg or AdaptConfig()
        self.keep_inputs = keep_inputs
        self._train = params
        self._current = None
        self.archive = {}
        self.audit = []
        self.inputs = []
        self._audit_lock = threading.Lock()
        self._seen = threading.local()
        self.checksum_failures = 0
        self.train_steps = 0

    @property
    def training_params(self):
        return self._train

    @property
    def current(self):
        return self._current

    def publish_snapshot(self):
        """Freeze the training params as the next snapshot and make it current."""
        version = len(self.archive)
        params = self._train.evolve(version=version)
        snap = Snapshot(params, version, time.monotonic(), params.digest())
        self.archive[version] = snap
        self._current = snap  # single reference store: readers see old or new
        return snap

    def train_step(self, batch, mode=None, cfg=None):
        """Fold ``batch`` (``(x, y)`` pairs) into the training copy; returns its version."""
        mode = self.mode if mode is None else AdaptationMode.parse(mode)
        cfg = cfg or self.cfg
        cur = self._train
        for x, y in batch:
            cur = infer_then_update(x, y, cur, mode, cfg, self.spec).next_params
        self._train = cur
        self.train_steps += 1
        return cur.version

    def _verify(self, snap):
        seen = getattr(self._seen, "versions", None)
        if seen is None:
            seen = self._seen.versions = set()
        if snap.version in seen:
            return
        seen.add(snap.version)
        if snap.params.digest() != snap.checksum:
            with self._audit_lock:
                self.checksum_failures += 1

    def serve(self, x):
        """``(prediction, logits, record)`` computed against the current snapshot."""
        snap = self._current
        if snap is None:
            raise ServiceUnavailable("no snapshot has been published")
        self._verify(snap)
        x = np.asarray(x, dtype=np.float64)
        logits, _, _ = masked_forward(x, snap.params, self.spec)
        prediction = int(np.argmax(logits))
        in_digest, out_digest = fnv1a64(x), fnv1a64(logits)
        with self._audit_lock:
            rec = AuditRecord(len(self.audit), snap.version, in_digest, prediction, out_digest)
            self.audit.append(rec)
            if self.keep_inputs:
                self.inputs.append(x.copy())
        return prediction, logits, rec


def audit_replay(record, archive, x, spec):
    """Recompute ``record`` from the archived snapshot and compare bit-exactly."""
    snap = archive.get(record.version)
    if snap is None:
        return ReplayResult(False, "gap")
    x = np.asarray(x, dtype=np.float64)
    if fnv1a64(x) != record.input_digest:
        return ReplayResult(False, "input")
    logits, _, _ = masked_forward(x, snap.params, spec)
    if int(np.argmax(logits)) != record.prediction or fnv1a64(logits) != record.logits_digest:
        return ReplayResult(False, "mismatch")
    return ReplayResult(True, "ok")


# ---------------------------------------------------------------------------
# files

AUDIT_FIELDS = ("request_id", "version", "input_digest_hex", "prediction", "logits_digest_hex")


def write_audit_log(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(rec.line() + "\n")


def read_audit_log(path):
    records = []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), 1):
            if not row:
                continue
            if len(row) != len(AUDIT_FIELDS):
                raise RejectedInput(f"{path}:{lineno}: expected {len(AUDIT_FIELDS)} fields, got {len(row)}")
            try:
                records.append(AuditRecord(int(row[0]), int(row[1]), int(row[2], 16), int(row[3]), int(row[4], 16)))
            except ValueError as e:
                raise RejectedInput(f"{path}:{lineno}: {e}") from None
    return records


def _spec_dict(spec):
    return {
        "kind": spec.kind, "temperature": spec.temperature, "anneal_schedule": list(spec.anneal_schedule),
        "hard_threshold": spec.hard_threshold, "expert_count": spec.expert_count, "tau": spec.tau,
    }


def spill_archive(directory, server, pool=None, request_index=None):
    """Write snapshots, audit log, served inputs and the gate spec under ``directory``.

    Inputs are stored as ``pool.npy`` plus ``request_index.npy`` (pool row per
    request id) when ``pool`` is given, else as ``inputs.npy`` when the server
    kept them.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for version, snap in sorted(server.archive.items()):
        save_checkpoint(d / f"snapshot_{version:06d}.bin", snap.params)
    write_audit_log(d / "audit.csv", server.audit)
    if pool is not None:
        np.save(d / "pool.npy", np.asarray(pool, dtype=np.float64))
        np.save(d / "request_index.npy", np.asarray(request_index, dtype=np.int64))
    elif server.keep_inputs:
        np.save(d / "inputs.npy", np.array(server.inputs, dtype=np.float64))
    meta = {"spec": _spec_dict(server.spec), "versions": sorted(server.archive)}
    (d / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return d


def load_archive(directory):
    """``(archive, spec)`` from a directory written by :func:`spill_archive`."""
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    s = meta["spec"]
    spec = GateSpec(s["kind"], s["temperature"], tuple(s["anneal_schedule"]), s["hard_threshold"],
                    s["expert_count"], s["tau"])
    archive = {}
    for version in meta["versions"]:
        params = load_checkpoint(d / f"snapshot_{version:06d}.bin", spec.kind)
        archive[version] = Snapshot(params, version, 0.0, params.digest())
    return archive, spec


def load_inputs(directory):
    """Array whose row ``i`` is the input of request ``i``."""
    d = Path(directory)
    if (d / "pool.npy").exists():
        return np.load(d / "pool.npy")[np.load(d / "request_index.npy")]
    if (d / "inputs.npy").exists():
        return np.load(d / "inputs.npy")
    raise RejectedInput(f"{d}: no served inputs stored (expected pool.npy or inputs.npy)")


def replay_directory(directory, audit_path=None):
    """Replay every audit record of a spilled run; returns ``(passed, failures)``.

    ``failures`` lists ``(request_id, reason)``.
    """
    d = Path(directory)
    archive, spec = load_archive(d)
    records = read_audit_log(audit_path or d / "audit.csv")
    inputs = load_inputs(d)
    passed, failures = 0, []
    for rec in records:
        if not 0 <= rec.request_id < len(inputs):
            failures.append((rec.request_id, "input"))
            continue
        res = audit_replay(rec, archive, inputs[rec.request_id], spec)
        if res.ok:
            passed += 1
        else:
            failures.append((rec.request_id, res.reason))
    return passed, failures


# ---------------------------------------------------------------------------
# stress harness


@dataclass
class StressReport:
    threads: int
    requests: int
    train_steps: int
    published: int
    replay_pass: int = 0
    replay_fail: int = 0
    gaps: int = 0
    checksum_failures: int = 0
    monotonic_violations: int = 0
    versions_seen: set = field(default_factory=set)
    failed_ids: list = field(default_factory=list)
    request_index: np.ndarray = None  # serve-pool row used by each request_id
    seconds: float = 0.0

    @property
    def ok(self):
        return (self.replay_fail == 0 and self.gaps == 0 and self.checksum_failures == 0
                and self.monotonic_violations == 0 and self.replay_pass == self.requests)


def run_stress(server, stream, serve_inputs, threads=8, requests_per_thread=10_000, train_steps=5000,
               publish_every=50, paced=True):
    """Serve from ``threads`` readers while the calling thread trains and publishes.

    ``stream`` holds ``(x, y)`` training pairs (cycled). Reader ``k`` walks
    ``serve_inputs`` from a thread-specific offset and serves
    ``requests_per_thread`` inputs. With ``paced`` a reader's ``i``-th request
    waits until the trainer has done ``i / requests_per_thread`` of its steps,
    so traffic spans every published version instead of finishing early.
    Afterwards every audit record is replayed against the archive.
    """
    if publish_every < 1:
        raise RejectedInput("publish_every must be >= 1")
    if threads < 1 or requests_per_thread < 0 or train_steps < 0:
        raise RejectedInput("threads must be >= 1 and request/step counts >= 0")
    if server.current is None:
        server.publish_snapshot()
    serve_inputs = np.asarray(serve_inputs, dtype=np.float64)
    n = len(serve_inputs)
    stream = list(stream)
    if train_steps and not stream:
        raise RejectedInput("training needs a nonempty stream")
    per_thread = [[] for _ in range(threads)]
    start = threading.Barrier(threads + 1)
    done = threading.Event()
    base = server.train_steps
    t0 = time.perf_counter()

    def reader(k):
        start.wait()
        out = per_thread[k]
        for i in range(requests_per_thread):
            if paced:
                due = i * train_steps // max(requests_per_thread, 1)
                while server.train_steps - base < due and not done.is_set():
                    time.sleep(1e-4)
            row = (k * 7919 + i) % n
            _, _, rec = server.serve(serve_inputs[row])
            out.append((rec.request_id, row))

    workers = [threading.Thread(target=reader, args=(k,), name=f"serve-{k}") for k in range(threads)]
    for w in workers:
        w.start()
    start.wait()
    try:
        for step in range(train_steps):
            server.train_step([stream[step % len(stream)]])
            if (step + 1) % publish_every == 0:
                server.publish_snapshot()
    finally:
        done.set()
        for w in workers:
            w.join()

    total = sum(len(ids) for ids in per_thread)
    report = StressReport(threads, total, train_steps, len(server.archive))
    report.checksum_failures = server.checksum_failures
    report.request_index = np.full(len(server.audit), -1, dtype=np.int64)
    for ids in per_thread:
        last = -1
        for rid, row in ids:
            report.request_index[rid] = row
            rec = server.audit[rid]
            if rec.version < last:
                report.monotonic_violations += 1
            last = rec.version
            report.versions_seen.add(rec.version)
            res = audit_replay(rec, server.archive, serve_inputs[row], server.spec)
            if res.ok:
                report.replay_pass += 1
            else:
                report.failed_ids.append(rid)
                if res.reason == "gap":
                    report.gaps += 1
                else:
                    report.replay_fail += 1
    report.failed_ids.sort()
    report.seconds = time.perf_counter() - t0
    return report
