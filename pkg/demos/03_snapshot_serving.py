"""Serving from snapshots while a trainer keeps adapting.

One writer thread adapts a copy of the model and publishes a frozen
snapshot every 50 steps. Four reader threads serve requests and log which
version answered each one. Afterwards every logged answer is recomputed
from the archived snapshot and compared bit for bit.

    python demos/03_snapshot_serving.py
"""

from dgmlp.adapt import AdaptationMode, AdaptConfig
from dgmlp.driftlab import DriftSpec, ProtocolConfig, gen_synthetic, prepare_data, pretrain_model
from dgmlp.snapserve import SnapshotServer, audit_replay, run_stress

cfg = ProtocolConfig(adapt=AdaptConfig(steps=500), seed=0)
data = prepare_data(gen_synthetic(seed=0), DriftSpec(seed=1), cfg)
pm = pretrain_model("dg_soft", data, cfg)

server = SnapshotServer(pm.params, pm.spec, mode=AdaptationMode.D_theta_and_w_inactive, cfg=cfg.adapt)
stream = list(zip(data["stream"].inputs, data["stream"].labels))
report = run_stress(server, stream, data["drift_eval"].inputs, threads=4,
                    requests_per_thread=2000, train_steps=500, publish_every=50)

print(f"{report.requests} requests against {report.published} published versions in {report.seconds:.1f}s")
print(f"versions seen by readers: {len(report.versions_seen)}")
print(f"replayed bit-exactly: {report.replay_pass}/{report.requests}")
print(f"torn reads: {report.checksum_failures}, version regressions: {report.monotonic_violations}")

# one record by hand
rec = server.audit[len(server.audit) // 2]
x = data["drift_eval"].inputs[report.request_index[rec.request_id]]
print("\naudit line:", rec.line())
print("replay:", audit_replay(rec, server.archive, x, pm.spec).reason)
