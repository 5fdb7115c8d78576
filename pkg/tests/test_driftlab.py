import gzip
import os
import struct
from pathlib import Path

import numpy as np
import pytest

from dgmlp.adapt import AdaptConfig, GRID_MODES
from dgmlp.driftlab import (
    BadMagic,
    CountMismatch,
    Dataset,
    DriftSpec,
    GateConfig,
    PretrainConfig,
    ProtocolConfig,
    Truncated,
    apply_drift,
    drift_permutation,
    gen_synthetic,
    load_idx,
    prepare_data,
    pretrain_model,
    read_results_csv,
    run_protocol,
    split_indices,
    SplitConfig,
    stream_order,
    summary_rows,
    write_idx,
    write_results_csv,
)
from dgmlp.errors import IdxParseError, RejectedInput
from dgmlp.gatenet import KINDS
from reference_data import SKIP_STATUS


def small_ds(seed=0):
    return gen_synthetic(n_classes=3, dim=12, per_class=40, seed=seed, sigma=0.2)


def test_synthetic_is_seeded_and_balanced():
    a, b, c = small_ds(0), small_ds(0), small_ds(1)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.inputs, c.inputs)
    assert np.bincount(a.labels).tolist() == [40, 40, 40]
    with pytest.raises(RejectedInput):
        gen_synthetic(per_class=0)


def test_dataset_alignment_checked():
    with pytest.raises(RejectedInput):
        Dataset(np.zeros((3, 2)), np.zeros(2))


def test_permutation_drift_touches_severity_fraction():
    perm = drift_permutation(100, DriftSpec("pixel_permutation", 0.3, 5))
    assert sorted(perm) == list(range(100))
    assert np.count_nonzero(perm != np.arange(100)) <= 30
    full = drift_permutation(100, DriftSpec("pixel_permutation", 1.0, 5))
    assert np.count_nonzero(full != np.arange(100)) > 90


def test_drift_kinds():
    ds = small_ds()
    assert np.array_equal(apply_drift(ds, DriftSpec("gaussian_noise", 0.0)).inputs, ds.inputs)
    noisy = apply_drift(ds, DriftSpec("gaussian_noise", 1.0, 2))
    assert noisy.inputs.min() >= 0 and noisy.inputs.max() <= 1
    assert np.array_equal(noisy.labels, ds.labels)
    shifted = apply_drift(ds, DriftSpec("mean_shift", 2.0, 3))
    d = shifted.inputs - ds.inputs
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 2.0)
    perm = apply_drift(ds, DriftSpec("pixel_permutation", 1.0, 4))
    np.testing.assert_allclose(np.sort(perm.inputs, axis=1), np.sort(ds.inputs, axis=1))
    # the same spec gives the same drift
    assert np.array_equal(apply_drift(ds, DriftSpec("pixel_permutation", 1.0, 4)).inputs, perm.inputs)


def test_drift_spec_validation():
    with pytest.raises(RejectedInput, match="unknown drift kind"):
        DriftSpec("blur")
    with pytest.raises(RejectedInput):
        DriftSpec("gaussian_noise", -0.1)


def test_default_drift_is_permutation():
    assert DriftSpec().kind == "pixel_permutation"


@pytest.mark.slow
def test_default_benchmark_calibration():
    # every model learns the clean task; the default drift collapses Dense
    cfg = ProtocolConfig(seed=0)
    data = prepare_data(gen_synthetic(seed=0), DriftSpec(seed=1), cfg)
    for kind in KINDS:
        pm = pretrain_model(kind, data, cfg)
        assert pm.clean_acc >= 90.0, kind
        if kind == "dense":
            assert pm.clean_acc - pm.drift_acc >= 30.0


# IDX files


def idx_pair(tmp_path, n=5, rows=4, cols=3, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (n, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 10, n, dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(ip, lp, images, labels)
    return ip, lp, images, labels


def test_idx_round_trip(tmp_path):
    ip, lp, images, labels = idx_pair(tmp_path)
    ds = load_idx(ip, lp)
    assert ds.inputs.shape == (5, 12)
    np.testing.assert_array_equal(ds.inputs, images.reshape(5, 12) / 255.0)
    assert np.array_equal(ds.labels, labels)


def test_idx_gzip(tmp_path):
    ip, lp, images, _ = idx_pair(tmp_path)
    for p in (ip, lp):
        Path(str(p) + ".gz").write_bytes(gzip.compress(p.read_bytes()))
    ds = load_idx(str(ip) + ".gz", str(lp) + ".gz")
    assert ds.inputs.shape == (5, 12)


def test_idx_bad_magic(tmp_path):
    ip, lp, _, _ = idx_pair(tmp_path)
    data = bytearray(ip.read_bytes())
    data[3] = 0x01
    ip.write_bytes(bytes(data))
    with pytest.raises(BadMagic) as e:
        load_idx(ip, lp)
    assert e.value.offset == 0 and "bad magic" in str(e.value) and "offset 0" in str(e.value)


def test_idx_truncated_payload(tmp_path):
    ip, lp, _, _ = idx_pair(tmp_path)
    ip.write_bytes(ip.read_bytes()[:-7])
    with pytest.raises(Truncated) as e:
        load_idx(ip, lp)
    assert e.value.offset == 16 + 5 * 12 - 7


def test_idx_truncated_header(tmp_path):
    ip, lp, _, _ = idx_pair(tmp_path)
    lp.write_bytes(lp.read_bytes()[:6])
    with pytest.raises(Truncated) as e:
        load_idx(ip, lp)
    assert e.value.offset == 6


def test_idx_count_mismatch(tmp_path):
    ip, lp, _, _ = idx_pair(tmp_path)
    lp.write_bytes(struct.pack(">II", 0x801, 4) + bytes(4))
    with pytest.raises(CountMismatch) as e:
        load_idx(ip, lp)
    assert e.value.offset == 4 and isinstance(e.value, IdxParseError)


def test_idx_errors_are_distinct_classes():
    assert len({BadMagic, Truncated, CountMismatch}) == 3
    kinds = {cls("p", 0).kind for cls in (BadMagic, Truncated, CountMismatch)}
    assert len(kinds) == 3


@pytest.mark.skipif(not os.environ.get("DGMLP_MNIST_DIR"), reason="set DGMLP_MNIST_DIR to check real MNIST files")
def test_real_mnist_train_files():
    d = Path(os.environ["DGMLP_MNIST_DIR"])
    ds = load_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte")
    assert ds.inputs.shape == (60000, 784)


# protocol pieces


def test_split_is_disjoint_and_seeded():
    parts = split_indices(100, SplitConfig(), 3)
    allidx = np.concatenate(list(parts.values()))
    assert len(set(allidx.tolist())) == allidx.size == 100
    assert np.array_equal(split_indices(100, SplitConfig(), 3)["stream"], parts["stream"])
    with pytest.raises(RejectedInput):
        split_indices(3, SplitConfig(), 0)
    with pytest.raises(RejectedInput):
        SplitConfig(0.5, 0.5, 0.5, 0.5)


def test_stream_order_cycles_over_stream():
    idx = np.array([4, 9, 2])
    order = stream_order(idx, 8, 1)
    assert len(order) == 8 and set(order.tolist()) == {2, 4, 9}
    assert sorted(order[:3].tolist()) == [2, 4, 9]


def tiny_config(seed=0, **adapt):
    adapt.setdefault("steps", 60)
    adapt.setdefault("eta", 0.01)
    return ProtocolConfig(
        hidden=8, pretrain=PretrainConfig(epochs=3, eta=0.1), adapt=AdaptConfig(**adapt), probe_size=10,
        gate=GateConfig(expert_count=3), seed=seed,
    )


@pytest.fixture(scope="module")
def tiny_grid():
    ds = gen_synthetic(n_classes=3, dim=12, per_class=40, seed=0, sigma=0.3)
    pre = {}
    recs = run_protocol(KINDS, GRID_MODES, ds, DriftSpec("pixel_permutation", 1.0, 1), tiny_config(), pre)
    return recs, pre


def test_grid_skip_pattern(tiny_grid):
    recs, _ = tiny_grid
    assert len(recs) == 24
    status = {(r.model, r.mode): r.status for r in recs}
    for (model, mode), want in SKIP_STATUS.items():
        assert status[model, mode] == want
    for r in recs:
        if r.mode == "A_none":
            assert r.status == "SKIP(no trainable params)"
        if (r.model, r.mode) not in SKIP_STATUS and r.mode != "A_none":
            assert r.ok, (r.model, r.mode, r.status)


def test_grid_param_counts_and_fields(tiny_grid):
    recs, _ = tiny_grid
    for r in recs:
        if not r.ok:
            assert r.adapt_acc is None and r.theta_params == 0 and r.w_params == 0
            continue
        assert r.recovery == pytest.approx(r.adapt_acc - r.drift_before)
        assert 0 <= r.flip_pred <= 1 and 0 <= r.flip_routing <= 1 and 0 <= r.ar <= 1
        assert r.flops_proxy == r.ar
        assert (r.theta_params > 0) == (r.mode[0] in "BD")
        assert (r.w_params > 0) == (r.mode[0] in "CD")


def test_results_csv_round_trip(tiny_grid, tmp_path):
    recs, _ = tiny_grid
    write_results_csv(tmp_path / "r.csv", recs)
    text = (tmp_path / "r.csv").read_text()
    assert text.splitlines()[0] == (
        "model,mode,drift_before,adapt_acc,recovery,clean_drop,flip_pred,flip_routing,ar,flops_proxy,"
        "theta_params,w_params,status"
    )
    back = read_results_csv(tmp_path / "r.csv")
    write_results_csv(tmp_path / "r2.csv", back)
    assert (tmp_path / "r2.csv").read_text() == text


def test_results_csv_errors(tmp_path):
    (tmp_path / "a.csv").write_text("model,foo\nx,1\n")
    with pytest.raises(RejectedInput, match="missing columns"):
        read_results_csv(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("model,mode,status,recovery\nx,B,OK,abc\n")
    with pytest.raises(RejectedInput, match=":2:"):
        read_results_csv(tmp_path / "b.csv")


def test_summary_rows(tiny_grid):
    recs, pre = tiny_grid
    rows = summary_rows(pre, recs)
    by = {r[0]: r for r in rows}
    assert set(by) == {"Dense", "DG-Hard", "DG-Soft", "DG-Anneal", "MoE-Top1", "MoE-Soft"}
    assert by["Dense"][3] == "" and by["DG-Hard"][3] == "" and by["DG-Soft"][3] != ""
    assert by["Dense"][5] == "1.000000" and by["MoE-Top1"][5] == "0.333333"


def test_protocol_is_deterministic():
    ds = gen_synthetic(n_classes=3, dim=12, per_class=40, seed=2, sigma=0.3)
    run = lambda: [r.row() for r in run_protocol(["dg_soft", "moe_top1"], GRID_MODES, ds,
                                                   DriftSpec("pixel_permutation", 1.0, 3), tiny_config(2))]
    assert run() == run()


def test_prepare_data_uses_drifted_stream():
    ds = small_ds()
    data = prepare_data(ds, DriftSpec("pixel_permutation", 1.0, 1), tiny_config())
    assert len(data["stream"]) == 60
    drifted = apply_drift(ds, DriftSpec("pixel_permutation", 1.0, 1))
    i = data["indices"]["drift_eval"]
    assert np.array_equal(data["drift_eval"].inputs, drifted.inputs[i])
