import json
import subprocess
import sys

import pytest

from dgmlp.cli import (
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    config_to_dict,
    config_to_json,
    load_config,
    main,
)
from dgmlp.driftlab import read_results_csv, write_results_csv
from dgmlp.adapt import read_loss_trace

FAST = ["--set", "data.per_class=20", "--set", "adapt.steps=40", "--set", "pretrain.epochs=2",
        "--set", "probe_size=50"]


def test_default_config_round_trips():
    cfg = ExperimentConfig()
    again = config_from_dict(json.loads(config_to_json(cfg)))
    assert again == cfg
    assert len(cfg.models) * len(cfg.modes) == 30


def test_config_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"models": ["DG-Soft"], "adapt": {"eta": 0.002}}))
    cfg = load_config(path, ["adapt.steps=7", "drift.kind=mean_shift", "seeds=[1,2]", "modes=B,D"])
    assert cfg.models == ("dg_soft",) and cfg.adapt.eta == 0.002 and cfg.adapt.steps == 7
    assert cfg.drift.kind == "mean_shift" and cfg.seeds == (1, 2)
    assert cfg.modes == ("B_theta_only", "D_theta_and_w_inactive")
    assert config_from_dict(config_to_dict(cfg)) == cfg


@pytest.mark.parametrize(
    "text,line,fragment",
    [
        ('{\n "models": ["dg_soft"],\n "adapt": {\n   "eta": -1\n }\n}', 4, "eta must be positive"),
        ('{\n "models": ["dg_soft"],\n "bogus": 1\n}', 3, "unknown key 'bogus'"),
        ('{\n "models": ["dg_medium"]\n}', 2, "unknown model"),
        ('{\n "models": [\n', 3, "Expecting value"),
        ('{\n "gate": {"nope": 1}\n}', 2, "unknown key gate.nope"),
        ('{\n "data": {\n  "source": "idx"\n }\n}', 2, "needs 'images'"),
        ('{\n "seeds": [-1]\n}', 2, "non-negative"),
    ],
)
def test_config_errors_carry_line_numbers(tmp_path, text, line, fragment):
    path = tmp_path / "bad.json"
    path.write_text(text)
    with pytest.raises(ConfigError) as e:
        load_config(path)
    assert f"bad.json:{line}:" in str(e.value) and fragment in str(e.value)


def test_bad_override():
    with pytest.raises(ConfigError):
        load_config(None, ["adapt"])
    with pytest.raises(ConfigError):
        load_config(None, ["hidden.x=1"])


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as e:
        main(["grid", "--bogus"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 1


def test_config_error_exit_1(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"adapt": {"eta": 0}}')
    assert main(["grid", "--config", str(tmp_path / "c.json")]) == 1
    assert "c.json:1:" in capsys.readouterr().err


def test_grid_dense_mode_b_is_one_skip_row(tmp_path):
    assert main(["grid", "--models", "dense", "--modes", "B", "--out", str(tmp_path), *FAST]) == 0
    recs = read_results_csv(tmp_path / "results.csv")
    assert [(r.model, r.mode, r.status) for r in recs] == [("Dense", "B_theta_only", "SKIP(mode=theta_only)")]


def test_grid_outputs_are_deterministic_and_reparseable(tmp_path):
    args = ["grid", "--models", "dg_soft,moe_top1", "--modes", "A,B,C,D", *FAST]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main(["--seed", "0", *args, "--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "results.csv" in files and "summary.csv" in files
    assert "loss_dg_soft_D_theta_and_w_inactive.csv" in files and "loss_moe_top1_D_theta_and_w_inactive.csv" in files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    recs = read_results_csv(tmp_path / "a" / "results.csv")
    write_results_csv(tmp_path / "again.csv", recs)
    assert (tmp_path / "again.csv").read_bytes() == (tmp_path / "a" / "results.csv").read_bytes()
    trace = read_loss_trace(tmp_path / "a" / "loss_dg_soft_B_theta_only.csv")
    assert len(trace) == 40
    saved = load_config(tmp_path / "a" / "config.json")
    assert saved.adapt.steps == 40


def test_grid_multiple_seeds_write_subdirectories(tmp_path):
    assert main(["grid", "--models", "dg_hard", "--modes", "C", "--set", "seeds=[0,1]", "--out", str(tmp_path),
                 *FAST]) == 0
    assert (tmp_path / "seed_0" / "results.csv").exists() and (tmp_path / "seed_1" / "results.csv").exists()


def test_correlate(tmp_path, capsys):
    rows = [
        "model,mode,drift_before,adapt_acc,recovery,clean_drop,flip_pred,flip_routing,ar,flops_proxy,theta_params,"
        "w_params,status",
    ]
    for i in range(4):
        rows.append(f"M,B,10,{20 + 2 * i},1,0,{0.1 * i},0,1,1,0,0,OK")
    rows.append("M,C,10,,,,,,,,0,0,SKIP(mode=w_inactive_only)")
    (tmp_path / "r.csv").write_text("\n".join(rows) + "\n")
    assert main(["correlate", str(tmp_path / "r.csv"), "--out", str(tmp_path)]) == 0
    assert "pearson_r=1.000000 n=4" in capsys.readouterr().out
    assert len((tmp_path / "correlation.csv").read_text().splitlines()) == 5


def test_correlate_insufficient_data(tmp_path, capsys):
    (tmp_path / "r.csv").write_text("model,mode,status\nDense,B_theta_only,SKIP(mode=theta_only)\n")
    assert main(["correlate", str(tmp_path / "r.csv"), "--out", str(tmp_path)]) == 3
    assert "insufficient data" in capsys.readouterr().err


def test_missing_idx_file_is_data_error(tmp_path, capsys):
    code = main(["grid", "--set", 'data={"source":"idx","images":"nope.idx","labels":"nope2.idx"}',
                 "--out", str(tmp_path)])
    assert code == 3


def test_stress_replay_and_tamper(tmp_path, capsys):
    out = tmp_path / "s"
    code = main(["stress", "--serve-threads", "2", "--requests", "100", "--train-steps", "60", "--publish-every",
                 "20", "--spill", "--out", str(out), *FAST])
    assert code == 0
    assert "replay 200/200 passed" in capsys.readouterr().out
    assert main(["replay", str(out / "archive")]) == 0
    lines = (out / "archive" / "audit.csv").read_text().splitlines()
    f = lines[7].split(",")
    f[1] = str(int(f[1]) + 1)
    lines[7] = ",".join(f)
    (tmp_path / "t.csv").write_text("\n".join(lines) + "\n")
    assert main(["replay", str(out / "archive"), "--audit", str(tmp_path / "t.csv")]) == 2
    assert f"request_id={f[0]}" in capsys.readouterr().err


def test_stress_zero_steps_single_thread(tmp_path, capsys):
    assert main(["stress", "--serve-threads", "1", "--train-steps", "0", "--requests", "30", "--out", str(tmp_path),
                 *FAST]) == 0
    assert "versions 1/1" in capsys.readouterr().out
    assert {l.split(",")[1] for l in (tmp_path / "audit.csv").read_text().splitlines()} == {"0"}


def test_stress_mode_skip_is_config_error(tmp_path):
    assert main(["stress", "--model", "dense", "--mode", "B", "--train-steps", "5", "--requests", "5",
                 "--out", str(tmp_path), *FAST]) == 1


def test_pretrain_writes_checkpoints(tmp_path):
    assert main(["pretrain", "--models", "dg_hard,moe_soft", "--out", str(tmp_path), *FAST]) == 0
    assert (tmp_path / "ckpt_dg_hard.bin").exists() and (tmp_path / "ckpt_moe_soft.bin").exists()
    assert (tmp_path / "pretrain.csv").read_text().splitlines()[0] == "model,clean_acc,drift_acc,ar"


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "dgmlp", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "grid" in r.stdout
