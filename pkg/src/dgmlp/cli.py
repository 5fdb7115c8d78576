"""Command-line experiment runner.

Subcommands: ``grid``, ``correlate``, ``stress``, ``pretrain``, ``replay``.
Every run is driven by an :class:`ExperimentConfig` (JSON file plus
``--set key=value`` overrides); all randomness comes from its seeds.

Exit codes: 0 success, 1 usage or config error, 2 audit/replay failure,
3 data or parse error.
"""

import argparse
import dataclasses
import json
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .adapt import AdaptationMode, AdaptConfig, check_mode, write_loss_trace
from .driftlab import (
    DriftSpec,
    GateConfig,
    PretrainConfig,
    ProtocolConfig,
    SplitConfig,
    gen_synthetic,
    load_idx,
    prepare_data,
    pretrain_model,
    read_results_csv,
    run_cell,
    summary_rows,
    write_results_csv,
    write_summary_csv,
)
from .errors import IdxParseError, InsufficientData, ModeSkip, RejectedInput
from .gatenet import KINDS, resolve_kind, save_checkpoint
from .snapserve import SnapshotServer, replay_directory, run_stress, spill_archive, write_audit_log

EXIT_OK, EXIT_CONFIG, EXIT_AUDIT, EXIT_DATA = 0, 1, 2, 3


class ConfigError(Exception):
    def __init__(self, message, line=None, source=None):
        where = f"{source or 'config'}:{line}: " if line else (f"{source}: " if source else "")
        super().__init__(where + message)
        self.line = line


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class StressConfig:
    model: str = "dg_soft"
    mode: str = "D_theta_and_w_inactive"
    serve_threads: int = 8
    requests_per_thread: int = 10_000
    train_steps: int = 5000
    publish_every: int = 50

    def __post_init__(self):
        object.__setattr__(self, "model", resolve_kind(self.model))
        object.__setattr__(self, "mode", AdaptationMode.parse(self.mode).value)
        if self.serve_threads < 1 or self.publish_every < 1:
            raise RejectedInput("serve_threads and publish_every must be >= 1")
        if self.requests_per_thread < 0 or self.train_steps < 0:
            raise RejectedInput("requests_per_thread and train_steps must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    models: tuple = KINDS
    modes: tuple = tuple(m.value for m in AdaptationMode)
    data: dict = field(default_factory=lambda: {"source": "synthetic"})
    drift: DriftSpec = field(default_factory=DriftSpec)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    stress: StressConfig = field(default_factory=StressConfig)
    hidden: int = 256
    probe_size: int = 500
    seeds: tuple = (0,)
    output_dir: str = "runs"

    def protocol(self, seed):
        return ProtocolConfig(self.hidden, self.gate, self.pretrain, self.adapt, self.split, self.probe_size, seed)

    def drift_for(self, seed):
        # drift seed is offset by the run seed so each seed sees its own drift
        return dataclasses.replace(self.drift, seed=self.drift.seed + seed)


SECTIONS = {
    "drift": DriftSpec, "adapt": AdaptConfig, "gate": GateConfig, "pretrain": PretrainConfig,
    "split": SplitConfig, "stress": StressConfig,
}
SYNTHETIC_KEYS = {"source", "n_classes", "dim", "per_class", "sigma", "spread"}
IDX_KEYS = {"source", "images", "labels", "limit"}


def _to_plain(v):
    if dataclasses.is_dataclass(v):
        return {f.name: _to_plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
    if isinstance(v, (tuple, list)):
        return [_to_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _to_plain(x) for k, x in v.items()}
    return v


def config_to_dict(cfg):
    return _to_plain(cfg)


def config_to_json(cfg):
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def _line_of(text, key):
    if not text:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _build_section(cls, name, raw, text, source):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object", _line_of(text, name), source)
    names = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for k, v in raw.items():
        if k not in names:
            raise ConfigError(f"unknown key {name}.{k}", _line_of(text, k), source)
        kw[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kw)
    except (RejectedInput, TypeError, ValueError) as e:
        bad = next(iter(raw), name)
        raise ConfigError(f"{name}: {e}", _line_of(text, bad) or _line_of(text, name), source) from None


def config_from_dict(raw, text=None, source=None):
    """Validate and build an :class:`ExperimentConfig`; errors carry line numbers when ``text`` is given."""
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object", 1, source)
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kw = {}
    for k, v in raw.items():
        line = _line_of(text, k)
        if k not in top:
            raise ConfigError(f"unknown key {k!r}", line, source)
        if k in SECTIONS:
            kw[k] = _build_section(SECTIONS[k], k, v, text, source)
        elif k == "models":
            try:
                kw[k] = tuple(resolve_kind(m) for m in _as_list(v))
            except RejectedInput as e:
                raise ConfigError(str(e), line, source) from None
        elif k == "modes":
            try:
                kw[k] = tuple(AdaptationMode.parse(m).value for m in _as_list(v))
            except RejectedInput as e:
                raise ConfigError(str(e), line, source) from None
        elif k == "seeds":
            vals = _as_list(v)
            if not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in vals):
                raise ConfigError(f"seeds must be non-negative integers, got {v!r}", line, source)
            kw[k] = tuple(vals)
        elif k == "data":
            kw[k] = _check_data(v, text, source)
        elif k in ("hidden", "probe_size"):
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{k} must be a positive integer, got {v!r}", line, source)
            kw[k] = v
        else:
            kw[k] = str(v)
    for k in ("models", "modes", "seeds"):
        if k in kw and not kw[k]:
            raise ConfigError(f"{k} must be nonempty", _line_of(text, k), source)
    return ExperimentConfig(**kw)


def _as_list(v):
    if isinstance(v, str):
        return [s for s in (p.strip() for p in v.split(",")) if s]
    if isinstance(v, (list, tuple)):
        return list(v)
    return [v]


def _check_data(v, text, source):
    line = _line_of(text, "data")
    if not isinstance(v, dict):
        raise ConfigError("data must be an object", line, source)
    src = v.get("source", "synthetic")
    allowed = SYNTHETIC_KEYS if src == "synthetic" else IDX_KEYS if src == "idx" else None
    if allowed is None:
        raise ConfigError(f"data.source must be 'synthetic' or 'idx', got {src!r}", _line_of(text, "source") or line,
                          source)
    extra = set(v) - allowed
    if extra:
        k = sorted(extra)[0]
        raise ConfigError(f"unknown key data.{k} for source {src!r}", _line_of(text, k) or line, source)
    if src == "idx" and not ("images" in v and "labels" in v):
        raise ConfigError("idx data needs 'images' and 'labels' paths", line, source)
    return dict(v, source=src)


def _set_path(raw, dotted, value):
    keys = dotted.split(".")
    cur = raw
    for k in keys[:-1]:
        nxt = cur.get(k)
        if nxt is None:
            nxt = cur[k] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"--set {dotted}: {k} is not a section")
        cur = nxt
    cur[keys[-1]] = value


def parse_override(item):
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, text = item.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key.strip(), value


def load_config(path=None, overrides=()):
    """Config from an optional JSON file plus ``key=value`` overrides."""
    text, raw = None, {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e.strerror}", source=str(path)) from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(e.msg, e.lineno, str(path)) from None
    if overrides:
        raw = json.loads(json.dumps(raw)) if raw else {}
        for item in overrides:
            key, value = parse_override(item)
            _set_path(raw, key, value)
    return config_from_dict(raw, text, str(path) if path else None)


# ---------------------------------------------------------------------------
# data


def load_dataset(cfg, seed):
    d = cfg.data
    if d.get("source", "synthetic") == "idx":
        ds = load_idx(d["images"], d["labels"])
        limit = d.get("limit")
        return ds.subset(np.arange(min(int(limit), len(ds)))) if limit else ds
    kw = {k: v for k, v in d.items() if k != "source"}
    return gen_synthetic(seed=seed, **kw)


def _seed_dirs(cfg, out):
    out = Path(out)
    if len(cfg.seeds) == 1:
        return [(cfg.seeds[0], out)]
    return [(s, out / f"seed_{s}") for s in cfg.seeds]


def _mode_tag(mode):
    return AdaptationMode.parse(mode).value


# ---------------------------------------------------------------------------
# commands


def cmd_grid(cfg, out, log=print):
    """Run the model x mode grid; writes results, summary and loss traces per seed."""
    written = []
    for seed, d in _seed_dirs(cfg, out):
        d.mkdir(parents=True, exist_ok=True)
        pcfg = cfg.protocol(seed)
        data = prepare_data(load_dataset(cfg, seed), cfg.drift_for(seed), pcfg)
        records, pretrained = [], {}
        for kind in cfg.models:
            pm = pretrain_model(kind, data, pcfg)
            pretrained[pm.kind] = pm
            for mode in cfg.modes:
                rec = run_cell(pm, mode, data, pcfg)
                records.append(rec)
                if rec.ok and rec.trace is not None:
                    write_loss_trace(d / f"loss_{pm.kind}_{_mode_tag(mode)}.csv", rec.trace)
                log(f"seed {seed} {rec.model:<9} {rec.mode:<24} {rec.status}"
                    + (f"  recovery {rec.recovery:+.2f}" if rec.ok else ""))
        write_results_csv(d / "results.csv", records)
        write_summary_csv(d / "summary.csv", summary_rows(pretrained, records))
        (d / "config.json").write_text(config_to_json(dataclasses.replace(cfg, seeds=(seed,))))
        written.append(d / "results.csv")
    return written


def cmd_correlate(results_csv, out, flip_field="flip_pred", log=print):
    """Pearson r between flip and AdaptAcc over the OK rows of a results CSV."""
    records = read_results_csv(results_csv)
    r, points = metrics.correlate_flip_adaptacc(records, flip_field)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_correlation_csv(out / "correlation.csv", points)
    log(f"pearson_r={r:.6f} n={len(points)}")
    return r, points


def _stress_setup(cfg, seed):
    sc = cfg.stress
    pcfg = cfg.protocol(seed)
    data = prepare_data(load_dataset(cfg, seed), cfg.drift_for(seed), pcfg)
    pm = pretrain_model(sc.model, data, pcfg)
    server = SnapshotServer(pm.params, pm.spec, sc.mode, cfg.adapt)
    stream = list(zip(data["stream"].inputs, data["stream"].labels))
    return server, stream, data["drift_eval"].inputs


def cmd_stress(cfg, out, spill=False, log=print):
    """Concurrent serve/train run followed by a full audit replay."""
    sc = cfg.stress
    seed = cfg.seeds[0]
    server, stream, pool = _stress_setup(cfg, seed)
    if sc.train_steps:
        # surface mode skips before any thread starts
        check_mode(server.training_params.kind, sc.mode, cfg.adapt)
    report = run_stress(server, stream, pool, sc.serve_threads, sc.requests_per_thread, sc.train_steps,
                        sc.publish_every)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_audit_log(out / "audit.csv", server.audit)
    if spill:
        spill_archive(out / "archive", server, pool, report.request_index)
    log(f"replay {report.replay_pass}/{report.requests} passed; versions {len(report.versions_seen)}/"
        f"{report.published}; checksum failures {report.checksum_failures}; "
        f"monotonicity violations {report.monotonic_violations}; {report.seconds:.1f}s")
    return report


def cmd_pretrain(cfg, out, log=print):
    """Pretrain every configured model; writes checkpoints and clean/drift accuracy."""
    rows = []
    for seed, d in _seed_dirs(cfg, out):
        d.mkdir(parents=True, exist_ok=True)
        pcfg = cfg.protocol(seed)
        data = prepare_data(load_dataset(cfg, seed), cfg.drift_for(seed), pcfg)
        for kind in cfg.models:
            pm = pretrain_model(kind, data, pcfg)
            save_checkpoint(d / f"ckpt_{pm.kind}.bin", pm.params)
            tau = 0.0 if pm.spec.is_hard else pm.spec.tau
            ar = metrics.activation_ratio(pm.drift_masks, tau) if pm.kind != "dense" else 1.0
            rows.append((seed, pm.kind, pm.clean_acc, pm.drift_acc, ar))
            log(f"seed {seed} {pm.kind:<9} clean {pm.clean_acc:.2f} drift {pm.drift_acc:.2f} ar {ar:.3f}")
        with open(d / "pretrain.csv", "w") as f:
            f.write("model,clean_acc,drift_acc,ar\n")
            for s, kind, c, dr, ar in rows:
                if s == seed:
                    f.write(f"{kind},{c:.4f},{dr:.4f},{ar:.6f}\n")
    return rows


def cmd_replay(directory, audit=None, log=print):
    passed, failures = replay_directory(directory, audit)
    log(f"replay {passed}/{passed + len(failures)} passed")
    return passed, failures


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _global_flags(suppress):
    # global flags are accepted before or after the subcommand; the subcommand
    # copy must not reset values given before it
    common = argparse.ArgumentParser(add_help=False)
    dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common.add_argument("--config", type=Path, default=dflt(None), help="JSON experiment config")
    common.add_argument("--seed", type=int, default=dflt(None), help="single seed, overrides config seeds")
    common.add_argument("--out", type=Path, default=dflt(None), help="output directory, overrides config output_dir")
    common.add_argument("--set", action="append", default=dflt([]), metavar="KEY=VALUE",
                        help="override a config value, e.g. --set adapt.eta=0.002")
    return common


def build_parser():
    common = _global_flags(suppress=True)
    p = _Parser(prog="dgmlp", description=__doc__.split("\n\n")[0], parents=[_global_flags(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("grid", parents=[common], help="run the model x mode drift grid")
    g.add_argument("--models", help="comma-separated model names")
    g.add_argument("--modes", help="comma-separated adaptation modes (A-D, X or full names)")

    c = sub.add_parser("correlate", parents=[common], help="flip vs AdaptAcc correlation of a results CSV")
    c.add_argument("results_csv", type=Path)
    c.add_argument("--flip-field", choices=("flip_pred", "flip_routing"), default="flip_pred")

    s = sub.add_parser("stress", parents=[common], help="concurrent serve/train snapshot audit")
    s.add_argument("--serve-threads", type=int)
    s.add_argument("--train-steps", type=int)
    s.add_argument("--publish-every", type=int)
    s.add_argument("--requests", type=int, help="requests per serve thread")
    s.add_argument("--model")
    s.add_argument("--mode")
    s.add_argument("--spill", action="store_true", help="also write snapshots and inputs for `replay`")

    t = sub.add_parser("pretrain", parents=[common], help="pretrain models and write checkpoints")
    t.add_argument("--models", help="comma-separated model names")

    r = sub.add_parser("replay", parents=[common], help="replay a spilled stress run")
    r.add_argument("directory", type=Path)
    r.add_argument("--audit", type=Path, help="audit log to check (default: DIRECTORY/audit.csv)")
    return p


def _overrides(args):
    sets = list(args.set)
    if args.seed is not None:
        sets.append(f"seeds=[{args.seed}]")
    if getattr(args, "models", None):
        sets.append(f"models={json.dumps(_as_list(args.models))}")
    if getattr(args, "modes", None):
        sets.append(f"modes={json.dumps(_as_list(args.modes))}")
    if args.command == "stress":
        for flag, key in (("serve_threads", "serve_threads"), ("train_steps", "train_steps"),
                          ("publish_every", "publish_every"), ("requests", "requests_per_thread"),
                          ("model", "model"), ("mode", "mode")):
            v = getattr(args, flag)
            if v is not None:
                sets.append(f"stress.{key}={json.dumps(v)}")
    return sets


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            passed, failures = cmd_replay(args.directory, args.audit)
            if failures:
                for rid, reason in failures[:50]:
                    print(f"FAIL request_id={rid} reason={reason}", file=sys.stderr)
                return EXIT_AUDIT
            return EXIT_OK
        cfg = load_config(args.config, _overrides(args))
        out = args.out or Path(cfg.output_dir)
        if args.command == "grid":
            cmd_grid(cfg, out)
        elif args.command == "correlate":
            cmd_correlate(args.results_csv, out, args.flip_field)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, out)
        elif args.command == "stress":
            report = cmd_stress(cfg, out, args.spill)
            if not report.ok:
                ids = ", ".join(str(i) for i in report.failed_ids[:50])
                print(f"audit failures: {ids or 'see counters above'}", file=sys.stderr)
                return EXIT_AUDIT
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ModeSkip as e:
        print(f"config error: {e.status}", file=sys.stderr)
        return EXIT_CONFIG
    except InsufficientData as e:
        print(str(e), file=sys.stderr)
        return EXIT_DATA
    except (IdxParseError, RejectedInput, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
