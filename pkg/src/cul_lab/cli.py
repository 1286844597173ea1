"""Command-line front end: ``cul-lab {pretrain,run,ablate,eval,report}``.

Output layout under the output directory::

    config.yaml                  resolved experiment config (written once)
    base/theta0.json             pretrained base checkpoint
    base/report.json             base-quality gate report
    runs/<variant>/step_XX.json  one checkpoint per unlearning step
    runs/<variant>/loss.csv      per-iteration loss terms for all steps
    runs/<variant>/metrics.csv   evaluation table, one row per step
    runs/<variant>/metrics.json  revival matrix, drift, config hashes
    comparison.csv               final-step rows of every ablation variant
    report.csv                   summary table over runs
"""

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .diffusion import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T, make_schedule
from .engine import (
    ABLATION_VARIANTS,
    Checkpoint,
    PretrainConfig,
    UnlearnStepConfig,
    config_hash,
    make_ablation_configs,
    make_reg_sweep_configs,
    make_timestep_configs,
    params_hash,
    pretrain_base,
    run_unlearn_step,
    schedule_of,
)
from .errors import ConfigError, CulLabError, GateError, NumericalError, UsageError
from .evaluation import CSV_HEADER, EvalConfig, evaluate_run
from .world import ConceptUniverse, default_universe

log = logging.getLogger("cul_lab")

OUT_ENV = "CUL_LAB_OUT"
LOSS_HEADER = ("step", "iteration", "unlearn", "retain", "reg", "total")
REPORT_HEADER = ("run", "steps", "UA", "CAS", "RRA", "RRCS", "GRA", "GRCS", "FRECHET", "D_CUM",
                 "REVIVAL_EVENTS")


# -- configuration -------------------------------------------------------------

def _section(cls, d, name):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown keys in {name}: {sorted(extra)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"bad {name} section: {e}") from None


def _plain(d):
    """Tuples to lists, recursively, so configs compare equal after YAML."""
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_plain(v) for v in d]
    return d


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce an experiment's artifacts."""

    seed: int = 0
    out: str = "cul_out"
    universe: object = field(default_factory=dict)
    schedule: dict = field(default_factory=lambda: {
        "T": DEFAULT_T, "beta_start": DEFAULT_BETA_START, "beta_end": DEFAULT_BETA_END})
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    step: UnlearnStepConfig = field(default_factory=UnlearnStepConfig)
    overrides: dict = field(default_factory=dict)
    ablation: dict = field(default_factory=lambda: {
        "variants": list(ABLATION_VARIANTS), "timestep_sweep": True, "reg_sweep": []})
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not isinstance(self.universe, (dict, str)):
            raise ConfigError("universe must be a mapping or a file path")
        if set(self.schedule) != {"T", "beta_start", "beta_end"}:
            raise ConfigError("schedule needs exactly T, beta_start, beta_end")
        bad = [v for v in self.ablation.get("variants", []) if v not in ABLATION_VARIANTS]
        sweep = self.ablation.get("reg_sweep", [])
        if not isinstance(sweep, list) or any(
                isinstance(w, bool) or not isinstance(w, (int, float)) or w < 0 for w in sweep):
            bad.append(f"reg_sweep={sweep!r}")
        if bad or set(self.ablation) - {"variants", "timestep_sweep", "reg_sweep"}:
            raise ConfigError(f"bad ablation section: {self.ablation}")
        for k, ov in self.overrides.items():
            if not (isinstance(k, int) and k >= 1) or not isinstance(ov, dict):
                raise ConfigError(f"overrides must map step numbers to mappings, got {k!r}")
            _section(UnlearnStepConfig, {**self.step.to_dict(), **ov}, f"overrides[{k}]")

    def to_dict(self):
        return _plain({
            "seed": self.seed,
            "out": self.out,
            "universe": self.universe,
            "schedule": dict(self.schedule),
            "pretrain": self.pretrain.to_dict(),
            "step": self.step.to_dict(),
            "overrides": {int(k): dict(v) for k, v in sorted(self.overrides.items())},
            "ablation": dict(self.ablation),
            "eval": self.eval.to_dict(),
        })

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        base = cls()
        kw = {
            "seed": d.get("seed", base.seed),
            "out": str(d.get("out", base.out)),
            "universe": d.get("universe", base.universe),
            "schedule": {**base.schedule, **(d.get("schedule") or {})},
            "pretrain": _section(PretrainConfig, {**base.pretrain.to_dict(),
                                                  **(d.get("pretrain") or {})}, "pretrain"),
            "step": _section(UnlearnStepConfig, {**base.step.to_dict(), **(d.get("step") or {})},
                             "step"),
            "overrides": {int(k): dict(v) for k, v in (d.get("overrides") or {}).items()},
            "ablation": {**base.ablation, **(d.get("ablation") or {})},
            "eval": _section(EvalConfig, {**base.eval.to_dict(), **(d.get("eval") or {})}, "eval"),
        }
        pre = kw["pretrain"]
        kw["pretrain"] = replace(pre, hidden=tuple(pre.hidden))
        return cls(**kw)

    def dumps(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text):
        try:
            return cls.from_dict(yaml.safe_load(text))
        except yaml.YAMLError as e:
            raise ConfigError(f"config is not valid YAML: {e}") from None

    @classmethod
    def load(cls, path):
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        return cls.loads(p.read_text())

    # -- resolved pieces ---------------------------------------------------
    def build_universe(self, k=None):
        if isinstance(self.universe, str):
            p = Path(self.universe)
            if not p.is_file():
                raise UsageError(f"universe file not found: {p}")
            u = ConceptUniverse.load(p)
        elif "concepts" in self.universe:
            u = ConceptUniverse.from_dict(self.universe)
        else:
            try:
                u = default_universe(**self.universe)
            except TypeError as e:
                raise ConfigError(f"bad universe parameters: {e}") from None
        return u if k is None else u.with_schedule(k)

    def noise_schedule(self):
        s = self.schedule
        return make_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))

    def pretrain_config(self):
        return replace(self.pretrain, seed=self.seed)

    def step_configs(self, K, variant="full"):
        base = replace(self.step, seed=self.seed)
        variants = {**make_ablation_configs(base),
                    **make_timestep_configs(base, int(self.schedule["T"])),
                    **make_reg_sweep_configs(base, self.ablation.get("reg_sweep", []))}
        if variant not in variants:
            raise UsageError(f"unknown variant {variant!r}; choose from {sorted(variants)}")
        cfg = variants[variant]
        return [replace(cfg, **self.overrides.get(i, {})) for i in range(1, K + 1)]

    def variant_names(self):
        names = list(self.ablation.get("variants", ABLATION_VARIANTS))
        if self.ablation.get("timestep_sweep", True):
            names += list(make_timestep_configs(self.step, int(self.schedule["T"])))
        names += list(make_reg_sweep_configs(self.step, self.ablation.get("reg_sweep", [])))
        return names


SCHEMA_DOC = {
    "seed": "master seed; drives pretraining and every unlearning step",
    "out": "output directory (overridden by --out, then by $" + OUT_ENV + ")",
    "universe": "mapping of default_universe parameters, an inline universe "
                "(with 'concepts'), or a path to a universe YAML file",
    "schedule": "noise schedule: T, beta_start, beta_end (linear betas)",
    "pretrain": "base-model training and quality gates (its seed is replaced by the master seed)",
    "step": "per-step unlearning defaults (loss weights, optimizer, batches, "
            "timestep range, mapping strategy); its seed is replaced by the master seed",
    "overrides": "step number -> partial 'step' mapping applied to that step only",
    "ablation": "variants: loss/mapping variants to run; timestep_sweep: add the "
                "four maximum-timestep variants; reg_sweep: lambda_reg values, each run "
                "as a 'reg_<value>' variant of the full method (e.g. [0.0001, 0.01, 1])",
    "eval": "evaluation: samples per cell, DDIM steps, held-out seed, revival threshold",
}


def schema_text():
    cfg = ExperimentConfig().to_dict()
    buf = io.StringIO()
    for key, value in cfg.items():
        buf.write(f"# {key}: {SCHEMA_DOC[key]}\n")
        buf.write(yaml.safe_dump({key: value}, sort_keys=False))
    return buf.getvalue()


# -- artifact helpers ------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r.get(h)) for h in header])
    _write_new(path, buf.getvalue())


def _write_new(path, text):
    """Write atomically; an existing artifact must already hold the same bytes."""
    path = Path(path)
    if path.exists():
        if path.read_text() != text:
            raise UsageError(f"refusing to overwrite {path} with different content")
        return path
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
    return path


def _json(obj):
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


def _nan_to_none(a):
    return [[None if math.isnan(x) else float(x) for x in row] for row in np.asarray(a)]


class Workspace:
    def __init__(self, cfg, out):
        self.cfg, self.root = cfg, Path(out)

    @property
    def base_path(self):
        return self.root / "base" / "theta0.json"

    def run_dir(self, variant):
        return self.root / "runs" / variant

    def record_config(self):
        _write_new(self.root / "config.yaml", self.cfg.dumps())

    def load_base(self):
        if not self.base_path.is_file():
            raise UsageError(f"base checkpoint not found: {self.base_path} (run 'pretrain' first)")
        return Checkpoint.load(self.base_path)


# -- commands --------------------------------------------------------------------

def cmd_pretrain(ws, args):
    ws.record_config()
    u = ws.cfg.build_universe()
    if ws.base_path.is_file():
        print(f"base checkpoint exists: {ws.base_path}")
        return 0
    ck, report = pretrain_base(u, ws.cfg.pretrain_config(), ws.cfg.noise_schedule(),
                               check_gates=False)
    summary = {k: v for k, v in report.items() if k != "loss_curve"}
    summary["params_sha256"] = params_hash(ck.params)
    summary["loss_curve"] = [float(x) for x in report["loss_curve"]]
    _write_new(ws.root / "base" / "report.json", _json(summary))
    if not report["passed"]:
        raise GateError("base model failed quality gates", summary)
    ck.save(ws.base_path)
    print(f"base model: min concept acc {report['min_concept_acc']:.3f}, "
          f"min context acc {report['min_context_acc']:.3f}, probe loss "
          f"{report['probe_loss_initial']:.4f} -> {report['probe_loss_final']:.4f}")
    return 0


def _existing_steps(run_dir, K):
    ckpts = []
    for i in range(1, K + 1):
        p = run_dir / f"step_{i:02d}.json"
        if not p.is_file():
            break
        ckpts.append(Checkpoint.load(p))
    return ckpts


def run_variant(ws, variant, k=None):
    """Train (or resume) one variant; returns the list of checkpoints incl. base."""
    base = ws.load_base()
    u = ws.cfg.build_universe(k)
    configs = ws.cfg.step_configs(u.K, variant)
    d = ws.run_dir(variant)
    d.mkdir(parents=True, exist_ok=True)
    _write_new(d / "universe.yaml", yaml.safe_dump(u.to_dict(), sort_keys=False))
    done = _existing_steps(d, u.K)
    for ck in done:
        if ck.config != configs[ck.step - 1].to_dict():
            raise ConfigError(f"{d / f'step_{ck.step:02d}.json'} was made with a different config")
    prev = done[-1] if done else base
    if done and prev.step < u.K:
        log.info("resuming %s after step %d", variant, prev.step)
    sched = schedule_of(base)
    new = []
    for i in range(prev.step + 1, u.K + 1):
        curve = []
        prev = run_unlearn_step(prev, u, configs[i - 1], sched, curve)
        _write_csv(d / f"loss_step_{i:02d}.csv", LOSS_HEADER, curve)
        prev.save(d / f"step_{i:02d}.json")
        new.append(prev)
    parts = [(d / f"loss_step_{i:02d}.csv").read_text().splitlines(keepends=True)
             for i in range(1, u.K + 1)]
    _write_new(d / "loss.csv", "".join([parts[0][0]] + [ln for p in parts for ln in p[1:]]))
    return [base] + done + new


def cmd_run(ws, args):
    ws.record_config()
    ckpts = run_variant(ws, args.variant, args.k)
    print(f"{args.variant}: {len(ckpts) - 1} checkpoints in {ws.run_dir(args.variant)}")
    return 0


def evaluate_dir(ws, run_dir):
    run_dir = Path(run_dir)
    ufile = run_dir / "universe.yaml"
    if not ufile.is_file():
        raise UsageError(f"not a run directory (no universe.yaml): {run_dir}")
    u = ConceptUniverse.load(ufile)
    ckpts = _existing_steps(run_dir, u.K)
    if len(ckpts) < u.K:
        raise UsageError(f"{run_dir}: expected {u.K} checkpoints, found {len(ckpts)}")
    base = ws.load_base()
    if any(ck.provenance.get("base_sha256") != base.provenance.get("base_sha256") for ck in ckpts):
        raise UsageError(f"{run_dir}: checkpoints do not descend from {ws.base_path}")
    sched = ws.cfg.noise_schedule()
    res = evaluate_run([base] + ckpts, u, ws.cfg.eval, sched)
    _write_csv(run_dir / "metrics.csv", CSV_HEADER, res["rows"])
    doc = {
        "rows": res["rows"],
        "revival_matrix": _nan_to_none(res["revival_matrix"]),
        "revival_events": [list(e) for e in res["revival_events"]],
        "drift": res["drift"],
        "config_hashes": {f"step_{ck.step:02d}": config_hash(ck.config) for ck in ckpts},
        "eval_config_hash": config_hash(ws.cfg.eval.to_dict()),
        "base_sha256": base.provenance.get("base_sha256"),
    }
    _write_new(run_dir / "metrics.json", _json(doc))
    return doc


def cmd_eval(ws, args):
    ws.record_config()
    run_dir = Path(args.run_dir) if args.run_dir else ws.run_dir(args.variant)
    doc = evaluate_dir(ws, run_dir)
    for r in doc["rows"]:
        print(" ".join(f"{h}={_fmt(r.get(h))}" for h in CSV_HEADER))
    print(f"revival events: {doc['revival_events']}")
    return 0


def _final_row(doc, name):
    last = doc["rows"][-1]
    row = {h: last.get(h) for h in CSV_HEADER}
    row["variant"] = name
    return row


def cmd_ablate(ws, args):
    ws.record_config()
    rows, failures = [], {}
    for name in ws.cfg.variant_names():
        try:
            run_variant(ws, name, args.k)
            doc = evaluate_dir(ws, ws.run_dir(name))
            rows.append(_final_row(doc, name))
            print(f"{name}: done")
        except (NumericalError, GateError) as e:
            failures[name] = {"error": type(e).__name__, "message": str(e)}
            rows.append({"variant": name})
            print(f"{name}: FAILED ({e})", file=sys.stderr)
    _write_csv(ws.root / "comparison.csv", ("variant",) + CSV_HEADER, rows)
    _write_new(ws.root / "ablation_failures.json", _json(failures))
    return 4 if failures else 0


def report_rows(run_dirs):
    rows = []
    for d in run_dirs:
        p = Path(d) / "metrics.json"
        if not p.is_file():
            raise UsageError(f"no metrics.json in {d} (run 'eval' first)")
        doc = json.loads(p.read_text())
        last = doc["rows"][-1]
        row = {h: last.get(h) for h in REPORT_HEADER}
        row["run"] = Path(d).name
        row["steps"] = last["step"]
        row["REVIVAL_EVENTS"] = len(doc["revival_events"])
        rows.append(row)
    return rows


def cmd_report(ws, args):
    dirs = args.run_dirs or sorted(str(p.parent) for p in (ws.root / "runs").glob("*/metrics.json"))
    if not dirs:
        raise UsageError(f"no evaluated runs under {ws.root / 'runs'}")
    rows = report_rows(dirs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in rows:
        w.writerow([_fmt(r.get(h)) for h in REPORT_HEADER])
    text = buf.getvalue()
    out = ws.root / "report.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    # the report is a view over other artifacts, so it is regenerated freely
    out.write_text(text)
    sys.stdout.write(text)
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "run": cmd_run, "ablate": cmd_ablate, "eval": cmd_eval,
            "report": cmd_report}


def build_parser():
    p = argparse.ArgumentParser(prog="cul-lab",
                                description="Continual unlearning lab on toy 2-D diffusion models.")
    p.add_argument("--print-schema", action="store_true", help="print the config schema and exit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (YAML)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--k", type=int, help="number of unlearning steps")
    common.add_argument("--variant", default="full", help="ablation or timestep variant name")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")
    sub.add_parser("pretrain", parents=[common], help="train and gate the base model")
    sub.add_parser("run", parents=[common], help="run the sequential unlearning steps")
    sub.add_parser("ablate", parents=[common], help="run and evaluate all variants")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a run directory")
    ev.add_argument("run_dir", nargs="?")
    rp = sub.add_parser("report", parents=[common], help="summarize evaluated runs")
    rp.add_argument("run_dirs", nargs="*")
    return p


def load_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = args.out or os.environ.get(OUT_ENV) or cfg.out
    return cfg, out


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_schema:
        sys.stdout.write(schema_text())
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.k is not None and args.k < 1:
            raise UsageError("--k must be >= 1")
        cfg, out = load_config(args)
        return COMMANDS[args.command](Workspace(cfg, out), args)
    except GateError as e:
        print(f"error: {e}", file=sys.stderr)
        print(json.dumps({k: v for k, v in e.metrics.items() if k != "loss_curve"},
                         indent=1, sort_keys=True, default=str), file=sys.stderr)
        return e.exit_code
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except CulLabError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
