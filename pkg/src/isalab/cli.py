"""Command-line entry point.

Subcommands: ``reproduce-toy``, ``train``, ``sweep``, ``attack``, ``basins``.
Exit codes: 0 success, 1 a check failed, 2 configuration error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .adversary import InnerSolverConfig, rng_stream
from .analysis import (ATTACKS, BOUNDARY_BAND, attack_eval, basin_statistics,
                       boundary_distance, closed_form_robust, cut_point_check, detect_fosp,
                       direct_value, find_beta_tilde, fmt, robust_grid, sweep_landscape,
                       toy_closed_form, value_gap_check, value_ordering)
from .errors import IsaError, ParseError, ValidationError
from .formats import (dumps_policy, key_values, lex_sections, load_mdp, load_policy,
                      parse_bool, parse_decimal, parse_int, write_trace_csv, write_trace_jsonl)
from .mdp_core import TabularIsaMdp, toy_mdp
from .policy import Direct2, EmbeddedSoftmax, PolicySpec, TabularSoftmax
from .trainers import TrainerConfig, train

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# experiment config


def _str(value, line, path):
    return value


def _list(value, line, path):
    items = [v.strip() for v in value.split(",") if v.strip()]
    if not items:
        raise ParseError("empty list", line, path)
    return items


def _opt_int(value, line, path):
    return None if value.lower() == "none" else parse_int(value, line, path)


def _opt_float(value, line, path):
    return None if value.lower() == "none" else parse_decimal(value, line, path)


def _path(value, line, path):
    base = Path(path).parent if path else Path.cwd()
    p = (base / value).resolve()
    if not p.exists():
        raise ParseError(f"file not found: {value}", line, path)
    return p


# dataclass annotations are strings under postponed evaluation
_TYPES = {"int": parse_int, "float": parse_decimal, "bool": parse_bool, "str": _str,
          "Optional[int]": _opt_int, "Optional[float]": _opt_float}


def _dataclass_schema(cls, skip=()):
    return {f.name: _TYPES[f.type] for f in fields(cls) if f.name not in skip}


SCHEMA = {
    "run": {"seed": parse_int},
    "mdp": {"source": _str, "path": _path, "gamma": parse_decimal},
    "policy": {"variant": _str, "alpha": parse_decimal, "beta": parse_decimal, "path": _path,
               "init": _str, "scale": parse_decimal},
    "trainer": _dataclass_schema(TrainerConfig, skip=("inner", "seed")),
    "inner": _dataclass_schema(InnerSolverConfig, skip=("seed",)),
    "paired": {"paradigms": _list, "n_inits": parse_int},
    "sweep": {"resolution": parse_int, "objectives": _list},
    "attack": {"attacks": _list, "budget": parse_decimal},
    "basins": {"n_inits": parse_int, "cluster_radius": parse_decimal, "init_distribution": _str},
}


@dataclass
class ExperimentConfig:
    sections: dict = field(default_factory=dict)  # section -> {key: parsed value}
    raw: dict = field(default_factory=dict)  # section -> {key: literal text}
    path: Optional[str] = None

    def get(self, section, key, default=None):
        return self.sections.get(section, {}).get(key, default)

    def section(self, name) -> dict:
        return dict(self.sections.get(name, {}))


def loads_config(text: str, path=None) -> ExperimentConfig:
    """Parse an experiment file; unknown sections and keys are errors."""
    cfg = ExperimentConfig(path=path)
    for sec in lex_sections(text, path):
        if sec.name not in SCHEMA:
            raise ParseError(f"unknown section [{sec.name}]", sec.line, path)
        schema = SCHEMA[sec.name]
        parsed, raw = {}, {}
        for key, (value, line) in key_values(sec, path).items():
            if key not in schema:
                raise ParseError(f"unknown key {key!r} in [{sec.name}]", line, path)
            parsed[key] = schema[key](value, line, path)
            raw[key] = value
        cfg.sections[sec.name] = parsed
        cfg.raw[sec.name] = raw
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read config: {exc.strerror}", None, str(path)) from None
    return loads_config(text, str(path))


def build_mdp(cfg: ExperimentConfig) -> TabularIsaMdp:
    sec = cfg.section("mdp")
    source = sec.get("source", "file" if "path" in sec else "toy")
    if source == "toy":
        mdp = toy_mdp()
    elif source == "file":
        if "path" not in sec:
            raise ValidationError("[mdp] source = file needs a path")
        mdp = load_mdp(sec["path"])
    else:
        raise ValidationError(f"unknown mdp source {source!r}")
    if "gamma" in sec:
        mdp = mdp.replace(gamma=sec["gamma"])
    return mdp


def random_embedded(rng: np.random.Generator, n_actions: int, obs_dim: int,
                    scale: float = 1.0) -> EmbeddedSoftmax:
    return EmbeddedSoftmax(scale * rng.standard_normal((n_actions, obs_dim)),
                           scale * rng.standard_normal(n_actions))


def build_policy(cfg: ExperimentConfig, mdp: TabularIsaMdp, seed: int, index: int = 0) -> PolicySpec:
    """Initial policy; ``index`` selects the init within a multi-run experiment."""
    sec = cfg.section("policy")
    if "path" in sec:
        return load_policy(sec["path"])
    variant = sec.get("variant", "direct2")
    init = sec.get("init", "fixed")
    rng = rng_stream(seed, 7, index)
    if variant == "direct2":
        if init == "uniform":
            return Direct2(*rng.uniform(0.0, 1.0, size=2))
        return Direct2(sec.get("alpha", 0.5), sec.get("beta", 0.5))
    if variant == "tabular_softmax":
        scale = sec.get("scale", 0.0 if init == "fixed" else 1.0)
        return TabularSoftmax(scale * rng.standard_normal((mdp.n_states, mdp.n_actions)))
    if variant == "embedded_softmax":
        if mdp.embeddings is None:
            raise ValidationError("embedded_softmax needs an mdp with embeddings")
        scale = sec.get("scale", 0.0 if init == "fixed" else 1.0)
        return random_embedded(rng, mdp.n_actions, mdp.obs_dim, scale)
    raise ValidationError(f"unknown policy variant {variant!r}")


def build_trainer_config(cfg: ExperimentConfig, seed: int, paradigm: Optional[str] = None) -> TrainerConfig:
    inner = InnerSolverConfig(seed=seed, **cfg.section("inner"))
    kw = cfg.section("trainer")
    if paradigm is not None:
        kw["paradigm"] = paradigm
    return TrainerConfig(inner=inner, seed=seed, **kw)


# ---------------------------------------------------------------------------
# manifest


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, seed: int, started: str,
                   outputs: list) -> Path:
    manifest = {
        "tool": "isalab",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config_path": cfg.path,
        "config": cfg.raw,
        "started": started,
        "finished": _now(),
        "outputs": {Path(p).name: sha256_file(p) for p in sorted(outputs)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# reproduce-toy

REFERENCE_VALUES = {(1, 1): (0.16, 1.89), (0, 1): (-0.81, 1.26), (0, 0): (-0.95, -0.35), (1, 0): (-2.47, -1.71)}


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _guard(name, fn) -> Check:
    try:
        passed, detail = fn()
    except (IsaError, ArithmeticError) as exc:
        return Check(name, False, f"{type(exc).__name__}: {exc}")
    return Check(name, bool(passed), detail)


def toy_checks(mdp: TabularIsaMdp, resolution: int = 101) -> list:
    state = {}

    def closed_forms():
        for (a, b), ref in REFERENCE_VALUES.items():
            v = direct_value(mdp, a, b)
            cf = toy_closed_form(a, b)
            if np.max(np.abs(v - ref)) > 0.01 or np.max(np.abs(v - [cf.v1, cf.v2])) > 1e-9:
                return False, f"V at ({a},{b}) = {np.round(v, 4).tolist()}, expected {ref}"
        return True, "corner values match within 0.01 and closed forms within 1e-9"

    def beta_tilde():
        bt = find_beta_tilde(mdp)
        state["bt"] = bt
        return 0.776 <= bt <= 0.778, f"beta_tilde = {bt:.9f}"

    def region():
        bt = state.get("bt") or find_beta_tilde(mdp)
        mask = robust_grid(resolution, mdp)
        axis = np.linspace(0.0, 1.0, resolution)
        bad = checked = 0
        for j, b in enumerate(axis):
            for i, a in enumerate(axis):
                if boundary_distance(a, b, bt) <= BOUNDARY_BAND:
                    continue
                checked += 1
                bad += mask[j, i] != closed_form_robust(a, b, bt)
        return bad == 0, f"{checked - bad}/{checked} cells agree outside the boundary band"

    def kkt():
        r1 = detect_fosp((0, 0), "arpo", mdp=mdp)
        r2 = detect_fosp((0, 0), "spo", mdp=mdp)
        r3 = detect_fosp((1, 1), "spo", mdp=mdp)
        ok = r1.is_fosp and not r2.is_fosp and r3.is_fosp
        return ok, f"arpo(0,0)={r1.is_fosp} spo(0,0)={r2.is_fosp} spo(1,1)={r3.is_fosp}"

    def gaps():
        r = value_gap_check(mdp)
        ok = abs(r.gap_spo - 3.12) <= 0.02 and abs(r.gap_arpo - 1.44) <= 0.02 and r.inequality_holds
        return ok, f"gap_spo={r.gap_spo:.4f} gap_arpo={r.gap_arpo:.4f} half-inequality={r.inequality_holds}"

    def cut():
        removed = cut_point_check(mdp=mdp)
        restored = cut_point_check(remove_disk=False, mdp=mdp)
        return removed and not restored, f"disconnected without disk={removed}, with disk={restored}"

    def ordering():
        ok = value_ordering(mdp)
        return ok, "V(1,1) >= V(0,1) >= V(0,0) >= V(1,0) componentwise" if ok else "ordering violated"

    return [_guard(n, f) for n, f in (("closed_form", closed_forms), ("beta_tilde", beta_tilde),
                                      ("robust_region", region), ("kkt_triple", kkt),
                                      ("value_gap", gaps), ("cut_point", cut), ("value_ordering", ordering))]


def cmd_reproduce_toy(args, cfg: ExperimentConfig) -> int:
    started = _now()
    checks = toy_checks(build_mdp(cfg))
    ok = all(c.passed for c in checks)
    doc = {"passed": ok, "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in checks]}
    if args.json:
        print(json.dumps(doc, indent=2))
    else:
        width = max(len(c.name) for c in checks)
        for c in checks:
            print(f"{c.name:<{width}}  {'PASS' if c.passed else 'FAIL'}  {c.detail}")
        failed = [c.name for c in checks if not c.passed]
        print("all checks passed" if ok else f"failed: {', '.join(failed)}")
    if args.out:
        out = _outdir(args.out)
        res = out / "reproduce_toy.json"
        res.write_text(json.dumps(doc, indent=2) + "\n")
        write_manifest(out, "reproduce-toy", cfg, args.seed or 0, started, [res])
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------------------
# train


def _seed(args, cfg):
    return args.seed if args.seed is not None else cfg.get("run", "seed", 0)


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _paired_unit(job):
    mdp, policy, tcfg = job
    trace = train(mdp, policy, tcfg)
    last = trace.records[-1]
    return last.v_nat, last.v_adv


def _map(fn, jobs, workers):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def run_paired(mdp, cfg: ExperimentConfig, seed: int, workers: int = 1) -> dict:
    """Train every listed paradigm from the same inits; returns per-run rows."""
    sec = cfg.section("paired")
    paradigms = sec.get("paradigms", ["ARPO", "BARPO"])
    n = sec.get("n_inits", 100)
    inits = [build_policy(cfg, mdp, seed, i) for i in range(n)]
    rows = {}
    for par in paradigms:
        tcfg = build_trainer_config(cfg, seed, par)
        rows[par] = _map(_paired_unit, [(mdp, p, tcfg) for p in inits], workers)
    return rows


def cmd_train(args, cfg: ExperimentConfig) -> int:
    started = _now()
    seed = _seed(args, cfg)
    mdp = build_mdp(cfg)
    out = _outdir(args.out)
    outputs = []
    if "paired" in cfg.sections:
        rows = run_paired(mdp, cfg, seed, args.workers)
        runs = out / "paired_runs.csv"
        with open(runs, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("init", "paradigm", "v_nat", "v_adv"))
            for par, vals in rows.items():
                for i, (vn, va) in enumerate(vals):
                    w.writerow((i, par, fmt(vn), fmt(va)))
        summary = out / "paired_summary.csv"
        with open(summary, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("paradigm", "median_v_nat", "mean_v_nat", "median_v_adv", "mean_v_adv"))
            for par, vals in rows.items():
                arr = np.array(vals)
                w.writerow((par, fmt(np.median(arr[:, 0])), fmt(arr[:, 0].mean()),
                            fmt(np.median(arr[:, 1])), fmt(arr[:, 1].mean())))
        outputs += [runs, summary]
        if not args.json:
            print(summary.read_text(), end="")
    else:
        tcfg = build_trainer_config(cfg, seed)
        trace = train(mdp, build_policy(cfg, mdp, seed), tcfg)
        csv_path, jsonl_path, pol_path = out / "trace.csv", out / "trace.jsonl", out / "final_policy.txt"
        write_trace_csv(trace, csv_path)
        write_trace_jsonl(trace, jsonl_path)
        pol_path.write_text(dumps_policy(trace.final_policy))
        outputs += [csv_path, jsonl_path, pol_path]
        last = trace.records[-1]
        summary = {"paradigm": tcfg.paradigm, "iterations": last.iter, "v_nat": last.v_nat,
                   "v_adv": last.v_adv, "grad_norm": last.grad_norm}
        print(json.dumps(summary) if args.json else
              f"{tcfg.paradigm}: {last.iter} steps, v_nat={last.v_nat:.6f} v_adv={last.v_adv:.6f}")
    write_manifest(out, "train", cfg, seed, started, outputs)
    return EXIT_OK


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    started = _now()
    sec = cfg.section("sweep")
    grid = sweep_landscape(sec.get("resolution", 101), tuple(sec.get("objectives", ("spo", "arpo"))),
                           mdp=build_mdp(cfg), workers=args.workers)
    out = _outdir(args.out)
    path = out / "landscape.csv"
    grid.to_csv(path)
    write_manifest(out, "sweep", cfg, _seed(args, cfg), started, [path])
    violations = int(np.sum(grid.column("v_rob") > grid.column("v_nat") + 1e-9))
    msg = {"cells": len(grid.cells), "robust_cells": int(np.sum(grid.column("robust"))),
           "violations": violations}
    print(json.dumps(msg) if args.json else
          f"{msg['cells']} cells, {msg['robust_cells']} robust, {violations} invariant violations")
    return EXIT_OK if violations == 0 else EXIT_CHECK


def cmd_attack(args, cfg: ExperimentConfig) -> int:
    started = _now()
    seed = _seed(args, cfg)
    mdp = build_mdp(cfg)
    policy = build_policy(cfg, mdp, seed)
    sec = cfg.section("attack")
    inner = InnerSolverConfig(seed=seed, **cfg.section("inner"))
    report = attack_eval(mdp, policy, sec.get("attacks", list(ATTACKS)), budget=sec.get("budget"),
                         inner=inner, seed=seed)
    out = _outdir(args.out)
    path = out / "attacks.csv"
    report.to_csv(path)
    write_manifest(out, "attack", cfg, seed, started, [path])
    if args.json:
        print(json.dumps({"natural": report.natural,
                          "attacks": [{"attack": r.name, "return": r.ret, "robustness": r.robustness}
                                      for r in report.records]}))
    else:
        print(path.read_text(), end="")
    return EXIT_OK


def cmd_basins(args, cfg: ExperimentConfig) -> int:
    started = _now()
    seed = _seed(args, cfg)
    sec = cfg.section("basins")
    tcfg = build_trainer_config(cfg, seed)
    report = basin_statistics(tcfg, n_inits=sec.get("n_inits", 300),
                              init_distribution=sec.get("init_distribution", "uniform"),
                              cluster_radius=sec.get("cluster_radius", 0.05),
                              mdp=build_mdp(cfg), seed=seed, workers=args.workers)
    out = _outdir(args.out)
    path = out / "basins.csv"
    report.to_csv(path)
    write_manifest(out, "basins", cfg, seed, started, [path])
    if args.json:
        print(json.dumps([{"cluster_id": c.cluster_id, "alpha": c.alpha, "beta": c.beta,
                           "fraction": c.fraction, "v_nat": c.v_nat, "v_rob": c.v_rob}
                          for c in report.clusters]))
    else:
        print(path.read_text(), end="")
    return EXIT_OK


COMMANDS = {"reproduce-toy": cmd_reproduce_toy, "train": cmd_train, "sweep": cmd_sweep,
            "attack": cmd_attack, "basins": cmd_basins}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isalab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment file")
        p.add_argument("--seed", type=int, help="overrides [run] seed")
        p.add_argument("--out", default=None if name == "reproduce-toy" else "out",
                       help="output directory")
        p.add_argument("--workers", type=int, default=1, help="parallel work units (1 = deterministic)")
        p.add_argument("--json", action="store_true", help="machine-readable stdout")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.workers < 1:
            raise ValidationError("--workers must be >= 1")
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.command != "reproduce-toy" and not args.config:
            raise ValidationError(f"{args.command} needs --config")
        build_mdp(cfg)
    except (ValidationError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:  # noqa: BLE001 - top-level reporting
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
