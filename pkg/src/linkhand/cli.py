"""Command-line entry point: ``linkhand <command> [options]``.

Commands: calibrate, characterize, plan, bench, wrench. Each run writes its
outputs plus one JSON manifest, and every output is byte-identical for the
same inputs, seed and flags.

Exit codes: 0 success, 2 input error, 3 domain error, 4 internal invariant
violation. Any long option can also be set through an environment variable
``LINKHAND_<OPTION>`` (dashes become underscores), e.g. ``LINKHAND_SEED=3``;
an explicit flag wins over the environment.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .actuator_sim import (CHARACTERIZATION_SETPOINTS, CHARACTERIZATION_SPEEDS, CUBE_CONTACT_POSITION,
                           SimConfig, characterize, run_step_response)
from .calibration import CalibrationError, default_sweep_path, fit_all, load_sweep_csv, models_to_json
from .grasp_planner import GraspSpec, PlannerError, solve_width_analytic, solve_width_qp
from .hand_model import build_sweep_table, default_params
from .strategy_bench import (BenchConfig, BenchError, StatsReport, load_catalog, parse_bench_config,
                             run_benchmark)
from .wrench_analysis import WrenchError, contact_set_from_json, force_closure, task_wrench_feasible

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DOMAIN = 3
EXIT_INVARIANT = 4

ENV_PREFIX = "LINKHAND_"


class InputError(Exception):
    """Bad file, bad config, unparseable data."""


class DomainError(Exception):
    """Valid input that the model cannot satisfy (e.g. width out of range)."""


class InvariantViolation(Exception):
    """A result failed an internal consistency check."""


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: Optional[int]
    output_paths: List[str] = field(default_factory=list)
    timestamp: str = ""

    def to_json(self) -> str:
        d = {"tool": "linkhand", "version": __version__, "command": self.command,
             "config_hash": self.config_hash, "seed": self.seed,
             "output_paths": self.output_paths, "timestamp": self.timestamp}
        return json.dumps(d, indent=2) + "\n"


def run_timestamp() -> str:
    """Reproducible timestamp: SOURCE_DATE_EPOCH when set, else the Unix epoch."""
    raw = os.environ.get("SOURCE_DATE_EPOCH", "0")
    try:
        epoch = int(raw)
    except ValueError:
        raise InputError(f"SOURCE_DATE_EPOCH must be an integer, got {raw!r}")
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def config_hash(command: str, settings: Dict[str, object], extra: bytes = b"") -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"command": command, **settings}, sort_keys=True, default=str).encode())
    h.update(extra)
    return "sha256:" + h.hexdigest()


def _write(path: Path, text: str) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return str(path)


def _manifest_path(primary: Path) -> Path:
    return primary.with_name(primary.name + ".manifest.json")


def _emit_manifest(path: Path, command: str, settings: Dict[str, object], seed: Optional[int],
                   outputs: Sequence[str], extra: bytes = b"") -> None:
    m = RunManifest(command, config_hash(command, settings, extra), seed, list(outputs), run_timestamp())
    _write(path, m.to_json())


def _read_text(path: Optional[str], what: str) -> str:
    if path is None:
        raise InputError(f"{what} path required")
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {what} {path}: {exc.strerror or exc}")


def _parse_kv(text: str, allowed: Sequence[str]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"config line {i}: expected key = value")
        k, v = (x.strip() for x in line.split("=", 1))
        if k not in allowed:
            raise InputError(f"config line {i}: unknown key {k!r} (allowed: {', '.join(allowed)})")
        out[k] = v
    return out


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    sweep = args.sweep or str(default_sweep_path())
    try:
        records = load_sweep_csv(sweep)
        models = fit_all(records)
    except CalibrationError as exc:
        raise InputError(str(exc))
    if not models:
        raise InputError(f"{sweep}: no sweep records")
    for m in models.values():
        if not (math.isfinite(m.slope_a) and math.isfinite(m.intercept_b)):
            raise InvariantViolation(f"non-finite fit for {m.finger}")
    out = Path(args.out)
    paths = [_write(out, models_to_json(models))]
    print(f"{'finger':<8} {'a (N/raw)':>12} {'b (N)':>10} {'R^2':>8} {'points':>7}")
    counts: Dict[str, int] = {}
    for r in records:
        counts[r.finger] = counts.get(r.finger, 0) + 1
    for f, m in models.items():
        print(f"{f:<8} {m.slope_a:>12.6f} {m.intercept_b:>10.4f} {m.r_squared:>8.4f} {counts[f]:>7d}")
    _emit_manifest(_manifest_path(out), "calibrate", {"sweep": Path(sweep).name}, None, paths,
                   Path(sweep).read_bytes())
    return EXIT_OK


# ---------------------------------------------------------------------------
# characterize
# ---------------------------------------------------------------------------

CHAR_KEYS = ("speeds", "setpoints", "targets", "trials", "seed", "contact_position")


def _num_list(text: str, key: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"{key}: expected comma-separated numbers, got {text!r}")


def _speed_list(text: str) -> list:
    out: list = []
    for x in text.split(","):
        x = x.strip()
        if not x:
            continue
        if x == "hybrid":
            out.append("hybrid")
            continue
        try:
            out.append(int(float(x)))
        except ValueError:
            raise InputError(f"speeds: bad entry {x!r}")
    return out


def cmd_characterize(args) -> int:
    cfg: Dict[str, str] = {}
    cfg_bytes = b""
    if args.config:
        text = _read_text(args.config, "config")
        cfg = _parse_kv(text, CHAR_KEYS)
        cfg_bytes = text.encode()
    try:
        trials = int(args.trials if args.trials is not None else cfg.get("trials", 20))
        seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
        contact = float(cfg.get("contact_position", CUBE_CONTACT_POSITION))
    except ValueError as exc:
        raise InputError(str(exc))
    if trials < 1:
        raise InputError("trials must be >= 1")
    mode = args.mode
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if mode == "step":
        speeds = _speed_list(cfg["speeds"]) if "speeds" in cfg else [0, 25, 50, 100, 250, 500, 750, 1000]
        targets = _num_list(cfg["targets"], "targets") if "targets" in cfg else [500.0]
        w.writerow(["speed", "target", "latency_s", "rise_time_s", "settling_time_s", "note"])
        for v in speeds:
            if v == "hybrid":
                raise InputError("step mode takes numeric speeds only")
            for tgt in targets:
                if v <= 0:
                    w.writerow([v, f"{tgt:g}", "", "", "", "warning: speed 0 never moves"])
                    print(f"warning: speed {v} never moves; row left empty", file=sys.stderr)
                    continue
                try:
                    sim = SimConfig()
                    travel = abs(tgt - 1000.0) / sim.velocity_gain(v)
                    r = run_step_response(tgt, v, sim, duration=max(2.0, 1.5 * travel + 0.5))
                except ValueError as exc:
                    raise InputError(str(exc))
                w.writerow([v, f"{tgt:g}", _fmt(r.latency), _fmt(r.rise_time), _fmt(r.settling_time), ""])
    else:
        speeds = _speed_list(cfg["speeds"]) if "speeds" in cfg else list(CHARACTERIZATION_SPEEDS) + ["hybrid"]
        if mode == "timing" and "hybrid" not in speeds:
            speeds.append("hybrid")
        setpoints = _num_list(cfg["setpoints"], "setpoints") if "setpoints" in cfg else list(CHARACTERIZATION_SETPOINTS)
        try:
            rows = characterize(mode, speeds, setpoints, trials, SimConfig(), seed, contact)
        except ValueError as exc:
            raise InputError(str(exc))
        w.writerow(["speed", "F_set", "mean", "variance", "N"])
        for r in rows:
            if not (math.isfinite(r.mean) and r.variance >= 0):
                raise InvariantViolation(f"bad summary at speed {r.speed}, F_set {r.f_set}")
            w.writerow([r.speed, f"{r.f_set:g}", f"{r.mean:.6f}", f"{r.variance:.6f}", r.n])
    out = Path(args.out)
    paths = [_write(out, buf.getvalue())]
    print(f"characterize {mode}: {buf.getvalue().count(chr(10)) - 1} rows -> {out}")
    _emit_manifest(_manifest_path(out), "characterize",
                   {"mode": mode, "trials": trials, "seed": seed}, seed, paths, cfg_bytes)
    return EXIT_OK


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.6f}"


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------

def cmd_plan(args) -> int:
    if not math.isfinite(args.width) or args.width <= 0:
        raise DomainError(f"width must be a positive number of mm, got {args.width}")
    params = default_params()
    table = build_sweep_table(params, 512)
    spec = GraspSpec(args.width, args.fingers)
    try:
        if args.solver == "analytic":
            sol = solve_width_analytic(table, spec)
        else:
            sol = solve_width_qp(params, spec, table=table)
    except PlannerError as exc:
        raise DomainError(str(exc))
    d = sol.to_json_dict()
    if not all(math.isfinite(v) for v in (sol.s_star, sol.theta_star, sol.z_span, sol.tip_error)):
        raise InvariantViolation("non-finite plan")
    out = Path(args.out)
    paths = [_write(out, json.dumps(d, indent=2) + "\n")]
    print(f"W = {args.width:g} mm, n = {args.fingers}, solver = {args.solver}")
    print(f"  s* = {sol.s_star:.4f}   theta* = {math.degrees(sol.theta_star):.2f} deg")
    print(f"  z_span = {sol.z_span:.3f} mm   tip_error = {sol.tip_error:.3f} mm   iterations = {sol.iterations}")
    _emit_manifest(_manifest_path(out), "plan",
                   {"width": args.width, "fingers": args.fingers, "solver": args.solver}, None, paths)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def check_report(report: StatsReport) -> None:
    for name, st in report.strategies.items():
        if not (0.0 <= st.rate <= 1.0 and st.wilson_low <= st.rate + 1e-12 <= st.wilson_high + 2e-12):
            raise InvariantViolation(f"{name}: rate {st.rate} outside its Wilson interval")
        if st.k + sum(st.failures.values()) != st.n:
            raise InvariantViolation(f"{name}: failure modes do not partition the trials")


def cmd_bench(args) -> int:
    if args.config:
        text = _read_text(args.config, "config")
        try:
            cfg = parse_bench_config(text, Path(args.config).parent)
        except BenchError as exc:
            raise InputError(str(exc))
        cfg_bytes = text.encode()
    else:
        cfg, cfg_bytes = BenchConfig(), b""
    trials = args.trials if args.trials is not None else cfg.trials
    seed = args.seed if args.seed is not None else cfg.seed
    if trials < 1:
        raise InputError("trials must be >= 1")
    try:
        objects = load_catalog(cfg.catalog)
        catalog_bytes = Path(cfg.catalog).read_bytes() if cfg.catalog else b""
        report = run_benchmark(objects, cfg.strategies, trials, seed)
    except BenchError as exc:
        raise InputError(str(exc))
    except PlannerError as exc:
        raise DomainError(str(exc))
    check_report(report)
    out = Path(args.out)
    paths = [_write(out / "report.json", report.to_json()),
             _write(out / "report.csv", report.to_csv()),
             _write(out / "trials.csv", report.trials_csv())]
    print(f"{'strategy':<10} {'k/n':>9} {'rate':>7} {'95% CI':>17} {'mean t (s)':>11}")
    for name, st in report.strategies.items():
        print(f"{name:<10} {st.k:>4}/{st.n:<4} {st.rate:>7.3f} [{st.wilson_low:.3f}, {st.wilson_high:.3f}]"
              f" {st.mean_time:>11.2f}")
    for key, z in report.pairwise.items():
        mark = "significant" if z.p_value < report.alpha_corrected else "n.s."
        print(f"  {key}: p = {z.p_value:.3g} ({mark} at alpha = {report.alpha_corrected})")
    settings = {"trials": trials, "seed": seed, "strategies": [s.value for s in cfg.strategies],
                "catalog": Path(cfg.catalog).name if cfg.catalog else "default"}
    _emit_manifest(out / "manifest.json", "bench", settings, seed, paths, cfg_bytes + catalog_bytes)
    return EXIT_OK


# ---------------------------------------------------------------------------
# wrench
# ---------------------------------------------------------------------------

def cmd_wrench(args) -> int:
    text = _read_text(args.contacts, "contacts")
    try:
        cs = contact_set_from_json(text)
        gws = cs.gws()
        verdict = force_closure(gws, args.samples, args.seed or 0)
        task = None
        if args.task_wrench:
            w = [float(x) for x in args.task_wrench.split(",")]
            task = task_wrench_feasible(gws, w)
    except (WrenchError, ValueError) as exc:
        raise InputError(str(exc))
    d = verdict.to_json_dict()
    d["interior_margin"] = verdict.interior_margin
    if task is not None:
        d["task_wrench"] = task.to_json_dict()
    out = Path(args.out)
    paths = [_write(out, json.dumps(d, indent=2) + "\n")]
    reason = f"   ({verdict.reason})" if verdict.reason else ""
    print(f"force_closure = {str(verdict.force_closure).lower()}   epsilon = {verdict.epsilon:.6f}{reason}")
    if task is not None:
        print(f"task wrench: {task.status}")
    _emit_manifest(_manifest_path(out), "wrench",
                   {"samples": args.samples, "task_wrench": args.task_wrench}, args.seed, paths,
                   text.encode())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _EnvDefaults(argparse.ArgumentParser):
    """Argument parser whose long options default to LINKHAND_<OPTION> when set."""

    def _env_override(self):
        for action in self._actions:
            if not action.option_strings or action.dest in ("help",):
                continue
            key = ENV_PREFIX + action.dest.upper()
            if key in os.environ:
                raw = os.environ[key]
                try:
                    action.default = action.type(raw) if action.type else raw
                except (TypeError, ValueError):
                    self.error(f"{key}={raw!r}: invalid value")
                action.required = False

    def parse_known_args(self, args=None, namespace=None):
        self._env_override()
        return super().parse_known_args(args, namespace)


def build_parser() -> argparse.ArgumentParser:
    p = _EnvDefaults(prog="linkhand", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"linkhand {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_EnvDefaults)

    c = sub.add_parser("calibrate", help="fit raw-to-newton models from a force-gauge sweep")
    c.add_argument("sweep_csv", nargs="?", default=None, help="sweep CSV (default: shipped sweep)")
    c.add_argument("--sweep", dest="sweep_flag", default=None, help="same as the positional argument")
    c.add_argument("--out", default="calibration.json")
    c.set_defaults(func=cmd_calibrate)

    k = sub.add_parser("characterize", help="actuator step, overshoot and timing sweeps")
    k.add_argument("mode", choices=("step", "overshoot", "timing"))
    k.add_argument("--config", default=None, help="key = value file (speeds, setpoints, targets, trials, seed)")
    k.add_argument("--trials", type=int, default=None)
    k.add_argument("--seed", type=int, default=None)
    k.add_argument("--out", default="characterize.csv")
    k.set_defaults(func=cmd_characterize)

    pl = sub.add_parser("plan", help="solve a grasp for a target width")
    pl.add_argument("width", type=float, help="object width in mm")
    pl.add_argument("fingers", type=int, nargs="?", default=2, choices=(2, 3, 4, 5))
    pl.add_argument("solver", nargs="?", default="analytic", choices=("analytic", "qp"))
    pl.add_argument("--out", default="plan.json")
    pl.set_defaults(func=cmd_plan)

    b = sub.add_parser("bench", help="run the closure-strategy benchmark")
    b.add_argument("--config", default=None, help="key = value file (catalog, strategies, trials, seed)")
    b.add_argument("--trials", type=int, default=None, help="trials per object")
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--out", default="bench_out", help="output directory")
    b.set_defaults(func=cmd_bench)

    w = sub.add_parser("wrench", help="force closure, epsilon quality and task-wrench membership")
    w.add_argument("contacts", nargs="?", default=None, help="contact-set JSON")
    w.add_argument("--contacts", dest="contacts_flag", default=None, help="same as the positional argument")
    w.add_argument("--task-wrench", default=None, help="comma-separated task wrench components")
    w.add_argument("--samples", type=int, default=512, help="direction samples for epsilon")
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out", default="wrench.json")
    w.set_defaults(func=cmd_wrench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "calibrate":
        args.sweep = args.sweep_flag or args.sweep_csv
    if args.command == "wrench":
        args.contacts = args.contacts_flag or args.contacts
    try:
        return args.func(args)
    except InputError as exc:
        print(f"linkhand {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DomainError as exc:
        print(f"linkhand {args.command}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except InvariantViolation as exc:
        print(f"linkhand {args.command}: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
