"""Command-line front end: run scenarios, verify properties, validate inputs.

Exit codes: 0 success, 1 configuration or validation error, 2 feasibility
breach during a run.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    ConfigError,
    DemandSchedule,
    EngineConfig,
    FairshareError,
    FeasibilityBreach,
    TaskSpec,
    validate_config,
)
from .dynamics import Engine, RunTrace
from .oracle import bounds, fair_fixed_point, integrate_full_ode, probe_limit_points
from .scenario import (
    ScenarioResult,
    build_identical_four,
    build_random,
    summarize,
    zone_starts,
)
from .utility import (
    AffineNormalizer,
    CpuBandwidthModel,
    HomeEnergyModel,
    ModelBank,
    validate_assumptions,
)

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_BREACH = 2

_BUILTIN_FIG6_SEED = 30
_ENGINE_KEYS = (
    "epsilon", "mu_exponent", "gamma", "eta_bar", "zeta_bar",
    "horizon", "seed", "s_init", "v_init",
)


# ---------------------------------------------------------------------------
# Scenario (de)serialization


def model_to_dict(model) -> dict:
    if isinstance(model, AffineNormalizer):
        doc = model_to_dict(model.inner)
        doc["scale"] = model.scale
        doc["shift"] = model.shift
        doc["bound_c"] = model.bound_c
        return doc
    if isinstance(model, HomeEnergyModel):
        return {
            "type": "home_energy", "a": model.a, "b": model.b, "c": model.c,
            "kappa": model.kappa, "h": model.h,
        }
    if isinstance(model, CpuBandwidthModel):
        return {
            "type": "cpu_bandwidth", "a": model.a, "b": model.b, "h": model.h,
            "theta": model.theta, "v_floor": model.v_floor,
        }
    raise ConfigError(f"cannot serialize model of type {type(model).__name__}")


def model_from_dict(doc: dict, demand_span: tuple[float, float]):
    doc = dict(doc)
    kind = doc.pop("type", None)
    scale = doc.pop("scale", None)
    shift = doc.pop("shift", None)
    bound_c = doc.pop("bound_c", None)
    normalize = doc.pop("normalize", None)
    if kind == "home_energy":
        inner = HomeEnergyModel(**doc)
    elif kind == "cpu_bandwidth":
        inner = CpuBandwidthModel(**doc)
    else:
        raise ConfigError(f"unknown model type: {kind!r}")
    if scale is not None:
        return AffineNormalizer(
            inner=inner, scale=float(scale), shift=float(shift or 0.0),
            bound_c=float(bound_c) if bound_c else 2.0,
        )
    if normalize is not None:
        opts = normalize if isinstance(normalize, dict) else {}
        return AffineNormalizer.fit(
            inner, demand_range=demand_span,
            c_target=float(opts.get("c_target", 2.0)),
        )
    return inner


def scenario_to_dict(specs: Sequence[TaskSpec], cfg: EngineConfig) -> dict:
    return {
        "tasks": [
            {
                "weight": t.weight,
                "model": model_to_dict(t.utility),
                "demand_zones": [[int(k), float(d)] for k, d in t.demand.zones],
            }
            for t in specs
        ],
        "engine": {
            "epsilon": cfg.epsilon,
            "mu_exponent": cfg.mu_exponent,
            "gamma": cfg.gamma,
            "eta_bar": cfg.eta_bar,
            "zeta_bar": cfg.zeta_bar,
            "horizon": cfg.horizon,
            "seed": cfg.seed,
            "s_init": cfg.s_init,
            "v_init": list(cfg.v_init) if cfg.v_init is not None else None,
        },
    }


def scenario_from_dict(doc: dict) -> tuple[list[TaskSpec], EngineConfig]:
    if "tasks" not in doc or "engine" not in doc:
        raise ConfigError("scenario JSON needs 'tasks' and 'engine' sections")
    specs = []
    for i, task_doc in enumerate(doc["tasks"]):
        try:
            zones = tuple(
                (int(k), float(d)) for k, d in task_doc["demand_zones"]
            )
            demand = DemandSchedule(zones)
            model = model_from_dict(task_doc["model"], demand.span())
            specs.append(TaskSpec(
                id=i, weight=float(task_doc["weight"]),
                utility=model, demand=demand,
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"tasks[{i}]: {exc}") from exc
    engine_doc = dict(doc["engine"])
    unknown = set(engine_doc) - set(_ENGINE_KEYS)
    if unknown:
        raise ConfigError(f"unknown engine key(s): {sorted(unknown)}")
    for key in ("horizon", "seed"):
        if key in engine_doc:
            engine_doc[key] = int(engine_doc[key])
    if engine_doc.get("v_init") is not None:
        engine_doc["v_init"] = tuple(float(x) for x in engine_doc["v_init"])
    try:
        cfg = EngineConfig(**engine_doc)
    except TypeError as exc:
        raise ConfigError(f"engine: {exc}") from exc
    return specs, cfg


def _parse_set(items: list[str] | None) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key.startswith("engine."):
            key = key[len("engine."):]
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def resolve_scenario(
    name_or_path: str, overrides: dict
) -> tuple[list[TaskSpec], EngineConfig, dict, dict]:
    """Builtin name, scenario JSON path, or manifest JSON path.

    Returns (specs, cfg, resolved scenario dict, manifest extras); the
    extras carry stride/formats when a manifest was given.
    """
    overrides = dict(overrides)
    extras: dict = {}
    if name_or_path == "paper-fig5":
        specs, cfg = build_identical_four(overrides)
    elif name_or_path == "paper-fig6":
        zone_steps = overrides.pop("zone_steps", None)
        seed = overrides.pop("seed", _BUILTIN_FIG6_SEED)
        if zone_steps is not None:
            overrides["zone_steps"] = zone_steps
        specs, cfg = build_random(30, seed=int(seed), cfg_overrides=overrides)
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise ConfigError(
                f"scenario {name_or_path!r} is neither a builtin name nor a file"
            )
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if "scenario" in doc:
            extras = {k: v for k, v in doc.items() if k != "scenario"}
            doc = doc["scenario"]
        overrides.pop("zone_steps", None)
        engine_doc = dict(doc.get("engine", {}))
        engine_doc.update(overrides)
        doc = {**doc, "engine": engine_doc}
        specs, cfg = scenario_from_dict(doc)
    return specs, cfg, scenario_to_dict(specs, cfg), extras


# ---------------------------------------------------------------------------
# Output helpers


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(x) for x in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(x) for x in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_trace_csv(path: Path, trace: RunTrace) -> None:
    n = trace.v.shape[1]
    cols = ["step"]
    for name in ("v", "s", "u", "F", "Phi"):
        cols.extend(f"{name}_{i}" for i in range(n))
    cols.append("phi_sq_sum")
    data = np.column_stack([
        trace.steps.astype(float), trace.v, trace.s, trace.u_meas,
        trace.f_obs, trace.phi, trace.phi_sq,
    ])
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        np.savetxt(fh, data, fmt="%.17g", delimiter=",", newline="\n")


def summary_to_dict(result: ScenarioResult) -> dict:
    return _jsonable({
        "zones": [
            {
                "start": z.start, "end": z.end, "complete": z.complete,
                "n_records": z.n_records, "insufficient": z.insufficient,
                "v_mean": z.v_mean, "v_std": z.v_std, "s_mean": z.s_mean,
                "f_abs_mean": z.f_abs_mean, "phi_sq_mean": z.phi_sq_mean,
                "adapt_steps": z.adapt_steps,
                "s_opt_fraction": z.s_opt_fraction,
            }
            for z in result.zones
        ],
        "verdicts": result.verdicts,
    })


# ---------------------------------------------------------------------------
# Commands


def cmd_run(args) -> int:
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    specs, cfg, doc, extras = resolve_scenario(args.scenario, overrides)
    stride = args.stride if args.stride is not None else int(extras.get("stride", 1))
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    formats = args.formats if args.formats is not None else set(
        extras.get("formats", ["csv", "json"])
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "scenario": doc,
        "stride": stride,
        "formats": sorted(formats),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    engine = Engine(specs, cfg)
    breach: FeasibilityBreach | None = None
    try:
        trace = engine.run(stride=stride)
    except FeasibilityBreach as exc:
        breach = exc
        trace = exc.trace
    if "csv" in formats and trace is not None:
        write_trace_csv(out / "trace.csv", trace)
    if breach is not None:
        if "json" in formats:
            (out / "summary.json").write_text(json.dumps(_jsonable({
                "status": "feasibility_breach",
                "step": breach.step,
                "message": str(breach),
            }), indent=2) + "\n")
        print(f"feasibility breach at step {breach.step}: {breach}", file=sys.stderr)
        return EXIT_BREACH
    if "json" in formats:
        if len(trace) > 0:
            result = summarize(trace, zone_starts(specs), specs, cfg)
            doc_out = {"status": "ok", **summary_to_dict(result)}
        else:
            doc_out = {"status": "ok", "zones": [], "verdicts": {}}
        (out / "summary.json").write_text(json.dumps(doc_out, indent=2) + "\n")
    print(f"wrote {len(trace)} records to {out}")
    return EXIT_OK


def _verify_checks(specs, cfg) -> list[dict]:
    from dataclasses import replace

    checks: list[dict] = []

    def add(name: str, ok: bool | None, detail: str) -> None:
        checks.append({"name": name, "pass": ok, "detail": detail})

    report = validate_config(cfg, len(specs), specs)
    notes = report.errors + [f"warning: {w}" for w in report.warnings]
    add("config", report.ok, "; ".join(notes) or "all conditions hold")
    if not report.ok:
        return checks

    zones = zone_starts(specs)
    try:
        trace = Engine(specs, cfg).run(stride=1)
    except FeasibilityBreach as exc:
        add("feasibility", False, f"FeasibilityBreach at step {exc.step}: {exc}")
        return checks
    result = summarize(trace, zones, specs, cfg)
    for name in ("feasibility", "fairness_zero_sum", "fairness_increment_bounds",
                 "starvation", "balance"):
        verdict = result.verdicts[name]
        add(name, verdict["pass"], verdict["detail"])

    frozen = Engine(specs, cfg).run(stride=1, freeze_levels=True)
    tol_f = 10.0 * (cfg.epsilon + cfg.eta_bar**2)
    add("fairness_residual", bool(frozen.ledger.phi_sq_min <= tol_f),
        f"frozen-level run: min sum(phi^2) = {frozen.ledger.phi_sq_min:.3e} "
        f"(tolerance {tol_f:.3e})")

    quiet_cfg = replace(cfg, eta_bar=0.0, zeta_bar=1e-4)
    quiet = Engine(specs, quiet_cfg).run(stride=1)
    quiet_result = summarize(quiet, zones, specs, quiet_cfg)
    verdict = quiet_result.verdicts["s_optimality"]
    add("s_optimality", verdict["pass"],
        f"noise-free regime: {verdict['detail']}")

    t_end = 2.0
    track_cfg = replace(
        cfg, eta_bar=0.0, zeta_bar=0.0,
        horizon=min(cfg.horizon, int(math.ceil(t_end / cfg.epsilon))),
    )
    track = Engine(specs, track_cfg).run(stride=1)
    d0 = np.array([t.demand.at(0) for t in specs])
    ode = integrate_full_ode(
        specs, track_cfg, t_end=track_cfg.horizon * cfg.epsilon,
        dt=min(1e-3, cfg.epsilon), d=d0,
    )
    gap = _tracking_gap(track, ode, cfg.epsilon)
    threshold = min(100.0 * cfg.epsilon, 0.05)
    add("ode_tracking", bool(gap <= threshold),
        f"sup-norm share gap {gap:.4g} over t in [0, "
        f"{track_cfg.horizon * cfg.epsilon:.3g}] (threshold {threshold:.3g})")

    bank = ModelBank([t.utility for t in specs])
    fp = fair_fixed_point(
        specs, lambda v: bank.argmax(v, d0, tol=1e-6), d=d0, tol=1e-8
    )
    reps = probe_limit_points(specs, cfg, d=d0, n_starts=8, seed=cfg.seed)
    gaps = [float(np.abs(r - fp.v).max()) for r in reps]
    add("cross_oracle", bool(fp.converged and reps and max(gaps) <= 1e-3),
        f"{len(reps)} endpoint cluster(s), max gap to fixed point "
        f"{max(gaps):.3g}, residual {fp.residual:.3g}")
    return checks


def _tracking_gap(trace: RunTrace, ode, epsilon: float) -> float:
    """Sup-norm gap between the discrete share path and the mean-field path."""
    t_disc = trace.steps * epsilon
    gap = 0.0
    for i in range(trace.v.shape[1]):
        v_ode = np.interp(t_disc, ode.times, ode.v[:, i])
        gap = max(gap, float(np.abs(trace.v[:, i] - v_ode).max()))
    return gap


def cmd_verify(args) -> int:
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    specs, cfg, _doc, _extras = resolve_scenario(args.scenario, overrides)
    checks = _verify_checks(specs, cfg)
    b = bounds(specs, cfg)
    bound_info = {
        "starvation_threshold": b.starvation_threshold,
        "balance_threshold": b.balance_threshold,
        "safe_epsilon": b.safe_epsilon,
        "eps_mu_gamma": b.eps_mu_gamma,
    }
    width = max(len(c["name"]) for c in checks)
    for c in checks:
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[c["pass"]]
        print(f"{c['name']:<{width}}  {status}  {c['detail']}")
    all_pass = all(c["pass"] is not False for c in checks)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.json").write_text(json.dumps(_jsonable({
            "scenario": args.scenario, "bounds": bound_info,
            "checks": checks, "all_pass": all_pass,
        }), indent=2) + "\n")
    print("verify:", "PASS" if all_pass else "FAIL")
    return EXIT_OK if all_pass else EXIT_CONFIG


def cmd_validate(args) -> int:
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    specs, cfg, _doc, _extras = resolve_scenario(args.scenario, overrides)
    report = validate_config(cfg, len(specs), specs)
    ok = report.ok
    for err in report.errors:
        print(f"config ERROR: {err}")
    for warning in report.warnings:
        print(f"config WARNING: {warning}")
    if report.ok:
        print("config OK")
    for t in specs:
        assumption = validate_assumptions(t.utility, t.demand.span())
        if assumption.passed:
            print(f"task {t.id}: model OK")
        else:
            ok = False
            print(f"task {t.id}: model FAILED {assumption.first_violation}")
    return EXIT_OK if ok else EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairshare",
        description="Measurement-driven fair resource allocation simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_text in (
        ("run", cmd_run, "simulate a scenario and export trace/summary"),
        ("verify", cmd_verify, "run the full property suite on a scenario"),
        ("validate", cmd_validate, "check configuration and models, no simulation"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("scenario",
                       help="builtin name (paper-fig5, paper-fig6), scenario "
                            "JSON path, or manifest.json path")
        p.add_argument("--out", default="fairshare-out" if name == "run" else None,
                       help="output directory")
        p.add_argument("--stride", type=int, default=None,
                       help="record every Nth step (run only; default 1 or "
                            "the manifest value)")
        p.add_argument("--seed", type=int, default=None, help="override seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override an engine field or zone_steps")
        p.add_argument("--formats", default=None,
                       type=lambda s: set(s.split(",")),
                       help="comma-separated outputs for run (default csv,json)")
        p.set_defaults(fn=fn)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FeasibilityBreach as exc:
        print(f"feasibility breach at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_BREACH
    except FairshareError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
