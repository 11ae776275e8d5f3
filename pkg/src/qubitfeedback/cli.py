"""Command-line front end for simulations, grid solves, and comparisons.

Configuration comes from an INI file (``--config``) overridden by flags;
flags win.  Machine-readable output (a JSON summary, or CSV for ``compare``
and ``lq``) goes to stdout or to the requested file; a short human-readable
report always goes to stderr.  Exit codes: 0 success, 1 runtime failure,
2 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import os
import sys
import time

import numpy as np

from . import lq
from .bellman import (
    CLOSED_FORM,
    CONTROL_MODES,
    MODEL_FROM_ID,
    MODEL_IDS,
    GridSpec,
    ValueGrid,
    _interp_periodic,
    extract_policy,
    solve_backward,
    solve_dp,
)
from .filters import ModelParams
from .persist import atomic_write_text
from .trajectories import (
    ANGLE,
    MODELS,
    constant_policy,
    lq_policy,
    run_batch,
    simulate,
    zero_policy,
)

THREADS_ENV = "QUBITFEEDBACK_THREADS"

FLOAT_FMT = "%.17g"


class ConfigError(ValueError):
    """Bad configuration: wrong key, wrong value, missing requirement."""


# ---------------------------------------------------------------------------
# configuration resolution: defaults < INI file < flags


def _parse_model(text: str) -> str:
    text = text.strip()
    if text in MODEL_FROM_ID:
        return MODEL_FROM_ID[text]
    if text in MODELS:
        return text
    raise ConfigError(
        f"unknown model {text!r}; expected one of {sorted(MODEL_FROM_ID)}"
    )


def _parse_method(text: str) -> str:
    text = text.strip()
    if text not in ("fd", "dp"):
        raise ConfigError(f"method must be 'fd' or 'dp', got {text!r}")
    return text


def _parse_mode(text: str) -> str:
    text = text.strip()
    if text not in CONTROL_MODES:
        raise ConfigError(f"mode must be one of {CONTROL_MODES}, got {text!r}")
    return text


def _typed(caster, label):
    def parse(text: str):
        try:
            return caster(text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {label}: {text!r}") from exc

    return parse


# section -> key -> parser; the merged config is flat on the key names
_SCHEMA = {
    "model": {
        "model": _parse_model,
        "kappa_s_sq": _typed(float, "number for model.kappa_s_sq"),
        "alpha": _typed(float, "number for model.alpha"),
        "horizon_T": _typed(float, "number for model.horizon_T"),
    },
    "run": {
        "x0": str.strip,
        "dt": _typed(float, "number for run.dt"),
        "n_paths": _typed(int, "integer for run.n_paths"),
        "seed": _typed(int, "integer for run.seed"),
        "policy": str.strip,
        "policies": str.strip,
        "threads": _typed(int, "integer for run.threads"),
    },
    "grid": {
        "n_nodes": str.strip,
        "n_steps": _typed(int, "integer for grid.n_steps"),
        "control_box": _typed(float, "number for grid.control_box"),
        "control_resolution": _typed(int, "integer for grid.control_resolution"),
        "method": _parse_method,
        "mode": _parse_mode,
    },
    "output": {
        "json": str.strip,
        "csv": str.strip,
        "table": str.strip,
        "grid": str.strip,
    },
}

_DEFAULTS = {
    "kappa_s_sq": 0.5,
    "alpha": 0.5,
    "horizon_T": 1.0,
    "dt": 1e-3,
    "n_paths": 1000,
    "seed": 0,
    "method": "fd",
    "mode": CLOSED_FORM,
}


def _read_ini(path: str) -> dict:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"unknown config section [{section}]; expected one of "
                f"{sorted(_SCHEMA)}"
            )
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}]; expected one of "
                    f"{sorted(_SCHEMA[section])}"
                )
            out[key] = _SCHEMA[section][key](raw)
    return out


_FLAG_PARSERS = {"model": _parse_model, "method": _parse_method, "mode": _parse_mode}


def _resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, INI file, and flags; record which keys were given."""
    given = {}
    if getattr(args, "config", None):
        given.update(_read_ini(args.config))
    for key in ("model", "kappa_s_sq", "alpha", "horizon_T", "x0", "dt",
                "n_paths", "seed", "policy", "threads", "n_nodes", "n_steps",
                "control_box", "control_resolution", "method", "mode",
                "json", "csv", "table", "grid"):
        val = getattr(args, key, None)
        if val is not None:
            given[key] = _FLAG_PARSERS[key](val) if key in _FLAG_PARSERS else val
    if getattr(args, "policies", None):
        given["policies"] = ";".join(args.policies)
    cfg = dict(_DEFAULTS)
    cfg.update(given)
    cfg["_given"] = frozenset(given)
    if "threads" not in cfg:
        env = os.environ.get(THREADS_ENV)
        if env is not None:
            cfg["threads"] = _typed(int, f"integer in {THREADS_ENV}")(env)
        else:
            cfg["threads"] = None
    cfg["timings"] = not getattr(args, "no_timings", False)
    return cfg


def _require(cfg: dict, key: str, where: str):
    if key not in cfg:
        raise ConfigError(f"{where} requires {key!r} (flag or config)")
    return cfg[key]


def _model_params(cfg: dict) -> ModelParams:
    return ModelParams(
        kappa_s_sq=cfg["kappa_s_sq"],
        alpha=cfg["alpha"],
        horizon_T=cfg["horizon_T"],
    )


def _parse_x0(cfg: dict, model: str):
    text = cfg.get("x0")
    if model == ANGLE:
        if text is None:
            return 1.0
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"x0 for the angle model is one number, got {text!r}") from exc
    if text is None:
        return np.array([1.0, 0.0, 0.0])
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        vals = []
    if len(vals) != 3:
        raise ConfigError(f"x0 for qubit models is 'px,py,pz', got {text!r}")
    return np.array(vals)


def _parse_n_nodes(text: str, model: str):
    parts = [p for p in str(text).split(",") if p.strip()]
    try:
        counts = tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"n_nodes must be integers, got {text!r}") from exc
    if len(counts) == 1 and model != ANGLE:
        counts = counts * 3
    return counts


def _make_policy(policy_text: str, model: str, params: ModelParams):
    text = policy_text.strip()
    if text == "zero":
        return zero_policy(model)
    if text in ("lq-closed-form", "lq"):
        if model != ANGLE:
            raise ConfigError("policy 'lq-closed-form' applies to the angle model only")
        return lq_policy(params)
    if text.startswith("constant:"):
        vals = text[len("constant:"):]
        try:
            numbers = [float(v) for v in vals.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad constant policy {text!r}") from exc
        if model == ANGLE:
            if len(numbers) != 1:
                raise ConfigError("constant policy for the angle model takes one value")
            return constant_policy(model, numbers[0])
        if len(numbers) != 2:
            raise ConfigError("constant policy for qubit models takes 'u_plus,u_minus'")
        return constant_policy(model, numbers)
    if text.startswith("grid:"):
        path = text[len("grid:"):]
        vg = ValueGrid.load(path)
        if vg.spec.model != model:
            raise ConfigError(
                f"model mismatch: policy grid {path} holds "
                f"{MODEL_IDS[vg.spec.model]}, the run uses {MODEL_IDS[model]}"
            )
        return extract_policy(vg)
    raise ConfigError(
        f"unknown policy {policy_text!r}; expected zero, constant:<values>, "
        "lq-closed-form, or grid:<path>"
    )


# ---------------------------------------------------------------------------
# output plumbing


def _emit_json(summary: dict, cfg: dict) -> None:
    blob = json.dumps(summary, sort_keys=True, indent=2) + "\n"
    path = cfg.get("json")
    if path:
        atomic_write_text(path, blob)
    else:
        sys.stdout.write(blob)


def _emit_table(rows, dest=None) -> None:
    """Aligned key/value or columnar report on stderr."""
    stream = dest if dest is not None else sys.stderr
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    for row in rows:
        line = "  ".join(str(c).ljust(w) for c, w in zip(row, widths))
        stream.write(line.rstrip() + "\n")


def _stat_summary(command: str, cfg: dict, model: str, stats, extra=None) -> dict:
    summary = {
        "command": command,
        "model": MODEL_IDS[model],
        "mean_cost": stats.mean,
        "stderr": stats.stderr,
        "n_paths": stats.n,
        "seed": cfg["seed"],
        "dt": cfg["dt"],
        "horizon_T": cfg["horizon_T"],
    }
    if extra:
        summary.update(extra)
    return summary


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: dict) -> dict:
    model = _require(cfg, "model", "simulate")
    params = _model_params(cfg)
    x0 = _parse_x0(cfg, model)
    policy_text = cfg.get("policy", "zero")
    policy = _make_policy(policy_text, model, params)
    t0 = time.perf_counter()
    stats = run_batch(
        model, policy, x0, params, cfg["dt"], cfg["n_paths"],
        seed=cfg["seed"], threads=cfg["threads"],
    )
    extra = {"policy": policy_text,
             "x0": list(np.atleast_1d(np.asarray(x0, dtype=float)))}
    if cfg.get("csv"):
        traj = simulate(model, policy, x0, params, cfg["dt"], seed=cfg["seed"])
        traj.to_csv(cfg["csv"])
        extra["csv"] = cfg["csv"]
    summary = _stat_summary("simulate", cfg, model, stats, extra)
    if cfg["timings"]:
        summary["wall_time_s"] = time.perf_counter() - t0
    _emit_table([
        ("model", summary["model"]),
        ("policy", policy_text),
        ("mean_cost", f"{stats.mean:.6g}"),
        ("stderr", f"{stats.stderr:.3g}"),
        ("n_paths", stats.n),
    ])
    return summary


def cmd_solve(cfg: dict) -> dict:
    model = _require(cfg, "model", "solve")
    params = _model_params(cfg)
    grid_path = _require(cfg, "grid", "solve")
    n_nodes = _parse_n_nodes(_require(cfg, "n_nodes", "solve"), model)
    spec = GridSpec(
        model=model,
        n_nodes=n_nodes,
        n_steps=_require(cfg, "n_steps", "solve"),
        horizon_T=cfg["horizon_T"],
        control_box=cfg.get("control_box"),
        control_resolution=cfg.get("control_resolution"),
    )
    t0 = time.perf_counter()
    if cfg["method"] == "fd":
        vg = solve_backward(spec, params)
    else:
        vg = solve_dp(spec, params, mode=cfg["mode"])
    wall = time.perf_counter() - t0
    vg.save(grid_path)
    summary = {
        "command": "solve",
        "model": MODEL_IDS[model],
        "method": cfg["method"],
        "control_mode": vg.control_mode,
        "grid": grid_path,
        "n_nodes": list(spec.n_nodes),
        "n_steps": spec.n_steps,
        "delta": spec.delta,
        "slices": spec.n_steps + 1,
        "value_min": float(np.nanmin(vg.values)),
        "value_max": float(np.nanmax(vg.values)),
    }
    if model == ANGLE:
        summary["j0_at_theta_1"] = float(_interp_periodic(vg.values[0], 1.0))
    if cfg["timings"]:
        summary["wall_time_s"] = wall
    _emit_table([
        ("model", summary["model"]),
        ("grid", grid_path),
        ("slices", summary["slices"]),
        ("value range", f"[{summary['value_min']:.6g}, {summary['value_max']:.6g}]"),
    ])
    return summary


def cmd_evaluate(cfg: dict) -> dict:
    grid_path = _require(cfg, "grid", "evaluate")
    vg = ValueGrid.load(grid_path)
    model = vg.spec.model
    given = cfg["_given"]
    if "model" in given and cfg["model"] != model:
        raise ConfigError(
            f"model mismatch: config says {MODEL_IDS[cfg['model']]}, "
            f"{grid_path} holds {MODEL_IDS[model]}"
        )
    for key, stored in (("kappa_s_sq", vg.kappa_s_sq), ("alpha", vg.alpha),
                        ("horizon_T", vg.spec.horizon_T)):
        if key in given and abs(cfg[key] - stored) > 1e-12:
            raise ConfigError(
                f"{key} mismatch: config says {cfg[key]!r}, "
                f"{grid_path} was solved with {stored!r}"
            )
    params = ModelParams(kappa_s_sq=vg.kappa_s_sq, alpha=vg.alpha,
                         horizon_T=vg.spec.horizon_T)
    cfg = dict(cfg, kappa_s_sq=vg.kappa_s_sq, alpha=vg.alpha,
               horizon_T=vg.spec.horizon_T)
    x0 = _parse_x0(cfg, model)
    policy = extract_policy(vg)
    t0 = time.perf_counter()
    stats = run_batch(
        model, policy, x0, params, cfg["dt"], cfg["n_paths"],
        seed=cfg["seed"], threads=cfg["threads"],
    )
    extra = {"grid": grid_path,
             "x0": list(np.atleast_1d(np.asarray(x0, dtype=float)))}
    summary = _stat_summary("evaluate", cfg, model, stats, extra)
    if cfg["timings"]:
        summary["wall_time_s"] = time.perf_counter() - t0
    _emit_table([
        ("grid", grid_path),
        ("model", summary["model"]),
        ("mean_cost", f"{stats.mean:.6g}"),
        ("stderr", f"{stats.stderr:.3g}"),
        ("n_paths", stats.n),
    ])
    return summary


def cmd_compare(cfg: dict) -> dict | None:
    model = _require(cfg, "model", "compare")
    params = _model_params(cfg)
    x0 = _parse_x0(cfg, model)
    texts = [p.strip() for p in cfg.get("policies", "").split(";") if p.strip()]
    if len(texts) < 2:
        raise ConfigError("compare needs at least two --policy entries")
    t0 = time.perf_counter()
    rows = []
    for text in texts:
        policy = _make_policy(text, model, params)
        # common random numbers: every policy sees the same seed
        stats = run_batch(
            model, policy, x0, params, cfg["dt"], cfg["n_paths"],
            seed=cfg["seed"], threads=cfg["threads"],
        )
        rows.append((text, stats.mean, stats.stderr, stats.n))
    rows.sort(key=lambda r: r[1])
    buf = io.StringIO()
    buf.write("policy,mean,stderr,n\n")
    for text, mean, stderr, n in rows:
        buf.write(f"{text},{FLOAT_FMT % mean},{FLOAT_FMT % stderr},{n:d}\n")
    csv_blob = buf.getvalue()
    _emit_table([("policy", "mean", "stderr")] + [
        (text, f"{mean:.6g}", f"{stderr:.3g}") for text, mean, stderr, _ in rows
    ])
    if cfg.get("table"):
        atomic_write_text(cfg["table"], csv_blob)
        summary = {
            "command": "compare",
            "model": MODEL_IDS[model],
            "table": cfg["table"],
            "policies": [r[0] for r in rows],
            "best": rows[0][0],
            "n_paths": cfg["n_paths"],
            "seed": cfg["seed"],
        }
        if cfg["timings"]:
            summary["wall_time_s"] = time.perf_counter() - t0
        return summary
    sys.stdout.write(csv_blob)
    return None


def _parse_mesh(text: str, label: str) -> np.ndarray:
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"{label} mesh is 'lo:hi:n' or comma-separated, got {text!r}")
        lo, hi, n = (_typed(float, label)(parts[0]), _typed(float, label)(parts[1]),
                     _typed(int, label)(parts[2]))
        if n < 1:
            raise ConfigError(f"{label} mesh needs at least one point")
        return np.linspace(lo, hi, n)
    return np.array([_typed(float, label)(v) for v in text.split(",")])


def cmd_lq(cfg: dict, t_text: str, theta_text: str) -> None:
    T = cfg["horizon_T"]
    alpha = cfg["alpha"]
    ts = _parse_mesh(t_text, "t")
    thetas = _parse_mesh(theta_text, "theta")
    if (ts > T).any() or (ts < 0.0).any():
        raise ConfigError(f"t mesh must lie inside [0, {T}]")
    buf = io.StringIO()
    buf.write("t,theta,value,control\n")
    for t in ts:
        vals = lq.value(t, thetas, T, alpha)
        ctrls = lq.optimal_B(t, thetas, T)
        for theta, v, b in zip(thetas, vals, ctrls):
            buf.write(
                f"{FLOAT_FMT % t},{FLOAT_FMT % theta},{FLOAT_FMT % v},{FLOAT_FMT % b}\n"
            )
    if cfg.get("csv"):
        atomic_write_text(cfg["csv"], buf.getvalue())
        sys.stderr.write(f"wrote {ts.size * thetas.size} rows to {cfg['csv']}\n")
    else:
        sys.stdout.write(buf.getvalue())


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="INI file with [model]/[run]/[grid]/[output]")
    sub.add_argument("--output", dest="json", metavar="PATH",
                     help="write the JSON summary here instead of stdout")
    sub.add_argument("--no-timings", action="store_true",
                     help="omit wall-time fields for byte-stable output")
    sub.add_argument("--threads", type=int,
                     help=f"worker threads (default: ${THREADS_ENV} or none)")


def _add_model(sub: argparse.ArgumentParser, with_model=True) -> None:
    if with_model:
        sub.add_argument("--model", help="diffusive-qubit | counting-qubit | angle-lq")
    sub.add_argument("--kappa-s-sq", dest="kappa_s_sq", type=float,
                     help="observed-channel decay rate squared (default 0.5)")
    sub.add_argument("--alpha", type=float, help="angle-model noise gain (default 0.5)")
    sub.add_argument("--horizon-t", dest="horizon_T", type=float,
                     help="control horizon T (default 1.0)")


def _add_run(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--x0", help="initial state: 'px,py,pz' or a single angle")
    sub.add_argument("--dt", type=float, help="Euler time step (default 1e-3)")
    sub.add_argument("--n-paths", dest="n_paths", type=int,
                     help="Monte Carlo sample size (default 1000)")
    sub.add_argument("--seed", type=int, help="RNG seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qubitfeedback",
        description="Measurement-based qubit feedback: simulate, solve, compare.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    sim = subs.add_parser("simulate", help="Monte Carlo cost of one policy")
    _add_common(sim)
    _add_model(sim)
    _add_run(sim)
    sim.add_argument("--policy", help="zero | constant:<v> | lq-closed-form | grid:<path>")
    sim.add_argument("--csv", help="also write the seed's first path as CSV here")

    sol = subs.add_parser("solve", help="solve the backward equation onto a grid")
    _add_common(sol)
    _add_model(sol)
    sol.add_argument("--n-nodes", dest="n_nodes", help="nodes per axis, e.g. 21 or 21,21,21")
    sol.add_argument("--n-steps", dest="n_steps", type=int, help="backward time steps")
    sol.add_argument("--control-box", dest="control_box", type=float,
                     help="clamp controls to [-box, box]")
    sol.add_argument("--control-resolution", dest="control_resolution", type=int,
                     help="control grid points per axis (exhaustive mode)")
    sol.add_argument("--method", choices=("fd", "dp"), help="fd (default) or dp")
    sol.add_argument("--mode", choices=CONTROL_MODES,
                     help="dp minimization mode (default closed-form)")
    sol.add_argument("--grid", help="output .vgrid path (required)")

    ev = subs.add_parser("evaluate", help="Monte Carlo cost of a solved grid policy")
    _add_common(ev)
    _add_model(ev)
    _add_run(ev)
    ev.add_argument("--grid", help="input .vgrid path (required)")

    cmp_ = subs.add_parser("compare", help="rank policies under common random numbers")
    _add_common(cmp_)
    _add_model(cmp_)
    _add_run(cmp_)
    cmp_.add_argument("--policy", dest="policies", action="append", metavar="POLICY",
                      help="policy to include (repeat; at least two)")
    cmp_.add_argument("--table", help="write the ranking CSV here instead of stdout")

    lqp = subs.add_parser("lq", help="closed-form value/control on a (t, theta) mesh")
    _add_common(lqp)
    _add_model(lqp, with_model=False)
    lqp.add_argument("--t", default="0", help="time mesh: 'lo:hi:n' or comma list")
    lqp.add_argument("--theta", default="-2:2:81", help="angle mesh: 'lo:hi:n' or comma list")
    lqp.add_argument("--csv", help="write the CSV here instead of stdout")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        if args.command == "simulate":
            summary = cmd_simulate(cfg)
        elif args.command == "solve":
            summary = cmd_solve(cfg)
        elif args.command == "evaluate":
            summary = cmd_evaluate(cfg)
        elif args.command == "compare":
            summary = cmd_compare(cfg)
        else:
            cmd_lq(cfg, args.t, args.theta)
            summary = None
        if summary is not None:
            _emit_json(summary, cfg)
    except (ConfigError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except (RuntimeError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
