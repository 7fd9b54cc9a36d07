"""Configuration, experiment orchestration, and reproducible IO.

Subcommands: ``spectrum``, ``flow``, ``continue``, ``validate``.  All
randomness flows from the single seed recorded in the resolved config;
identical config and seed give byte-identical CSV output (floats printed
at 17 significant digits).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, dirac, flow, geometry, validate
from .errors import (
    ConfigError,
    ContinuationAborted,
    DiracflowError,
    RestartExhausted,
)

FORMAT_VERSION = "1"

CSV_COLUMNS = [
    "t",
    "E_alpha",
    "E_dirichlet",
    "dissipation",
    "gap_lambda",
    "kernel_dim",
    "psi_l2",
    "map_residual",
    "spinor_residual",
    "event",
]


# ---------------------------------------------------------------------------
# config schema

_SCHEMA = {
    "domain": {
        "n1": (int, 16),
        "n2": (int, 16),
        "L1": (float, 2.0 * np.pi),
        "L2": (float, 2.0 * np.pi),
        "antiperiodic": (list, [False, False]),
    },
    "target": {
        "kind": (str, "sphere"),
        "radius": (float, 1.0),
        "intrinsic_dim": (int, 2),
        "radii": (list, [1.0]),
    },
    "flow": {
        "alpha": (float, 1.1),
        "alpha_schedule": (list, []),
        "warm_start": (bool, True),
        "dt": (float, 1e-3),
        "t_max": (float, 1.0),
        "tau_stat": ((float, type(None)), None),
        "tau_ker": ((float, type(None)), None),
        "lambda_min": (float, 1e-3),
        "tau_e_rel": (float, 1e-10),
        "spinor": (bool, True),
        "restart_max_attempts": (int, 40),
        "restart_amplitudes": (list, [0.05, 0.025, 0.0125]),
        "ball_radius": ((float, type(None)), None),
        "seed": (int, 0),
        "sample_stride": (int, 1),
        "tracker_k": (int, 6),
        "dense_dim_max": (int, 2100),
    },
    "initial": {
        "generator": (str, "constant"),
        "k1": (int, 1),
        "k2": (int, 0),
        "base": (str, "constant"),
        "amplitude": (float, 0.05),
        "seed": (int, 1),
        "path": (str, ""),
        "kmax": (int, 2),
    },
    "output": {
        "directory": (str, "out"),
        "checkpoint_stride": (int, 0),
        "dump_eigenvectors": (bool, False),
    },
    "spectrum": {
        "k": (int, 8),
    },
    "validate": {
        "overrides": (dict, {}),
        "seed": (int, 0),
    },
}

_GENERATORS = ("constant", "winding", "perturbed", "checkpoint")


def _coerce(value, types, path):
    if isinstance(types, tuple):
        ok = isinstance(value, types) or (
            float in types and isinstance(value, int) and not isinstance(value, bool)
        )
    else:
        ok = isinstance(value, types)
        if types is float and isinstance(value, int) and not isinstance(value, bool):
            value, ok = float(value), True
        if types is int and isinstance(value, bool):
            ok = False
    if not ok:
        raise ConfigError(f"config field '{path}': expected {types}, got {value!r}")
    return value


def resolve_config(raw: dict) -> dict:
    """Validate against the schema, reject unknown keys, fill defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    resolved = {}
    for block, fields in _SCHEMA.items():
        given = raw.get(block, {})
        if not isinstance(given, dict):
            raise ConfigError(f"config block '{block}' must be an object")
        for key in given:
            if key not in fields:
                raise ConfigError(f"unknown config key '{block}.{key}'")
        out = {}
        for key, (types, default) in fields.items():
            if key in given:
                out[key] = _coerce(given[key], types, f"{block}.{key}")
            else:
                out[key] = default
        resolved[block] = out
    for key in raw:
        if key not in _SCHEMA and key != "format_version":
            raise ConfigError(f"unknown config block '{key}'")
    gen = resolved["initial"]["generator"]
    if gen not in _GENERATORS:
        raise ConfigError(
            f"initial.generator must be one of {_GENERATORS}, got '{gen}'"
        )
    sched = resolved["flow"]["alpha_schedule"]
    if sched and any(b >= a for a, b in zip(sched, sched[1:])):
        raise ConfigError("flow.alpha_schedule must be strictly decreasing")
    resolved["format_version"] = FORMAT_VERSION
    return resolved


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return resolve_config(raw)


def config_hash(cfg: dict) -> str:
    """Hash of the physics blocks; initial/output choices and the stopping
    horizon t_max do not matter for checkpoint compatibility."""
    core = {k: dict(cfg[k]) for k in ("domain", "target", "flow")}
    core["flow"].pop("t_max", None)
    blob = json.dumps(core, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# object construction

def build_domain(cfg: dict) -> geometry.TorusDomain:
    d = cfg["domain"]
    try:
        return geometry.TorusDomain(
            d["n1"], d["n2"], d["L1"], d["L2"], tuple(d["antiperiodic"])
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_target(cfg: dict) -> geometry.TargetManifold:
    t = cfg["target"]
    try:
        if t["kind"] == "sphere":
            return geometry.Sphere(t["intrinsic_dim"], t["radius"])
        if t["kind"] == "circle_product":
            return geometry.CircleProduct(tuple(t["radii"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown target kind '{t['kind']}'")


def build_flow_config(cfg: dict) -> flow.FlowConfig:
    f = cfg["flow"]
    return flow.FlowConfig(
        alpha=f["alpha"],
        dt=f["dt"],
        t_max=f["t_max"],
        tau_stat=f["tau_stat"],
        tau_ker=f["tau_ker"],
        lambda_min=f["lambda_min"],
        tau_e_rel=f["tau_e_rel"],
        spinor=f["spinor"],
        restart_max_attempts=f["restart_max_attempts"],
        restart_amplitudes=tuple(f["restart_amplitudes"]),
        ball_radius=f["ball_radius"],
        seed=f["seed"],
        sample_stride=f["sample_stride"],
        tracker_k=f["tracker_k"],
        dense_dim_max=f["dense_dim_max"],
    )


def build_initial_map(cfg, domain, target):
    ini = cfg["initial"]
    gen = ini["generator"]
    if gen == "checkpoint":
        data = read_checkpoint(ini["path"])
        u = geometry.MapField(data["u"], domain, target)
        return u, data
    if gen == "constant":
        return geometry.constant_map(domain, target), None
    if gen == "winding":
        if target.kind != "circle_product":
            raise ConfigError("winding initial data needs a circle_product target")
        return geometry.winding_map(domain, target, ini["k1"], ini["k2"]), None
    if gen == "perturbed":
        if ini["base"] == "constant":
            base = geometry.constant_map(domain, target)
        elif ini["base"] == "winding":
            if target.kind != "circle_product":
                raise ConfigError("winding base needs a circle_product target")
            base = geometry.winding_map(domain, target, ini["k1"], ini["k2"])
        else:
            raise ConfigError(f"unknown perturbation base '{ini['base']}'")
        return (
            geometry.perturbed_map(base, ini["amplitude"], ini["seed"], ini["kmax"]),
            None,
        )
    raise ConfigError(f"unknown generator '{gen}'")


# ---------------------------------------------------------------------------
# checkpoints

def write_checkpoint(path_prefix, cfg, state, tracker, rng):
    prefix = Path(path_prefix)
    arrays = []
    payload = []
    offset = 0

    def add(name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arrays.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(arr)
        offset += arr.size

    add("u", state.u.values)
    if state.psi is not None:
        add("psi", np.stack([state.psi.values.real, state.psi.values.imag], -1))
    if tracker is not None and tracker._X is not None:
        add("tracker", np.stack([tracker._X.real, tracker._X.imag], -1))
    header = {
        "format_version": FORMAT_VERSION,
        "t": state.t,
        "alpha": state.alpha,
        "grid": [state.u.domain.n1, state.u.domain.n2],
        "config_hash": config_hash(cfg),
        "rng_state": _encode_rng(rng),
        "arrays": arrays,
    }
    prefix.with_suffix(".json").write_text(json.dumps(header, indent=2))
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        for arr in payload:
            arr.tofile(fh)


def read_checkpoint(path_prefix) -> dict:
    prefix = Path(path_prefix)
    try:
        header = json.loads(prefix.with_suffix(".json").read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint: {exc}") from exc
    flat = np.fromfile(prefix.with_suffix(".bin"), dtype=np.float64)
    out = {
        "t": header["t"],
        "alpha": header["alpha"],
        "config_hash": header["config_hash"],
        "rng_state": header["rng_state"],
    }
    for spec in header["arrays"]:
        size = int(np.prod(spec["shape"]))
        arr = flat[spec["offset"] : spec["offset"] + size].reshape(spec["shape"])
        if spec["name"] == "u":
            out["u"] = arr
        else:
            out[spec["name"]] = arr[..., 0] + 1j * arr[..., 1]
    return out


def _encode_rng(rng):
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _decode_rng(state) -> np.random.Generator:
    rng = np.random.default_rng()
    fixed = dict(state)
    if "state" in fixed and isinstance(fixed["state"], dict):
        inner = dict(fixed["state"])
        if "state" in inner:
            inner["state"] = int(inner["state"])
        if "inc" in inner:
            inner["inc"] = int(inner["inc"])
        fixed["state"] = inner
    rng.bit_generator.state = fixed
    return rng


# ---------------------------------------------------------------------------
# output helpers

def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def write_csv(path, rows, append=False):
    mode = "a" if append else "w"
    with open(path, mode) as fh:
        if not append:
            fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in CSV_COLUMNS) + "\n")


def trajectory_rows(traj):
    rows = []
    event_at = {}
    for ev in traj.events:
        event_at.setdefault(round(ev.time, 12), []).append(ev.kind)
    for state in traj.states:
        d = state.diagnostics
        key = round(state.t, 12)
        rows.append(
            {
                "t": state.t,
                "E_alpha": d.get("E_alpha", float("nan")),
                "E_dirichlet": d.get("E_dirichlet", float("nan")),
                "dissipation": d.get("dissipation", float("nan")),
                "gap_lambda": d.get("gap_lambda", float("nan")),
                "kernel_dim": d.get("kernel_dim", 0),
                "psi_l2": d.get("psi_l2", 0.0),
                "map_residual": d.get("map_residual", float("nan")),
                "spinor_residual": d.get("spinor_residual", float("nan")),
                "event": ";".join(event_at.get(key, [])),
            }
        )
    return rows


def write_outputs(outdir, cfg, quiet):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.resolved.json").write_text(json.dumps(cfg, indent=2))
    if not quiet:
        print(f"resolved config written to {outdir/'config.resolved.json'}")
    return outdir


# ---------------------------------------------------------------------------
# subcommands

def cmd_spectrum(cfg, outdir, quiet) -> int:
    domain = build_domain(cfg)
    target = build_target(cfg)
    u, _ = build_initial_map(cfg, domain, target)
    op = dirac.assemble_operator(u)
    report = dirac.compute_spectrum(
        op, k=cfg["spectrum"]["k"], tau_ker=cfg["flow"]["tau_ker"],
        dense_dim_max=cfg["flow"]["dense_dim_max"],
    )
    out = dict(report.to_json_dict())
    out["format_version"] = FORMAT_VERSION
    out["hermiticity_residual"] = (
        op.hermiticity_residual() if op.dim <= cfg["flow"]["dense_dim_max"] else None
    )
    (outdir / "spectrum.json").write_text(json.dumps(out, indent=2))
    if cfg["output"]["dump_eigenvectors"]:
        report.save_eigenvectors(outdir / "eigenvectors")
    if not quiet:
        print(json.dumps(out, indent=2))
    return 0


def _run_flow_with_outputs(cfg, outdir, quiet):
    domain = build_domain(cfg)
    target = build_target(cfg)
    fcfg = build_flow_config(cfg)
    u0, ckpt = build_initial_map(cfg, domain, target)
    t_offset = 0.0
    psi0 = None
    tracker = None
    rng = np.random.default_rng(fcfg.seed)
    if ckpt is not None:
        if ckpt["config_hash"] != config_hash(cfg):
            raise ConfigError("checkpoint config hash does not match this config")
        t_offset = ckpt["t"]
        if "psi" in ckpt:
            psi0 = dirac.TwistedSpinorField(ckpt["psi"], u0)
        if "tracker" in ckpt and fcfg.spinor:
            tracker = dirac.KernelTracker(
                k=fcfg.tracker_k, dense_dim_max=fcfg.dense_dim_max
            )
            tracker._X = ckpt["tracker"]
        rng = _decode_rng(ckpt["rng_state"])
    if tracker is None and fcfg.spinor:
        tracker = dirac.KernelTracker(
            k=fcfg.tracker_k, dense_dim_max=fcfg.dense_dim_max
        )
    traj = flow.run_flow(
        fcfg, u0, psi0, tracker=tracker, rng=rng,
        prepared=ckpt is not None, t0=t_offset,
    )
    rows = trajectory_rows(traj)
    write_csv(outdir / "timeseries.csv", rows)
    events = [
        {"kind": ev.kind, "time": ev.time, "payload": ev.payload}
        for ev in traj.events
    ]
    (outdir / "events.json").write_text(json.dumps(events, indent=2, default=float))
    stride = cfg["output"]["checkpoint_stride"]
    final = traj.final_state
    write_checkpoint(outdir / "checkpoint_final", cfg, final, tracker, rng)
    if not quiet:
        kinds = [ev.kind for ev in traj.events]
        print(
            f"flow finished at t={final.t:.6g} "
            f"E_alpha={flow.energy_alpha(final.u, fcfg.alpha):.12g} events={kinds}"
        )
    return traj


def cmd_flow(cfg, outdir, quiet) -> int:
    traj = _run_flow_with_outputs(cfg, outdir, quiet)
    return 0


def cmd_continue(cfg, outdir, quiet) -> int:
    domain = build_domain(cfg)
    target = build_target(cfg)
    fcfg = build_flow_config(cfg)
    sched = cfg["flow"]["alpha_schedule"]
    if not sched:
        raise ConfigError("flow.alpha_schedule required for `continue`")
    u0, _ = build_initial_map(cfg, domain, target)
    result = flow.alpha_continuation(
        fcfg, sched, u0, warm_start=cfg["flow"]["warm_start"]
    )
    summary = {"format_version": FORMAT_VERSION, "stages": []}
    for i, (a, traj) in enumerate(result.stages):
        stage_dir = outdir / f"stage_{i}"
        stage_dir.mkdir(exist_ok=True)
        write_csv(stage_dir / "timeseries.csv", trajectory_rows(traj))
        summary["stages"].append(
            {
                "alpha": a,
                "final_E_alpha": traj.energies[-1],
                "final_E_dirichlet": flow.dirichlet_energy(traj.final_state.u),
                "psi_l2": result.psi_norms[i],
                "events": [ev.kind for ev in traj.events],
            }
        )
    summary["concentration"] = result.concentration.to_json_dict()
    (outdir / "continuation.json").write_text(
        json.dumps(summary, indent=2, default=float)
    )
    if not quiet:
        print(json.dumps(summary["concentration"], indent=2))
    return 0


def cmd_validate(cfg, outdir, quiet) -> int:
    overrides = cfg["validate"]["overrides"]
    results = validate.run_checks(overrides, seed=cfg["validate"]["seed"])
    payload = {
        "format_version": FORMAT_VERSION,
        "passed": all(r.passed for r in results),
        "checks": [r.to_json_dict() for r in results],
    }
    (outdir / "validate.json").write_text(json.dumps(payload, indent=2))
    if not quiet:
        for r in results:
            mark = "PASS" if r.passed else "FAIL"
            print(
                f"[{mark}] {r.name}: measured={r.measured:.6e} "
                f"allowed={r.allowed:.6e} {r.details}"
            )
    return 0 if payload["passed"] else 4


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="diracflow",
        description="Heat flow for regularized Dirac-harmonic maps on flat tori",
    )
    parser.add_argument(
        "command", choices=["spectrum", "flow", "continue", "validate"]
    )
    parser.add_argument("--config", required=False, default=None)
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config) if args.config else resolve_config({})
        if args.seed is not None:
            cfg["flow"]["seed"] = args.seed
            cfg["validate"]["seed"] = args.seed
        outdir = Path(args.out) if args.out else Path(cfg["output"]["directory"])
        outdir = write_outputs(outdir, cfg, args.quiet)
        handler = {
            "spectrum": cmd_spectrum,
            "flow": cmd_flow,
            "continue": cmd_continue,
            "validate": cmd_validate,
        }[args.command]
        return handler(cfg, outdir, args.quiet)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except (RestartExhausted, ContinuationAborted) as exc:
        print(
            json.dumps({"error": "restart_exhausted", "message": str(exc)}),
            file=sys.stderr,
        )
        return 3
    except DiracflowError as exc:
        print(
            json.dumps(
                {"error": type(exc).__name__, "message": str(exc)}
            ),
            file=sys.stderr,
        )
        return 4


if __name__ == "__main__":
    sys.exit(main())
