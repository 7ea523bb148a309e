"""Command-line front door: dataset generation, model identification,
trajectory optimization, open-loop execution on the simulated arm, stress
probes, ablation grids, report verification, and the realtime service.

Every command is deterministic given its flags and seeds. Results go to the
named output file; a one-line summary goes to stdout (JSON with --json).

Exit codes: 0 success, 2 bad usage or bad values, 3 missing input file,
4 unreadable or wrong-version file, 5 runtime failure (model divergence,
report verification mismatch).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import io as lio
from .evalharness import (TRAJECTORY_SUITES, execute_open_loop, image_mse,
                          reconstruction_floor, run_ablation_study,
                          select_setpoints, stress_ramp, stress_release,
                          stress_static_hold, waypoint_mse)
from .ocp import (CostWeights, OcpProblem, OcpSolution, WaypointSet,
                  load_waypoints, ocp_cost, schedule_waypoints, solve_ocp)
from .plant import generate_dataset
from .service import ENV_CHECKPOINT_DIR, RATE_HZ, make_server
from .training import (TrainConfig, apply_ablation, load_checkpoint,
                       save_checkpoint, train)
from .validation import ContractError, DivergenceError, FormatError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_RUNTIME = 5

# CostWeights fields settable from the command line (flag --track-z etc.)
WEIGHT_FLAGS = ("track_z", "track_zdot", "way_z", "way_zdot",
                "final_z", "final_zdot", "smooth", "excess", "du_max")


# ------------------------------------------------------------- small helpers

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _emit(args, human: str, payload: dict) -> None:
    print(json.dumps(lio._to_jsonable(payload)) if args.json else human)


def _body(doc: dict) -> dict:
    """Strip the format/version envelope a loader leaves on a document."""
    return {k: v for k, v in doc.items() if k not in ("format", "version")}


def _stderr_log(line: str) -> None:
    print(line, file=sys.stderr)


def load_train_config(path) -> TrainConfig:
    """Read a training config file: a JSON object of TrainConfig fields.

    loss_weights may be a mapping or a list of [name, value] pairs;
    h_schedule is a list of [epoch_fraction, horizon] pairs.
    """
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: not valid structured text: {e}") from e
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: training config must be an object")
    c = dict(doc)
    if "loss_weights" in c:
        lw = c["loss_weights"]
        if isinstance(lw, dict):
            lw = sorted(lw.items())
        c["loss_weights"] = tuple((k, float(v)) for k, v in lw)
    if "h_schedule" in c:
        c["h_schedule"] = tuple((float(f0), int(h)) for f0, h in c["h_schedule"])
    try:
        return TrainConfig(**c)
    except TypeError as e:
        raise FormatError(f"{path}: bad training config field: {e}") from e


def _rest_problem_start(ckpt):
    """Control-from-rest initial condition: encoded rest frame, zero rate."""
    z = ckpt.encode_mean(np.asarray(ckpt.o_rest, dtype=float))
    return np.concatenate([z, np.zeros(ckpt.system.dyn.n_z)])


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    ds = generate_dataset(args.kind, args.duration, args.seed)
    lio.save_dataset(args.out, ds)
    n = sum(len(s) for s in ds.sequences)
    digest = _sha256(args.out)
    _emit(args,
          f"wrote {args.out}: {n} frames at {ds.rate_hz:g} Hz, "
          f"sha256 {digest[:12]}",
          {"command": "gen-data", "out": os.fspath(args.out), "frames": n,
           "rate_hz": ds.rate_hz, "sha256": digest})
    return EXIT_OK


def cmd_train(args) -> int:
    train_set = lio.load_dataset(args.data)
    val_set = lio.load_dataset(args.val) if args.val else train_set
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if args.ablation:
        cfg = apply_ablation(cfg, args.ablation)
    log = None if args.quiet else _stderr_log
    ckpt = train(cfg, train_set, val_set, log=log, ablation=args.ablation)
    save_checkpoint(args.out, ckpt)
    final = ckpt.loss_history[-1]["loss"] if ckpt.loss_history else float("nan")
    _emit(args,
          f"wrote {args.out}: {cfg.family}/{cfg.decoder} m={cfg.m} "
          f"ablation={args.ablation} final loss {final:.6g}",
          {"command": "train", "out": os.fspath(args.out),
           "family": cfg.family, "decoder": cfg.decoder, "m": cfg.m,
           "ablation": args.ablation, "epochs": cfg.epochs,
           "final_loss": final, "sbar": ckpt.sbar})
    return EXIT_OK


def cmd_optimize(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    wps = load_waypoints(args.waypoints)
    suite = TRAJECTORY_SUITES[args.suite] if args.suite else None
    overrides = {f: getattr(args, f) for f in WEIGHT_FLAGS
                 if getattr(args, f) is not None}
    if suite is None and not overrides:
        raise ContractError("pick --suite or give at least one weight flag")
    T = args.horizon if args.horizon is not None else \
        (suite.horizon if suite else wps.T)
    if T != wps.T:
        wps = WaypointSet(obs=wps.obs, z=wps.z, zdot=wps.zdot,
                          tau=schedule_waypoints(wps.K, T), flags=wps.flags,
                          u_true=wps.u_true)
    base = suite.cost_weights(mode=args.mode) if suite \
        else CostWeights(mode=args.mode)
    weights = dataclasses.replace(base, **overrides)
    u0 = np.asarray(args.u0 if args.u0 else ckpt.u_rest, dtype=float)
    problem = OcpProblem(checkpoint=ckpt, xi0=_rest_problem_start(ckpt),
                         u0=u0, T=T, waypoints=wps, weights=weights,
                         iterations=args.iterations, lr=args.lr)
    sol = solve_ocp(problem)
    body = {
        "kind": "ocp_solution",
        "checkpoint": os.fspath(args.checkpoint),
        "suite": args.suite or "",
        "T": T, "K": wps.K,
        "weights": dataclasses.asdict(weights),
        "iterations": args.iterations, "lr": args.lr,
        "xi0": problem.xi0, "u0": u0,
        "waypoints": wps.to_doc(),
        "solution": sol.to_doc(),
    }
    lio.save_report(args.out, body)
    _emit(args,
          f"wrote {args.out}: T={T} K={wps.K} cost={sol.cost:.6g}",
          {"command": "optimize", "out": os.fspath(args.out), "T": T,
           "K": wps.K, "suite": args.suite or "", "cost": sol.cost,
           "parts": sol.parts})
    return EXIT_OK


def cmd_execute(args) -> int:
    doc = _body(lio.load_report(args.solution))
    if doc.get("kind") != "ocp_solution":
        raise FormatError(f"{args.solution}: not an optimize result "
                          f"(kind={doc.get('kind')!r})")
    sol = OcpSolution.from_doc(doc["solution"])
    wps = WaypointSet.from_doc(doc["waypoints"])
    states, frames = execute_open_loop(sol.useq)
    if frames.shape[1] != wps.obs.shape[1]:
        raise ContractError(
            f"waypoints carry {wps.obs.shape[1]}-pixel observations, "
            f"the arm renders {frames.shape[1]}")
    kind = TRAJECTORY_SUITES[doc["suite"]].kind if doc.get("suite") \
        else "dynamic"
    mode = doc.get("weights", {}).get("mode", "next")
    per = [image_mse(frames[t], o) for t, o in zip(wps.tau, wps.obs)]
    body = {
        "kind": "execution",
        "solution": os.fspath(args.solution),
        "suite": doc.get("suite", ""),
        "waypoint_kind": kind,
        "tau": wps.tau,
        "per_waypoint_mse": per,
        "mse_waypoint": waypoint_mse(frames, wps, kind=kind, mode=mode),
        "mse_final": image_mse(frames[-1], wps.obs[-1]),
        "mse_baseline": image_mse(frames[0], wps.obs[-1]),
        "useq": sol.useq,
        "frame_final": frames[-1],
    }
    body["ratio"] = body["mse_final"] / body["mse_baseline"]
    lio.save_report(args.out, body)
    _emit(args,
          f"wrote {args.out}: waypoint mse {body['mse_waypoint']:.6g}, "
          f"final {body['mse_final']:.6g} "
          f"({100 * body['ratio']:.1f}% of baseline)",
          {"command": "execute", "out": os.fspath(args.out),
           **{k: body[k] for k in ("suite", "waypoint_kind", "mse_waypoint",
                                   "mse_final", "mse_baseline", "ratio")}})
    return EXIT_OK


def cmd_stress(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.test == "static_hold":
        if not args.data:
            raise ContractError("static_hold needs --data for setpoints")
        ds = lio.load_dataset(args.data)
        sps = select_setpoints(ds, n=args.n)
        if not sps:
            raise ContractError("no steady setpoints found in the dataset")
        drift = stress_static_hold(ckpt, sps, steps=args.steps)
        floor = reconstruction_floor(ckpt, np.stack([sp.obs for sp in sps]))
        body = {"kind": "stress", "test": "static_hold",
                "steps": args.steps, "n": len(sps), "floor": floor,
                "drift": drift,
                "final_median": float(np.median(drift[:, -1])),
                "final_max": float(drift[:, -1].max())}
        human = (f"wrote {args.out}: static hold over {len(sps)} setpoints, "
                 f"median final drift {body['final_median']:.3g} "
                 f"(floor {floor:.3g})")
    elif args.test == "ramp":
        out = stress_ramp(ckpt, np.asarray(args.target, dtype=float),
                          ramp_steps=args.ramp_steps,
                          hold_steps=args.hold_steps)
        body = {"kind": "stress", "test": "ramp", "target": args.target,
                "ramp_steps": args.ramp_steps, "hold_steps": args.hold_steps,
                "useq": out["useq"], "mse_to_target": out["mse_to_target"],
                "mse_final": float(out["mse_to_target"][-1])}
        if "balance_residual" in out:
            body["balance_residual"] = out["balance_residual"]
        human = (f"wrote {args.out}: ramp to {args.target}, final mse "
                 f"{body['mse_final']:.3g}" +
                 (f", force balance {body['balance_residual']:.3g}"
                  if "balance_residual" in body else ""))
    else:  # release
        out = stress_release(ckpt, amplitude=args.amplitude,
                             freq_hz=args.freq)
        floor = reconstruction_floor(
            ckpt, np.asarray(ckpt.o_rest, dtype=float)[None])
        body = {"kind": "stress", "test": "release",
                "amplitude": args.amplitude, "freq_hz": args.freq,
                "release_step": out["release_step"], "floor": floor,
                "mse_to_rest": out["mse_to_rest"],
                "mse_final": float(out["mse_to_rest"][-1])}
        human = (f"wrote {args.out}: release settles to "
                 f"{body['mse_final']:.3g} (floor {floor:.3g})")
    lio.save_report(args.out, body)
    _emit(args, human,
          {"command": "stress", "out": os.fspath(args.out),
           **{k: v for k, v in body.items()
              if not isinstance(v, np.ndarray)}})
    return EXIT_OK


def cmd_ablate(args) -> int:
    train_set = lio.load_dataset(args.data)
    val_set = lio.load_dataset(args.val) if args.val else train_set
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    sps = select_setpoints(val_set, n=args.n_setpoints)
    report = run_ablation_study(cfg, train_set, val_set, sps,
                                horizon=args.horizon, n_windows=args.windows,
                                iterations=args.iterations, seed=args.seed,
                                log=None if args.quiet else _stderr_log)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "ablation_report.json")
    lio.save_report(path, {"kind": "ablation", **report})
    lines = [f"wrote {path}:"]
    for name, entry in report["models"].items():
        if entry["status"] == "ok":
            lines.append(f"  {name:<12} {entry['label']:<32} "
                         f"mse {entry['multistep_mse']:.4g}  "
                         f"mae {entry['pressure_mae']:.4g}")
        else:
            lines.append(f"  {name:<12} {entry['label']:<32} "
                         f"{entry['status']}")
    _emit(args, "\n".join(lines),
          {"command": "ablate", "out": path, "models": report["models"]})
    return EXIT_OK


# --------------------------------------------------------- report checking

def _check_ocp_solution(doc: dict, checks: list) -> None:
    sol = OcpSolution.from_doc(doc["solution"])
    checks.append(("parts sum to cost",
                   sum(sol.parts.values()) == sol.cost,
                   f"{sum(sol.parts.values())!r} vs {sol.cost!r}"))
    checks.append(("cost is the best trace entry",
                   sol.cost <= min(sol.trace),
                   f"{sol.cost!r} vs min {min(sol.trace)!r}"))
    ckpt_path = doc.get("checkpoint", "")
    if ckpt_path and os.path.exists(ckpt_path):
        ckpt = load_checkpoint(ckpt_path)
        problem = OcpProblem(
            checkpoint=ckpt, xi0=np.asarray(doc["xi0"], dtype=float),
            u0=np.asarray(doc["u0"], dtype=float), T=int(doc["T"]),
            waypoints=WaypointSet.from_doc(doc["waypoints"]),
            weights=CostWeights(**doc["weights"]))
        total, _ = ocp_cost(sol.useq, problem)
        checks.append(("cost recomputed against the checkpoint",
                       total == sol.cost, f"{total!r} vs {sol.cost!r}"))


def _check_execution(doc: dict, checks: list) -> None:
    ratio = doc["mse_final"] / doc["mse_baseline"]
    checks.append(("ratio = final / baseline", ratio == doc["ratio"],
                   f"{ratio!r} vs {doc['ratio']!r}"))
    if doc.get("waypoint_kind") == "dynamic":
        per = np.asarray(doc["per_waypoint_mse"], dtype=float)
        tau = np.asarray(doc["tau"], dtype=int)
        agg = float(np.mean(per[tau > 1]))
        checks.append(("waypoint mse is the mean over scheduled instants",
                       agg == doc["mse_waypoint"],
                       f"{agg!r} vs {doc['mse_waypoint']!r}"))


def _check_stress(doc: dict, checks: list) -> None:
    series_key = {"static_hold": "drift", "ramp": "mse_to_target",
                  "release": "mse_to_rest"}[doc["test"]]
    series = np.asarray(doc[series_key], dtype=float)
    if doc["test"] == "static_hold":
        finals = series[:, -1]
        checks.append(("final_median matches the drift table",
                       float(np.median(finals)) == doc["final_median"],
                       f"{float(np.median(finals))!r} vs "
                       f"{doc['final_median']!r}"))
        checks.append(("final_max matches the drift table",
                       float(finals.max()) == doc["final_max"],
                       f"{float(finals.max())!r} vs {doc['final_max']!r}"))
    else:
        checks.append(("mse_final is the last series entry",
                       float(series[-1]) == doc["mse_final"],
                       f"{float(series[-1])!r} vs {doc['mse_final']!r}"))


def _check_ablation(doc: dict, checks: list) -> None:
    for name, entry in doc["models"].items():
        want = 0 if name == "full" else 1
        checks.append((f"{name} differs in exactly {want} field(s)",
                       len(entry["config_diff"]) == want,
                       f"diff {entry['config_diff']}"))
        if entry["status"] == "ok":
            ok = all(np.isfinite(entry[k])
                     for k in ("multistep_mse", "pressure_mae"))
            checks.append((f"{name} metrics are finite", ok,
                           f"{entry['multistep_mse']}, "
                           f"{entry['pressure_mae']}"))


def cmd_report(args) -> int:
    failures = 0
    summaries = []
    for path in args.inputs:
        doc = _body(lio.load_report(path))
        kind = doc.get("kind", "")
        checks: list = []
        if kind == "ocp_solution":
            _check_ocp_solution(doc, checks)
        elif kind == "execution":
            _check_execution(doc, checks)
        elif kind == "stress":
            _check_stress(doc, checks)
        elif kind == "ablation":
            _check_ablation(doc, checks)
        bad = [(name, detail) for name, ok, detail in checks if not ok]
        failures += len(bad)
        status = "verified" if checks and not bad else \
            ("no checks" if not checks else "MISMATCH")
        if not args.json:
            print(f"{path}: kind={kind or '?'} "
                  f"{len(checks) - len(bad)}/{len(checks)} checks, {status}")
            for name, detail in bad:
                print(f"  FAIL {name}: {detail}")
        summaries.append({"path": os.fspath(path), "kind": kind,
                          "checks": len(checks), "failed": len(bad),
                          "status": status,
                          "failures": [{"check": n, "detail": d}
                                       for n, d in bad]})
    if args.json:
        print(json.dumps(lio._to_jsonable(
            {"command": "report", "inputs": summaries,
             "failures": failures})))
    if args.out:
        lio.save_report(args.out, {"kind": "report_summary",
                                   "inputs": summaries,
                                   "failures": failures})
    return EXIT_RUNTIME if failures else EXIT_OK


def resolve_checkpoint_dir(flag_value):
    """Checkpoint directory for serving; the environment wins over the flag
    so deployments can repoint a scripted launch."""
    env = os.environ.get(ENV_CHECKPOINT_DIR)
    path = env or flag_value
    if not path:
        raise ContractError(
            f"give --checkpoints or set {ENV_CHECKPOINT_DIR}")
    if not os.path.isdir(path):
        raise FileNotFoundError(path)
    return path


def cmd_serve(args) -> int:
    cdir = resolve_checkpoint_dir(args.checkpoints)
    server = make_server(cdir, port=args.port, host=args.host,
                         rate_hz=args.rate)
    host, port = server.server_address[:2]
    print(f"serving {cdir} on ws://{host}:{port} at {args.rate:g} Hz",
          flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _add_json(sp) -> None:
    sp.add_argument("--json", action="store_true",
                    help="print a machine-readable JSON result line")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="latentctl",
        description="Identify latent arm dynamics from rendered recordings "
                    "and drive them to waypoints open-loop.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate and record the arm")
    g.add_argument("--kind", choices=("step", "sinusoidal"), required=True)
    g.add_argument("--duration", type=float, required=True,
                   help="recording length in seconds")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    _add_json(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="identify a latent model")
    t.add_argument("--data", required=True, help="training recording")
    t.add_argument("--val", help="held-out recording (default: --data)")
    t.add_argument("--config", help="JSON file of training config fields")
    t.add_argument("--ablation", type=int, default=0, choices=range(0, 8),
                   help="apply single-change variant k to the config")
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true",
                   help="suppress per-epoch log lines on stderr")
    _add_json(t)
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("optimize",
                       help="solve an open-loop waypoint problem")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--waypoints", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--suite", choices=sorted(TRAJECTORY_SUITES),
                   help="benchmark preset: sets the weights and horizon")
    o.add_argument("--horizon", type=int,
                   help="override the horizon T (waypoints are rescheduled)")
    for f in WEIGHT_FLAGS:
        o.add_argument(f"--{f.replace('_', '-')}", dest=f, type=float,
                       help=f"override cost weight {f}")
    o.add_argument("--mode", choices=("next", "closest"), default="next")
    o.add_argument("--iterations", type=int, default=300)
    o.add_argument("--lr", type=float, default=0.5)
    o.add_argument("--u0", type=float, nargs=4, metavar="KPA",
                   help="fixed first actuation (default: model's u_rest)")
    _add_json(o)
    o.set_defaults(func=cmd_optimize)

    e = sub.add_parser("execute",
                       help="play a solved pressure tape on the arm")
    e.add_argument("--solution", required=True, help="optimize output file")
    e.add_argument("--out", required=True)
    _add_json(e)
    e.set_defaults(func=cmd_execute)

    s = sub.add_parser("stress", help="probe a model off the training data")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--test", choices=("static_hold", "ramp", "release"),
                   required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="recording to pick hold setpoints from")
    s.add_argument("--n", type=int, default=50,
                   help="static_hold: setpoint budget")
    s.add_argument("--steps", type=int, default=500,
                   help="static_hold: hold length")
    s.add_argument("--target", type=float, nargs=4, metavar="KPA",
                   default=[95.0, 43.0, 95.0, 43.0],
                   help="ramp: target pressures")
    s.add_argument("--ramp-steps", type=int, default=100)
    s.add_argument("--hold-steps", type=int, default=400)
    s.add_argument("--amplitude", type=float, default=25.0,
                   help="release: excitation amplitude (kPa)")
    s.add_argument("--freq", type=float, default=0.6,
                   help="release: excitation frequency (Hz)")
    _add_json(s)
    s.set_defaults(func=cmd_stress)

    a = sub.add_parser("ablate",
                       help="train and score every single-change variant")
    a.add_argument("--data", required=True)
    a.add_argument("--val", help="held-out recording (default: --data)")
    a.add_argument("--config", help="JSON file of base config fields")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--horizon", type=int, default=25)
    a.add_argument("--windows", type=int, default=50)
    a.add_argument("--iterations", type=int, default=300)
    a.add_argument("--n-setpoints", type=int, default=10)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--quiet", action="store_true")
    _add_json(a)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report",
                       help="re-derive the aggregates stored in run reports")
    r.add_argument("inputs", nargs="+", help="report files to verify")
    r.add_argument("--out", help="write a combined summary document")
    _add_json(r)
    r.set_defaults(func=cmd_report)

    v = sub.add_parser("serve", help="run the realtime simulation service")
    v.add_argument("--checkpoints",
                   help=f"checkpoint directory (${ENV_CHECKPOINT_DIR} wins)")
    v.add_argument("--port", type=int, default=8765)
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--rate", type=float, default=RATE_HZ,
                   help="tick rate in Hz")
    v.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits itself on usage errors / --help
        return EXIT_OK if e.code in (None, 0) else EXIT_USAGE
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: missing file: {e.filename or e}", file=sys.stderr)
        return EXIT_MISSING
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
