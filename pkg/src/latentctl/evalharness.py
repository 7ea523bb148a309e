"""Evaluation protocol: open-loop execution on the simulated arm, tracking
and drift metrics, stress probes, and the ablation grid.

Everything here is a pure function of saved artifacts (checkpoints, datasets,
solutions), so any reported number can be recomputed bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from .models import OscillatorModel, rollout, _sub
from .ocp import (CostWeights, OcpProblem, active_target, make_waypoints,
                  solve_ocp)
from .plant import PlantParams, execute_commands, render, rest_state
from .training import (ABLATIONS, apply_ablation, config_diff, sample_batch,
                       train)
from .validation import ContractError, DivergenceError

__all__ = [
    "TrajectorySuite", "TRAJECTORY_SUITES", "execute_open_loop", "image_mse",
    "waypoint_mse", "pressure_mae", "reconstruction_floor",
    "multistep_prediction_mse", "Setpoint", "select_setpoints",
    "run_setpoint_suite", "setpoint_pressure_mae", "model_equilibrium",
    "oscillator_forces", "equilibrium_force_residual", "ramp_profile",
    "release_profile", "stress_static_hold", "stress_ramp", "stress_release",
    "run_ablation_study",
]


# ---------------------------------------------------------------- suites

@dataclass(frozen=True)
class TrajectorySuite:
    """One row of the benchmark grid: how many problems, the horizon, the
    waypoint count, and the six tracking weights."""
    name: str
    count: int
    horizon: int            # T, steps at 50 Hz
    n_waypoints: int        # K
    track_z: float
    track_zdot: float
    way_z: float
    way_zdot: float
    final_z: float
    final_zdot: float
    kind: str               # "setpoint" | "dynamic"

    def cost_weights(self, smooth: float = 1e-3, excess: float = 1.0,
                     du_max: float = 2.0, mode: str = "next") -> CostWeights:
        return CostWeights(
            track_z=self.track_z, track_zdot=self.track_zdot,
            way_z=self.way_z, way_zdot=self.way_zdot,
            final_z=self.final_z, final_zdot=self.final_zdot,
            smooth=smooth, excess=excess, du_max=du_max, mode=mode)


def _suite(name, count, T, K, wq, wqd, wqk, wqdk, wqf, wqdf, kind):
    return TrajectorySuite(name, count, T, K, wq, wqd, wqk, wqdk, wqf, wqdf,
                           kind)


TRAJECTORY_SUITES = {
    "setpoint_normal":      _suite("setpoint_normal", 9, 100, 2,
                                   1.0, 0.002, 0.0, 0.0, 0.0, 0.0, "setpoint"),
    "setpoint_extrapolate": _suite("setpoint_extrapolate", 6, 100, 2,
                                   1.0, 0.002, 0.0, 0.0, 0.0, 0.0, "setpoint"),
    "dynamic_normal":       _suite("dynamic_normal", 5, 200, 8,
                                   1.0, 0.0, 0.0, 0.0, 0.0, 0.002, "dynamic"),
    "dynamic_fast":         _suite("dynamic_fast", 3, 150, 8,
                                   1.0, 0.0, 0.0, 0.0, 0.0, 0.002, "dynamic"),
    "dynamic_upswing":      _suite("dynamic_upswing", 3, 150, 3,
                                   0.0, 0.0, 1.0, 0.002, 0.0, 0.0, "dynamic"),
    "dynamic_long":         _suite("dynamic_long", 5, 1000, 22,
                                   1.0, 0.0, 0.0, 0.0, 0.0, 0.002, "dynamic"),
}


# ------------------------------------------------------- plant execution

def execute_open_loop(useq, params: PlantParams | None = None, state=None):
    """Apply T commands to the simulated arm; returns (states, frames) with
    T+1 entries each, the pre-command configuration included.

    frames follow the dataset observation convention: flattened (T+1, H*W)
    float32. No feedback: the tape is played as is.
    """
    useq = np.asarray(useq, dtype=float)
    if useq.ndim != 2 or useq.shape[1] != 4:
        raise ContractError(f"useq must be (T, 4), got {useq.shape}")
    # execute_commands renders pre-step states only; repeating the last
    # command once buys the post-final frame and discards the extra state.
    pad = np.concatenate([useq, useq[-1:]], axis=0)
    states, frames = execute_commands(pad, params=params, state=state)
    return states, frames.reshape(len(pad), -1).astype(np.float32)


# ----------------------------------------------------------------- metrics

def image_mse(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ContractError(f"frame shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def waypoint_mse(frames, waypoints, kind: str = "dynamic",
                 mode: str = "next") -> float:
    """Image-space tracking error of an executed trajectory.

    "dynamic" scores the frames at the scheduled instants against their
    waypoints, the initial one (tau == 1) excluded. "setpoint" scores every
    post-initial frame against the target active at that instant and
    averages; `mode` picks the activity rule. frames[i] must be the
    observation after i commands, so at least waypoints.T + 1 rows.
    """
    frames = np.asarray(frames, dtype=float)
    if frames.ndim != 2 or frames.shape[0] < waypoints.T + 1:
        raise ContractError(
            f"need at least {waypoints.T + 1} frames, got {frames.shape}")
    if kind == "dynamic":
        errs = [image_mse(frames[t], o)
                for t, o in zip(waypoints.tau, waypoints.obs) if t > 1]
        if not errs:
            raise ContractError("no waypoint after the initial frame")
    elif kind == "setpoint":
        errs = [image_mse(frames[i],
                          waypoints.obs[active_target(i, waypoints.tau, mode)])
                for i in range(1, frames.shape[0])]
    else:
        raise ContractError(f"unknown kind {kind!r}")
    return float(np.mean(errs))


def pressure_mae(u_pred, u_true) -> float:
    """Mean absolute error between two pressure arrays of equal shape, kPa."""
    a = np.asarray(u_pred, dtype=float)
    b = np.asarray(u_true, dtype=float)
    if a.shape != b.shape:
        raise ContractError(f"pressure shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def reconstruction_floor(checkpoint, frames) -> float:
    """Mean autoencoding image MSE: the noise floor drift is read against."""
    o = np.asarray(frames, dtype=float)
    if o.ndim == 1:
        o = o[None]
    rec = checkpoint.decode(checkpoint.encode_mean(o))
    return float(np.mean((rec - o) ** 2))


def multistep_prediction_mse(checkpoint, dataset, horizon: int = 25,
                             n_windows: int = 50, seed: int = 0) -> float:
    """Decoded open-loop prediction error over random validation windows.

    Each window seeds the latent state from the first three frames, rolls
    `horizon` steps under the measured actuations, and is scored against the
    recorded images. Returns the mean over all windows, steps, and pixels.
    """
    rng = np.random.default_rng(seed)
    batch = sample_batch(dataset, horizon, n_windows, rng)
    xi0 = checkpoint.latent_state(batch.obs[:, 0], batch.obs[:, 1],
                                  batch.obs[:, 2])
    dyn = checkpoint.system.dyn
    states, _ = rollout(dyn, xi0, np.swapaxes(batch.u, 0, 1))
    zs = states[..., :dyn.n_z]
    dec = checkpoint.decode(zs.reshape(-1, dyn.n_z))
    dec = dec.reshape(horizon, n_windows, -1)
    targets = np.swapaxes(batch.obs[:, 2:2 + horizon], 0, 1)
    return float(np.mean((dec - targets) ** 2))


# -------------------------------------------------------------- setpoints

@dataclass(frozen=True)
class Setpoint:
    """A steady frame from a hold dataset with its measured actuation."""
    seq_index: int
    t: int
    obs: np.ndarray      # (H*W,) float32
    u: np.ndarray        # (4,) kPa


def select_setpoints(dataset, n: int = 50, window: int = 25,
                     motion_tol: float = 1e-5, pressure_tol: float = 0.25,
                     min_dist: float = 1e-3, min_gap: int = 50,
                     seed: int = 0) -> list:
    """Pick up to n steady, visibly displaced frames from a hold dataset.

    A frame qualifies when the image and the measured pressures have both
    been still over the trailing `window` steps and the image sits at least
    `min_dist` MSE away from the rest frame. Qualifying frames closer than
    `min_gap` steps to the previous pick are dropped; a surplus is thinned
    by a seeded random draw.
    """
    o_rest = np.asarray(dataset.o_rest, dtype=float)
    found = []
    for si, seq in enumerate(dataset.sequences):
        if len(seq) <= window:
            continue
        px = np.asarray(seq.pixels, dtype=float)
        motion = np.mean((px[window:] - px[:-window]) ** 2, axis=1)
        du = np.max(np.abs(seq.p_act[window:] - seq.p_act[:-window]), axis=1)
        dist = np.mean((px[window:] - o_rest) ** 2, axis=1)
        ok = (motion < motion_tol) & (du < pressure_tol) & (dist > min_dist)
        last = -min_gap
        for j in np.nonzero(ok)[0]:
            t = int(j) + window
            if t - last < min_gap:
                continue
            found.append(Setpoint(si, t, seq.pixels[t].copy(),
                                  np.array(seq.p_act[t], dtype=float)))
            last = t
    if not found:
        raise ContractError("no steady setpoint frames found")
    if len(found) > n:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(found), size=n, replace=False))
        found = [found[i] for i in keep]
    return found


def _rest_xi(checkpoint) -> np.ndarray:
    z = checkpoint.encode_mean(np.asarray(checkpoint.o_rest, dtype=float))
    return np.concatenate([z, np.zeros_like(z)])


def _setpoint_problem(checkpoint, o_init, xi0, target_obs,
                      suite: TrajectorySuite, weights: CostWeights,
                      iterations: int, lr: float) -> OcpProblem:
    wps = make_waypoints([o_init, target_obs], ["static", "static"],
                         checkpoint, T=suite.horizon)
    return OcpProblem(checkpoint=checkpoint, xi0=xi0,
                      u0=np.asarray(checkpoint.u_rest, dtype=float),
                      T=suite.horizon, waypoints=wps, weights=weights,
                      iterations=iterations, lr=lr)


def run_setpoint_suite(checkpoint, setpoints, suite: TrajectorySuite | None = None,
                       plant_params: PlantParams | None = None,
                       iterations: int = 600, lr: float = 0.5,
                       weights: CostWeights | None = None) -> dict:
    """Solve each setpoint problem from rest and play the tape on the arm.

    Per target: the solved pressures, the executed frame error at the end of
    the horizon (mse_final), the activity-averaged tracking error
    (mse_track), and the do-nothing baseline MSE(initial, target). ratio is
    mse_final / mse_baseline, the fraction of the initial error left.
    300 iterations leave the solves visibly short of converged on trained
    checkpoints, so the default budget is doubled; the cost trace still
    flattens well before the end.
    """
    suite = suite or TRAJECTORY_SUITES["setpoint_normal"]
    w = weights or suite.cost_weights()
    params = plant_params or PlantParams()
    s0 = rest_state(params)
    o_init = np.asarray(render(s0, params), dtype=np.float32).reshape(-1)
    xi0 = np.concatenate([checkpoint.encode_mean(np.asarray(o_init, float)),
                          np.zeros(checkpoint.system.dyn.n_z)])
    records = []
    for sp in setpoints:
        prob = _setpoint_problem(checkpoint, o_init, xi0, sp.obs, suite, w,
                                 iterations, lr)
        sol = solve_ocp(prob)
        _, frames = execute_open_loop(sol.useq, params=params, state=s0)
        baseline = image_mse(o_init, sp.obs)
        final = image_mse(frames[-1], sp.obs)
        records.append({
            "seq_index": sp.seq_index, "t": sp.t,
            "u_true": np.array(sp.u, dtype=float),
            "u_final": np.array(sol.useq[-1], dtype=float),
            "cost": sol.cost,
            "mse_final": final,
            "mse_track": waypoint_mse(frames, prob.waypoints,
                                      kind="setpoint", mode=w.mode),
            "mse_baseline": baseline,
            "ratio": final / baseline,
        })
    return {
        "suite": suite.name,
        "records": records,
        "mse_final_mean": float(np.mean([r["mse_final"] for r in records])),
        "mse_track_mean": float(np.mean([r["mse_track"] for r in records])),
        "pressure_mae": pressure_mae(
            np.array([r["u_final"] for r in records]),
            np.array([r["u_true"] for r in records])),
    }


def setpoint_pressure_mae(checkpoint, setpoints, iterations: int = 300,
                          lr: float = 0.5) -> float:
    """MAE between solver-final and measured pressures over the setpoints.

    Pure latent-side metric: no plant execution, just the solved tape's last
    command against the actuation that produced the target frame.
    """
    suite = TRAJECTORY_SUITES["setpoint_normal"]
    w = suite.cost_weights()
    o_init = np.asarray(checkpoint.o_rest, dtype=np.float32).reshape(-1)
    xi0 = _rest_xi(checkpoint)
    preds, trues = [], []
    for sp in setpoints:
        prob = _setpoint_problem(checkpoint, o_init, xi0, sp.obs, suite, w,
                                 iterations, lr)
        sol = solve_ocp(prob)
        preds.append(sol.useq[-1])
        trues.append(sp.u)
    return pressure_mae(np.array(preds), np.array(trues))


# ---------------------------------------------------------- stress probes

def model_equilibrium(checkpoint, u, steps: int = 3000):
    """Settle the latent model under a constant actuation, starting at rest.

    Returns (xi_eq, frame): the final latent state and its decoded image.
    """
    dyn = checkpoint.system.dyn
    useq = np.tile(np.asarray(u, dtype=float), (int(steps), 1))
    states, _ = rollout(dyn, _rest_xi(checkpoint), useq)
    xi_eq = states[-1]
    return xi_eq, checkpoint.decode(xi_eq[:dyn.n_z])


def oscillator_forces(checkpoint, states, useq):
    """Latent force split along a trajectory: (excitation B(u), stiffness
    -K(z - z0)). states are post-step, paired with the command that produced
    them. Oscillator families only."""
    dyn = checkpoint.system.dyn
    if not isinstance(dyn, OscillatorModel):
        raise ContractError("force decomposition needs the oscillator family")
    p = dyn._p(None)
    states = np.asarray(states, dtype=float)
    f_exc = dyn.bnet.forward(_sub(p, "bnet/"), np.asarray(useq, dtype=float))
    f_stiff = -(states[..., :dyn.n_z] - p["z0"]) @ p["K"].T
    return f_exc, f_stiff


def equilibrium_force_residual(checkpoint, xi, u) -> float:
    """|B(u) - K(z - z0)| / |B(u)| at a claimed equilibrium state."""
    f_exc, f_stiff = oscillator_forces(checkpoint, np.asarray(xi)[None], u)
    r = np.linalg.norm(f_exc + f_stiff[0])      # balance: B(u) = K(z - z0)
    return float(r / max(np.linalg.norm(f_exc), 1e-300))


def ramp_profile(u_from, u_to, ramp_steps: int = 100,
                 hold_steps: int = 400) -> np.ndarray:
    """Half-cosine blend reaching u_to exactly at step ramp_steps, then held."""
    u_from = np.asarray(u_from, dtype=float)
    u_to = np.asarray(u_to, dtype=float)
    t = np.arange(1, int(ramp_steps) + 1) / ramp_steps
    blend = 0.5 * (1.0 - np.cos(np.pi * t))
    ramp = u_from + blend[:, None] * (u_to - u_from)
    ramp[-1] = u_to                             # pin against rounding
    return np.concatenate([ramp, np.tile(u_to, (int(hold_steps), 1))])


def release_profile(u_rest, amplitude: float = 25.0, freq_hz: float = 0.6,
                    excite_steps: int = 250, settle_steps: int = 250,
                    dt: float = 0.02) -> np.ndarray:
    """Phase-staggered sinusoid about the rest actuation, then a hard release."""
    u_rest = np.asarray(u_rest, dtype=float)
    t = np.arange(1, int(excite_steps) + 1) * dt
    phase = np.array([0.0, 0.5, 1.0, 1.5]) * np.pi
    exc = u_rest + amplitude * np.sin(2 * np.pi * freq_hz * t[:, None] + phase)
    return np.concatenate([exc, np.tile(u_rest, (int(settle_steps), 1))])


def _decoded_drift(checkpoint, xi0, useq, ref) -> np.ndarray:
    """Roll from xi0 under useq and score every decoded frame against ref.
    Returns (mse_series (T+1,), latent states); series entry 0 is the
    starting state itself."""
    dyn = checkpoint.system.dyn
    states, _ = rollout(dyn, xi0, useq)
    zs = np.concatenate([xi0[None, :dyn.n_z], states[:, :dyn.n_z]], axis=0)
    dec = checkpoint.decode(zs)
    return np.mean((dec - np.asarray(ref, dtype=float)) ** 2, axis=1), states


def stress_static_hold(checkpoint, setpoints, steps: int = 500) -> np.ndarray:
    """Hold each setpoint's measured pressure and track the decoded drift
    from the starting observation. Returns (n, steps+1); column 0 is the
    pure autoencoding error."""
    out = np.empty((len(setpoints), int(steps) + 1))
    for i, sp in enumerate(setpoints):
        o = np.asarray(sp.obs, dtype=float)
        z = checkpoint.encode_mean(o)
        xi0 = np.concatenate([z, np.zeros_like(z)])
        useq = np.tile(np.asarray(sp.u, dtype=float), (int(steps), 1))
        out[i], _ = _decoded_drift(checkpoint, xi0, useq, o)
    return out


def stress_ramp(checkpoint, u_target, ramp_steps: int = 100,
                hold_steps: int = 400, settle_steps: int = 3000) -> dict:
    """Ramp from the rest actuation to a (possibly extrapolated) target and
    hold, scoring against the model's own settled frame at that target.

    The reference is what the model believes the held target looks like, so
    the series measures convergence, not plant fidelity. For oscillator
    families the excitation / stiffness force split is logged along the way
    and the terminal balance residual is reported.
    """
    u_rest = np.asarray(checkpoint.u_rest, dtype=float)
    useq = ramp_profile(u_rest, u_target, ramp_steps, hold_steps)
    xi_eq, ref = model_equilibrium(checkpoint, u_target, steps=settle_steps)
    series, states = _decoded_drift(checkpoint, _rest_xi(checkpoint), useq, ref)
    out = {"useq": useq, "mse_to_target": series, "target_frame": ref,
           "xi_eq": xi_eq, "states": states}
    if isinstance(checkpoint.system.dyn, OscillatorModel):
        f_exc, f_stiff = oscillator_forces(checkpoint, states, useq)
        out["force_excitation"] = f_exc
        out["force_stiffness"] = f_stiff
        out["balance_residual"] = equilibrium_force_residual(
            checkpoint, xi_eq, np.asarray(u_target, dtype=float))
    return out


def stress_release(checkpoint, amplitude: float = 25.0, freq_hz: float = 0.6,
                   excite_steps: int = 250, settle_steps: int = 250) -> dict:
    """Shake the model with an in-range excitation, snap back to the rest
    actuation, and track the decoded distance to the rest frame."""
    useq = release_profile(checkpoint.u_rest, amplitude, freq_hz,
                           excite_steps, settle_steps,
                           dt=checkpoint.system.dyn.dt)
    series, _ = _decoded_drift(checkpoint, _rest_xi(checkpoint), useq,
                               np.asarray(checkpoint.o_rest, dtype=float))
    return {"useq": useq, "mse_to_rest": series,
            "release_step": int(excite_steps)}


# ------------------------------------------------------------ ablation grid

def run_ablation_study(base_config, train_set, val_set, setpoints,
                       horizon: int = 25, n_windows: int = 50,
                       iterations: int = 300, seed: int = 0,
                       log=None) -> dict:
    """Train the reference model plus every single-change variant and score
    each on open-loop prediction MSE and setpoint pressure MAE.

    A diverging variant is recorded and the grid moves on. Each variant's
    config is checked to differ from the base in exactly one field.
    """
    grid = [("full", "reference", base_config)]
    grid += [(f"ablation_{k}", ABLATIONS[k][0], apply_ablation(base_config, k))
             for k in sorted(ABLATIONS)]
    report = {"horizon": int(horizon), "n_windows": int(n_windows),
              "iterations": int(iterations), "seed": int(seed), "models": {}}
    for name, label, cfg in grid:
        diff = config_diff(base_config, cfg)
        if name != "full" and len(diff) != 1:
            raise ContractError(
                f"{name} must change exactly one field, got {diff}")
        entry = {"label": label, "config_diff": diff, "multistep_mse": None,
                 "pressure_mae": None, "status": "ok"}
        try:
            ckpt = train(cfg, train_set, val_set, log=log)
            entry["multistep_mse"] = multistep_prediction_mse(
                ckpt, val_set, horizon=horizon, n_windows=n_windows,
                seed=seed)
            entry["pressure_mae"] = setpoint_pressure_mae(
                ckpt, setpoints, iterations=iterations)
        except DivergenceError as e:
            entry["status"] = f"diverged: {e}"
        report["models"][name] = entry
    return report
