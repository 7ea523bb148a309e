"""Single-shooting open-loop control in latent space.

A control problem tracks one or more target observations. Targets are
encoded once; the cost is evaluated on a latent rollout of the learned
dynamics and minimized over the control sequence (the first input is pinned
to the known initial actuation) by projected adaptive-moment gradient
descent with hand-written rollout gradients.

The cost over states i = 1..T (states produced by controls u0..u_{T-1}):

      w_track_z/T   Σ_i ‖z_i − z*_{a(i)}‖²  +  w_track_zdot/T Σ_i ‖ż_i − ż*_{a(i)}‖²
    + w_way_z/K     Σ_k ‖z_{τ_k} − z*_k‖²  +  w_way_zdot/K   Σ_k ‖ż_{τ_k} − ż*_k‖²
    + w_final_z     ‖z_T − z*_{a(T)}‖²     +  w_final_zdot   ‖ż_T − ż*_{a(T)}‖²
    + w_smooth/(T−1) Σ_i ‖Δu_i‖²           +  w_excess/(T−1) Σ_i φ(Δu_i)

with Δu_i = u_i − u_{i−1} for i = 1..T−1, φ(Δu) = ‖max(|Δu| − Δu_max, 0)‖²
elementwise, and a(i) the active waypoint under the "next" or "closest"
rule. Every latent error is divided by s̄² (the checkpoint's validation
latent scale squared) so weights transfer across models.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import io as lio
from .models import rollout, rollout_vjp
from .nets import Adam
from .training import Checkpoint, latent_velocity
from .validation import ContractError, DivergenceError

P_MIN = 0.0
P_MAX = 86.0

WAYPOINT_FLAGS = ("static", "dynamic", "final")


def schedule_waypoints(K: int, T: int) -> np.ndarray:
    """Distribute K target indices uniformly over 1..T.

    τ_1 = 1, τ_K = T, and interior points at 1 + round((k−1)(T−1)/(K−1))
    with exact half-up integer rounding. K = 1 puts the single target at T.
    """
    K, T = int(K), int(T)
    if K < 1:
        raise ContractError(f"need at least one waypoint, got K={K}")
    if K > T:
        raise ContractError(f"cannot place K={K} waypoints on horizon T={T}")
    if K == 1:
        return np.array([T])
    ks = np.arange(K)
    tau = 1 + (2 * ks * (T - 1) + (K - 1)) // (2 * (K - 1))
    return tau


def active_target(i: int, tau, mode: str) -> int:
    """0-based index of the waypoint tracked at state index i (1..T).

    next: first waypoint at or after i; past the last one the final target
    stays active. closest: nearest waypoint, ties broken toward the earlier
    one.
    """
    tau = np.asarray(tau)
    if mode == "next":
        return int(min(np.searchsorted(tau, i, side="left"), len(tau) - 1))
    if mode == "closest":
        return int(np.argmin(np.abs(int(i) - tau)))  # argmin takes first tie
    raise ContractError(f"unknown target mode {mode!r}")


def _active_indices(tau, T: int, mode: str) -> np.ndarray:
    """Vectorized active_target for i = 1..T."""
    i = np.arange(1, T + 1)
    tau = np.asarray(tau)
    if mode == "next":
        # states past the last waypoint index keep tracking the final target
        return np.minimum(np.searchsorted(tau, i, side="left"), len(tau) - 1)
    if mode == "closest":
        return np.argmin(np.abs(i[:, None] - tau[None, :]), axis=1)
    raise ContractError(f"unknown target mode {mode!r}")


def increment_penalty(du, du_max) -> float:
    """‖max(|Δu| − Δu_max, 0)‖², absolute value and max elementwise."""
    over = np.maximum(np.abs(np.asarray(du, dtype=float)) - du_max, 0.0)
    return float(np.sum(over * over))


@dataclass(frozen=True)
class CostWeights:
    """Non-negative term weights plus the per-step increment bound (kPa)."""
    track_z: float = 0.0
    track_zdot: float = 0.0
    way_z: float = 0.0
    way_zdot: float = 0.0
    final_z: float = 0.0
    final_zdot: float = 0.0
    smooth: float = 1e-3
    excess: float = 1.0
    du_max: float = 2.0
    mode: str = "next"

    def __post_init__(self):
        for f in ("track_z", "track_zdot", "way_z", "way_zdot", "final_z",
                  "final_zdot", "smooth", "excess"):
            if getattr(self, f) < 0:
                raise ContractError(f"weight {f} must be non-negative")
        if np.any(np.asarray(self.du_max) <= 0):
            raise ContractError("du_max must be positive")
        if self.mode not in ("next", "closest"):
            raise ContractError(f"unknown target mode {self.mode!r}")


@dataclass
class WaypointSet:
    """Encoded targets: observations, latent positions/velocities, horizon
    indices, and the flag that forced each velocity target ("static" and
    "final" targets carry ż* = 0). u_true optionally records the actuation
    that produced each target observation (used by pressure-error metrics)."""
    obs: np.ndarray          # (K, P)
    z: np.ndarray            # (K, 2m)
    zdot: np.ndarray         # (K, 2m)
    tau: np.ndarray          # (K,) ints, strictly increasing, tau[-1] = T
    flags: tuple = ()
    u_true: np.ndarray | None = None

    def __post_init__(self):
        self.obs = np.atleast_2d(np.asarray(self.obs, dtype=float))
        self.z = np.atleast_2d(np.asarray(self.z, dtype=float))
        self.zdot = np.atleast_2d(np.asarray(self.zdot, dtype=float))
        self.tau = np.asarray(self.tau, dtype=int)
        K = self.obs.shape[0]
        if K < 1:
            raise ContractError("a waypoint set needs at least one target")
        if not self.flags:
            self.flags = ("static",) * K
        self.flags = tuple(self.flags)
        if len(self.flags) != K or self.z.shape[0] != K \
                or self.zdot.shape[0] != K or self.tau.shape != (K,):
            raise ContractError("waypoint field lengths disagree")
        for fl in self.flags:
            if fl not in WAYPOINT_FLAGS:
                raise ContractError(f"unknown waypoint flag {fl!r}")
        if np.any(np.diff(self.tau) <= 0):
            raise ContractError("waypoint indices must be strictly increasing")
        if self.tau[0] < 1:
            raise ContractError("waypoint indices start at 1")
        for k, fl in enumerate(self.flags):
            if fl in ("static", "final") and np.any(self.zdot[k] != 0.0):
                raise ContractError(
                    f"waypoint {k} is {fl} but has a nonzero velocity target")
        if self.u_true is not None:
            self.u_true = np.atleast_2d(np.asarray(self.u_true, dtype=float))
            if self.u_true.shape[0] != K:
                raise ContractError("u_true length disagrees with targets")

    @property
    def K(self) -> int:
        return self.obs.shape[0]

    @property
    def T(self) -> int:
        return int(self.tau[-1])

    def to_doc(self) -> dict:
        doc = {"tau": self.tau, "flags": list(self.flags), "obs": self.obs,
               "z": self.z, "zdot": self.zdot}
        if self.u_true is not None:
            doc["u_true"] = self.u_true
        return doc

    @staticmethod
    def from_doc(doc: dict) -> "WaypointSet":
        missing = [k for k in ("obs", "z", "zdot", "tau", "flags")
                   if k not in doc]
        if missing:
            raise ContractError(
                f"waypoint document is missing {missing}; write these files "
                "with save_waypoints / make_waypoints or the simulator's "
                "export, not by hand")
        u_true = doc.get("u_true")
        return WaypointSet(
            obs=np.asarray(doc["obs"], dtype=float),
            z=np.asarray(doc["z"], dtype=float),
            zdot=np.asarray(doc["zdot"], dtype=float),
            tau=np.asarray(doc["tau"], dtype=int),
            flags=tuple(doc["flags"]),
            u_true=None if u_true is None else np.asarray(u_true, dtype=float))


def save_waypoints(path, wps: WaypointSet) -> None:
    lio.save_waypoints(path, wps.to_doc())


def load_waypoints(path) -> WaypointSet:
    return WaypointSet.from_doc(lio.load_waypoints(path))


def make_waypoints(observations, flags, checkpoint: Checkpoint, K=None,
                   T=None, neighbors=None, u_true=None) -> WaypointSet:
    """Encode K target observations with the checkpoint's encoder (mean mode)
    and schedule them over horizon T.

    flags: per-target "static" / "dynamic" / "final" (None means all static).
    neighbors: per-target (o_prev, o_next) frame pair, or None; a dynamic
    target with neighbors gets its velocity from the encoder Jacobian,
    everything else gets ż* = 0.
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    n_px = checkpoint.system.enc.n_pixels
    if obs.shape[1] != n_px:
        raise ContractError(
            f"target observations have {obs.shape[1]} pixels, "
            f"model expects {n_px}")
    if K is None:
        K = obs.shape[0]
    if K != obs.shape[0]:
        raise ContractError(f"K={K} but {obs.shape[0]} observations given")
    if T is None:
        raise ContractError("horizon T is required to schedule waypoints")
    tau = schedule_waypoints(K, T)
    if flags is None:
        flags = ("static",) * K
    z = checkpoint.encode_mean(obs)
    zdot = np.zeros_like(z)
    if neighbors is not None:
        enc = checkpoint.system.enc
        dt = checkpoint.system.dyn.dt
        for k in range(K):
            if flags[k] == "dynamic" and neighbors[k] is not None:
                o_prev, o_next = neighbors[k]
                zdot[k] = latent_velocity(o_prev, obs[k], o_next, enc, dt)
    return WaypointSet(obs=obs, z=z, zdot=zdot, tau=tau, flags=tuple(flags),
                       u_true=u_true)


@dataclass
class OcpProblem:
    checkpoint: Checkpoint
    xi0: np.ndarray          # initial latent state [z; zdot]
    u0: np.ndarray           # fixed first actuation (4,)
    T: int
    waypoints: WaypointSet
    weights: CostWeights = field(default_factory=CostWeights)
    iterations: int = 500
    lr: float = 0.5
    seed: int = 0
    u_min: float = P_MIN
    u_max: float = P_MAX

    def __post_init__(self):
        self.xi0 = np.asarray(self.xi0, dtype=float)
        self.u0 = np.asarray(self.u0, dtype=float)
        n_xi = self.checkpoint.system.dyn.n_xi
        if self.xi0.shape != (n_xi,):
            raise ContractError(
                f"initial state has shape {self.xi0.shape}, expected ({n_xi},)")
        if self.T < int(self.waypoints.tau[-1]):
            raise ContractError(
                f"horizon T={self.T} shorter than last waypoint index "
                f"{int(self.waypoints.tau[-1])}")
        if np.any(self.u0 < self.u_min) or np.any(self.u0 > self.u_max):
            raise ContractError("u0 outside pressure bounds")


@dataclass
class OcpSolution:
    useq: np.ndarray         # (T, 4), bounds respected, row 0 = u0
    states: np.ndarray       # (T+1, n_xi), row i = state index i
    cost: float
    parts: dict
    trace: list

    def to_doc(self) -> dict:
        return {"useq": self.useq, "states": self.states, "cost": self.cost,
                "parts": dict(self.parts), "trace": list(self.trace)}

    @staticmethod
    def from_doc(doc: dict) -> "OcpSolution":
        return OcpSolution(
            useq=np.asarray(doc["useq"], dtype=float),
            states=np.asarray(doc["states"], dtype=float),
            cost=float(doc["cost"]), parts=dict(doc["parts"]),
            trace=[float(x) for x in doc["trace"]])


def _cost_terms(problem: OcpProblem, states, useq, grad: bool):
    """Shared evaluation: states (T, n_xi) are the rollout outputs for
    i = 1..T. Returns (parts, gstates, g_inc)."""
    w = problem.weights
    wps = problem.waypoints
    T = problem.T
    n_z = problem.checkpoint.system.enc.n_z
    inv_s2 = 1.0 / problem.checkpoint.sbar ** 2
    Z = states[:, :n_z]
    Zd = states[:, n_z:]
    a = _active_indices(wps.tau, T, w.mode)
    ref_z = wps.z[a]
    ref_zd = wps.zdot[a]
    rows_k = wps.tau - 1                      # state index τ_k lives at row τ_k−1

    dz = Z - ref_z
    dzd = Zd - ref_zd
    ez_k = Z[rows_k] - wps.z
    ezd_k = Zd[rows_k] - wps.zdot

    parts = {
        "track_z": w.track_z / T * inv_s2 * float(np.sum(dz * dz)),
        "track_zdot": w.track_zdot / T * inv_s2 * float(np.sum(dzd * dzd)),
        "way_z": w.way_z / wps.K * inv_s2 * float(np.sum(ez_k * ez_k)),
        "way_zdot": w.way_zdot / wps.K * inv_s2 * float(np.sum(ezd_k * ezd_k)),
        "final_z": w.final_z * inv_s2 * float(np.sum(dz[-1] * dz[-1])),
        "final_zdot": w.final_zdot * inv_s2 * float(np.sum(dzd[-1] * dzd[-1])),
    }
    if T > 1:
        du = useq[1:] - useq[:-1]
        over = np.maximum(np.abs(du) - w.du_max, 0.0)
        parts["smooth"] = w.smooth / (T - 1) * float(np.sum(du * du))
        parts["excess"] = w.excess / (T - 1) * float(np.sum(over * over))
    else:
        parts["smooth"] = 0.0
        parts["excess"] = 0.0

    if not grad:
        return parts, None, None

    gstates = np.zeros_like(states)
    gstates[:, :n_z] += 2.0 * w.track_z / T * inv_s2 * dz
    gstates[:, n_z:] += 2.0 * w.track_zdot / T * inv_s2 * dzd
    np.add.at(gstates[:, :n_z], rows_k, 2.0 * w.way_z / wps.K * inv_s2 * ez_k)
    np.add.at(gstates[:, n_z:], rows_k,
              2.0 * w.way_zdot / wps.K * inv_s2 * ezd_k)
    gstates[-1, :n_z] += 2.0 * w.final_z * inv_s2 * dz[-1]
    gstates[-1, n_z:] += 2.0 * w.final_zdot * inv_s2 * dzd[-1]

    g_inc = np.zeros_like(useq)
    if T > 1:
        gd = (2.0 * w.smooth / (T - 1)) * du \
            + (2.0 * w.excess / (T - 1)) * np.sign(du) * over
        g_inc[1:] += gd
        g_inc[:-1] -= gd
    return parts, gstates, g_inc


def ocp_cost(useq, problem: OcpProblem):
    """Cost of a candidate control sequence: (total, per-term breakdown).
    The breakdown entries are weighted, so they sum to the total."""
    useq = np.asarray(useq, dtype=float)
    if useq.shape != (problem.T, 4):
        raise ContractError(
            f"control sequence shape {useq.shape}, expected ({problem.T}, 4)")
    dyn = problem.checkpoint.system.dyn
    states, _ = rollout(dyn, problem.xi0, useq)
    parts, _, _ = _cost_terms(problem, states, useq, grad=False)
    return sum(parts.values()), parts


def ocp_cost_grad(useq, problem: OcpProblem):
    """(total, parts, dJ/du) with the tracking part differentiated through
    the rollout and the increment part added directly."""
    useq = np.asarray(useq, dtype=float)
    dyn = problem.checkpoint.system.dyn
    states, tape = rollout(dyn, problem.xi0, useq)
    parts, gstates, g_inc = _cost_terms(problem, states, useq, grad=True)
    dJ_du, _, _ = rollout_vjp(tape, gstates)
    return sum(parts.values()), parts, dJ_du + g_inc


def solve_ocp(problem: OcpProblem) -> OcpSolution:
    """Projected adaptive-moment descent on u_1..u_{T-1}; u_0 stays fixed.

    Deterministic; starts from a constant hold at u_0, clamps to pressure
    bounds after every step, and returns the best iterate seen. A cost
    trace that rises after iteration 10 only triggers a warning.
    """
    T = problem.T
    u = np.broadcast_to(problem.u0, (T, 4)).copy()
    total, _ = ocp_cost(u, problem)
    if not np.isfinite(total):
        raise DivergenceError(
            f"control cost is non-finite at initialization ({total})", step=0)
    best_u = u.copy()
    best_cost = total
    trace = []
    if T > 1 and problem.iterations > 0:
        var = {"u": u[1:].copy()}
        opt = Adam(var, lr=problem.lr)
        for it in range(problem.iterations):
            u[1:] = var["u"]
            total, _, g = ocp_cost_grad(u, problem)
            trace.append(total)
            if total < best_cost:
                best_cost = total
                best_u = u.copy()
            lr_t = problem.lr * 0.5 * (
                1.0 + np.cos(np.pi * it / problem.iterations))
            opt.step(var, {"u": g[1:]}, lr=lr_t)
            var["u"] = np.clip(var["u"], problem.u_min, problem.u_max)
        u[1:] = var["u"]
        total, _ = ocp_cost(u, problem)
        trace.append(total)
        if total < best_cost:
            best_cost = total
            best_u = u.copy()
    else:
        trace.append(total)
    tail = np.asarray(trace[10:])
    if tail.size > 1 and np.any(np.diff(tail) > 1e-9 * max(1.0, best_cost)):
        warnings.warn("control cost trace rose after iteration 10",
                      RuntimeWarning, stacklevel=2)
    dyn = problem.checkpoint.system.dyn
    states, _ = rollout(dyn, problem.xi0, best_u)
    parts, _, _ = _cost_terms(problem, states, best_u, grad=False)
    return OcpSolution(useq=best_u,
                       states=np.vstack([problem.xi0[None, :], states]),
                       cost=best_cost, parts=parts, trace=trace)
