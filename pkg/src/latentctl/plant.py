"""Synthetic two-segment planar soft arm with pressure lag and a renderer.

Stands in for the hardware and camera: four commanded pressures (two
antagonistic pairs, one per segment) drive two curvature angles through a
first-order pressure lag and damped second-order mechanics,

    p' = p + (dt/τ_p)(clamp(u, 0, 86) − p)
    j q̈ = τ(p) − k q − d q̇        τ_i = g Δp_i, base also feels the distal
                                    pair through a coupling factor

integrated semi-implicitly with internal substeps. The renderer draws the two
chained constant-curvature arcs as Gaussian tubes on a 32×32 grid. Pixel x
coordinates are centered so a sign flip of the curvatures mirrors the image
about the vertical axis bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .validation import ContractError, as_vector

RATE_HZ = 50.0
DT = 1.0 / RATE_HZ
P_MAX = 86.0
U_REST = 43.0


@dataclass(frozen=True)
class PlantParams:
    k_s: float = 1.0          # joint stiffness
    d_s: float = 0.05         # joint damping
    j_s: float = 0.006        # joint inertia
    g_s: float = 0.015        # torque per kPa of pair differential
    coupling: float = 0.25    # distal pair torque leaking into the base joint
    seg_len: float = 10.0     # arc length per segment, image units
    tau_p: float = 0.08       # pressure lag time constant, s (0 disables)
    tau_bias: float = 0.0     # constant bias torque (gravity stand-in)
    p_max: float = P_MAX
    u_rest: float = U_REST
    img_h: int = 32
    img_w: int = 32
    sigma_r: float = 1.0      # tube cross-section width, px
    substeps: int = 4

    def __post_init__(self):
        for name in ("k_s", "d_s", "j_s", "g_s", "seg_len", "p_max"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.tau_p < 0:
            raise ContractError("tau_p must be >= 0")


@dataclass(frozen=True)
class PlantState:
    q: np.ndarray       # 2 curvature angles, rad
    qdot: np.ndarray    # 2 angular rates
    p_act: np.ndarray   # 4 chamber pressures, kPa

    def __post_init__(self):
        object.__setattr__(self, "q", as_vector("q", self.q, 2))
        object.__setattr__(self, "qdot", as_vector("qdot", self.qdot, 2))
        object.__setattr__(self, "p_act", as_vector("p_act", self.p_act, 4))


def rest_state(params: PlantParams) -> PlantState:
    return PlantState(q=np.zeros(2), qdot=np.zeros(2),
                      p_act=np.full(4, params.u_rest))


def pair_torques(p_act, params: PlantParams) -> np.ndarray:
    p = np.asarray(p_act, dtype=float)
    t_base = params.g_s * (p[..., 0] - p[..., 1])
    t_dist = params.g_s * (p[..., 2] - p[..., 3])
    return np.stack([t_base + params.coupling * t_dist + params.tau_bias,
                     t_dist + params.tau_bias], axis=-1)


def plant_step(s: PlantState, u_cmd, params: PlantParams, dt: float = DT) -> PlantState:
    if dt <= 0:
        raise ContractError("dt must be > 0")
    u = np.clip(as_vector("u_cmd", u_cmd), 0.0, params.p_max)
    if params.tau_p == 0.0:
        p = u
    else:
        p = s.p_act + min(1.0, dt / params.tau_p) * (u - s.p_act)
    tau = pair_torques(p, params)
    q, qdot = s.q, s.qdot
    h = dt / params.substeps
    for _ in range(params.substeps):
        qdot = qdot + h * (tau - params.k_s * q - params.d_s * qdot) / params.j_s
        q = q + h * qdot
    return PlantState(q=q, qdot=qdot, p_act=p)


def plant_energy(s: PlantState, params: PlantParams) -> float:
    return float(0.5 * params.j_s * s.qdot @ s.qdot
                 + 0.5 * params.k_s * s.q @ s.q)


def _arc_points(q, params: PlantParams, n_per_seg: int = 12):
    """Polyline along both arcs for a batch of curvature pairs.

    q: (..., 2). Returns (..., 2*n_per_seg + 1, 2) xy points. Heading is
    measured from +y; the chord form x += s·sinc(qs/2L)·sin(φ₀ + qs/2L)
    (and cos for y) is exact and even/odd in q so that q → −q negates x
    bit-for-bit while y is unchanged.
    """
    q = np.asarray(q, dtype=float)
    L = params.seg_len
    base = np.array([0.0, 1.0])
    frac = np.linspace(0.0, 1.0, n_per_seg + 1)   # includes both endpoints
    pts = [np.broadcast_to(base, q.shape[:-1] + (1, 2))]
    x0 = np.broadcast_to(base[0], q.shape[:-1])
    y0 = np.broadcast_to(base[1], q.shape[:-1])
    phi0 = np.zeros(q.shape[:-1])
    for seg in range(2):
        qs = q[..., seg]
        s = frac[1:] * L                           # (n,)
        half = 0.5 * qs[..., None] * frac[1:]      # q s / 2L
        stretch = s * np.sinc(half / np.pi)
        x = x0[..., None] + stretch * np.sin(phi0[..., None] + half)
        y = y0[..., None] + stretch * np.cos(phi0[..., None] + half)
        pts.append(np.stack([x, y], axis=-1))
        x0, y0 = x[..., -1], y[..., -1]
        phi0 = phi0 + qs
    return np.concatenate(pts, axis=-2)


def _pixel_grid(params: PlantParams):
    # x centered on the middle column so col <-> W-1-col negates x exactly
    cols = np.arange(params.img_w) + 0.5 - params.img_w / 2.0
    rows = params.img_h - np.arange(params.img_h) - 0.5
    px = np.broadcast_to(cols[None, :], (params.img_h, params.img_w))
    py = np.broadcast_to(rows[:, None], (params.img_h, params.img_w))
    return np.stack([px.ravel(), py.ravel()], axis=-1)   # (H*W, 2)


def render_frames(q_batch, params: PlantParams, chunk: int = 64) -> np.ndarray:
    """Render a batch of curvature pairs; q_batch (F, 2) → (F, H, W) in [0,1]."""
    q_batch = np.asarray(q_batch, dtype=float)
    if q_batch.ndim != 2 or q_batch.shape[1] != 2:
        raise ContractError(f"q_batch must be (F, 2), got {q_batch.shape}")
    grid = _pixel_grid(params)                     # (P, 2)
    F = q_batch.shape[0]
    n_pt = 2 * 12 + 1
    out = np.empty((F, params.img_h * params.img_w))
    inv2s2 = 1.0 / (2.0 * params.sigma_r ** 2)
    for lo in range(0, F, chunk):
        qs = q_batch[lo:lo + chunk]
        pts = _arc_points(qs, params)              # (f, n_pt, 2)
        a = pts[:, :-1, :]                         # (f, n_seg, 2)
        d = pts[:, 1:, :] - a
        dd = np.sum(d * d, axis=-1)                # (f, n_seg)
        rel = grid[None, :, None, :] - a[:, None, :, :]   # (f, P, n_seg, 2)
        t = np.sum(rel * d[:, None, :, :], axis=-1) / np.maximum(dd[:, None, :], 1e-300)
        t = np.clip(t, 0.0, 1.0)
        near = rel - t[..., None] * d[:, None, :, :]
        dist2 = np.sum(near * near, axis=-1)       # (f, P, n_seg)
        # per-arc minimum, then sum the two tube profiles
        half = n_pt // 2
        d2a = dist2[..., :half].min(axis=-1)
        d2b = dist2[..., half:].min(axis=-1)
        out[lo:lo + chunk] = np.clip(
            np.exp(-d2a * inv2s2) + np.exp(-d2b * inv2s2), 0.0, 1.0)
    return out.reshape(F, params.img_h, params.img_w)


def render(s: PlantState, params: PlantParams) -> np.ndarray:
    """Grayscale (H, W) image of the arm pose, values in [0, 1]."""
    return render_frames(s.q[None, :], params)[0]


@dataclass
class Sequence:
    time: np.ndarray     # (n,)
    u_cmd: np.ndarray    # (n, 4) commanded kPa
    p_act: np.ndarray    # (n, 4) measured kPa
    pixels: np.ndarray   # (n, H*W) float32 in [0, 1]

    def __len__(self):
        return self.time.shape[0]


@dataclass
class Dataset:
    sequences: list
    o_rest: np.ndarray   # (H*W,) float32
    u_rest: np.ndarray   # (4,)
    rate_hz: float = RATE_HZ
    img_h: int = 32
    img_w: int = 32

    @property
    def n_total(self):
        return sum(len(s) for s in self.sequences)


def _setpoint_profile(rng, n, dt, lo, hi, hold_lo, hold_hi, ramp: bool):
    """Per-channel piecewise levels, optionally linearly ramped between."""
    t_knots = [0.0]
    levels = [rng.uniform(lo, hi)]
    while t_knots[-1] < n * dt:
        t_knots.append(t_knots[-1] + rng.uniform(hold_lo, hold_hi))
        levels.append(rng.uniform(lo, hi))
    t = np.arange(n) * dt
    if ramp:
        return np.interp(t, t_knots, levels)
    idx = np.searchsorted(t_knots, t, side="right") - 1
    return np.asarray(levels)[idx]


def command_profile(kind: str, duration_s: float, seed: int,
                    params: PlantParams, rest_s: float = 2.0) -> np.ndarray:
    """Commanded pressures (n, 4) at 50 Hz, rest hold for the first rest_s."""
    if duration_s < 10.0:
        raise ContractError("duration must be >= 10 s")
    if kind not in ("sinusoidal", "step"):
        raise ContractError(f"unknown dataset kind {kind!r}")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * RATE_HZ))
    n_rest = int(round(rest_s * RATE_HZ))
    t = np.arange(n) * DT
    u = np.empty((n, 4))
    if kind == "sinusoidal":
        for ch in range(4):
            base = _setpoint_profile(rng, n, DT, 10.0, params.p_max - 10.0,
                                     8.0, 15.0, ramp=True)
            for _ in range(2):
                a = rng.uniform(5.0, 20.0)
                f = rng.uniform(0.05, 0.5)
                ph = rng.uniform(0.0, 2 * np.pi)
                base = base + a * np.sin(2 * np.pi * f * t + ph)
            u[:, ch] = base
    else:
        # one 4-channel setpoint vector per hold interval
        t_knots = [0.0]
        levels = [rng.uniform(0.0, params.p_max, size=4)]
        while t_knots[-1] < duration_s:
            t_knots.append(t_knots[-1] + rng.uniform(1.0, 4.0))
            levels.append(rng.uniform(0.0, params.p_max, size=4))
        idx = np.searchsorted(t_knots, t, side="right") - 1
        u = np.asarray(levels)[idx]
    u = np.clip(u, 0.0, params.p_max)
    u[:n_rest] = params.u_rest
    return u


def generate_dataset(kind: str, duration_s: float, seed: int,
                     params: PlantParams | None = None) -> Dataset:
    """Simulate and render one recording; deterministic in (kind, duration, seed)."""
    params = params or PlantParams()
    u = command_profile(kind, duration_s, seed, params)
    n = u.shape[0]
    s = rest_state(params)
    q_hist = np.empty((n, 2))
    p_hist = np.empty((n, 4))
    for k in range(n):
        q_hist[k] = s.q
        p_hist[k] = s.p_act
        s = plant_step(s, u[k], params)
    pixels = render_frames(q_hist, params).reshape(n, -1).astype(np.float32)
    o_rest = render(rest_state(params), params).ravel().astype(np.float32)
    seq = Sequence(time=np.arange(n) * DT, u_cmd=u, p_act=p_hist, pixels=pixels)
    return Dataset(sequences=[seq], o_rest=o_rest,
                   u_rest=np.full(4, params.u_rest), rate_hz=RATE_HZ,
                   img_h=params.img_h, img_w=params.img_w)


def execute_commands(u_seq, params: PlantParams | None = None,
                     state: PlantState | None = None):
    """Run a command sequence open loop; returns (states list, frames (T,H,W))."""
    params = params or PlantParams()
    s = state or rest_state(params)
    u_seq = np.asarray(u_seq, dtype=float)
    if u_seq.ndim != 2 or u_seq.shape[1] != 4:
        raise ContractError(f"u_seq must be (T, 4), got {u_seq.shape}")
    states = []
    q_hist = np.empty((u_seq.shape[0], 2))
    for k in range(u_seq.shape[0]):
        q_hist[k] = s.q
        states.append(s)
        s = plant_step(s, u_seq[k], params)
    return states, render_frames(q_hist, params)
