"""Encoders, decoders, training losses, and the identification loop.

A system is (encoder φ, decoder ψ, latent dynamics f_dyn, rest latent z₀).
The encoder is a small variational net o → (μ, log σ²); position latents are
sampled for static reconstruction and taken at the mean for everything
dynamic. Latent velocities come from the encoder Jacobian applied to a
central difference of frames,

    ż(t) = J_φ(o_t) · (o_{t+1} − o_{t−1}) / (2Δt)

computed as an exact forward directional derivative of the mean head.

Training minimizes

    w_static · MSE(ψ(z_sampled), o)                       static reconstruction
  + w_dyn    · mean_h MSE(ψ(ẑ_h), o_{t+h})                decoded h-step rollouts
  + w_latent · mean_h [MSE(ẑ_h, z_{t+h}) + MSE(Δt ẑ̇_h, Δt ż_{t+h})]
  + w_rest   · ½[MSE(φ(o_rest), z₀) + MSE([f_dyn]₁, z₀) + MSE(Δt[f_dyn]₂, 0)]
  + β w_kl   · (−1/2N) ΣΣ (1 + log σ² − (μ − z₀)² − σ²)

with the rollout horizon H following a non-decreasing curriculum. The KL term
is centered on z₀ only for the oscillator + keypoint_broadcast configuration;
other configurations use the plain zero-centered prior. All gradients are
hand-written; the velocity targets are differentiated exactly through the
Jacobian-vector product (second-order tanh terms included).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import io as lio
from .models import (ExcitationNet, KoopmanModel, MlpDynModel, OscillatorModel,
                     rollout, rollout_vjp, _pfx, _sub)
from .nets import Adam, Mlp, sigmoid, tree_add
from .validation import ContractError, DivergenceError


# ------------------------------------------------------------------ encoder

class Encoder:
    """Dense variational encoder: pixels (P) → (μ, log σ²), each 2m."""

    def __init__(self, n_pixels: int, m: int, hidden=(128, 128)):
        self.n_pixels = int(n_pixels)
        self.m = int(m)
        self.n_z = 2 * self.m
        self.net = Mlp([self.n_pixels, *hidden, 2 * self.n_z])
        self.params: dict = {}

    def init_params(self, rng: np.random.Generator) -> dict:
        p = self.net.init_params(rng)
        # start with tight posteriors: bias the logvar head to exp(-4)
        p[f"b{self.net.n_layers - 1}"][self.n_z:] = -4.0
        self.params = p
        return p

    def _p(self, params):
        return self.params if params is None else params

    def forward_cache(self, params, o):
        out, cache = self.net.forward_cache(params, o)
        return out[..., :self.n_z], out[..., self.n_z:], cache

    def mean(self, o, params=None):
        mu, _, _ = self.forward_cache(self._p(params), o)
        return mu


def encode(o, enc: Encoder, mode: str = "mean", params=None,
           rng: np.random.Generator | None = None):
    """Returns (z, μ, log σ²). mode "mean" is deterministic; "sample" draws
    z = μ + σ ε with ε from rng (required)."""
    if mode not in ("mean", "sample"):
        raise ContractError(f"unknown encode mode {mode!r}")
    mu, logvar, _ = enc.forward_cache(enc._p(params), np.asarray(o, dtype=float))
    if mode == "mean":
        return mu, mu, logvar
    if rng is None:
        raise ContractError("sample mode needs an rng")
    z = mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)
    return z, mu, logvar


def latent_velocity(o_prev, o, o_next, enc: Encoder, dt: float, params=None):
    """ż = J_φ(o) · (o_next − o_prev) / (2 dt), mean head only."""
    params = enc._p(params)
    o = np.asarray(o, dtype=float)
    v = (np.asarray(o_next, dtype=float) - np.asarray(o_prev, dtype=float)) \
        / (2.0 * dt)
    _, _, cache = enc.forward_cache(params, o)
    dy = enc.net.jvp(params, cache, v)
    return dy[..., :enc.n_z]


# ----------------------------------------------------------------- decoders

class DenseDecoder:
    """z (2m) → sigmoid(dense net) → pixels (P)."""

    variant = "dense"

    def __init__(self, n_pixels: int, m: int, hidden=(128, 128)):
        self.n_pixels = int(n_pixels)
        self.m = int(m)
        self.n_z = 2 * self.m
        self.net = Mlp([self.n_z, *hidden, self.n_pixels])
        self.params: dict = {}

    def init_params(self, rng: np.random.Generator) -> dict:
        p = self.net.init_params(rng)
        p[f"b{self.net.n_layers - 1}"][:] = -2.0     # start near-black
        self.params = p
        return p

    def _p(self, params):
        return self.params if params is None else params

    def decode_cache(self, params, z):
        pre, cache = self.net.forward_cache(params, z)
        img = sigmoid(pre)
        return img, (cache, img)

    def decode(self, z, params=None):
        return self.decode_cache(self._p(params), z)[0]

    def vjp(self, params, cache, gimg):
        net_cache, img = cache
        gpre = gimg * img * (1.0 - img)
        return self.net.vjp(params, net_cache, gpre)


class KeypointDecoder:
    """One Gaussian blob per latent pair, stamped at an affine image position.

    pos_j = A_j z_pair_j + c_j;  field_j(p) = amp_j exp(−½ dᵀ Q_j d),
    d = p − pos_j, Q_j = S_jᵀS_j + εI;  out = sigmoid(bias + Σ_j field_j).
    Moving one latent pair moves exactly its own blob (by the affine image of
    the latent shift); every other blob field is untouched by construction.
    """

    variant = "keypoint_broadcast"
    EPS_Q = 1e-3

    def __init__(self, img_h: int, img_w: int, m: int):
        self.img_h = int(img_h)
        self.img_w = int(img_w)
        self.n_pixels = self.img_h * self.img_w
        self.m = int(m)
        self.n_z = 2 * self.m
        cols = np.arange(self.img_w) + 0.5 - self.img_w / 2.0
        rows = self.img_h - np.arange(self.img_h) - 0.5
        px = np.broadcast_to(cols[None, :], (self.img_h, self.img_w)).ravel()
        py = np.broadcast_to(rows[:, None], (self.img_h, self.img_w)).ravel()
        self.grid = np.stack([px, py], axis=-1)          # (P, 2)
        self.params: dict = {}

    def init_params(self, rng: np.random.Generator) -> dict:
        p = {"bias": np.array(-3.0)}
        ys = np.linspace(4.0, 4.0 + 7.0 * (self.m - 1), self.m)
        for j in range(self.m):
            p[f"A{j}"] = 3.0 * np.eye(2) + 0.1 * rng.standard_normal((2, 2))
            p[f"c{j}"] = np.array([0.0, ys[j]])
            p[f"S{j}"] = np.eye(2) / 2.5
            p[f"logamp{j}"] = np.array(np.log(5.0))
        self.params = p
        return p

    def _p(self, params):
        return self.params if params is None else params

    def positions(self, z, params=None):
        """Blob centers (..., m, 2) in image coordinates."""
        params = self._p(params)
        z = np.asarray(z, dtype=float)
        pairs = z.reshape(z.shape[:-1] + (self.m, 2))
        return np.stack([pairs[..., j, :] @ params[f"A{j}"].T + params[f"c{j}"]
                         for j in range(self.m)], axis=-2)

    def blob_fields(self, z, params=None, grid=None):
        """Per-blob fields before summation: (..., m, P)."""
        params = self._p(params)
        grid = self.grid if grid is None else np.asarray(grid, dtype=float)
        pos = self.positions(z, params)
        fields = []
        for j in range(self.m):
            Q = params[f"S{j}"].T @ params[f"S{j}"] + self.EPS_Q * np.eye(2)
            d = grid - pos[..., j, None, :]              # (..., P, 2)
            expo = -0.5 * np.einsum("...pi,ij,...pj->...p", d, Q, d)
            fields.append(np.exp(params[f"logamp{j}"]) * np.exp(expo))
        return np.stack(fields, axis=-2)

    def decode_cache(self, params, z):
        z = np.asarray(z, dtype=float)
        pos = self.positions(z, params)
        pre = np.broadcast_to(params["bias"], z.shape[:-1] + (self.n_pixels,)).copy()
        ds, expos, fields, Qs = [], [], [], []
        for j in range(self.m):
            Q = params[f"S{j}"].T @ params[f"S{j}"] + self.EPS_Q * np.eye(2)
            d = self.grid - pos[..., j, None, :]
            expo = -0.5 * np.einsum("...pi,ij,...pj->...p", d, Q, d)
            f = np.exp(params[f"logamp{j}"]) * np.exp(expo)
            pre = pre + f
            ds.append(d); expos.append(expo); fields.append(f); Qs.append(Q)
        img = sigmoid(pre)
        return img, (z, ds, fields, Qs, img)

    def decode(self, z, params=None):
        return self.decode_cache(self._p(params), z)[0]

    def vjp(self, params, cache, gimg):
        z, ds, fields, Qs, img = cache
        gpre = np.asarray(gimg, dtype=float) * img * (1.0 - img)
        pairs = z.reshape(z.shape[:-1] + (self.m, 2))
        gz_pairs = np.zeros_like(pairs)
        gparams = {"bias": np.array(np.sum(gpre))}
        for j in range(self.m):
            gfield = gpre
            gexpo = gfield * fields[j]
            Qd = ds[j] @ Qs[j].T                         # Q symmetric
            gd = -gexpo[..., None] * Qd                  # (..., P, 2)
            gpos = -np.sum(gd, axis=-2)                  # (..., 2)
            gz_pairs[..., j, :] = gpos @ params[f"A{j}"]
            gparams[f"A{j}"] = gpos.reshape(-1, 2).T @ pairs[..., j, :].reshape(-1, 2)
            gparams[f"c{j}"] = np.sum(gpos.reshape(-1, 2), axis=0)
            d_flat = ds[j].reshape(-1, 2)
            gQ = -0.5 * (d_flat * gexpo.reshape(-1)[:, None]).T @ d_flat
            gparams[f"S{j}"] = params[f"S{j}"] @ (gQ + gQ.T)
            gparams[f"logamp{j}"] = np.array(np.sum(gfield * fields[j]))
        return gz_pairs.reshape(z.shape), gparams


def make_decoder(variant: str, img_h: int, img_w: int, m: int, rng=None):
    if variant == "dense":
        dec = DenseDecoder(img_h * img_w, m)
    elif variant == "keypoint_broadcast":
        dec = KeypointDecoder(img_h, img_w, m)
    else:
        raise ContractError(f"unknown decoder variant {variant!r}")
    if rng is not None:
        dec.init_params(rng)
    return dec


# ------------------------------------------------------------ configuration

DEFAULT_WEIGHTS = {"static": 1.0, "dyn": 1.0, "latent": 1.0,
                   "rest": 0.5, "kl": 1.0}
DEFAULT_H_SCHEDULE = ((0.0, 2), (0.4, 5), (0.6, 10), (0.8, 25))


@dataclass(frozen=True)
class TrainConfig:
    family: str = "oscillator"
    decoder: str = "keypoint_broadcast"
    m: int = 3
    dt: float = 0.02
    beta: float = 1e-4
    loss_weights: tuple = tuple(sorted(DEFAULT_WEIGHTS.items()))
    h_schedule: tuple = DEFAULT_H_SCHEDULE
    lr: float = 1e-3
    epochs: int = 30
    steps_per_epoch: int = 25
    batch: int = 32
    seed: int = 0
    excitation: str = "mlp"
    damping_mode: str = "full"
    integration_mode: str = "implicit_damping"

    def __post_init__(self):
        hs = list(self.h_schedule)
        if any(hs[i][1] > hs[i + 1][1] for i in range(len(hs) - 1)) or \
           any(hs[i][0] >= hs[i + 1][0] for i in range(len(hs) - 1)):
            raise ContractError("h_schedule must be non-decreasing in H "
                                "and increasing in epoch fraction")
        if self.family not in ("koopman", "mlp", "oscillator"):
            raise ContractError(f"unknown family {self.family!r}")

    @property
    def weights(self) -> dict:
        return dict(self.loss_weights)

    @property
    def kl_center_on_rest(self) -> bool:
        # the oscillator + keypoint configuration trains latents around z0
        return self.family == "oscillator" and \
            self.decoder == "keypoint_broadcast"

    def h_for_epoch(self, epoch: int) -> int:
        frac = epoch / max(self.epochs, 1)
        h = self.h_schedule[0][1]
        for f0, hh in self.h_schedule:
            if frac >= f0 - 1e-12:
                h = hh
        return int(h)

    def with_weights(self, **kw) -> "TrainConfig":
        w = self.weights
        w.update(kw)
        return replace(self, loss_weights=tuple(sorted(w.items())))


ABLATIONS = {
    1: ("linear excitation map", lambda c: replace(c, excitation="linear")),
    2: ("dynamic-loss dominant weights",
        lambda c: c.with_weights(static=1.0, dyn=5.0, latent=1.0, rest=1.0)),
    3: ("strong prior beta", lambda c: replace(c, beta=0.01)),
    4: ("no rest loss", lambda c: c.with_weights(rest=0.0)),
    5: ("fixed single-step horizon",
        lambda c: replace(c, h_schedule=((0.0, 1),))),
    6: ("rayleigh damping", lambda c: replace(c, damping_mode="rayleigh")),
    7: ("explicit damping integration",
        lambda c: replace(c, integration_mode="explicit")),
}


def apply_ablation(config: TrainConfig, k: int) -> TrainConfig:
    if k not in ABLATIONS:
        raise ContractError(f"unknown ablation {k}; valid: {sorted(ABLATIONS)}")
    return ABLATIONS[k][1](config)


def config_diff(a: TrainConfig, b: TrainConfig) -> list:
    """Field names on which the two configs differ."""
    return [f for f in a.__dataclass_fields__
            if getattr(a, f) != getattr(b, f)]


# -------------------------------------------------------------- the system

class LatentSystem:
    """Encoder + decoder + dynamics + rest latent, with one flat param dict
    (prefixes enc/, dec/, dyn/, and a bare z0 for families that do not carry
    their own rest position)."""

    def __init__(self, config: TrainConfig, img_h: int, img_w: int):
        self.config = config
        self.img_h, self.img_w = int(img_h), int(img_w)
        m = config.m
        self.enc = Encoder(img_h * img_w, m)
        self.dec = make_decoder(config.decoder, img_h, img_w, m)
        bnet = ExcitationNet(m, kind=config.excitation)
        if config.family == "koopman":
            self.dyn = KoopmanModel(m=m, dt=config.dt, bnet=bnet)
        elif config.family == "mlp":
            self.dyn = MlpDynModel(m=m, dt=config.dt, bnet=bnet)
        else:
            self.dyn = OscillatorModel(
                m=m, dt=config.dt, bnet=bnet,
                damping_mode=config.damping_mode,
                integration_mode=config.integration_mode)
        self.has_ext_z0 = config.family != "oscillator"
        self.params: dict = {}

    def init_params(self, rng: np.random.Generator) -> dict:
        p = _pfx(self.enc.init_params(rng), "enc/")
        p.update(_pfx(self.dec.init_params(rng), "dec/"))
        p.update(_pfx(self.dyn.init_params(rng), "dyn/"))
        if self.has_ext_z0:
            p["z0"] = np.zeros(2 * self.config.m)
        self.params = p
        self._push_down()
        return p

    def set_params(self, p: dict) -> None:
        self.params = p
        self._push_down()

    def _push_down(self):
        self.enc.params = _sub(self.params, "enc/")
        self.dec.params = _sub(self.params, "dec/")
        self.dyn.params = _sub(self.params, "dyn/")

    def z0(self, params=None) -> np.ndarray:
        p = self.params if params is None else params
        return p["z0"] if self.has_ext_z0 else p["dyn/z0"]


# ----------------------------------------------------------- batch sampling

@dataclass
class Batch:
    """N windows of H+3 frames (one spare each side for central differences)
    and the H measured actuations between the core frames."""
    obs: np.ndarray     # (N, H+3, P) float64
    u: np.ndarray       # (N, H, 4)
    H: int


def sample_batch(dataset, H: int, n: int, rng: np.random.Generator) -> Batch:
    seqs = [s for s in dataset.sequences if len(s) >= H + 3]
    if not seqs:
        raise ContractError(f"no sequence long enough for H={H}")
    lengths = np.array([len(s) - (H + 2) for s in seqs], dtype=float)
    pick = rng.choice(len(seqs), size=n, p=lengths / lengths.sum())
    obs = np.empty((n, H + 3, seqs[0].pixels.shape[1]))
    u = np.empty((n, H, 4))
    for i, si in enumerate(pick):
        s = seqs[si]
        t = int(rng.integers(1, len(s) - H - 1))      # window [t-1, t+H+1]
        obs[i] = s.pixels[t - 1:t + H + 2]
        u[i] = s.p_act[t:t + H]
    return Batch(obs=obs, u=u, H=H)


# ------------------------------------------------------------- public losses

def _dimmean_sq(a, b):
    d = a - b
    return float(np.mean(d * d))


def loss_dyn_multistep(batch: Batch, system: LatentSystem, H: int) -> float:
    """Mean over batch and h=1..H of image MSE between decoded predictions
    and ground truth."""
    if H > batch.H:
        raise ContractError(f"H={H} exceeds batch horizon {batch.H}")
    states = _rollout_from_batch(batch, system, H)
    n_z = system.enc.n_z
    imgs = system.dec.decode(states[..., :n_z])
    targets = batch.obs.transpose(1, 0, 2)[2:2 + H]
    return float(np.mean((imgs - targets) ** 2))


def loss_latent_multistep(batch: Batch, system: LatentSystem, H: int) -> float:
    if H > batch.H:
        raise ContractError(f"H={H} exceeds batch horizon {batch.H}")
    states = _rollout_from_batch(batch, system, H)
    n_z = system.enc.n_z
    dt = system.dyn.dt
    mu, _, cache = system.enc.forward_cache(system.enc.params, batch.obs)
    v = np.zeros_like(batch.obs)
    v[:, 1:-1] = (batch.obs[:, 2:] - batch.obs[:, :-2]) / (2 * dt)
    zdot = system.enc.net.jvp(system.enc.params, cache, v)[..., :n_z]
    tgt_z = mu.transpose(1, 0, 2)[2:2 + H]
    tgt_v = zdot.transpose(1, 0, 2)[2:2 + H]
    err_z = np.mean((states[..., :n_z] - tgt_z) ** 2)
    err_v = np.mean((dt * states[..., n_z:] - dt * tgt_v) ** 2)
    return float(err_z + err_v)


def _rollout_from_batch(batch: Batch, system: LatentSystem, H: int):
    n_z = system.enc.n_z
    dt = system.dyn.dt
    mu, _, cache = system.enc.forward_cache(system.enc.params, batch.obs)
    v = np.zeros_like(batch.obs)
    v[:, 1:-1] = (batch.obs[:, 2:] - batch.obs[:, :-2]) / (2 * dt)
    zdot = system.enc.net.jvp(system.enc.params, cache, v)[..., :n_z]
    xi0 = np.concatenate([mu[:, 1], zdot[:, 1]], axis=-1)
    states, _ = rollout(system.dyn, xi0, batch.u.transpose(1, 0, 2)[:H])
    return states


def loss_rest(system: LatentSystem, o_rest, u_rest) -> float:
    """½[MSE(φ(o_rest), z₀) + (MSE([f_dyn(ξ_rest, u_rest)]₁, z₀)
    + MSE(Δt [f_dyn(ξ_rest, u_rest)]₂, 0))]."""
    n_z = system.enc.n_z
    dt = system.dyn.dt
    mu = system.enc.mean(np.asarray(o_rest, dtype=float))
    z0 = system.z0()
    xi = np.concatenate([mu, np.zeros(n_z)])
    nxt = system.dyn.step(xi, np.asarray(u_rest, dtype=float))
    return 0.5 * (_dimmean_sq(mu, z0)
                  + _dimmean_sq(nxt[:n_z], z0)
                  + _dimmean_sq(dt * nxt[n_z:], 0.0 * nxt[n_z:]))


def loss_kl(mu, logvar, z0) -> float:
    """−(1/2N) Σ_samples Σ_dims (1 + log σ² − (μ − z₀)² − σ²)."""
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    logvar = np.atleast_2d(np.asarray(logvar, dtype=float))
    z0 = np.asarray(z0, dtype=float)
    n = mu.shape[0]
    return float(-0.5 / n * np.sum(
        1.0 + logvar - (mu - z0) ** 2 - np.exp(logvar)))


# --------------------------------------------------- fused loss and gradients

def loss_and_grads(system: LatentSystem, params: dict, batch: Batch,
                   noise: np.ndarray, o_rest, u_rest):
    """Total weighted loss, its parts, and exact gradients for every
    parameter. noise: (N, H+1, 2m) standard normals for the static-path
    reparameterization."""
    cfg = system.config
    w = cfg.weights
    enc, dec, dyn = system.enc, system.dec, system.dyn
    n_z = enc.n_z
    dt = dyn.dt
    H = batch.H
    N, W, P = batch.obs.shape
    enc_p = _sub(params, "enc/")
    dec_p = _sub(params, "dec/")
    dyn_p = _sub(params, "dyn/")
    z0 = params["z0"] if system.has_ext_z0 else dyn_p["z0"]

    # ---- encoder forward + velocity tangents on every frame
    mu, logvar, ecache = enc.forward_cache(enc_p, batch.obs)
    v = np.zeros_like(batch.obs)
    v[:, 1:-1] = (batch.obs[:, 2:] - batch.obs[:, :-2]) / (2.0 * dt)
    dy, jcache = enc.net.jvp_cache(enc_p, ecache, v)
    zdot = dy[..., :n_z]

    # ---- rollout from frame 1 under measured actuation
    xi0 = np.concatenate([mu[:, 1], zdot[:, 1]], axis=-1)
    states, tape = rollout(dyn, xi0, batch.u.transpose(1, 0, 2), params=dyn_p)

    # ---- latent multi-step loss (targets: encoded means and velocities)
    tgt_z = mu[:, 2:2 + H].transpose(1, 0, 2)
    tgt_v = zdot[:, 2:2 + H].transpose(1, 0, 2)
    dz = states[..., :n_z] - tgt_z
    dv = dt * (states[..., n_z:] - tgt_v)
    L_latent = float(np.mean(dz * dz) + np.mean(dv * dv))

    # ---- decoded rollouts + static reconstruction share one decoder pass
    sigma_core = np.exp(0.5 * logvar[:, 1:H + 2])
    z_sample = mu[:, 1:H + 2] + sigma_core * noise
    dyn_rows = states[..., :n_z].reshape(H * N, n_z)
    stat_rows = z_sample.reshape(N * (H + 1), n_z)
    imgs, dcache = dec.decode_cache(dec_p, np.concatenate([dyn_rows, stat_rows]))
    img_dyn = imgs[:H * N].reshape(H, N, P)
    img_stat = imgs[H * N:].reshape(N, H + 1, P)
    tgt_dyn = batch.obs.transpose(1, 0, 2)[2:2 + H]
    tgt_stat = batch.obs[:, 1:H + 2]
    L_dyn = float(np.mean((img_dyn - tgt_dyn) ** 2))
    L_static = float(np.mean((img_stat - tgt_stat) ** 2))

    # ---- KL over the core frames
    z0c = z0 if cfg.kl_center_on_rest else np.zeros(n_z)
    mu_core = mu[:, 1:H + 2]
    lv_core = logvar[:, 1:H + 2]
    n_core = N * (H + 1)
    L_kl = float(-0.5 / n_core * np.sum(
        1.0 + lv_core - (mu_core - z0c) ** 2 - np.exp(lv_core)))

    # ---- rest loss
    o_rest = np.asarray(o_rest, dtype=float)
    mu_r, _, ecache_r = enc.forward_cache(enc_p, o_rest)
    xi_r = np.concatenate([mu_r, np.zeros(n_z)])
    nxt, rcache = dyn.step_cache(dyn_p, xi_r, np.asarray(u_rest, dtype=float))
    L_rest = 0.5 * (float(np.mean((mu_r - z0) ** 2))
                    + float(np.mean((nxt[:n_z] - z0) ** 2))
                    + float(np.mean((dt * nxt[n_z:]) ** 2)))

    parts = {"static": L_static, "dyn": L_dyn, "latent": L_latent,
             "rest": L_rest, "kl": L_kl}
    total = (w["static"] * L_static + w["dyn"] * L_dyn
             + w["latent"] * L_latent + w["rest"] * L_rest
             + cfg.beta * w["kl"] * L_kl)

    # ================================================================ backward
    grads = {k: np.zeros_like(np.asarray(vv, dtype=float))
             for k, vv in params.items()}
    gmu = np.zeros_like(mu)
    glv = np.zeros_like(logvar)
    gzdot = np.zeros_like(zdot)
    gz0 = np.zeros(n_z)

    # latent loss -> states and targets
    c_lat = w["latent"] / dz.size
    gstates = np.concatenate([2.0 * c_lat * dz, 2.0 * c_lat * dt * dv], axis=-1)
    gmu[:, 2:2 + H] -= (2.0 * c_lat * dz).transpose(1, 0, 2)
    gzdot[:, 2:2 + H] -= (2.0 * c_lat * dt * dv).transpose(1, 0, 2)

    # decoder pass (dyn rows + static rows at once)
    gimg_dyn = (2.0 * w["dyn"] / img_dyn.size) * (img_dyn - tgt_dyn)
    gimg_stat = (2.0 * w["static"] / img_stat.size) * (img_stat - tgt_stat)
    gz_rows, gdec = dec.vjp(dec_p, dcache, np.concatenate(
        [gimg_dyn.reshape(H * N, P), gimg_stat.reshape(N * (H + 1), P)]))
    tree_add(grads, _pfx(gdec, "dec/"))
    gstates[..., :n_z] += gz_rows[:H * N].reshape(H, N, n_z)
    gz_sample = gz_rows[H * N:].reshape(N, H + 1, n_z)
    gmu[:, 1:H + 2] += gz_sample
    glv[:, 1:H + 2] += 0.5 * gz_sample * sigma_core * noise

    # KL
    c_kl = cfg.beta * w["kl"] / n_core
    gmu[:, 1:H + 2] += c_kl * (mu_core - z0c)
    glv[:, 1:H + 2] += 0.5 * c_kl * (np.exp(lv_core) - 1.0)
    if cfg.kl_center_on_rest:
        gz0 -= c_kl * np.sum(mu_core - z0c, axis=(0, 1))

    # rollout backward
    _, gdyn, gxi0 = rollout_vjp(tape, gstates)
    tree_add(grads, _pfx(gdyn, "dyn/"))
    gmu[:, 1] += gxi0[..., :n_z]
    gzdot[:, 1] += gxi0[..., n_z:]

    # rest loss backward
    c_r = 0.5 * w["rest"] * 2.0 / n_z
    gmu_r = c_r * (mu_r - z0)
    gz0 -= c_r * (mu_r - z0)
    gnxt = np.concatenate([c_r * (nxt[:n_z] - z0), c_r * dt * dt * nxt[n_z:]])
    gz0 -= c_r * (nxt[:n_z] - z0)
    gxi_r, _, gdyn_r = dyn.step_vjp(dyn_p, rcache, gnxt)
    tree_add(grads, _pfx(gdyn_r, "dyn/"))
    gmu_r = gmu_r + gxi_r[:n_z]
    gy_r = np.concatenate([gmu_r, np.zeros(n_z)])
    _, genc_r = enc.net.vjp(enc_p, ecache_r, gy_r)
    tree_add(grads, _pfx(genc_r, "enc/"))

    # route z0 gradient to its owner
    if system.has_ext_z0:
        grads["z0"] += gz0
    else:
        grads["dyn/z0"] += gz0

    # encoder backward: forward cotangents (mu, logvar) + tangent cotangents
    gy = np.concatenate([gmu, glv], axis=-1)
    gdy = np.concatenate([gzdot, np.zeros_like(glv)], axis=-1)
    _, _, genc = enc.net.jvp_vjp(enc_p, ecache, jcache, gdy, gy=gy)
    tree_add(grads, _pfx(genc, "enc/"))

    return total, parts, grads


# ------------------------------------------------------------ training loop

@dataclass
class Checkpoint:
    system: LatentSystem
    sbar: float
    o_rest: np.ndarray
    u_rest: np.ndarray
    loss_history: list
    ablation: int = 0

    @property
    def config(self) -> TrainConfig:
        return self.system.config

    def z0(self) -> np.ndarray:
        return self.system.z0()

    def encode_mean(self, frames) -> np.ndarray:
        return self.system.enc.mean(np.asarray(frames, dtype=float))

    def decode(self, z) -> np.ndarray:
        return self.system.dec.decode(z)

    def latent_state(self, o_prev, o, o_next) -> np.ndarray:
        mu = self.encode_mean(o)
        zdot = latent_velocity(o_prev, o, o_next, self.system.enc,
                               self.system.dyn.dt)
        return np.concatenate([mu, zdot], axis=-1)

    def to_doc(self) -> dict:
        cfg = self.config
        return {
            "config": {f: getattr(cfg, f) if f not in ("loss_weights", "h_schedule")
                       else [list(x) for x in getattr(cfg, f)]
                       for f in cfg.__dataclass_fields__},
            "img_h": self.system.img_h, "img_w": self.system.img_w,
            "params": {k: v for k, v in self.system.params.items()},
            "sbar": self.sbar,
            "z0": self.z0(),
            "o_rest": np.asarray(self.o_rest, dtype=np.float32),
            "u_rest": self.u_rest,
            "loss_history": self.loss_history,
            "ablation": self.ablation,
        }

    @staticmethod
    def from_doc(doc: dict) -> "Checkpoint":
        c = dict(doc["config"])
        c["loss_weights"] = tuple((k, float(v)) for k, v in c["loss_weights"])
        c["h_schedule"] = tuple((float(f), int(h)) for f, h in c["h_schedule"])
        cfg = TrainConfig(**c)
        system = LatentSystem(cfg, doc["img_h"], doc["img_w"])
        params = {k: np.asarray(v, dtype=float) for k, v in doc["params"].items()}
        system.set_params(params)
        return Checkpoint(
            system=system, sbar=float(doc["sbar"]),
            o_rest=np.asarray(doc["o_rest"], dtype=np.float32),
            u_rest=np.asarray(doc["u_rest"], dtype=float),
            loss_history=doc["loss_history"],
            ablation=int(doc.get("ablation", 0)))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    lio.save_checkpoint(path, ckpt.to_doc())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_doc(lio.load_checkpoint_doc(path))


def latent_scale(system: LatentSystem, val_set, chunk: int = 2048) -> float:
    """s̄ = mean over dimensions of the per-dimension std of encoded means."""
    mus = []
    for seq in val_set.sequences:
        for lo in range(0, len(seq), chunk):
            o = np.asarray(seq.pixels[lo:lo + chunk], dtype=float)
            mus.append(system.enc.mean(o))
    mu = np.concatenate(mus, axis=0)
    sbar = float(np.mean(np.std(mu, axis=0)))
    return max(sbar, 1e-12)


def train(config: TrainConfig, train_set, val_set, log=None,
          ablation: int = 0) -> Checkpoint:
    """Identify a latent system from a recording; deterministic given seed."""
    system = LatentSystem(config, train_set.img_h, train_set.img_w)
    rng = np.random.default_rng(config.seed)
    params = system.init_params(rng)
    o_rest = np.asarray(train_set.o_rest, dtype=float)
    u_rest = np.asarray(train_set.u_rest, dtype=float)
    opt = Adam(params, lr=config.lr)
    total_steps = max(config.epochs * config.steps_per_epoch, 1)
    history = []
    step = 0
    for epoch in range(config.epochs):
        H = config.h_for_epoch(epoch)
        ep_parts = {}
        for _ in range(config.steps_per_epoch):
            batch = sample_batch(train_set, H, config.batch, rng)
            noise = rng.standard_normal((config.batch, H + 1, system.enc.n_z))
            loss, parts, grads = loss_and_grads(system, params, batch, noise,
                                                o_rest, u_rest)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"training loss became non-finite at epoch {epoch} "
                    f"step {step}", step=step)
            lr_t = config.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            opt.step(params, grads, lr=lr_t)
            step += 1
            for k, vv in parts.items():
                ep_parts[k] = ep_parts.get(k, 0.0) + vv / config.steps_per_epoch
        rec = {"epoch": epoch, "H": H, "loss": sum(
            config.weights[k] * vv if k != "kl" else config.beta * config.weights[k] * vv
            for k, vv in ep_parts.items()), **ep_parts}
        history.append(rec)
        if log is not None:
            log(json.dumps(rec))
    system.set_params(params)
    sbar = latent_scale(system, val_set)
    return Checkpoint(system=system, sbar=sbar, o_rest=train_set.o_rest,
                      u_rest=u_rest, loss_history=history, ablation=ablation)


# ----------------------------------------------------- estimator-style facade

class SystemIdentifier:
    """fit/get_params-style wrapper around train() for scripted pipelines."""

    def __init__(self, **config_fields):
        self._fields = dict(config_fields)

    def get_params(self, deep=True):
        return dict(self._fields)

    def set_params(self, **kw):
        self._fields.update(kw)
        return self

    def fit(self, train_set, val_set, log=None):
        self.config_ = TrainConfig(**self._fields)
        self.checkpoint_ = train(self.config_, train_set, val_set, log=log)
        return self

    def predict(self, obs_window, controls):
        """Decoded H-step prediction from a (3+, P) frame window start."""
        ck = self.checkpoint_
        o = np.asarray(obs_window, dtype=float)
        xi0 = ck.latent_state(o[0], o[1], o[2])
        states, _ = rollout(ck.system.dyn, xi0, np.asarray(controls, dtype=float))
        return ck.decode(states[..., :ck.system.enc.n_z])
