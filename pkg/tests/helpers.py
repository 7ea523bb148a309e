"""Shared test oracles: finite differences and small synthetic systems."""

from __future__ import annotations

import numpy as np

from latentctl.nets import flatten_params, unflatten_params


def fd_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar f at 1-D point x."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy(); xp[i] += eps
        xm = x.copy(); xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2.0 * eps)
    return g


def fd_grad_params(f, params, eps=1e-5):
    """Same, over a flat dict of arrays; returns a dict of the same shapes."""
    vec, spec = flatten_params(params)
    g = fd_grad(lambda v: f(unflatten_params(v, spec)), vec, eps=eps)
    return unflatten_params(g, spec)


def rel_err(a, b):
    a = np.ravel(np.asarray(a, dtype=float))
    b = np.ravel(np.asarray(b, dtype=float))
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / denom


def random_pd(n, rng, lo=0.1, hi=5.0):
    """Symmetric positive definite matrix with eigenvalues in [lo, hi]."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * rng.uniform(lo, hi, size=n)) @ q.T


def stub_checkpoint(img=32, family="oscillator", decoder="keypoint_broadcast",
                    m=2, seed=0, o_rest=None, u_rest=None, **cfg_kw):
    """Untrained but structurally complete model, for plumbing tests."""
    from latentctl.training import Checkpoint, LatentSystem, TrainConfig
    cfg = TrainConfig(family=family, decoder=decoder, m=m, seed=seed,
                      **cfg_kw)
    system = LatentSystem(cfg, img, img)
    system.set_params(system.init_params(np.random.default_rng(seed)))
    if o_rest is None:
        o_rest = np.zeros(img * img)
    if u_rest is None:
        u_rest = np.full(4, 43.0)
    return Checkpoint(system=system, sbar=1.0,
                      o_rest=np.asarray(o_rest, dtype=np.float32),
                      u_rest=np.asarray(u_rest, dtype=float),
                      loss_history=[], ablation=0)


class LinearLatentPlant:
    """Hidden discrete mass-spring-damper latent with a fixed linear pixel
    map: ground truth that a linear-transition model can represent exactly.

    v' = (I + dt D)^-1 (v + dt (B u - K x));  x' = x + dt v';  o = x W + bias
    """

    def __init__(self, seed, m=2, img=16, dt=0.02):
        rng = np.random.default_rng(seed)
        n = 2 * m
        self.n, self.img, self.dt = n, img, dt
        self.K = random_pd(n, rng, lo=2.0, hi=6.0)
        self.D = random_pd(n, rng, lo=0.5, hi=1.2)
        self.B = 0.1 * rng.standard_normal((n, 4))
        self.step_mat = np.linalg.inv(np.eye(n) + dt * self.D)
        self.u_rest = np.full(4, 43.0)
        self.x_eq = np.linalg.solve(self.K, self.B @ self.u_rest)
        self.W = rng.standard_normal((n, img * img)) * (0.15 / np.sqrt(n))
        self.bias = 0.3

    def record(self, duration_s, seed):
        """Drive with smooth random pressures and render; starts settled."""
        from latentctl.plant import Dataset, Sequence
        rng = np.random.default_rng(seed)
        T = int(round(duration_s / self.dt))
        t = np.arange(T) * self.dt
        u = np.full((T, 4), 43.0)
        for c in range(4):
            for _ in range(2):
                f = rng.uniform(0.03, 0.25)
                a = rng.uniform(4.0, 12.0)
                ph = rng.uniform(0, 2 * np.pi)
                u[:, c] += a * np.sin(2 * np.pi * f * t + ph)
        u = np.clip(u, 0.0, 86.0)
        x, v = self.x_eq.copy(), np.zeros(self.n)
        X = np.empty((T, self.n))
        for i in range(T):
            X[i] = x
            v = self.step_mat @ (v + self.dt * (self.B @ u[i] - self.K @ x))
            x = x + self.dt * v
        pix = ((X - self.x_eq) @ self.W + self.bias).astype(np.float32)
        o_rest = np.full(self.img * self.img, self.bias, dtype=np.float32)
        seq = Sequence(time=t, u_cmd=u, p_act=u.copy(), pixels=pix)
        return Dataset(sequences=[seq], o_rest=o_rest, u_rest=self.u_rest,
                       rate_hz=1.0 / self.dt, img_h=self.img, img_w=self.img)
