"""Latent dynamical model families and exact rollout gradients.

Three families share one interface: a latent state ξ = [z; ż] of dimension 4m
(m planar oscillators, z ∈ R^{2m}) advanced at a fixed rate by

    koopman     ξ' = Aξ + [0; B(u)]          (excitation enters the ż block)
    mlp         ż' = f(ξ) + B(u),  z' = z + Δt ż'
    oscillator  ż' = Γ⁻¹[ż + Δt M⁻¹(B(u) − K(z − z₀))],  z' = z + Δt ż'
                Γ = diag(I + Δt M⁻¹D) applied elementwise; off-diagonal
                damping is excluded from both the implicit solve and the
                force. With integration_mode="explicit" the full damping
                force −Dż joins the bracket and Γ = I.

B(u) is an excitation net (small tanh MLP, or a linear map as an ablation).
Every family implements step / step_cache / step_vjp on arrays with arbitrary
leading batch axes; rollout records a tape and rollout_vjp replays it backward
for exact reverse-mode gradients w.r.t. controls, parameters, and the initial
state. No autodiff framework is involved; each backward pass is written out
against its forward.

Parameters live in one flat dict per model (excitation weights under the
"bnet/" prefix) so optimizers and finite-difference checks can treat a model
as a single vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import Mlp, sigmoid, softplus, softplus_inv, tree_add, _outer_sum, _bias_sum
from .validation import (ContractError, DivergenceError, SingularityError,
                         as_vector, check_positive)

DT_DEFAULT = 0.02


@dataclass(frozen=True)
class LatentState:
    """Latent position z and velocity zdot, each of dimension 2m."""
    z: np.ndarray
    zdot: np.ndarray

    def __post_init__(self):
        z = as_vector("z", self.z)
        zdot = as_vector("zdot", self.zdot, dim=z.shape[0])
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "zdot", zdot)

    @property
    def xi(self) -> np.ndarray:
        return np.concatenate([self.z, self.zdot])

    @staticmethod
    def from_xi(xi) -> "LatentState":
        xi = as_vector("xi", xi)
        if xi.shape[0] % 2 != 0:
            raise ContractError(f"xi length {xi.shape[0]} is not even")
        h = xi.shape[0] // 2
        return LatentState(z=xi[:h], zdot=xi[h:])


def _sub(params: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}

def _pfx(tree: dict, prefix: str) -> dict:
    return {prefix + k: v for k, v in tree.items()}


class ExcitationNet:
    """Maps pressure u (4) to a latent force (2m); MLP or linear.

    The MLP variant standardizes pressures to [-1, 1] (û = u/43 − 1, so the
    rest actuation maps to 0) before the tanh layers; raw kPa would pin the
    hidden units to their saturated tails. The linear variant is the bare
    matrix product B·u.
    """

    U_SCALE = 43.0

    def __init__(self, m: int, kind: str = "mlp", hidden=(32, 32), n_u: int = 4):
        if kind not in ("mlp", "linear"):
            raise ContractError(f"unknown excitation kind {kind!r}")
        self.m = int(m)
        self.kind = kind
        self.n_u = int(n_u)
        self.n_out = 2 * self.m
        self.net = Mlp([self.n_u, *hidden, self.n_out]) if kind == "mlp" else None

    def init_params(self, rng: np.random.Generator, scale: float = 1.0) -> dict:
        if self.kind == "linear":
            return {"B": scale * rng.standard_normal((self.n_out, self.n_u))
                    / np.sqrt(self.n_u)}
        p = self.net.init_params(rng)
        if scale != 1.0:
            p = {k: scale * v for k, v in p.items()}
        return p

    def forward_cache(self, params: dict, u):
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.n_u:
            raise ContractError(f"u dim {u.shape[-1]} != {self.n_u}")
        if self.kind == "linear":
            return u @ params["B"].T, u
        return self.net.forward_cache(params, u / self.U_SCALE - 1.0)

    def forward(self, params: dict, u):
        return self.forward_cache(params, u)[0]

    def vjp(self, params: dict, cache, gB):
        if self.kind == "linear":
            u = cache
            return gB @ params["B"], {"B": _outer_sum(gB, u)}
        gu, gparams = self.net.vjp(params, cache, gB)
        return gu / self.U_SCALE, gparams


class _ModelBase:
    """Shared plumbing: dimensions, param bookkeeping, state checks."""

    family = "base"

    def __init__(self, m: int, dt: float, bnet: ExcitationNet):
        self.m = int(m)
        self.dt = check_positive("dt", dt)
        if bnet.m != self.m:
            raise ContractError(f"excitation m={bnet.m} != model m={self.m}")
        self.bnet = bnet
        self.n_z = 2 * self.m
        self.n_xi = 4 * self.m
        self.params: dict = {}

    def _p(self, params):
        return self.params if params is None else params

    def _check_xi(self, xi):
        xi = np.asarray(xi, dtype=float)
        if xi.shape[-1] != self.n_xi:
            raise ContractError(f"state dim {xi.shape[-1]} != {self.n_xi}")
        return xi

    # subclasses: step_cache(params, xi, u) -> (xi_next, cache)
    #             step_vjp(params, cache, g) -> (gxi, gu, gparams)

    def step(self, xi, u, params=None):
        return self.step_cache(self._p(params), xi, u)[0]


class KoopmanModel(_ModelBase):
    """ξ' = Aξ + [0; B(u)]."""

    family = "koopman"

    def __init__(self, m: int = 3, dt: float = DT_DEFAULT,
                 bnet: ExcitationNet | None = None):
        super().__init__(m, dt, bnet or ExcitationNet(m))

    def init_params(self, rng: np.random.Generator, spectral_radius: float = 0.95,
                    bnet_scale: float = 0.1) -> dict:
        A = rng.standard_normal((self.n_xi, self.n_xi)) / np.sqrt(self.n_xi)
        r = max(abs(np.linalg.eigvals(A)))
        A *= spectral_radius / max(r, 1e-12)
        p = {"A": A}
        p.update(_pfx(self.bnet.init_params(rng, scale=bnet_scale), "bnet/"))
        self.params = p
        return p

    def step_cache(self, params, xi, u):
        xi = self._check_xi(xi)
        B, bcache = self.bnet.forward_cache(_sub(params, "bnet/"), u)
        xi_next = xi @ params["A"].T
        xi_next = np.concatenate(
            [xi_next[..., :self.n_z],
             xi_next[..., self.n_z:] + B], axis=-1)
        return xi_next, (xi, bcache)

    def step_vjp(self, params, cache, g):
        xi, bcache = cache
        g = np.broadcast_to(np.asarray(g, dtype=float), xi.shape)
        gxi = g @ params["A"]
        gparams = {"A": _outer_sum(g, xi)}
        gu, gb = self.bnet.vjp(_sub(params, "bnet/"), bcache, g[..., self.n_z:])
        tree_add(gparams, _pfx(gb, "bnet/"))
        return gxi, gu, gparams


class MlpDynModel(_ModelBase):
    """ż' = f(ξ) + B(u); z' = z + Δt ż' (position update uses the new velocity)."""

    family = "mlp"

    def __init__(self, m: int = 3, dt: float = DT_DEFAULT,
                 bnet: ExcitationNet | None = None, hidden=(64, 64)):
        super().__init__(m, dt, bnet or ExcitationNet(m))
        self.fmlp = Mlp([self.n_xi, *hidden, self.n_z])

    def init_params(self, rng: np.random.Generator, f_scale: float = 0.1,
                    bnet_scale: float = 0.1) -> dict:
        p = _pfx({k: f_scale * v if k.startswith("W") else v
                  for k, v in self.fmlp.init_params(rng).items()}, "f/")
        p.update(_pfx(self.bnet.init_params(rng, scale=bnet_scale), "bnet/"))
        self.params = p
        return p

    def step_cache(self, params, xi, u):
        xi = self._check_xi(xi)
        f, fcache = self.fmlp.forward_cache(_sub(params, "f/"), xi)
        B, bcache = self.bnet.forward_cache(_sub(params, "bnet/"), u)
        zdot_next = f + B
        z_next = xi[..., :self.n_z] + self.dt * zdot_next
        return np.concatenate([z_next, zdot_next], axis=-1), (fcache, bcache)

    def step_vjp(self, params, cache, g):
        fcache, bcache = cache
        g = np.asarray(g, dtype=float)
        gz, gzdot = g[..., :self.n_z], g[..., self.n_z:]
        gv = gzdot + self.dt * gz                  # cotangent on zdot_next
        gxi_f, gf = self.fmlp.vjp(_sub(params, "f/"), fcache, gv)
        gxi = gxi_f.copy()
        gxi[..., :self.n_z] += gz
        gu, gb = self.bnet.vjp(_sub(params, "bnet/"), bcache, gv)
        gparams = _pfx(gf, "f/")
        tree_add(gparams, _pfx(gb, "bnet/"))
        return gxi, gu, gparams


class OscillatorModel(_ModelBase):
    """Damped latent oscillators stepped by symplectic Euler.

    Mass is diagonal and kept strictly positive through a softplus
    reparameterization; K and D are unconstrained full matrices. In the
    default implicit_damping mode only diag(M⁻¹D) enters, through
    Γ = 1 + Δt diag(M⁻¹D); explicit mode applies the full −Dż force with
    Γ = 1. damping_mode="rayleigh" replaces D by αM + βK with α, β kept
    nonnegative through softplus scalars.
    """

    family = "oscillator"

    def __init__(self, m: int = 3, dt: float = DT_DEFAULT,
                 bnet: ExcitationNet | None = None,
                 damping_mode: str = "full",
                 integration_mode: str = "implicit_damping"):
        super().__init__(m, dt, bnet or ExcitationNet(m))
        if damping_mode not in ("full", "rayleigh"):
            raise ContractError(f"unknown damping_mode {damping_mode!r}")
        if integration_mode not in ("implicit_damping", "explicit"):
            raise ContractError(f"unknown integration_mode {integration_mode!r}")
        self.damping_mode = damping_mode
        self.integration_mode = integration_mode

    def init_params(self, rng: np.random.Generator, bnet_scale: float = 0.1) -> dict:
        n = self.n_z
        p = {
            "m_raw": softplus_inv(np.ones(n)),
            "K": np.eye(n) + 0.05 * rng.standard_normal((n, n)),
            "z0": np.zeros(n),
        }
        if self.damping_mode == "full":
            p["D"] = 0.2 * np.eye(n) + 0.02 * rng.standard_normal((n, n))
        else:
            p["alpha_raw"] = float(softplus_inv(0.2))
            p["beta_raw"] = float(softplus_inv(0.05))
        p.update(_pfx(self.bnet.init_params(rng, scale=bnet_scale), "bnet/"))
        self.params = p
        return p

    @staticmethod
    def from_matrices(M, D, K, z0=None, m: int | None = None, dt: float = DT_DEFAULT,
                      bnet: ExcitationNet | None = None,
                      damping_mode: str = "full",
                      integration_mode: str = "implicit_damping") -> "OscillatorModel":
        """Build a model from explicit M (diag vector or matrix), D, K arrays."""
        M = np.asarray(M, dtype=float)
        m_diag = np.diag(M) if M.ndim == 2 else M
        if m is None:
            if m_diag.shape[0] % 2 != 0:
                raise ContractError("latent dimension must be even (planar pairs)")
            m = m_diag.shape[0] // 2
        model = OscillatorModel(m=m, dt=dt, bnet=bnet, damping_mode=damping_mode,
                                integration_mode=integration_mode)
        if np.any(m_diag <= 0):
            raise ContractError("mass diagonal must be strictly positive")
        n = model.n_z
        p = {"m_raw": softplus_inv(m_diag),
             "K": np.array(K, dtype=float).reshape(n, n),
             "z0": np.zeros(n) if z0 is None else as_vector("z0", z0, n)}
        if damping_mode == "full":
            p["D"] = np.array(D, dtype=float).reshape(n, n)
        else:
            alpha, beta = D    # rayleigh: D passed as the (alpha, beta) pair
            p["alpha_raw"] = float(softplus_inv(max(alpha, 1e-12)))
            p["beta_raw"] = float(softplus_inv(max(beta, 1e-12)))
        p.update(_pfx(model.bnet.init_params(np.random.default_rng(0), scale=0.0),
                      "bnet/"))
        model.params = p
        return model

    def mass(self, params=None) -> np.ndarray:
        return softplus(self._p(params)["m_raw"])

    def rayleigh_coeffs(self, params=None):
        p = self._p(params)
        return float(softplus(p["alpha_raw"])), float(softplus(p["beta_raw"]))

    def damping_matrix(self, params=None) -> np.ndarray:
        p = self._p(params)
        if self.damping_mode == "full":
            return np.array(p["D"], dtype=float)
        alpha, beta = self.rayleigh_coeffs(p)
        return alpha * np.diag(self.mass(p)) + beta * p["K"]

    def _gamma(self, params):
        """Γ diagonal (as a vector) and the pieces its gradient needs."""
        m_pos = softplus(params["m_raw"])
        if self.integration_mode == "explicit":
            return np.ones_like(m_pos), m_pos
        if self.damping_mode == "full":
            d_diag = np.diagonal(params["D"])
        else:
            alpha, beta = self.rayleigh_coeffs(params)
            d_diag = alpha * m_pos + beta * np.diagonal(params["K"])
        gamma = 1.0 + self.dt * d_diag / m_pos
        if np.any(gamma == 0.0):
            i = int(np.nonzero(gamma == 0.0)[0][0])
            raise SingularityError(
                f"implicit damping factor is singular: diagonal entry {i} "
                f"of I + dt*inv(M)*D is zero")
        return gamma, m_pos

    def step_cache(self, params, xi, u):
        xi = self._check_xi(xi)
        n = self.n_z
        z, zdot = xi[..., :n], xi[..., n:]
        B, bcache = self.bnet.forward_cache(_sub(params, "bnet/"), u)
        gamma, m_pos = self._gamma(params)
        e = z - params["z0"]
        F = B - e @ params["K"].T
        if self.integration_mode == "explicit":
            D = self.damping_matrix(params)
            F = F - zdot @ D.T
        rhs = zdot + self.dt * F / m_pos
        zdot_next = rhs / gamma
        z_next = z + self.dt * zdot_next
        cache = (z, zdot, e, F, rhs, zdot_next, gamma, m_pos, B, bcache)
        return np.concatenate([z_next, zdot_next], axis=-1), cache

    def step_vjp(self, params, cache, g):
        z, zdot, e, F, rhs, zdot_next, gamma, m_pos, B, bcache = cache
        n = self.n_z
        g = np.asarray(g, dtype=float)
        gz_n, gzdot_n = g[..., :n], g[..., n:]
        gv = gzdot_n + self.dt * gz_n              # cotangent on zdot_next
        grhs = gv / gamma
        ggamma = -(gv * zdot_next / gamma)         # zdot_next = rhs / gamma
        ggamma_sum = _bias_sum(ggamma) if ggamma.ndim > 1 else ggamma

        gzdot = grhs.copy()
        gF = self.dt * grhs / m_pos
        gm_per = -self.dt * F * grhs / m_pos ** 2  # rhs mass dependence
        gm_pos = _bias_sum(gm_per) if gm_per.ndim > 1 else gm_per

        gparams = {}
        # force F = B - K e (- D zdot in explicit mode)
        gB = gF
        gK = -_outer_sum(gF, e)
        ge = -gF @ params["K"]
        gz = gz_n + ge
        gparams["z0"] = -(_bias_sum(ge) if ge.ndim > 1 else ge)

        if self.integration_mode == "explicit":
            if self.damping_mode == "full":
                gparams["D"] = -_outer_sum(gF, zdot)
                gzdot = gzdot - gF @ params["D"]
            else:
                alpha, beta = self.rayleigh_coeffs(params)
                mv = m_pos * zdot
                Kv = zdot @ params["K"].T
                galpha = -float(np.sum(gF * mv))
                gbeta = -float(np.sum(gF * Kv))
                gK += -beta * _outer_sum(gF, zdot)
                gm_al = -alpha * gF * zdot
                gm_pos = gm_pos + (_bias_sum(gm_al) if gm_al.ndim > 1 else gm_al)
                gzdot = gzdot - alpha * m_pos * gF - beta * (gF @ params["K"])
                gparams["alpha_raw"] = galpha * sigmoid(params["alpha_raw"])
                gparams["beta_raw"] = gbeta * sigmoid(params["beta_raw"])
        else:
            # gamma = 1 + dt * d_diag / m_pos
            gd_diag = self.dt * ggamma_sum / m_pos
            gm_pos = gm_pos - self.dt * ggamma_sum * self._d_diag(params) / m_pos ** 2
            if self.damping_mode == "full":
                gD = np.zeros_like(params["D"])
                np.fill_diagonal(gD, gd_diag)
                gparams["D"] = gD
            else:
                alpha, beta = self.rayleigh_coeffs(params)
                # d_diag = alpha * m_pos + beta * diag(K)
                gparams["alpha_raw"] = float(np.sum(gd_diag * m_pos)) \
                    * sigmoid(params["alpha_raw"])
                gparams["beta_raw"] = float(np.sum(gd_diag * np.diagonal(params["K"]))) \
                    * sigmoid(params["beta_raw"])
                gK += np.diag(gd_diag * beta)
                gm_pos = gm_pos + gd_diag * alpha

        gparams["K"] = gK
        gparams["m_raw"] = gm_pos * sigmoid(params["m_raw"])
        gu, gb = self.bnet.vjp(_sub(params, "bnet/"), bcache, gB)
        tree_add(gparams, _pfx(gb, "bnet/"))
        gxi = np.concatenate([gz, gzdot], axis=-1)
        return gxi, gu, gparams

    def _d_diag(self, params):
        if self.damping_mode == "full":
            return np.diagonal(params["D"])
        alpha, beta = self.rayleigh_coeffs(params)
        return alpha * softplus(params["m_raw"]) + beta * np.diagonal(params["K"])


def step_koopman(xi: LatentState, u, model: KoopmanModel) -> LatentState:
    return LatentState.from_xi(model.step(xi.xi, as_vector("u", u)))

def step_mlp(xi: LatentState, u, model: MlpDynModel) -> LatentState:
    return LatentState.from_xi(model.step(xi.xi, as_vector("u", u)))

def step_oscillator(xi: LatentState, u, model: OscillatorModel) -> LatentState:
    return LatentState.from_xi(model.step(xi.xi, as_vector("u", u)))


@dataclass
class RolloutTape:
    """Everything needed to replay a rollout backward: the model, the exact
    parameters used, inputs, produced states, and per-step forward caches."""
    model: _ModelBase
    params: dict
    xi0: np.ndarray
    useq: np.ndarray
    states: np.ndarray
    caches: list

    @property
    def horizon(self) -> int:
        return len(self.caches)

    def replay_states(self) -> np.ndarray:
        states, _ = rollout(self.model, self.xi0, self.useq, params=self.params)
        return states


def rollout(model: _ModelBase, xi0, useq, params=None):
    """Run T steps; returns (states ξ⁽¹⁾…ξ⁽ᵀ⁾, tape).

    xi0: (..., 4m); useq: (T, 4) or (T, ..., 4), time-major. A non-finite
    state aborts with the first offending step index (1-based like the
    returned sequence).
    """
    params = model._p(params)
    xi0 = model._check_xi(np.asarray(xi0, dtype=float))
    useq = np.asarray(useq, dtype=float)
    if useq.ndim < 2 or useq.shape[-1] != model.bnet.n_u:
        raise ContractError(f"useq must be (T, ..., {model.bnet.n_u}), "
                            f"got {useq.shape}")
    T = useq.shape[0]
    if T < 1:
        raise ContractError("rollout horizon must be >= 1")
    xi = xi0
    states = []
    caches = []
    for i in range(T):
        xi, cache = model.step_cache(params, xi, useq[i])
        if not np.all(np.isfinite(xi)):
            raise DivergenceError(
                f"non-finite state at rollout step {i + 1} of {T}", step=i + 1)
        states.append(xi)
        caches.append(cache)
    states = np.stack(states, axis=0)
    return states, RolloutTape(model=model, params=params, xi0=xi0,
                               useq=useq, states=states, caches=caches)


def rollout_vjp(tape: RolloutTape, dJ_dstates):
    """Reverse sweep over a taped rollout.

    dJ_dstates holds the cotangent of a scalar J w.r.t. each produced state
    (same shape as tape.states). Returns (dJ_du, dJ_dparams, dJ_dxi0), the
    first time-major like tape.useq.
    """
    model, params = tape.model, tape.params
    gstates = np.asarray(dJ_dstates, dtype=float)
    if gstates.shape != tape.states.shape:
        raise ContractError(
            f"cotangent shape {gstates.shape} != states {tape.states.shape}")
    T = tape.horizon
    dJ_du = np.zeros_like(tape.useq)
    dJ_dparams = {k: np.zeros_like(np.asarray(v, dtype=float))
                  for k, v in params.items()}
    g = gstates[T - 1]
    for i in range(T - 1, -1, -1):
        gxi, gu, gp = model.step_vjp(params, tape.caches[i], g)
        # controls may broadcast over batch; fold extra axes back down
        if gu.shape != tape.useq[i].shape:
            extra = gu.ndim - tape.useq[i].ndim
            gu = gu.sum(axis=tuple(range(extra)))
        dJ_du[i] = gu
        tree_add(dJ_dparams, gp)
        g = gxi if i == 0 else gxi + gstates[i - 1]
    dJ_dxi0 = g
    if dJ_dxi0.shape != tape.xi0.shape:
        extra = dJ_dxi0.ndim - tape.xi0.ndim
        dJ_dxi0 = dJ_dxi0.sum(axis=tuple(range(extra)))
    return dJ_du, dJ_dparams, dJ_dxi0


def linearized_update_matrix(model: OscillatorModel, params=None) -> np.ndarray:
    """Exact one-step linear map of (z − z₀, ż) with excitation frozen at zero.

    Implicit mode:  ż' = Γ⁻¹ż − Δt Γ⁻¹M⁻¹K e,  e' = e + Δt ż'
    Explicit mode:  ż' = (I − Δt M⁻¹D) ż − Δt M⁻¹K e
    """
    params = model._p(params)
    n = model.n_z
    dt = model.dt
    m_pos = model.mass(params)
    K = params["K"]
    MiK = K / m_pos[:, None]
    if model.integration_mode == "explicit":
        D = model.damping_matrix(params)
        Svv = np.eye(n) - dt * D / m_pos[:, None]
        Sve = -dt * MiK
    else:
        gamma, _ = model._gamma(params)
        Svv = np.diag(1.0 / gamma)
        Sve = -dt * MiK / gamma[:, None]
    top = np.concatenate([np.eye(n) + dt * Sve, dt * Svv], axis=1)
    bot = np.concatenate([Sve, Svv], axis=1)
    return np.concatenate([top, bot], axis=0)


def oscillator_energy(model: OscillatorModel, xi, params=None):
    """E = ½ żᵀMż + ½ (z−z₀)ᵀK(z−z₀); meaningful when K is symmetric PD."""
    params = model._p(params)
    xi = model._check_xi(np.asarray(xi, dtype=float))
    n = model.n_z
    e = xi[..., :n] - params["z0"]
    zdot = xi[..., n:]
    m_pos = model.mass(params)
    return 0.5 * np.sum(zdot * m_pos * zdot, axis=-1) \
        + 0.5 * np.sum(e * (e @ params["K"].T), axis=-1)


MODEL_FAMILIES = {
    "koopman": KoopmanModel,
    "mlp": MlpDynModel,
    "oscillator": OscillatorModel,
}
