"""Model-family contracts: single-step algebra, rollouts, tapes, gradients.

Hand-worked numbers are frozen as literals; anything labelled "oracle" is an
independent computation (matrix powers, sequential re-stepping, central
differences), never a call back into the code under test.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentctl.models import (ExcitationNet, KoopmanModel, LatentState,
                              MlpDynModel, OscillatorModel,
                              linearized_update_matrix, oscillator_energy,
                              rollout, rollout_vjp, step_oscillator)
from latentctl.nets import flatten_params, unflatten_params
from latentctl.validation import (ContractError, DivergenceError,
                                  SingularityError)
from helpers import fd_grad, rel_err, random_pd


def zero_bnet(m):
    b = ExcitationNet(m, kind="linear")
    return b, {"bnet/B": np.zeros((2 * m, 4))}


def linear_bnet(m, rng, scale=1.0):
    b = ExcitationNet(m, kind="linear")
    return b, {"bnet/B": scale * rng.standard_normal((2 * m, 4))}


# ---------------------------------------------------------------- koopman

def test_koopman_identity_is_noop():
    m = 3
    bnet, bp = zero_bnet(m)
    model = KoopmanModel(m=m, bnet=bnet)
    model.params = {"A": np.eye(4 * m), **bp}
    xi = np.arange(4 * m, dtype=float)
    np.testing.assert_array_equal(model.step(xi, np.zeros(4)), xi)


def test_koopman_zero_dynamics_passes_padded_input():
    m = 3
    bnet = ExcitationNet(m, kind="linear")
    B = np.zeros((2 * m, 4))
    B[:4, :4] = np.eye(4)                  # B(u) = u padded with zeros
    model = KoopmanModel(m=m, bnet=bnet)
    model.params = {"A": np.zeros((4 * m, 4 * m)), "bnet/B": B}
    u = np.array([1.0, -2.0, 3.0, 0.5])
    expected = np.zeros(4 * m)
    expected[2 * m:2 * m + 4] = u          # excitation fills the zdot block
    np.testing.assert_array_equal(model.step(np.ones(4 * m), u), expected)


def test_koopman_three_steps_match_matrix_closed_form():
    """xi3 = A^3 xi0 + (A^2 + A + I) b, b the padded constant excitation."""
    m = 1
    rng = np.random.default_rng(7)
    bnet, bp = linear_bnet(m, rng)
    model = KoopmanModel(m=m, bnet=bnet)
    A = 0.4 * rng.standard_normal((4, 4))
    model.params = {"A": A, **bp}
    xi0 = rng.standard_normal(4)
    u = rng.standard_normal(4)
    states, _ = rollout(model, xi0, np.tile(u, (3, 1)))
    b = np.zeros(4)
    b[2:] = bp["bnet/B"] @ u
    P = np.linalg.matrix_power
    expected = P(A, 3) @ xi0 + (P(A, 2) + A + np.eye(4)) @ b
    np.testing.assert_allclose(states[-1], expected, atol=1e-10, rtol=0)


def test_koopman_long_rollout_matches_matrix_powers():
    m = 2
    rng = np.random.default_rng(8)
    bnet, bp = linear_bnet(m, rng, scale=0.5)
    model = KoopmanModel(m=m, bnet=bnet)
    model.init_params(rng, spectral_radius=0.9)
    model.params.update(bp)
    A = model.params["A"]
    xi0 = rng.standard_normal(4 * m)
    useq = rng.standard_normal((20, 4))
    states, _ = rollout(model, xi0, useq)
    xi = xi0.copy()
    for i in range(20):
        b = np.zeros(4 * m)
        b[2 * m:] = bp["bnet/B"] @ useq[i]
        xi = A @ xi + b
        np.testing.assert_allclose(states[i], xi, atol=1e-10, rtol=0)


# -------------------------------------------------------------------- mlp

def test_mlp_rest_case():
    m = 3
    bnet, bp = zero_bnet(m)
    model = MlpDynModel(m=m, bnet=bnet)
    p = model.init_params(np.random.default_rng(0))
    for k in p:
        if k.startswith("f/"):
            p[k] = np.zeros_like(p[k])
    p.update(bp)
    xi = np.concatenate([np.array([1.0, -2.0, 0.3, 0.0, 5.0, 1.0]),
                         np.ones(6)])
    out = model.step(xi, np.zeros(4), params=p)
    np.testing.assert_array_equal(out[6:], np.zeros(6))
    np.testing.assert_array_equal(out[:6], xi[:6])


def test_mlp_constant_forcing_one_step():
    m = 3
    bnet = ExcitationNet(m, kind="linear")
    c = np.arange(1.0, 7.0)
    model = MlpDynModel(m=m, dt=0.02, bnet=bnet)
    p = model.init_params(np.random.default_rng(0))
    for k in p:
        if k.startswith("f/"):
            p[k] = np.zeros_like(p[k])
    p["bnet/B"] = np.column_stack([c, np.zeros((6, 3))])
    xi = np.zeros(12)
    out = model.step(xi, np.array([1.0, 0, 0, 0]), params=p)
    np.testing.assert_allclose(out[6:], c, rtol=0, atol=0)
    np.testing.assert_allclose(out[:6], 0.02 * c, rtol=1e-15)


def test_mlp_step_matches_independent_reevaluation():
    """z' must equal z + dt*(f(xi)+B(u)) with f, B re-run through raw matmuls."""
    m = 2
    rng = np.random.default_rng(9)
    model = MlpDynModel(m=m, hidden=(16,))
    p = model.init_params(rng)
    xi = rng.standard_normal(4 * m)
    u = rng.standard_normal(4)
    out = model.step(xi, u, params=p)
    h = np.tanh(xi @ p["f/W0"] + p["f/b0"])
    f = h @ p["f/W1"] + p["f/b1"]
    un = u / 43.0 - 1.0                      # pressures standardized in-net
    hb = np.tanh(un @ p["bnet/W0"] + p["bnet/b0"])
    hb = np.tanh(hb @ p["bnet/W1"] + p["bnet/b1"])
    B = hb @ p["bnet/W2"] + p["bnet/b2"]
    v = f + B
    np.testing.assert_allclose(out[2 * m:], v, atol=1e-12, rtol=0)
    np.testing.assert_allclose(out[:2 * m], xi[:2 * m] + model.dt * v,
                               atol=1e-12, rtol=0)


# ------------------------------------------------------------- oscillator

def scalar_embedded_model(M=1.0, K=1.0, D=1.0, dt=0.1, **kw):
    """Scalar mechanics embedded in coordinate 0 of an m=1 (2-D) model; all
    matrices diagonal so the coordinates never couple."""
    if np.isscalar(D):
        D = np.diag([D, D])
    return OscillatorModel.from_matrices(
        M=np.array([M, M]), D=D, K=np.diag([K, K]), dt=dt, **kw)


def test_oscillator_hand_step():
    """M=K=D=1, dt=0.1, z=1, zdot=0: gamma=1.1, zdot'=-1/11, z'=109/110."""
    model = scalar_embedded_model()
    out = model.step(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(4))
    assert abs(out[2] - (-1.0 / 11.0)) < 1e-12
    assert abs(out[0] - 109.0 / 110.0) < 1e-12
    assert out[1] == 0.0 and out[3] == 0.0


def test_oscillator_fixed_point_is_exact():
    rng = np.random.default_rng(10)
    for seed in range(5):
        model = OscillatorModel(m=3)
        p = model.init_params(np.random.default_rng(seed))
        p["z0"] = rng.standard_normal(6)
        p["bnet/W2"] = np.zeros_like(p["bnet/W2"])
        p["bnet/b2"] = np.zeros_like(p["bnet/b2"])   # excitation identically 0
        xi = np.concatenate([p["z0"], np.zeros(6)])
        out = model.step(xi, rng.uniform(0, 86, size=4), params=p)
        np.testing.assert_array_equal(out, xi)


def test_oscillator_zero_damping_is_plain_symplectic_euler():
    m = 2
    rng = np.random.default_rng(11)
    K = random_pd(4, rng)
    mass = rng.uniform(0.5, 2.0, size=4)
    model = OscillatorModel.from_matrices(M=mass, D=np.zeros((4, 4)), K=K)
    xi = rng.standard_normal(8)
    out = model.step(xi, np.zeros(4))
    zdot_new = xi[4:] + model.dt * (-(K @ xi[:4])) / mass
    np.testing.assert_allclose(out[4:], zdot_new, atol=1e-14, rtol=0)
    np.testing.assert_allclose(out[:4], xi[:4] + model.dt * zdot_new,
                               atol=1e-14, rtol=0)


def test_oscillator_singular_gamma_names_entry():
    model = scalar_embedded_model(D=np.diag([-10.0, 1.0]))  # gamma_0 = 0
    with pytest.raises(SingularityError, match="entry 0"):
        model.step(np.zeros(4), np.zeros(4))


def test_oscillator_explicit_mode_full_damping_force():
    m = 2
    rng = np.random.default_rng(12)
    K = random_pd(4, rng)
    D = random_pd(4, rng, lo=0.05, hi=0.3)
    mass = rng.uniform(0.5, 2.0, size=4)
    model = OscillatorModel.from_matrices(M=mass, D=D, K=K,
                                          integration_mode="explicit")
    xi = rng.standard_normal(8)
    out = model.step(xi, np.zeros(4))
    zdot_new = xi[4:] + model.dt * (-(K @ xi[:4]) - D @ xi[4:]) / mass
    np.testing.assert_allclose(out[4:], zdot_new, atol=1e-13, rtol=0)


def test_oscillator_rayleigh_damping_matrix():
    model = OscillatorModel(m=2, damping_mode="rayleigh")
    p = model.init_params(np.random.default_rng(13))
    alpha, beta = model.rayleigh_coeffs(p)
    assert alpha > 0 and beta > 0
    D = model.damping_matrix(p)
    np.testing.assert_allclose(
        D, alpha * np.diag(model.mass(p)) + beta * p["K"], atol=1e-14)


def test_linearized_free_drift():
    model = OscillatorModel.from_matrices(M=np.ones(4), D=np.zeros((4, 4)),
                                          K=np.zeros((4, 4)), dt=0.02)
    S = linearized_update_matrix(model)
    expected = np.block([[np.eye(4), 0.02 * np.eye(4)],
                         [np.zeros((4, 4)), np.eye(4)]])
    np.testing.assert_allclose(S, expected, atol=1e-15)


def test_linearized_hand_case():
    modele = scalar_embedded_model()
    S = linearized_update_matrix(modele)
    sub = S[np.ix_([0, 2], [0, 2])]        # coordinate 0 rows/cols of (e, zdot)
    expected = np.array([[1 - 0.01 / 1.1, 0.1 / 1.1],
                         [-0.1 / 1.1, 1.0 / 1.1]])
    np.testing.assert_allclose(sub, expected, atol=1e-12, rtol=0)
    np.testing.assert_allclose(S[np.ix_([0, 2], [1, 3])], 0, atol=0)


def test_linearized_matches_one_step():
    """The matrix must reproduce step() exactly for any state (dynamics are
    linear in (z - z0, zdot) once excitation is frozen)."""
    rng = np.random.default_rng(14)
    for mode in ("implicit_damping", "explicit"):
        model = OscillatorModel.from_matrices(
            M=rng.uniform(0.5, 2, 6), D=random_pd(6, rng, 0.05, 0.4),
            K=random_pd(6, rng), z0=rng.standard_normal(6),
            integration_mode=mode)
        S = linearized_update_matrix(model)
        xi = rng.standard_normal(12)
        out = model.step(xi, np.zeros(4))
        z0 = model.params["z0"]
        ev = S @ np.concatenate([xi[:6] - z0, xi[6:]])
        np.testing.assert_allclose(
            np.concatenate([out[:6] - z0, out[6:]]), ev, atol=1e-12)


def test_linearized_spectral_radius_pd_models():
    rng = np.random.default_rng(15)
    for _ in range(10):
        n = 2 * int(rng.integers(1, 4))
        model = OscillatorModel.from_matrices(
            M=rng.uniform(0.5, 2, n), D=random_pd(n, rng, 0.0, 0.5),
            K=random_pd(n, rng, 0.1, 5.0))
        r = max(abs(np.linalg.eigvals(linearized_update_matrix(model))))
        assert r <= 1 + 1e-9


def test_oscillator_dissipation_short():
    """Energy decays and z returns to z0 under PD stiffness/damping. The full
    10^4-step, 20-model version runs in the acceptance gate."""
    rng = np.random.default_rng(16)
    model = OscillatorModel.from_matrices(
        M=rng.uniform(0.5, 2, 4), D=random_pd(4, rng, 0.3, 0.8),
        K=random_pd(4, rng), z0=rng.standard_normal(4))
    assert max(abs(np.linalg.eigvals(linearized_update_matrix(model)))) < 1
    xi = np.concatenate([model.params["z0"] + 0.5 * rng.standard_normal(4),
                         np.zeros(4)])
    e0 = oscillator_energy(model, xi)
    useq = np.zeros((10000, 4))
    states, _ = rollout(model, xi, useq)
    assert oscillator_energy(model, states[-1]) < e0
    assert np.linalg.norm(states[-1][:4] - model.params["z0"]) < 1e-6


def test_oscillator_energy_bounded_no_damping_short():
    rng = np.random.default_rng(17)
    model = OscillatorModel.from_matrices(
        M=rng.uniform(0.5, 2, 4), D=np.zeros((4, 4)), K=random_pd(4, rng))
    xi = np.concatenate([0.3 * rng.standard_normal(4), np.zeros(4)])
    e0 = oscillator_energy(model, xi)
    states, _ = rollout(model, xi, np.zeros((10000, 4)))
    e = oscillator_energy(model, states)
    assert np.all(e > 0.9 * e0) and np.all(e < 1.1 * e0)


# ------------------------------------------------------ rollout machinery

def make_model(family, m, rng, horizon_safe=True):
    if family == "koopman":
        model = KoopmanModel(m=m)
        model.init_params(rng, spectral_radius=0.9)
    elif family == "mlp":
        model = MlpDynModel(m=m, hidden=(16, 16))
        model.init_params(rng)
    else:
        model = OscillatorModel(m=m,
                                damping_mode=rng.choice(["full", "rayleigh"]),
                                integration_mode=rng.choice(
                                    ["implicit_damping", "explicit"]))
        model.init_params(rng)
    return model


@pytest.mark.parametrize("family", ["koopman", "mlp", "oscillator"])
def test_rollout_t1_equals_step_and_t5_sequential(family):
    rng = np.random.default_rng(20)
    model = make_model(family, 2, rng)
    xi0 = 0.1 * rng.standard_normal(8)
    useq = rng.uniform(0, 86, size=(5, 4))
    states, tape = rollout(model, xi0, useq)
    np.testing.assert_array_equal(
        states[0], model.step(xi0, useq[0]))
    xi = xi0
    for i in range(5):
        xi = model.step(xi, useq[i])
        np.testing.assert_array_equal(states[i], xi)
    assert tape.horizon == 5


def test_rollout_identity_koopman_constant():
    m = 2
    bnet, bp = zero_bnet(m)
    model = KoopmanModel(m=m, bnet=bnet)
    model.params = {"A": np.eye(4 * m), **bp}
    xi0 = np.arange(8.0)
    states, _ = rollout(model, xi0, np.zeros((7, 4)))
    for s in states:
        np.testing.assert_array_equal(s, xi0)


def test_rollout_batched_matches_loop():
    rng = np.random.default_rng(21)
    model = make_model("oscillator", 2, rng)
    xi0 = 0.1 * rng.standard_normal((5, 8))
    useq = rng.uniform(0, 86, size=(6, 5, 4))
    states, _ = rollout(model, xi0, useq)
    assert states.shape == (6, 5, 8)
    for b in range(5):
        sb, _ = rollout(model, xi0[b], useq[:, b])
        # blas batch vs single-row paths differ in the last ulp
        np.testing.assert_allclose(states[:, b], sb, rtol=1e-12, atol=1e-15)


def test_rollout_divergence_reports_step():
    m = 1
    bnet, bp = zero_bnet(m)
    model = KoopmanModel(m=m, bnet=bnet)
    model.params = {"A": 1e3 * np.eye(4), **bp}
    with np.errstate(over="ignore"), pytest.raises(DivergenceError) as err:
        rollout(model, 1e300 * np.ones(4), np.zeros((10, 4)))
    assert err.value.step == 3          # 1e300 -> 1e303 -> 1e306 -> inf


def test_tape_replay_bit_exact():
    rng = np.random.default_rng(22)
    model = make_model("mlp", 2, rng)
    xi0 = 0.1 * rng.standard_normal(8)
    useq = rng.uniform(0, 86, size=(9, 4))
    states, tape = rollout(model, xi0, useq)
    np.testing.assert_array_equal(tape.replay_states(), states)


def test_rollout_rejects_bad_shapes():
    rng = np.random.default_rng(23)
    model = make_model("koopman", 2, rng)
    with pytest.raises(ContractError):
        rollout(model, np.zeros(7), np.zeros((3, 4)))
    with pytest.raises(ContractError):
        rollout(model, np.zeros(8), np.zeros((3, 5)))
    with pytest.raises(ContractError):
        rollout(model, np.zeros(8), np.zeros((0, 4)))


# ------------------------------------------------------- rollout gradients

def quad_cost(states, w_lin, w_quad):
    return float(np.sum(w_lin * states) + 0.5 * np.sum(w_quad * states ** 2))


def quad_cost_grad(states, w_lin, w_quad):
    return w_lin + w_quad * states


def test_vjp_constant_cost_gives_zero_gradients():
    rng = np.random.default_rng(24)
    model = make_model("koopman", 1, rng)
    _, tape = rollout(model, rng.standard_normal(4), rng.uniform(0, 1, (4, 4)))
    du, dp, dxi0 = rollout_vjp(tape, np.zeros((4, 4)))
    assert not du.any() and not dxi0.any()
    assert not any(np.any(v) for v in dp.values())


def test_vjp_linear_koopman_matches_analytic_adjoint():
    """J = |xi_T|^2 through a linear model: dJ/du_i = 2 W^T P^T (A^T)^(T-1-i) xi_T."""
    m = 1
    rng = np.random.default_rng(25)
    bnet, bp = linear_bnet(m, rng)
    model = KoopmanModel(m=m, bnet=bnet)
    A = 0.5 * rng.standard_normal((4, 4))
    model.params = {"A": A, **bp}
    xi0 = rng.standard_normal(4)
    T = 6
    useq = rng.standard_normal((T, 4))
    states, tape = rollout(model, xi0, useq)
    xiT = states[-1]
    g = np.zeros((T, 4))
    g[-1] = 2 * xiT
    du, _, dxi0 = rollout_vjp(tape, g)
    P = np.zeros((4, 2))
    P[2:, :] = np.eye(2)
    W = bp["bnet/B"]
    for i in range(T):
        Apow = np.linalg.matrix_power(A, T - 1 - i)
        expected = 2 * W.T @ P.T @ Apow.T @ xiT
        np.testing.assert_allclose(du[i], expected, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(
        dxi0, 2 * np.linalg.matrix_power(A, T).T @ xiT, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("family", ["koopman", "mlp", "oscillator"])
def test_vjp_matches_finite_differences(family):
    rng = np.random.default_rng(hash(family) % 2 ** 31)
    for trial in range(3):
        model = make_model(family, 1 + trial % 2, rng)
        n = model.n_xi
        T = int(rng.integers(2, 11))
        xi0 = 0.2 * rng.standard_normal(n)
        useq = rng.uniform(20, 60, size=(T, 4))
        w_lin = rng.standard_normal((T, n))
        w_quad = rng.standard_normal((T, n))

        states, tape = rollout(model, xi0, useq)
        du, dp, dxi0 = rollout_vjp(tape, quad_cost_grad(states, w_lin, w_quad))

        def J_of_u(uflat):
            s, _ = rollout(model, xi0, uflat.reshape(T, 4))
            return quad_cost(s, w_lin, w_quad)

        def J_of_xi0(x):
            s, _ = rollout(model, x, useq)
            return quad_cost(s, w_lin, w_quad)

        # step scaled to the kPa magnitude of u; 1e-5 is optimal for O(1) vars
        assert rel_err(du.ravel(), fd_grad(J_of_u, useq.ravel(), eps=1e-3)) < 1e-5
        assert rel_err(dxi0, fd_grad(J_of_xi0, xi0)) < 1e-5

        vec, spec = flatten_params(model.params)

        def J_of_p(v):
            s, _ = rollout(model, xi0, useq, params=unflatten_params(v, spec))
            return quad_cost(s, w_lin, w_quad)

        dp_vec, _ = flatten_params(dp)
        assert rel_err(dp_vec, fd_grad(J_of_p, vec)) < 1e-5


def test_vjp_rejects_mismatched_cotangent():
    rng = np.random.default_rng(26)
    model = make_model("mlp", 1, rng)
    _, tape = rollout(model, np.zeros(4), np.zeros((3, 4)))
    with pytest.raises(ContractError):
        rollout_vjp(tape, np.zeros((2, 4)))


# ------------------------------------------------------------ state type

@given(st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=25, deadline=None)
def test_latent_state_xi_roundtrip(m, seed):
    rng = np.random.default_rng(seed)
    s = LatentState(z=rng.standard_normal(2 * m), zdot=rng.standard_normal(2 * m))
    back = LatentState.from_xi(s.xi)
    np.testing.assert_array_equal(back.z, s.z)
    np.testing.assert_array_equal(back.zdot, s.zdot)


def test_latent_state_rejects_mismatch():
    with pytest.raises(ContractError):
        LatentState(z=np.zeros(4), zdot=np.zeros(6))


def test_step_wrappers_roundtrip():
    rng = np.random.default_rng(27)
    model = make_model("oscillator", 1, rng)
    s = LatentState(z=0.1 * rng.standard_normal(2), zdot=np.zeros(2))
    out = step_oscillator(s, np.zeros(4), model)
    np.testing.assert_array_equal(out.xi, model.step(s.xi, np.zeros(4)))
