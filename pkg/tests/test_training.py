"""Training-layer contracts: encoders, decoders, losses, gradients, loop."""

import json

import numpy as np
import pytest

from latentctl.models import rollout
from latentctl.nets import flatten_params, unflatten_params
from latentctl.plant import generate_dataset
from latentctl.training import (ABLATIONS, Batch, Checkpoint, DenseDecoder,
                                Encoder, KeypointDecoder, LatentSystem,
                                SystemIdentifier, TrainConfig, apply_ablation,
                                config_diff, encode, latent_scale,
                                latent_velocity, load_checkpoint,
                                loss_and_grads, loss_dyn_multistep, loss_kl,
                                loss_latent_multistep, loss_rest,
                                sample_batch, save_checkpoint, train)
from latentctl.validation import ContractError
from helpers import fd_grad, rel_err

P32 = 1024


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_dataset("sinusoidal", 12.0, seed=21)


@pytest.fixture(scope="module")
def step_dataset():
    return generate_dataset("step", 12.0, seed=22)


def small_system(family="oscillator", decoder="keypoint_broadcast", seed=0,
                 **kw):
    cfg = TrainConfig(family=family, decoder=decoder, m=2, batch=4,
                      epochs=2, steps_per_epoch=2, **kw)
    system = LatentSystem(cfg, 32, 32)
    system.init_params(np.random.default_rng(seed))
    return system


# ------------------------------------------------------------------ encoder

def test_encode_mean_deterministic(tiny_dataset):
    enc = Encoder(P32, 2)
    enc.init_params(np.random.default_rng(0))
    o = tiny_dataset.sequences[0].pixels[10].astype(float)
    z1, mu1, lv1 = encode(o, enc, "mean")
    z2, mu2, lv2 = encode(o, enc, "mean")
    np.testing.assert_array_equal(z1, z2)
    np.testing.assert_array_equal(mu1, z1)
    assert lv1.shape == (4,)


def test_encode_sample_collapses_with_tiny_sigma(tiny_dataset):
    enc = Encoder(P32, 2)
    p = enc.init_params(np.random.default_rng(0))
    p["b2"][enc.n_z:] = -80.0          # logvar -> sigma ~ e-40
    o = tiny_dataset.sequences[0].pixels[5].astype(float)
    z, mu, _ = encode(o, enc, "sample", rng=np.random.default_rng(1))
    np.testing.assert_allclose(z, mu, atol=1e-15)
    with pytest.raises(ContractError):
        encode(o, enc, "sample")


def test_latent_velocity_static_is_zero(tiny_dataset):
    enc = Encoder(P32, 3)
    enc.init_params(np.random.default_rng(2))
    o = tiny_dataset.sequences[0].pixels[30].astype(float)
    zd = latent_velocity(o, o, o, enc, dt=0.02)
    np.testing.assert_array_equal(zd, np.zeros(6))


def test_latent_velocity_linear_encoder_closed_form():
    rng = np.random.default_rng(3)
    enc = Encoder(50, 2, hidden=())          # single linear layer
    p = enc.init_params(rng)
    o_prev, o, o_next = rng.random((3, 50))
    zd = latent_velocity(o_prev, o, o_next, enc, dt=0.02)
    expected = (((o_next - o_prev) / 0.04) @ p["W0"])[:4]
    np.testing.assert_allclose(zd, expected, rtol=1e-13)


def test_latent_velocity_matches_fd():
    rng = np.random.default_rng(4)
    enc = Encoder(40, 2)
    p = enc.init_params(rng)
    o_prev, o, o_next = rng.random((3, 40))
    zd = latent_velocity(o_prev, o, o_next, enc, dt=0.02)
    v = (o_next - o_prev) / 0.04
    nv = np.linalg.norm(v)
    h = 1e-5
    fd = (enc.mean(o + h * v / nv) - enc.mean(o - h * v / nv)) / (2 * h) * nv
    assert rel_err(zd, fd) < 1e-5


# ----------------------------------------------------------------- decoders

def test_dense_decoder_range_and_vjp():
    rng = np.random.default_rng(5)
    dec = DenseDecoder(30, 2, hidden=(16,))
    p = dec.init_params(rng)
    z = rng.standard_normal((3, 4))
    img, cache = dec.decode_cache(p, z)
    assert img.min() > 0 and img.max() < 1
    w = rng.standard_normal(img.shape)
    gz, gp = dec.vjp(p, cache, w)
    gz_fd = fd_grad(lambda v: float(np.sum(w * dec.decode(v.reshape(3, 4), p))),
                    z.ravel())
    assert rel_err(gz.ravel(), gz_fd) < 1e-6
    vec, spec = flatten_params(p)
    gp_fd = fd_grad(lambda v: float(
        np.sum(w * dec.decode(z, unflatten_params(v, spec)))), vec)
    assert rel_err(flatten_params(gp)[0], gp_fd) < 1e-6


def test_keypoint_decoder_vjp():
    rng = np.random.default_rng(6)
    dec = KeypointDecoder(8, 8, 2)
    p = dec.init_params(rng)
    z = rng.standard_normal((3, 4))
    img, cache = dec.decode_cache(p, z)
    assert img.shape == (3, 64) and img.min() > 0 and img.max() < 1
    w = rng.standard_normal(img.shape)
    gz, gp = dec.vjp(p, cache, w)
    gz_fd = fd_grad(lambda v: float(np.sum(w * dec.decode(v.reshape(3, 4), p))),
                    z.ravel())
    assert rel_err(gz.ravel(), gz_fd) < 1e-6
    vec, spec = flatten_params(p)
    gp_fd = fd_grad(lambda v: float(
        np.sum(w * dec.decode(z, unflatten_params(v, spec)))), vec)
    assert rel_err(flatten_params(gp)[0], gp_fd) < 1e-6


def test_keypoint_moving_one_pair_translates_one_blob():
    """Shifting latent pair j moves blob j by A_j δ and leaves the other blob
    fields bit-identical."""
    rng = np.random.default_rng(7)
    dec = KeypointDecoder(32, 32, 3)
    p = dec.init_params(rng)
    z = rng.standard_normal(6)
    delta = np.array([0.37, -0.21])
    for j in range(3):
        z2 = z.copy()
        z2[2 * j:2 * j + 2] += delta
        f1 = dec.blob_fields(z, p)
        f2 = dec.blob_fields(z2, p)
        for k in range(3):
            if k != j:
                np.testing.assert_array_equal(f2[k], f1[k])
        shift = p[f"A{j}"] @ delta
        f_shifted = dec.blob_fields(z, p, grid=dec.grid - shift)
        np.testing.assert_allclose(f2[j], f_shifted[j], rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(
            dec.positions(z2, p)[j] - dec.positions(z, p)[j], shift,
            atol=1e-12)


# ------------------------------------------------------------ loss formulas

def test_loss_kl_examples():
    z0 = np.zeros(1)
    assert loss_kl(np.zeros((1, 1)), np.zeros((1, 1)), z0) == 0.0
    assert loss_kl(np.ones((1, 1)), np.zeros((1, 1)), z0) == pytest.approx(0.5)
    rng = np.random.default_rng(8)
    mu = rng.standard_normal((7, 4))
    lv = rng.standard_normal((7, 4))
    z0 = rng.standard_normal(4)
    direct = 0.0
    for i in range(7):
        for jj in range(4):
            direct += 1 + lv[i, jj] - (mu[i, jj] - z0[jj]) ** 2 - np.exp(lv[i, jj])
    direct *= -0.5 / 7
    assert loss_kl(mu, lv, z0) == pytest.approx(direct, rel=1e-12)


def test_loss_rest_zero_at_equilibrium(step_dataset):
    system = small_system()
    p = system.params
    # force the encoder to emit z0 at o_rest and the excitation to vanish
    mu = system.enc.mean(step_dataset.o_rest.astype(float))
    p["dyn/z0"] = mu.copy()
    last = system.dyn.bnet.net.n_layers - 1
    p[f"dyn/bnet/W{last}"] = np.zeros_like(p[f"dyn/bnet/W{last}"])
    p[f"dyn/bnet/b{last}"] = np.zeros_like(p[f"dyn/bnet/b{last}"])
    system.set_params(p)
    assert loss_rest(system, step_dataset.o_rest.astype(float),
                     step_dataset.u_rest) == pytest.approx(0.0, abs=1e-24)


def test_loss_rest_matches_direct_formula(step_dataset):
    system = small_system(family="mlp", decoder="dense", seed=3)
    o_rest = step_dataset.o_rest.astype(float)
    u_rest = step_dataset.u_rest
    got = loss_rest(system, o_rest, u_rest)
    mu = system.enc.mean(o_rest)
    z0 = system.z0()
    nxt = system.dyn.step(np.concatenate([mu, np.zeros(4)]), u_rest)
    dt = system.dyn.dt
    direct = 0.5 * (np.mean((mu - z0) ** 2) + np.mean((nxt[:4] - z0) ** 2)
                    + np.mean((dt * nxt[4:]) ** 2))
    assert got == pytest.approx(direct, rel=1e-12)


def make_batch(system, dataset, H, n, seed):
    return sample_batch(dataset, H, n, np.random.default_rng(seed))


def test_loss_dyn_h1_is_single_step_mse(tiny_dataset):
    system = small_system(seed=1)
    batch = make_batch(system, tiny_dataset, 1, 3, seed=10)
    got = loss_dyn_multistep(batch, system, 1)
    # independent: per window, one encoder step, one dyn step, one decode
    total = 0.0
    for i in range(3):
        o = batch.obs[i]
        mu = system.enc.mean(o[1])
        zd = latent_velocity(o[0], o[1], o[2], system.enc, system.dyn.dt)
        xi = np.concatenate([mu, zd])
        nxt = system.dyn.step(xi, batch.u[i, 0])
        img = system.dec.decode(nxt[:4])
        total += np.mean((img - o[2]) ** 2)
    assert got == pytest.approx(total / 3, rel=1e-10)


def test_loss_latent_matches_sequential(tiny_dataset):
    system = small_system(family="koopman", decoder="dense", seed=2)
    H = 3
    batch = make_batch(system, tiny_dataset, H, 2, seed=11)
    got = loss_latent_multistep(batch, system, H)
    dt = system.dyn.dt
    acc_z, acc_v = [], []
    for i in range(2):
        o = batch.obs[i]
        mu = system.enc.mean(o[1])
        zd = latent_velocity(o[0], o[1], o[2], system.enc, dt)
        xi = np.concatenate([mu, zd])
        for h in range(1, H + 1):
            xi = system.dyn.step(xi, batch.u[i, h - 1])
            tz = system.enc.mean(o[1 + h])
            tv = latent_velocity(o[h], o[1 + h], o[2 + h], system.enc, dt)
            acc_z.append((xi[:4] - tz) ** 2)
            acc_v.append((dt * xi[4:] - dt * tv) ** 2)
    direct = np.mean(acc_z) + np.mean(acc_v)
    assert got == pytest.approx(direct, rel=1e-9)


def test_loss_nonnegative_and_h_guard(tiny_dataset):
    system = small_system(seed=4)
    batch = make_batch(system, tiny_dataset, 2, 2, seed=12)
    assert loss_dyn_multistep(batch, system, 2) >= 0
    assert loss_latent_multistep(batch, system, 2) >= 0
    with pytest.raises(ContractError):
        loss_dyn_multistep(batch, system, 5)


# ----------------------------------------------- fused loss + hand gradients

@pytest.mark.parametrize("family,decoder", [
    ("oscillator", "keypoint_broadcast"),
    ("koopman", "dense"),
    ("mlp", "dense"),
])
def test_fused_parts_match_public_ops(tiny_dataset, family, decoder):
    system = small_system(family=family, decoder=decoder, seed=5)
    H = 3
    batch = make_batch(system, tiny_dataset, H, 3, seed=13)
    noise = np.zeros((3, H + 1, 4))
    o_rest = tiny_dataset.o_rest.astype(float)
    _, parts, _ = loss_and_grads(system, system.params, batch, noise,
                                 o_rest, tiny_dataset.u_rest)
    assert parts["dyn"] == pytest.approx(
        loss_dyn_multistep(batch, system, H), rel=1e-10)
    assert parts["latent"] == pytest.approx(
        loss_latent_multistep(batch, system, H), rel=1e-10)
    assert parts["rest"] == pytest.approx(
        loss_rest(system, o_rest, tiny_dataset.u_rest), rel=1e-10)
    mu, lv, _ = system.enc.forward_cache(system.enc.params,
                                         batch.obs[:, 1:H + 2])
    z0c = system.z0() if system.config.kl_center_on_rest else np.zeros(4)
    assert parts["kl"] == pytest.approx(
        loss_kl(mu.reshape(-1, 4), lv.reshape(-1, 4), z0c), rel=1e-10)


@pytest.mark.parametrize("family,decoder", [
    ("oscillator", "keypoint_broadcast"),
    ("oscillator", "dense"),
    ("koopman", "dense"),
    ("mlp", "keypoint_broadcast"),
])
def test_total_loss_gradient_matches_fd(tiny_dataset, family, decoder):
    """Random 20-parameter subset, central differences, rel err < 1e-4."""
    system = small_system(family=family, decoder=decoder, seed=6)
    H = 2
    batch = make_batch(system, tiny_dataset, H, 2, seed=14)
    rng = np.random.default_rng(15)
    noise = rng.standard_normal((2, H + 1, 4))
    o_rest = tiny_dataset.o_rest.astype(float)
    u_rest = tiny_dataset.u_rest

    params = system.params
    total, _, grads = loss_and_grads(system, params, batch, noise,
                                     o_rest, u_rest)
    vec, spec = flatten_params(params)
    gvec, _ = flatten_params({k: grads[k] for k in params})
    idx = rng.choice(vec.size, size=20, replace=False)

    def loss_at(v):
        p = unflatten_params(v, spec)
        t, _, _ = loss_and_grads(system, p, batch, noise, o_rest, u_rest)
        return t

    eps = 1e-5
    fd = np.empty(20)
    for k, i in enumerate(idx):
        vp = vec.copy(); vp[i] += eps
        vm = vec.copy(); vm[i] -= eps
        fd[k] = (loss_at(vp) - loss_at(vm)) / (2 * eps)
    assert rel_err(fd, gvec[idx]) < 1e-4, \
        f"fd={fd} analytic={gvec[idx]}"


# ------------------------------------------------------------- configuration

def test_h_schedule_defaults_and_monotone():
    cfg = TrainConfig(epochs=10)
    hs = [cfg.h_for_epoch(e) for e in range(10)]
    assert hs == sorted(hs)
    assert hs[-1] >= 25
    assert hs[0] == 2
    assert cfg.h_for_epoch(4) == 5 and cfg.h_for_epoch(6) == 10 \
        and cfg.h_for_epoch(8) == 25


def test_h_schedule_rejects_decreasing():
    with pytest.raises(ContractError):
        TrainConfig(h_schedule=((0.0, 5), (0.5, 2)))


def test_each_ablation_changes_exactly_one_field():
    base = TrainConfig()
    expected_field = {1: "excitation", 2: "loss_weights", 3: "beta",
                      4: "loss_weights", 5: "h_schedule", 6: "damping_mode",
                      7: "integration_mode"}
    for k in range(1, 8):
        diff = config_diff(base, apply_ablation(base, k))
        assert diff == [expected_field[k]], (k, diff)
    assert apply_ablation(base, 4).weights["rest"] == 0.0
    assert apply_ablation(base, 2).weights["dyn"] == 5.0
    assert apply_ablation(base, 5).h_for_epoch(base.epochs - 1) == 1
    with pytest.raises(ContractError):
        apply_ablation(base, 9)


# ------------------------------------------------------------ training loop

def test_zero_epochs_checkpoint_has_sbar(tiny_dataset, step_dataset):
    cfg = TrainConfig(m=2, epochs=0)
    ck = train(cfg, tiny_dataset, step_dataset)
    assert ck.sbar > 0
    assert ck.loss_history == []
    assert ck.z0().shape == (4,)


def test_train_deterministic_and_logs(tiny_dataset, step_dataset):
    cfg = TrainConfig(m=2, epochs=2, steps_per_epoch=2, batch=4,
                      h_schedule=((0.0, 2),), seed=123)
    lines = []
    ck1 = train(cfg, tiny_dataset, step_dataset, log=lines.append)
    ck2 = train(cfg, tiny_dataset, step_dataset)
    assert ck1.loss_history == ck2.loss_history
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert {"epoch", "H", "loss", "static", "dyn", "latent", "rest",
            "kl"} <= set(rec)
    for k in ck1.system.params:
        np.testing.assert_array_equal(ck1.system.params[k],
                                      ck2.system.params[k])


def test_checkpoint_roundtrip_bit_exact(tiny_dataset, step_dataset, tmp_path):
    cfg = TrainConfig(m=2, family="mlp", decoder="dense", epochs=1,
                      steps_per_epoch=2, batch=4, h_schedule=((0.0, 2),))
    ck = train(cfg, tiny_dataset, step_dataset)
    p = tmp_path / "ck.json"
    save_checkpoint(p, ck)
    back = load_checkpoint(p)
    assert back.sbar == ck.sbar
    assert back.config == ck.config
    assert set(back.system.params) == set(ck.system.params)
    for k in ck.system.params:
        np.testing.assert_array_equal(
            np.asarray(back.system.params[k]), np.asarray(ck.system.params[k]))
    np.testing.assert_array_equal(back.o_rest, ck.o_rest)
    z = np.random.default_rng(1).standard_normal(4)
    np.testing.assert_array_equal(back.decode(z), ck.decode(z))
    # writing the loaded checkpoint again produces identical bytes
    p2 = tmp_path / "ck2.json"
    save_checkpoint(p2, back)
    assert p.read_bytes() == p2.read_bytes()


def test_sample_batch_windows_leave_margin(tiny_dataset):
    rng = np.random.default_rng(16)
    b = sample_batch(tiny_dataset, 4, 8, rng)
    assert b.obs.shape == (8, 7, P32)
    assert b.u.shape == (8, 4, 4)
    with pytest.raises(ContractError):
        sample_batch(tiny_dataset, 10_000, 2, rng)


def test_latent_scale_positive(tiny_dataset, step_dataset):
    system = small_system(seed=7)
    assert latent_scale(system, step_dataset) > 0


def test_estimator_facade(tiny_dataset, step_dataset):
    est = SystemIdentifier(m=2, epochs=1, steps_per_epoch=2, batch=4,
                           h_schedule=((0.0, 1),), family="koopman",
                           decoder="dense")
    assert est.get_params()["family"] == "koopman"
    est.set_params(seed=5)
    est.fit(tiny_dataset, step_dataset)
    assert est.checkpoint_.sbar > 0
    seq = tiny_dataset.sequences[0]
    pred = est.predict(seq.pixels[10:13].astype(float), seq.p_act[11:16])
    assert pred.shape == (5, P32)
