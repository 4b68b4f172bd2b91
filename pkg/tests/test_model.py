import numpy as np
import pytest

from nld import autodiff as ad
from nld import datagen, sde
from nld.errors import NonFinite, TooManySkips, UsageError
from nld.model import (DynamicsConstants, NldConfig, NldModel, TrainConfig,
                       anneal_factor, elbo, elbo_detailed, train)


def tiny_config(mode="overdamped", obs_dim=3, **kw):
    defaults = dict(
        mode=mode,
        latent_dim=2,
        obs_dim=obs_dim,
        enc_hidden=6,
        context_dim=4,
        energy_hidden=(8,),
        control_hidden=(8,),
        decoder_hidden=(8,),
        dt=0.05,
        constants=DynamicsConstants(train_gamma=False, train_beta=False),
        seed=1,
    )
    defaults.update(kw)
    return NldConfig(**defaults)


def zero_control_and_z0(m: NldModel):
    last = max(i for i in range(10) if f"control.W{i}" in m.params)
    m.params[f"control.W{last}"] = np.zeros_like(m.params[f"control.W{last}"])
    m.params[f"control.b{last}"] = np.zeros_like(m.params[f"control.b{last}"])
    m.params["z0.W"] = np.zeros_like(m.params["z0.W"])
    m.params["z0.b"] = np.zeros_like(m.params["z0.b"])
    return m


def seq(model_cfg, L=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(L, model_cfg.obs_dim))


def test_overdamped_drift_is_scaled_energy_gradient():
    # the generic dynamics realize -grad E / gamma; quadratic energy example
    dyn = sde.OverdampedDynamics(lambda z: np.asarray(z, float), gamma=2.0, beta=1.0, dim=2)
    assert np.array_equal(dyn.prior_drift(np.array([1.0, 0.0]), 0.0), np.array([-0.5, 0.0]))
    # and the model's drift equals -grad/gamma for the learned MLP energy
    m = NldModel.new(tiny_config())
    z = np.random.default_rng(3).normal(size=(4, 2))
    drift = m.prior_drift(m.raw, z, 0.0)
    grad = m.energy_grad_np(z)
    assert np.allclose(drift, -grad / m.gamma_value(), atol=1e-14)


def test_underdamped_drift_structure():
    m = NldModel.new(tiny_config(mode="underdamped"))
    q = np.array([[0.3, -0.7]])
    z = np.concatenate([q, np.zeros((1, 2))], axis=1)  # zero momentum
    drift = m.prior_drift(m.raw, z, 0.0)
    v = m.energy_grad_np(q)
    assert np.array_equal(drift[:, :2], np.zeros((1, 2)))  # dq = M^-1 p = 0
    assert np.allclose(drift[:, 2:], -v, atol=1e-14)


def test_energy_gradient_matches_fd():
    m = NldModel.new(tiny_config())
    z = np.array([0.4, -1.1])

    def f(q):
        return ad.reduce_sum(m.energy(lambda n: m.params[n], ad.reshape(q, (1, 2))
                                      if not isinstance(q, np.ndarray) else q.reshape(1, 2)))

    assert ad.gradient_check(f, z, h=1e-6) < 1e-6


def test_elbo_zero_control_and_head_gives_zero_kls():
    cfg = tiny_config()
    m = zero_control_and_z0(NldModel.new(cfg))
    b = elbo(m, seq(cfg), seed=4)
    assert b.kl_path == 0.0
    assert b.kl_z0 == 0.0


def test_elbo_decomposition_identity_exact():
    cfg = tiny_config()
    m = NldModel.new(cfg)
    b = elbo(m, seq(cfg), seed=5)
    assert b.elbo == (b.recon_loglik - b.kl_path) - b.kl_z0


def test_elbo_perfect_decoder_recon_value():
    # control and z0 head zeroed: the latent path is independent of the data,
    # so feeding the decoded means back as observations gives diff == 0
    cfg = tiny_config()
    m = zero_control_and_z0(NldModel.new(cfg))
    L = 6
    x_dummy = np.zeros((L, cfg.obs_dim))
    detail = elbo_detailed(m, x_dummy[None], seed=9)
    mu = m.decode_np(detail["z_path"][:, 0, :])
    b = elbo(m, mu, seed=9)
    expected = -(L * cfg.obs_dim / 2) * np.log(2 * np.pi)
    assert b.recon_loglik == pytest.approx(expected, abs=1e-9)


def test_elbo_matches_numpy_posterior_simulation():
    cfg = tiny_config()
    m = NldModel.new(cfg)
    x = seq(cfg, L=7, seed=2)
    detail = elbo_detailed(m, x[None], seed=6)
    ctxs = m.encode_contexts_np(x)
    dyn = m.dynamics()
    w = sde.WienerPath(detail["wiener"][:, 0, :])
    config = sde.SdeConfig(dt=cfg.dt, n_steps=6, latent_dim=cfg.latent_dim)
    path, kl = sde.simulate_posterior(dyn, list(ctxs), detail["z0"][0], config, w)
    assert np.allclose(path.states, detail["z_path"][:, 0, :], atol=1e-12)
    assert kl == pytest.approx(detail["breakdown"].kl_path, rel=1e-10)


def test_elbo_matches_numpy_posterior_simulation_underdamped():
    cfg = tiny_config(mode="underdamped")
    m = NldModel.new(cfg)
    x = seq(cfg, L=7, seed=2)
    detail = elbo_detailed(m, x[None], seed=6)
    ctxs = m.encode_contexts_np(x)
    dyn = m.dynamics()
    w = sde.WienerPath(detail["wiener"][:, 0, :])
    config = sde.SdeConfig(dt=cfg.dt, n_steps=6, latent_dim=cfg.latent_dim)
    path, kl = sde.simulate_posterior(dyn, list(ctxs), detail["z0"][0], config, w)
    assert np.allclose(path.states, detail["z_path"][:, 0, :], atol=1e-12)
    assert kl == pytest.approx(detail["breakdown"].kl_path, rel=1e-10)


def _fd_param_check(m, x, seed, names=None, h=1e-5, tol=1e-4):
    detail = elbo_detailed(m, x[None], seed=seed)
    grads = ad.backward(detail["loss"])
    worst = 0.0
    for name in names or m.trainable_names():
        g_ad = grads.wrt(detail["leaves"][name])
        base = m.params[name].copy()
        flat = base.reshape(-1)
        g_fd = np.zeros_like(flat)
        for i in range(flat.size):
            for sgn, tgt in ((+1, 0), (-1, 1)):
                pert = flat.copy()
                pert[i] += sgn * h * (1.0 + abs(flat[i]))
                m.params[name] = pert.reshape(base.shape)
                d = elbo_detailed(m, x[None], seed=seed)
                if tgt == 0:
                    fp = float(d["loss"].value)
                else:
                    fm = float(d["loss"].value)
            g_fd[i] = (fp - fm) / (2 * h * (1.0 + abs(flat[i])))
            m.params[name] = base
        err = np.max(np.abs(g_ad.reshape(-1) - g_fd) / (np.abs(g_fd) + 1e-12))
        worst = max(worst, float(err))
    assert worst < tol, f"worst relative gradient error {worst}"
    return worst


def test_elbo_gradient_fd_small_overdamped():
    cfg = tiny_config(obs_dim=2, enc_hidden=4, context_dim=3,
                      energy_hidden=(5,), control_hidden=(5,), decoder_hidden=(5,))
    m = NldModel.new(cfg)
    x = np.random.default_rng(8).normal(size=(4, 2))
    _fd_param_check(m, x, seed=3, names=["energy.W0", "enc.Un", "obs_log_var", "z0.W", "dec.W1"])


def test_elbo_gradient_fd_trainable_constants():
    cfg = tiny_config(obs_dim=2, enc_hidden=4, context_dim=3,
                      energy_hidden=(5,), control_hidden=(5,), decoder_hidden=(5,),
                      constants=DynamicsConstants(train_gamma=True, train_beta=True))
    m = NldModel.new(cfg)
    x = np.random.default_rng(9).normal(size=(4, 2))
    _fd_param_check(m, x, seed=4, names=["dyn.gamma_raw", "dyn.beta_raw", "energy.W0"])


def test_decoder_ignores_momentum():
    cfg = tiny_config(mode="underdamped")
    m = NldModel.new(cfg)
    q = np.array([[0.1, 0.2]])
    za = np.concatenate([q, np.zeros((1, 2))], axis=1)
    zb = np.concatenate([q, 7.7 * np.ones((1, 2))], axis=1)
    assert np.array_equal(m.decode_np(za), m.decode_np(zb))


def test_constant_shift_invariance_model_level():
    cfg = tiny_config()
    m = NldModel.new(cfg)
    x = seq(cfg, L=6, seed=1)
    bias_name = f"energy.b{len(cfg.energy_hidden)}"
    z = np.random.default_rng(0).normal(size=(5, 2))

    drift_before = m.prior_drift(m.raw, z, 0.0)
    head_before = m.energy_np(z, with_bias=False)
    path_before = m.posterior_mean_path(x)

    m.params[bias_name] = m.params[bias_name] + 5.0

    assert np.array_equal(m.prior_drift(m.raw, z, 0.0), drift_before)
    assert np.array_equal(m.energy_np(z, with_bias=False), head_before)
    assert np.array_equal(m.posterior_mean_path(x), path_before)
    assert np.allclose(m.energy_np(z) - 5.0, head_before + m.params[bias_name] - 5.0, atol=1e-12)


def test_anneal_factor():
    assert anneal_factor(0, 0) == 1.0
    vals = [anneal_factor(e, 5) for e in range(7)]
    assert vals == [0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 1.0]
    assert all(0.0 <= v <= 1.0 for v in vals)


def _toy_dataset(cfg, n=6, L=6, seed=0):
    rng = np.random.default_rng(seed)
    seqs = [(None, rng.normal(size=(L, cfg.obs_dim))) for _ in range(n)]
    return datagen.SequenceDataset(sequences=seqs, spec=None, seed=seed)


def test_train_lr_zero_keeps_params():
    cfg = tiny_config()
    m = NldModel.new(cfg)
    before = {k: v.copy() for k, v in m.params.items()}
    train(m, _toy_dataset(cfg), TrainConfig(lr=0.0, epochs=1, warmup_epochs=0, batch_size=3, seed=0))
    for k in before:
        assert np.array_equal(m.params[k], before[k]), k


def test_train_deterministic_history():
    cfg = tiny_config()
    tc = TrainConfig(lr=1e-3, epochs=2, warmup_epochs=1, batch_size=3, seed=5)
    _, h1 = train(NldModel.new(cfg), _toy_dataset(cfg), tc)
    _, h2 = train(NldModel.new(cfg), _toy_dataset(cfg), tc)
    assert h1 == h2


def test_train_empty_dataset_rejected():
    cfg = tiny_config()
    with pytest.raises(UsageError):
        train(NldModel.new(cfg), datagen.SequenceDataset(sequences=[], spec=None, seed=0),
              TrainConfig(epochs=1))


def test_train_too_many_skips():
    cfg = tiny_config()
    m = NldModel.new(cfg)
    m.params["dec.W1"] = m.params["dec.W1"] * 1e200  # reconstruction overflows
    with pytest.raises(TooManySkips):
        train(m, _toy_dataset(cfg), TrainConfig(lr=1e-3, epochs=1, batch_size=3, seed=0))


def test_train_recon_improves_on_constant_state_data():
    cfg = tiny_config(obs_dim=4, dt=0.05)
    m = NldModel.new(cfg)
    rng = np.random.default_rng(3)
    mean = np.array([2.0, -1.0, 0.5, 1.5])
    seqs = [(None, mean + 0.1 * rng.normal(size=(10, 4))) for _ in range(16)]
    ds = datagen.SequenceDataset(sequences=seqs, spec=None, seed=0)
    _, hist = train(m, ds, TrainConfig(lr=5e-3, epochs=60, warmup_epochs=10, batch_size=8, seed=2))
    recon = np.array([h["recon"] for h in hist])
    smooth = np.convolve(recon, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(smooth) > -1e-6)  # monotone 10-epoch moving average
    assert smooth[-1] > smooth[0] + 1.0


def test_nonfinite_elbo_raises():
    cfg = tiny_config()
    m = NldModel.new(cfg)
    m.params["dec.W1"] = m.params["dec.W1"] * 1e200
    with pytest.raises(NonFinite):
        elbo(m, seq(cfg), seed=0)


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_config(mode="underdamped",
                      constants=DynamicsConstants(train_gamma=True, train_beta=True,
                                                  train_mass=True, mass=np.array([1.5, 0.5])))
    m = NldModel.new(cfg)
    p = tmp_path / "ck.json"
    m.save(p)
    back = NldModel.load(p)
    assert back.config.mode == "underdamped"
    assert set(back.params) == set(m.params)
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k])
    x = seq(cfg, L=5, seed=7)
    assert elbo(m, x, seed=1) == elbo(back, x, seed=1)


def test_baseline_mode_runs():
    cfg = tiny_config(mode="nsde-baseline")
    m = NldModel.new(cfg)
    b = elbo(m, seq(cfg), seed=0)
    assert np.isfinite(b.elbo)
    dyn = m.dynamics()
    d = dyn.prior_drift(np.zeros(2), 0.3)
    assert d.shape == (2,)


def test_train_underdamped_smoke():
    cfg = tiny_config(mode="underdamped",
                      constants=DynamicsConstants(train_gamma=True, train_beta=True,
                                                  train_mass=True, mass=np.ones(2)))
    m = NldModel.new(cfg)
    _, hist = train(m, _toy_dataset(cfg), TrainConfig(lr=2e-3, epochs=3, warmup_epochs=2,
                                                      batch_size=3, seed=4))
    assert len(hist) == 3
    assert all(np.isfinite(h["elbo"]) for h in hist)
    assert all(h["skipped_batches"] == 0 for h in hist)
