import math

import numpy as np
import pytest

from v2a_mapper.diffusion import (
    SamplerConfig,
    combine_guidance,
    cosine_schedule,
    diffusion_loss,
    diffusion_loss_fixed,
    guided_predict,
    posterior_step,
    q_sample,
    sample,
    sampling_timesteps,
)
from v2a_mapper.errors import ContractError, VariantError
from v2a_mapper.models import MapperConfig, forward_diffusion, init_params

TINY = dict(dim=4, depth=1, expansion=2, heads=2, head_dim=2, ff_expansion=2, max_timesteps=20)


def _cosine_reference(T, s):
    f = [math.cos(((t / T + s) / (1 + s)) * math.pi / 2) ** 2 for t in range(T + 1)]
    return np.array([x / f[0] for x in f])


def test_schedule_closed_form():
    sch = cosine_schedule(1000, 0.008)
    assert sch.alpha_bar[0] == 1.0
    assert np.all(np.diff(sch.alpha_bar) < 0)
    assert 0 < sch.alpha_bar[1000] < 1e-3
    assert np.allclose(sch.alpha_bar, _cosine_reference(1000, 0.008), rtol=0, atol=1e-14)


@pytest.mark.parametrize("T", [10, 57, 1000, 4000])
@pytest.mark.parametrize("s", [1e-4, 0.008, 0.1])
def test_schedule_invariants(T, s):
    sch = cosine_schedule(T, s)
    assert sch.alpha_bar[0] == 1.0
    assert np.all(np.diff(sch.alpha_bar) < 0)
    assert np.all(sch.betas > 0) and np.all(sch.betas <= 0.999)


def test_schedule_rejects_bad_args():
    with pytest.raises(ContractError):
        cosine_schedule(0)
    with pytest.raises(ContractError):
        cosine_schedule(10, 0.0)


def test_q_sample_identities(rng):
    sch = cosine_schedule(100)
    x0 = rng.normal(size=6)
    assert np.allclose(q_sample(x0, 40, sch, eps=np.zeros(6)), math.sqrt(sch.alpha_bar[40]) * x0)
    with pytest.raises(IndexError):
        q_sample(x0, 0, sch)
    with pytest.raises(IndexError):
        q_sample(x0, 101, sch)


def test_q_sample_identity_when_alpha_bar_is_one(rng):
    from v2a_mapper.diffusion import NoiseSchedule

    sch = NoiseSchedule(np.array([1.0, 1.0, 0.5]))
    x0 = rng.normal(size=3)
    assert np.array_equal(q_sample(x0, 1, sch, eps=rng.normal(size=3)), x0)


def test_q_sample_monte_carlo_moments():
    sch = cosine_schedule(1000)
    t, n = 300, 100_000
    x0 = np.array([0.7, -1.3, 0.2])
    rng = np.random.default_rng(11)
    draws = q_sample(np.broadcast_to(x0, (n, 3)), np.full(n, t), sch, rng=rng)
    ab = sch.alpha_bar[t]
    mean_se = math.sqrt((1 - ab) / n)
    var_se = (1 - ab) * math.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(draws.mean(0) - math.sqrt(ab) * x0) < 3 * mean_se)
    assert np.all(np.abs(draws.var(0, ddof=1) - (1 - ab)) < 3 * var_se)


def _stub_model(monkeypatch, value):
    """Replace the network with one that always returns ``value``."""
    import v2a_mapper.diffusion as diff
    from v2a_mapper.autodiff import Tensor

    monkeypatch.setattr(diff, "forward_diffusion", lambda *a, **k: Tensor(value))


def test_loss_perfect_and_zero_predictor(monkeypatch, rng):
    cfg = MapperConfig(variant="diff-mlp", **TINY)
    sch = cosine_schedule(20)
    audio = rng.normal(size=(5, 4))
    audio /= np.linalg.norm(audio, axis=1, keepdims=True)
    _stub_model(monkeypatch, audio)
    assert diffusion_loss(None, cfg, audio, audio, sch, 0.1, rng).data == 0.0
    _stub_model(monkeypatch, np.zeros_like(audio))
    assert diffusion_loss(None, cfg, audio, audio, sch, 0.1, rng).data == pytest.approx(1.0)


def test_loss_contracts(rng):
    cfg = MapperConfig(variant="diff-mlp", **TINY)
    p, sch = init_params(cfg, 0), cosine_schedule(20)
    with pytest.raises(ContractError):
        diffusion_loss(p, cfg, np.zeros((0, 4)), np.zeros((0, 4)), sch, 0.1, rng)
    with pytest.raises(ContractError):
        diffusion_loss(p, cfg, np.ones((2, 4)), np.ones((2, 4)), sch, 1.0, rng)


def test_full_drop_ignores_condition(rng):
    cfg = MapperConfig(variant="diff-transformer", **TINY)
    p = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in init_params(cfg, 0, np.float64).items()}
    x, t = rng.normal(size=(3, 4)), np.array([2, 5, 9])
    keep = np.zeros(3, bool)
    a = forward_diffusion(p, cfg, t, x, rng.normal(size=(3, 4)), keep=keep).data
    b = forward_diffusion(p, cfg, t, x, rng.normal(size=(3, 4)), keep=keep).data
    assert np.array_equal(a, b)


def test_guidance_identities(rng):
    cond, null = rng.normal(size=4), rng.normal(size=4)
    assert np.array_equal(combine_guidance(cond, null, 1.0), cond)
    assert np.array_equal(combine_guidance(cond, null, 0.0), null)
    assert np.allclose(combine_guidance(cond, np.zeros(4), 0.9), 0.9 * cond)


def test_guided_predict_endpoints_and_linearity(rng):
    cfg = MapperConfig(variant="diff-mlp", **TINY)
    p = {k: v + 0.2 * rng.normal(size=v.shape) for k, v in init_params(cfg, 0, np.float64).items()}
    x, v, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), np.array([1, 7, 20])
    cond = forward_diffusion(p, cfg, t - 1, x, v).data
    null = forward_diffusion(p, cfg, t - 1, x, None).data
    assert np.array_equal(guided_predict(p, cfg, x, t, v, 1.0), cond)
    assert np.array_equal(guided_predict(p, cfg, x, t, v, 0.0), null)
    g = [guided_predict(p, cfg, x, t, v, w) for w in (0.5, 1.5, 2.5)]
    assert np.allclose(g[1] - g[0], g[2] - g[1], atol=1e-12)
    with pytest.raises(ContractError):
        guided_predict(p, cfg, x, t, v, -0.1)


def test_posterior_step_cases(rng):
    sch = cosine_schedule(100)
    x, x0 = rng.normal(size=4), rng.normal(size=4)
    assert np.array_equal(posterior_step(x, x0, 10, 0, sch), x0)
    # x0_hat = x_t with equal alpha_bar is a fixed point
    from v2a_mapper.diffusion import NoiseSchedule

    flat = NoiseSchedule(np.array([1.0, 0.5, 0.5]))
    assert np.allclose(posterior_step(x, x, 2, 1, flat), x)
    with pytest.raises(ContractError):
        posterior_step(x, x0, 5, 5, sch)
    a = posterior_step(x, x0, 50, 40, sch, np.random.default_rng(3), stochastic=True)
    b = posterior_step(x, x0, 50, 40, sch, np.random.default_rng(3), stochastic=True)
    assert np.array_equal(a, b)
    assert not np.allclose(a, posterior_step(x, x0, 50, 40, sch))


def test_sampling_timesteps():
    assert sampling_timesteps(1000, 200)[[0, -1]].tolist() == [1000, 0]
    assert len(sampling_timesteps(1000, 200)) == 201
    assert sampling_timesteps(5, 5).tolist() == [5, 4, 3, 2, 1, 0]
    with pytest.raises(ContractError):
        sampling_timesteps(10, 11)


def _model(rng):
    cfg = MapperConfig(variant="diff-mlp", **TINY)
    p = {k: v + 0.2 * rng.normal(size=v.shape) for k, v in init_params(cfg, 0, np.float64).items()}
    return cfg, p


def test_sample_deterministic_and_seeded(rng):
    cfg, p = _model(rng)
    sch = cosine_schedule(20)
    v = rng.normal(size=(3, 4))
    a, ta = sample(p, cfg, v, sch, SamplerConfig(inference_steps=5, seed=4), return_trajectory=True)
    b, tb = sample(p, cfg, v, sch, SamplerConfig(inference_steps=5, seed=4), return_trajectory=True)
    assert np.array_equal(a, b) and all(np.array_equal(x, y) for x, y in zip(ta, tb))
    c = sample(p, cfg, v, sch, SamplerConfig(inference_steps=5, seed=5))
    assert not np.allclose(a, c)
    assert np.allclose(np.linalg.norm(a, axis=1), 1.0)
    raw = sample(p, cfg, v, sch, SamplerConfig(inference_steps=5, seed=4, renormalize=False))
    assert np.allclose(raw / np.linalg.norm(raw, axis=1, keepdims=True), a)


def test_sample_full_schedule_matches_manual_loop(rng):
    cfg, p = _model(rng)
    sch = cosine_schedule(20)
    v = rng.normal(size=(2, 4))
    out, traj = sample(p, cfg, v, sch, SamplerConfig(inference_steps=20, seed=0, renormalize=False), return_trajectory=True)
    x = np.random.default_rng(0).standard_normal((2, 4))
    c = cfg.diffusion_scale
    for t in range(20, 0, -1):
        x0 = guided_predict(p, cfg, x, np.full(2, t), v, 0.9)
        x = x0 if t == 1 else posterior_step(x, c * x0, t, t - 1, sch)
    assert len(traj) == 21
    assert np.allclose(out, x, atol=1e-12)


def test_sample_rejects_regression():
    cfg = MapperConfig(variant="reg-mlp", dim=4, depth=1)
    with pytest.raises(VariantError):
        sample(init_params(cfg, 0), cfg, np.ones(4), cosine_schedule(10))


def test_sampler_config_validation():
    with pytest.raises(ContractError):
        SamplerConfig(inference_steps=0)
    with pytest.raises(ContractError):
        SamplerConfig(guidance_scale=-1)


def test_fixed_loss_matches_hand_computation(rng):
    cfg = MapperConfig(variant="diff-mlp", **TINY)
    p = {k: v + 0.2 * rng.normal(size=v.shape) for k, v in init_params(cfg, 0, np.float64).items()}
    sch = cosine_schedule(20)
    v, a, eps = rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    t, keep = np.array([3, 17]), np.array([True, False])
    loss = diffusion_loss_fixed(p, cfg, v, a, t, eps, keep, sch).data
    x_t = np.sqrt(sch.alpha_bar[t])[:, None] * a * cfg.diffusion_scale + np.sqrt(1 - sch.alpha_bar[t])[:, None] * eps
    pred = np.vstack([
        forward_diffusion(p, cfg, t[:1] - 1, x_t[:1], v[:1]).data,
        forward_diffusion(p, cfg, t[1:] - 1, x_t[1:], None).data,
    ])
    assert loss == pytest.approx(((pred - a) ** 2).sum(1).mean(), rel=1e-12)
