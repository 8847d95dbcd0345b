import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from autoprompt_sdg.sufm import (
    SUFM,
    FeatureStatistics,
    InvalidInputError,
    PerturbedStatistics,
    SufmConfig,
    SufmConfigError,
    UncertaintyEstimate,
    instance_channel_stats,
    perturb_features,
    sample_perturbed_stats,
    sufm_forward,
    uncertainty_estimates,
)

from oracles import central_difference, loop_channel_stats, loop_uncertainty, relative_error


def gen(seed):
    return torch.Generator().manual_seed(seed)


def test_constant_map_stats():
    f = torch.full((2, 3, 4, 5), 3.0, dtype=torch.float64)
    stats = instance_channel_stats(f, 1e-6)
    assert torch.all(stats.mean == 3.0)
    assert torch.allclose(stats.std, torch.full((2, 3), 1e-6, dtype=torch.float64), rtol=0, atol=1e-15)


def test_symmetric_values_have_zero_mean():
    f = torch.tensor([1.0, -1.0, -1.0, 1.0]).reshape(1, 1, 2, 2).repeat(2, 3, 1, 1)
    assert torch.all(instance_channel_stats(f).mean == 0)


def test_stats_match_loop_oracle_seed7():
    f = torch.from_numpy(np.random.default_rng(7).standard_normal((2, 3, 2, 2)))
    stats = instance_channel_stats(f, 1e-6)
    mean, std = loop_channel_stats(f.numpy(), 1e-6)
    np.testing.assert_allclose(stats.mean.numpy(), mean, atol=1e-6, rtol=0)
    np.testing.assert_allclose(stats.std.numpy(), std, atol=1e-6, rtol=0)


def test_non_finite_input_rejected():
    f = torch.zeros(1, 1, 2, 2)
    f[0, 0, 0, 0] = float("nan")
    with pytest.raises(InvalidInputError):
        instance_channel_stats(f)
    with pytest.raises(InvalidInputError):
        instance_channel_stats(torch.zeros(2, 2))


def test_uncertainty_single_instance_is_zero():
    f = torch.randn(1, 4, 5, 5, generator=gen(0))
    unc = uncertainty_estimates(instance_channel_stats(f))
    assert torch.all(unc.sigma_mu == 0) and torch.all(unc.sigma_sigma == 0)


def test_uncertainty_two_instances():
    mean = torch.tensor([[0.0], [2.0]])
    unc = uncertainty_estimates(FeatureStatistics(mean, torch.ones(2, 1)))
    assert unc.sigma_mu.item() == pytest.approx(1.0)
    assert unc.sigma_sigma.item() == 0.0


def test_uncertainty_identical_batch_is_zero():
    one = torch.randn(1, 3, 4, 4, generator=gen(1))
    unc = uncertainty_estimates(instance_channel_stats(one.repeat(5, 1, 1, 1)))
    assert torch.all(unc.sigma_mu == 0) and torch.all(unc.sigma_sigma == 0)


def test_zero_uncertainty_gaussian_collapses():
    stats = FeatureStatistics(torch.randn(3, 4, generator=gen(2)), torch.rand(3, 4, generator=gen(3)) + 0.5)
    unc = UncertaintyEstimate(torch.zeros(4), torch.zeros(4))
    for mode in ("reparameterized", "literal"):
        pert = sample_perturbed_stats(stats, unc, SufmConfig(noise_mode="gaussian", sampling_mode=mode), gen(0))
        assert torch.equal(pert.beta, stats.mean)
        assert torch.equal(pert.gamma, stats.std)


def test_poisson_zero_rate_is_silent():
    stats = FeatureStatistics(torch.zeros(2, 3), torch.ones(2, 3))
    unc = UncertaintyEstimate(torch.zeros(3), torch.zeros(3))
    cfg = SufmConfig(noise_mode="poisson")
    for seed in range(20):
        pert = sample_perturbed_stats(stats, unc, cfg, gen(seed))
        assert torch.equal(pert.beta, stats.mean)


def replay_oracle(mean, std, s_mu, s_sigma, cfg, seed):
    """Replays the documented draw order with a fresh generator, numpy arithmetic."""
    g = gen(seed)
    out = []
    for center, spread in ((mean, s_mu[None, :]), (std, s_sigma[None, :])):
        eps = torch.randn(center.shape, generator=g, dtype=torch.float64).numpy()
        sampled = center + eps * spread
        value = center.copy()
        if cfg.noise_mode in ("gaussian", "united"):
            value = value + (eps * spread if cfg.sampling_mode == "reparameterized" else sampled * spread)
        if cfg.noise_mode in ("poisson", "united"):
            k = torch.poisson(torch.from_numpy(np.abs(sampled)), generator=g).numpy()
            value = value + np.sign(sampled) * cfg.poisson_scale * k
        out.append(value)
    return out[0], np.maximum(out[1], cfg.gamma_floor)


@pytest.mark.parametrize("noise_mode", ["gaussian", "poisson", "united"])
@pytest.mark.parametrize("sampling_mode", ["reparameterized", "literal"])
def test_sampling_matches_replay_oracle(noise_mode, sampling_mode):
    f = torch.randn(4, 6, 5, 5, generator=gen(11), dtype=torch.float64) * 2 + 1
    stats = instance_channel_stats(f)
    unc = uncertainty_estimates(stats)
    cfg = SufmConfig(noise_mode=noise_mode, sampling_mode=sampling_mode)
    pert = sample_perturbed_stats(stats, unc, cfg, gen(5))
    beta, gamma = replay_oracle(
        stats.mean.numpy(), stats.std.numpy(), unc.sigma_mu.numpy(), unc.sigma_sigma.numpy(), cfg, 5
    )
    np.testing.assert_allclose(pert.beta.numpy(), beta, rtol=0, atol=1e-12)
    np.testing.assert_allclose(pert.gamma.numpy(), gamma, rtol=0, atol=1e-12)


def test_bad_noise_mode():
    with pytest.raises(SufmConfigError):
        SufmConfig(noise_mode="laplace")
    cfg = SufmConfig()
    cfg.noise_mode = "laplace"
    stats = FeatureStatistics(torch.zeros(1, 1), torch.ones(1, 1))
    with pytest.raises(SufmConfigError):
        sample_perturbed_stats(stats, UncertaintyEstimate(torch.zeros(1), torch.zeros(1)), cfg, gen(0))


@pytest.mark.parametrize(
    "kwargs", [{"apply_probability": 1.5}, {"gamma_floor": 0.0}, {"epsilon_std": -1.0}, {"sampling_mode": "x"}]
)
def test_config_validation(kwargs):
    with pytest.raises(SufmConfigError):
        SufmConfig(**kwargs)


def test_perturb_identity():
    f = torch.randn(3, 4, 6, 6, generator=gen(4))
    stats = instance_channel_stats(f)
    out = perturb_features(f, stats, PerturbedStatistics(stats.mean, stats.std))
    assert torch.allclose(out, f, atol=1e-5)


def test_perturb_standardizes():
    f = torch.randn(2, 3, 16, 16, generator=gen(5), dtype=torch.float64) * 3 + 2
    stats = instance_channel_stats(f)
    out = perturb_features(f, stats, PerturbedStatistics(torch.zeros(2, 3), torch.ones(2, 3)))
    s = instance_channel_stats(out)
    assert torch.allclose(s.mean, torch.zeros(2, 3, dtype=torch.float64), atol=1e-10)
    assert torch.allclose(s.std, torch.ones(2, 3, dtype=torch.float64), atol=1e-6)


def test_perturb_single_pixel_hand_value():
    f = torch.tensor([[[[5.0]]]], dtype=torch.float64)
    stats = FeatureStatistics(torch.tensor([[5.0]], dtype=torch.float64), torch.tensor([[1e-6]], dtype=torch.float64))
    out = perturb_features(f, stats, PerturbedStatistics(torch.tensor([[2.0]]), torch.tensor([[1.0]])))
    assert out.item() == 2.0


def test_eval_mode_and_zero_probability_are_identity():
    f = torch.randn(4, 3, 8, 8, generator=gen(6))
    assert sufm_forward(f, SufmConfig(apply_probability=1.0), gen(0), training=False) is f
    for seed in range(10):
        out = sufm_forward(f, SufmConfig(apply_probability=0.0), gen(seed), training=True)
        assert torch.equal(out, f)


def test_forward_equals_manual_composition():
    f = torch.randn(4, 3, 8, 8, generator=gen(8))
    cfg = SufmConfig(apply_probability=1.0)
    out = sufm_forward(f, cfg, gen(9), training=True)
    g = gen(9)
    torch.rand(1, generator=g)  # the apply gate
    stats = instance_channel_stats(f, cfg.epsilon_std)
    pert = sample_perturbed_stats(stats, uncertainty_estimates(stats), cfg, g)
    assert torch.equal(out, perturb_features(f, stats, pert))


def test_forward_changes_features_when_applied():
    f = torch.randn(4, 3, 8, 8, generator=gen(8))
    out = sufm_forward(f, SufmConfig(apply_probability=1.0), gen(1), training=True)
    assert not torch.allclose(out, f)


def test_apply_probability_gate_frequency():
    f = torch.randn(4, 2, 4, 4, generator=gen(0))
    cfg = SufmConfig(apply_probability=0.5)
    g = gen(123)
    fired = sum(not torch.equal(sufm_forward(f, cfg, g, training=True), f) for _ in range(400))
    assert 160 < fired < 240


def test_module_follows_train_flag():
    f = torch.randn(4, 2, 4, 4, generator=gen(0))
    m = SUFM(SufmConfig(apply_probability=1.0))
    m.eval()
    assert m(f) is f
    m.train()
    assert m(f).shape == f.shape


def test_perturb_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    f0 = rng.standard_normal((2, 2, 3, 3))
    weights = rng.standard_normal(f0.shape)
    stats0 = instance_channel_stats(torch.from_numpy(f0))
    pert = sample_perturbed_stats(stats0, uncertainty_estimates(stats0), SufmConfig(), gen(3))

    def scalar(arr):
        t = torch.from_numpy(arr)
        return float((perturb_features(t, instance_channel_stats(t), pert).numpy() * weights).sum())

    f = torch.from_numpy(f0.copy()).requires_grad_(True)
    out = perturb_features(f, instance_channel_stats(f), pert)
    (out * torch.from_numpy(weights)).sum().backward()
    numeric = central_difference(scalar, f0, h=1e-6)
    assert relative_error(f.grad.numpy(), numeric, floor=1e-3) < 1e-4


@pytest.mark.parametrize("sampling_mode", ["reparameterized", "literal"])
def test_gaussian_forward_gradient_matches_finite_differences(sampling_mode):
    # Poisson draws jump with their rate, so the end-to-end check uses Gaussian noise only.
    rng = np.random.default_rng(1)
    f0 = rng.standard_normal((3, 2, 3, 3))
    weights = rng.standard_normal(f0.shape)
    cfg = SufmConfig(noise_mode="gaussian", sampling_mode=sampling_mode, apply_probability=1.0)

    def scalar(arr):
        out = sufm_forward(torch.from_numpy(arr), cfg, gen(3), training=True)
        return float((out.numpy() * weights).sum())

    f = torch.from_numpy(f0.copy()).requires_grad_(True)
    (sufm_forward(f, cfg, gen(3), training=True) * torch.from_numpy(weights)).sum().backward()
    numeric = central_difference(scalar, f0, h=1e-6)
    assert relative_error(f.grad.numpy(), numeric, floor=1e-3) < 1e-4


@settings(max_examples=40, deadline=None)
@given(
    b=st.integers(1, 4),
    c=st.integers(1, 4),
    h=st.integers(1, 6),
    w=st.integers(1, 6),
    seed=st.integers(0, 2**31 - 1),
    mode=st.sampled_from(["gaussian", "poisson", "united"]),
    sampling=st.sampled_from(["reparameterized", "literal"]),
)
def test_sufm_properties(b, c, h, w, seed, mode, sampling):
    f = torch.randn(b, c, h, w, generator=gen(seed), dtype=torch.float64)
    cfg = SufmConfig(noise_mode=mode, sampling_mode=sampling, apply_probability=1.0)
    out = sufm_forward(f, cfg, gen(seed), training=True)
    assert out.shape == f.shape
    assert torch.isfinite(out).all()
    assert torch.equal(out, sufm_forward(f, cfg, gen(seed), training=True))
    stats = instance_channel_stats(f)
    pert = sample_perturbed_stats(stats, uncertainty_estimates(stats), cfg, gen(seed))
    assert torch.all(pert.gamma >= cfg.gamma_floor)
    if b == 1 and mode == "gaussian":
        assert torch.equal(pert.beta, stats.mean)


@settings(max_examples=25, deadline=None)
@given(b=st.integers(1, 4), c=st.integers(1, 8), seed=st.integers(0, 10**6))
def test_uncertainty_matches_loop_oracle(b, c, seed):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((b, c, 4, 4)) * rng.uniform(0.1, 5)
    stats = instance_channel_stats(torch.from_numpy(f))
    unc = uncertainty_estimates(stats)
    m, s = loop_channel_stats(f, 1e-6)
    s_mu, s_sigma = loop_uncertainty(m, s)
    np.testing.assert_allclose(unc.sigma_mu.numpy(), s_mu, atol=1e-6, rtol=0)
    np.testing.assert_allclose(unc.sigma_sigma.numpy(), s_sigma, atol=1e-6, rtol=0)
    assert torch.all(unc.sigma_mu >= 0) and torch.all(unc.sigma_sigma >= 0)


def test_single_instance_batch_has_finite_gradients():
    f = torch.randn(1, 3, 4, 4, generator=gen(11), requires_grad=True)
    out = sufm_forward(f, SufmConfig(apply_probability=1.0), gen(0), training=True)
    out.sum().backward()
    assert torch.isfinite(f.grad).all()
