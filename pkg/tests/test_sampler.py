import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from fieldrecon.denoiser import AnalyticGaussian, LearnedScoreModel, NetConfig, forward, init_params
from fieldrecon.errors import NonFiniteState, ScheduleError, ShapeError
from fieldrecon.grid import Field, NormParams
from fieldrecon.metrics import rapsd
from fieldrecon.observe import Downsample, Identity, Masking, Observation, observe_noisy
from fieldrecon.sampler import (
    AnnealSchedule,
    DapsConfig,
    MaskAveragedModel,
    ReconResult,
    daps_reconstruct,
    dps_reconstruct,
    ensemble_reconstruct,
    karras_sigmas,
    langevin_guidance,
    prior_estimate,
    probability_flow_sample,
    sliding_window_estimate,
    unconditional_sample,
)


def jittered_net(seed=0, window=3):
    cfg = NetConfig(window=window, base_channels=4, n_levels=2, attn_heads=2)
    rng = np.random.default_rng(seed)
    params = {k: v + torch.tensor(rng.uniform(-0.2, 0.2, v.shape), dtype=torch.float64)
              for k, v in init_params(cfg, seed, torch.float64).items()}
    return LearnedScoreModel(cfg, params)


def gaussian_prior(shape, seed=0, window=1):
    rng = np.random.default_rng(seed)
    return AnalyticGaussian(rng.standard_normal(shape), rng.uniform(0.5, 2.0, shape), window)


# -- schedule -----------------------------------------------------------------------

def test_karras_endpoints_and_monotonicity():
    s = AnnealSchedule.karras(30)
    assert s.sigmas[0] == 80.0 and s.sigmas[-1] == 0.002
    assert np.all(np.diff(s.sigmas) < 0)
    assert s.with_terminal[-1] == 0.0 and len(s) == 30


def test_karras_matches_scalar_formula():
    n, rho = 7, 7.0
    ref = [(80 ** (1 / rho) + i / (n - 1) * (0.002 ** (1 / rho) - 80 ** (1 / rho))) ** rho
           for i in range(n)]
    assert_allclose(karras_sigmas(n), ref, rtol=1e-12)


def test_schedule_errors():
    with pytest.raises(ScheduleError):
        AnnealSchedule.karras(1)
    with pytest.raises(ScheduleError):
        AnnealSchedule(np.array([1.0, 1.0]))
    with pytest.raises(ScheduleError):
        AnnealSchedule(np.array([0.5, 1.0]))
    with pytest.raises(ScheduleError):
        daps_reconstruct(gaussian_prior((1, 4, 4)), [], np.array([1.0]), DapsConfig())


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 200), st.floats(1.0, 500.0), st.floats(1e-4, 0.5), st.floats(1.0, 10.0))
def test_schedule_always_strictly_decreasing(n, smax, smin, rho):
    s = AnnealSchedule.karras(n, smax, smin, rho)
    assert np.all(np.diff(s.sigmas) < 0)
    assert s.sigmas[0] == smax and s.sigmas[-1] == smin


# -- sliding window -------------------------------------------------------------------

def test_single_window_matches_direct_forward():
    model = jittered_net(1)
    x = np.random.default_rng(2).standard_normal((3, 8, 8))
    out = sliding_window_estimate(model, x, None, 0.4)
    assert_allclose(out[1], forward(model, x, np.ones_like(x), 0.4)[1], rtol=1e-12, atol=1e-14)


def test_separable_prior_matches_closed_form():
    prior = gaussian_prior((6, 4, 4), seed=3, window=3)
    x = np.random.default_rng(4).standard_normal((6, 4, 4))
    sigma = 0.8
    expected = (prior.var_diag * x + sigma**2 * prior.mean) / (prior.var_diag + sigma**2)
    assert_allclose(sliding_window_estimate(prior, x, None, sigma), expected, rtol=1e-10)


def test_boundary_frames_use_replication_padding():
    model = jittered_net(5, window=5)
    x = np.random.default_rng(6).standard_normal((6, 8, 8))
    ones = np.ones((5, 8, 8))
    out = sliding_window_estimate(model, x, None, 0.6)
    first = forward(model, x[[0, 0, 0, 1, 2]], ones, 0.6)[2]
    last = forward(model, x[[3, 4, 5, 5, 5]], ones, 0.6)[2]
    assert_allclose(out[0], first, rtol=1e-12, atol=1e-14)
    assert_allclose(out[5], last, rtol=1e-12, atol=1e-14)


def test_hidden_cells_never_reach_the_model():
    model = jittered_net(7)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((4, 8, 8))
    mask = (rng.random(x.shape) >= 0.4).astype(np.uint8)
    poisoned = np.where(mask == 1, x, 1e6)
    assert_array_equal(sliding_window_estimate(model, x, mask, 0.5),
                       sliding_window_estimate(model, poisoned, mask, 0.5))


def test_gaussian_hidden_cells_return_prior_mean():
    prior = gaussian_prior((3, 4, 4), seed=9)
    x = np.random.default_rng(10).standard_normal((3, 4, 4))
    mask = np.zeros((3, 4, 4))
    mask[:, :2] = 1
    out = sliding_window_estimate(prior, x, mask, 0.7)
    assert_array_equal(out[:, 2:], prior.mean[:, 2:])
    expected = (prior.var_diag * x + 0.49 * prior.mean) / (prior.var_diag + 0.49)
    assert_allclose(out[:, :2], expected[:, :2], rtol=1e-12)


def test_mask_averaging_at_zero_rate_is_the_plain_model():
    model = jittered_net(3)
    x = np.random.default_rng(4).standard_normal((4, 8, 8))
    wrapped = MaskAveragedModel(model, n_masks=3, missing_rate=0.0, seed=1)
    assert_allclose(sliding_window_estimate(wrapped, x, None, 0.8),
                    sliding_window_estimate(model, x, None, 0.8), rtol=1e-12, atol=1e-12)


def test_mask_averaging_replays_and_depends_on_seed():
    model = jittered_net(5)
    x = np.random.default_rng(6).standard_normal((4, 8, 8))
    runs = [[sliding_window_estimate(MaskAveragedModel(model, 2, 0.4, seed), x, None, s)
             for s in (2.0, 0.5)] for seed in (1, 1, 2)]
    assert_array_equal(runs[0][0], runs[1][0])
    assert_array_equal(runs[0][1], runs[1][1])
    assert not np.array_equal(runs[0][0], runs[2][0])
    # Successive calls draw fresh masks.
    fresh = MaskAveragedModel(model, 2, 0.4, 1)
    first = sliding_window_estimate(fresh, x, None, 1.0)
    assert not np.array_equal(first, sliding_window_estimate(fresh, x, None, 1.0))


def test_mask_averaging_on_independent_cells_is_exact_where_seen():
    prior = gaussian_prior((6, 16, 16), seed=11)
    x = np.random.default_rng(12).standard_normal(prior.mean.shape)
    exact = sliding_window_estimate(prior, x, None, 0.6)
    out = sliding_window_estimate(MaskAveragedModel(prior, 4, 0.4, 3), x, None, 0.6)
    seen = np.isclose(out, exact, rtol=1e-12, atol=0)
    # Cells hidden in every draw fall back to the prior mean.
    assert_allclose(out[~seen], prior.mean[~seen], rtol=1e-12)
    assert seen.mean() > 0.9


def test_mask_averaging_keeps_hidden_cells_from_the_model():
    model = MaskAveragedModel(jittered_net(7), 2, 0.3, 9)
    twin = MaskAveragedModel(jittered_net(7), 2, 0.3, 9)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((4, 8, 8))
    mask = (rng.random(x.shape) >= 0.4).astype(np.uint8)
    assert_array_equal(sliding_window_estimate(model, x, mask, 0.5),
                       sliding_window_estimate(twin, np.where(mask == 1, x, 1e6), mask, 0.5))


def test_ambient_mode_daps_is_deterministic():
    prior = gaussian_prior((3, 8, 8), seed=13)
    gt = prior.mean + np.sqrt(prior.var_diag) * np.random.default_rng(14).standard_normal((3, 8, 8))
    keep = (np.random.default_rng(15).random(gt.shape) > 0.5).astype(np.uint8)
    obs = [observe_noisy(Masking(keep), gt, 0.0, 1, 50.0)]
    cfg = DapsConfig(n_langevin=5, ode_substeps=1, mask_mode="ambient", ambient_masks=2)
    runs = [daps_reconstruct(prior, obs, AnnealSchedule.karras(6), cfg, seed=s).values
            for s in (4, 4, 5)]
    assert_array_equal(runs[0], runs[1])
    assert not np.array_equal(runs[0], runs[2])
    dps = [dps_reconstruct(prior, obs, AnnealSchedule.karras(6), 0.03, 4, mask_mode="ambient",
                           ambient_masks=2).values for _ in range(2)]
    assert_array_equal(dps[0], dps[1])


def test_sliding_window_shape_errors():
    with pytest.raises(ShapeError):
        sliding_window_estimate(gaussian_prior((2, 4, 4)), np.zeros((4, 4)), None, 1.0)
    with pytest.raises(ShapeError):
        sliding_window_estimate(gaussian_prior((2, 4, 4)), np.zeros((2, 4, 4)),
                                np.ones((2, 4, 5)), 1.0)


# -- prior estimate ------------------------------------------------------------------

def test_one_substep_is_tweedie():
    model = jittered_net(7)
    x = np.random.default_rng(8).standard_normal((4, 8, 8))
    assert_array_equal(prior_estimate(model, x, 2.0, ode_substeps=1),
                       sliding_window_estimate(model, x, None, 2.0))


def test_sigma_min_is_tweedie():
    prior = gaussian_prior((1, 4, 4))
    x = np.random.default_rng(9).standard_normal((1, 4, 4))
    assert_array_equal(prior_estimate(prior, x, 0.002, ode_substeps=5),
                       sliding_window_estimate(prior, x, None, 0.002))


@pytest.mark.parametrize("solver", ["heun", "euler"])
def test_gaussian_ode_endpoint(solver):
    # For N(mu, v) the probability-flow trajectory is mu + (x - mu) * sqrt(v + s^2) / sqrt(v + s0^2);
    # a final Tweedie step at sigma_min then shrinks by v / (v + sigma_min^2).
    mu = np.random.default_rng(10).standard_normal((1, 4, 4))
    prior = AnalyticGaussian(mu, 1.0)
    x = mu + np.random.default_rng(11).standard_normal((1, 4, 4)) * math.sqrt(2.0)
    s_min = 0.002
    endpoint = mu + (x - mu) * math.sqrt(1 + s_min**2) / math.sqrt(2.0)
    expected = mu + (endpoint - mu) / (1 + s_min**2)
    substeps = 40 if solver == "heun" else 2000
    got = prior_estimate(prior, x, 1.0, ode_substeps=substeps, solver=solver)
    assert np.linalg.norm(got - expected) / np.linalg.norm(expected) < 1e-3


def test_prior_estimate_rejects_divergence():
    prior = gaussian_prior((1, 4, 4))
    with pytest.raises(NonFiniteState):
        prior_estimate(prior, np.full((1, 4, 4), np.inf), 1.0)


# -- Langevin guidance ------------------------------------------------------------------

def test_zero_langevin_steps_returns_init():
    x0 = np.random.default_rng(12).standard_normal((1, 4, 4))
    assert_array_equal(langevin_guidance(x0, [], 1.0, DapsConfig(n_langevin=0), seed=1), x0)


def test_langevin_stationary_variance():
    # 4096 cells are independent chains with the same target N(0, sigma_prior^2).
    x0 = np.zeros((1, 64, 64))
    out = langevin_guidance(x0, [], 0.5, DapsConfig(n_langevin=5000, eta=1e-3), seed=2)
    assert 0.8 * 0.25 <= out.var() <= 1.2 * 0.25


def test_langevin_conjugate_mean():
    rng = np.random.default_rng(13)
    x0 = rng.standard_normal((1, 4, 4))
    y = rng.standard_normal((1, 4, 4))
    sigma_p, sigma_y = 1.0, 0.5
    obs = Observation(Identity(), y, sigma_y, 1.0 / (2 * sigma_y**2))
    cfg = DapsConfig(n_langevin=500, eta=1e-2)
    finals = np.stack([langevin_guidance(x0, [obs], sigma_p, cfg, seed=s) for s in range(256)])
    prec = sigma_p**-2 + sigma_y**-2
    expected = (x0 / sigma_p**2 + y / sigma_y**2) / prec
    stderr = math.sqrt(1.0 / prec / 256)
    assert np.all(np.abs(finals.mean(axis=0) - expected) < 3 * stderr)


def test_langevin_magnitude_guard():
    y = np.full((1, 4, 4), 1e9)
    obs = Observation(Identity(), y, 1.0, 1.0)
    with pytest.raises(NonFiniteState):
        langevin_guidance(np.zeros((1, 4, 4)), [obs], 1.0, DapsConfig(n_langevin=10), seed=0)


def test_step_cap_keeps_tiny_prior_spread_stable():
    x0 = np.random.default_rng(14).standard_normal((1, 8, 8))
    out = langevin_guidance(x0, [], 1e-3, DapsConfig(n_langevin=200, eta=1.0), seed=3)
    assert np.all(np.isfinite(out))
    assert np.abs(out - x0).max() < 0.01


# -- DAPS ----------------------------------------------------------------------------

def two_observations(shape, seed=15):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    mask = rng.integers(0, 2, size=shape)
    return [observe_noisy(Masking(mask), x, 0.2, seed=1, lambda_m=5.0),
            observe_noisy(Downsample(2), x, 0.1, seed=2, lambda_m=20.0)]


def test_daps_is_deterministic_and_seed_dependent():
    prior = gaussian_prior((2, 8, 8), window=3)
    obs = two_observations((2, 8, 8))
    sched = AnnealSchedule.karras(8)
    cfg = DapsConfig(n_langevin=10, ode_substeps=2)
    a = daps_reconstruct(prior, obs, sched, cfg, seed=4).values
    b = daps_reconstruct(prior, obs, sched, cfg, seed=4).values
    c = daps_reconstruct(prior, obs, sched, cfg, seed=5).values
    assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_daps_is_exchangeable_in_observations():
    prior = gaussian_prior((2, 8, 8), window=3)
    obs = two_observations((2, 8, 8))
    extra = observe_noisy(Identity(), np.zeros((2, 8, 8)), 0.5, seed=9, lambda_m=0.3)
    sched = AnnealSchedule.karras(6)
    cfg = DapsConfig(n_langevin=8, ode_substeps=2, seed=7)
    ref = daps_reconstruct(prior, obs + [extra], sched, cfg).values
    for perm in ([extra] + obs, [obs[1], extra, obs[0]]):
        assert_array_equal(daps_reconstruct(prior, perm, sched, cfg).values, ref)


def test_vanishing_weights_match_empty_observations():
    prior = gaussian_prior((1, 8, 8))
    obs = [Observation(o.kind, o.y, o.sigma_m, 1e-12) for o in two_observations((1, 8, 8))]
    sched = AnnealSchedule.karras(10)
    cfg = DapsConfig(n_langevin=20, seed=3)
    with_obs = daps_reconstruct(prior, obs, sched, cfg).values
    empty = daps_reconstruct(prior, [], sched, cfg, shape=(1, 8, 8)).values
    assert_allclose(with_obs, empty, atol=1e-8)


def test_annealing_callback_sees_every_level():
    prior = gaussian_prior((1, 4, 4))
    seen = []
    sched = AnnealSchedule.karras(5)
    daps_reconstruct(prior, [], sched, DapsConfig(n_langevin=2), shape=(1, 4, 4),
                     callback=lambda k, s, x0y, x: seen.append((k, s)))
    assert [k for k, _ in seen] == list(range(5))
    assert_array_equal([s for _, s in seen], sched.with_terminal[1:])


def test_daps_applies_normalization_to_observations():
    # With identity-like normalization bounds the physical result must match.
    prior = gaussian_prior((1, 8, 8))
    x = np.random.default_rng(16).uniform(0.5, 3.0, (1, 8, 8))
    norm = NormParams(0.0, 2.0)
    obs = observe_noisy(Identity(), x, 0.0, seed=0, lambda_m=50.0)
    out = daps_reconstruct(prior, [obs], AnnealSchedule.karras(10), DapsConfig(n_langevin=30),
                           norm=norm).values
    assert out.shape == x.shape and np.all(out > -1.0)


def white_spectrum(samples):
    return np.mean([rapsd(s[0]).power for s in samples], axis=0)[1:]


@pytest.mark.slow
def test_empty_observation_daps_matches_unconditional_spectrum():
    # The unconditional path needs a fine ODE solve; DAPS relies on Langevin spread instead.
    prior = AnalyticGaussian(np.zeros((1, 32, 32)), 1.0)
    sched = AnnealSchedule.karras(30)
    uncond = [unconditional_sample(prior, sched, None, s, cfg=DapsConfig(ode_substeps=12)).values
              for s in range(64)]
    cfg = DapsConfig(ode_substeps=1, sigma_prior_rule="tweedie_spread", sigma_prior_value=1.0)
    daps = [daps_reconstruct(prior, [], sched, cfg, shape=(1, 32, 32), seed=100 + s).values
            for s in range(64)]
    melr = np.mean(np.abs(np.log(white_spectrum(daps) / white_spectrum(uncond))))
    print(f"empty-observation DAPS vs unconditional spectral log ratio: {melr:.4f}")
    assert melr < 0.15


# -- unconditional -------------------------------------------------------------------

def test_unconditional_is_deterministic():
    prior = gaussian_prior((2, 4, 4))
    sched = AnnealSchedule.karras(6)
    assert_array_equal(unconditional_sample(prior, sched, 2, seed=3).values,
                       unconditional_sample(prior, sched, 2, seed=3).values)


@pytest.mark.slow
def test_unconditional_gaussian_moments():
    # Time-separable prior: 64 frames sharing one (mu, v) are independent draws, so 16 runs
    # give 1024 samples per cell. With 256 samples the Monte Carlo error of an exact sampler
    # (6.25% of sqrt(v)) already exceeds the 5% mean tolerance.
    rng = np.random.default_rng(17)
    mu = rng.standard_normal((1, 8, 8))
    var = rng.uniform(0.5, 2.0, (1, 8, 8))
    prior = AnalyticGaussian(np.repeat(mu, 64, axis=0), np.repeat(var, 64, axis=0))
    cfg = DapsConfig(ode_substeps=12)
    sched = AnnealSchedule.karras(30)
    draws = np.concatenate([unconditional_sample(prior, sched, 64, seed=s, cfg=cfg).values
                            for s in range(16)])
    z = (draws.mean(axis=0) - mu[0]) / np.sqrt(var[0])
    assert np.sqrt(np.mean(z**2)) < 0.05
    ratio = draws.var(axis=0, ddof=1) / var[0]
    assert np.all(np.abs(ratio - 1.0) < 0.25)


# -- DPS -----------------------------------------------------------------------------

def test_dps_without_guidance_is_probability_flow():
    prior = gaussian_prior((1, 8, 8))
    obs = two_observations((1, 8, 8))
    sched = AnnealSchedule.karras(12)
    assert_array_equal(dps_reconstruct(prior, obs, sched, 0.0, seed=6).values,
                       probability_flow_sample(prior, sched, seed=6, shape=(1, 8, 8)).values)


def test_dps_guidance_pulls_towards_data():
    prior = AnalyticGaussian(np.zeros((1, 8, 8)), 1.0)
    y = np.random.default_rng(18).standard_normal((1, 8, 8))
    obs = Observation(Identity(), y, 0.1, 1.0)
    sched = AnnealSchedule.karras(20)
    wins = 0
    for s in range(32):
        guided = dps_reconstruct(prior, [obs], sched, 1.0, seed=s).values
        free = probability_flow_sample(prior, sched, seed=s, shape=(1, 8, 8)).values
        wins += np.linalg.norm(guided - y) < np.linalg.norm(free - y)
    assert wins >= 30


def test_dps_divergence_is_surfaced():
    prior = gaussian_prior((1, 8, 8))
    obs = Observation(Identity(), np.ones((1, 8, 8)), 0.1, 1.0)
    with pytest.raises(NonFiniteState):
        dps_reconstruct(prior, [obs], AnnealSchedule.karras(10), 1e9, seed=0)


# -- ensembles ------------------------------------------------------------------------

def test_degenerate_ensemble_has_zero_std():
    prior = gaussian_prior((1, 4, 4))
    res = ensemble_reconstruct(prior, [], AnnealSchedule.karras(5), DapsConfig(n_langevin=3), 2,
                               shape=(1, 4, 4), member_seeds=[9, 9])
    assert_array_equal(res.std.values, 0.0)
    with pytest.raises(ValueError):
        ensemble_reconstruct(prior, [], AnnealSchedule.karras(5), DapsConfig(), 1, shape=(1, 4, 4))


def test_ensemble_statistics_come_from_members():
    prior = gaussian_prior((1, 4, 4))
    res = ensemble_reconstruct(prior, [], AnnealSchedule.karras(5), DapsConfig(n_langevin=3), 3,
                               shape=(1, 4, 4))
    stack = np.stack([s.values for s in res.samples])
    assert_allclose(res.mean.values, stack.mean(axis=0), rtol=1e-15)
    assert_allclose(res.std.values, stack.std(axis=0), rtol=1e-15)
    assert np.all(res.std.values >= 0) and len(set(res.seeds)) == 3


def test_gaussian_ensemble_localizes_uncertainty():
    rng = np.random.default_rng(19)
    shape = (1, 16, 16)
    prior = AnalyticGaussian(np.zeros(shape), 1.0)
    x = rng.standard_normal(shape)
    mask = (rng.random(shape) >= 0.45).astype(np.uint8)
    masked = observe_noisy(Masking(mask), x, 0.1, seed=1, lambda_m=50.0)
    coarse = observe_noisy(Downsample(2), x, 0.1, seed=2, lambda_m=50.0)
    sched = AnnealSchedule.karras(20)
    cfg = DapsConfig(n_langevin=30, ode_substeps=1)
    only = ensemble_reconstruct(prior, [masked], sched, cfg, 16).std.values
    joint = ensemble_reconstruct(prior, [masked, coarse], sched, cfg, 16).std.values
    assert only[mask == 0].mean() > only[mask == 1].mean()
    assert joint.mean() <= only.mean()


def test_recon_result_round_trip(tmp_path):
    rng = np.random.default_rng(20)
    samples = [Field.from_array(rng.uniform(0, 1, (2, 4, 4)).astype(np.float32).astype(float))
               for _ in range(3)]
    res = ReconResult.from_samples(samples, seeds=(1, 2, 3), meta={"eta": 0.01})
    res.save(tmp_path)
    back = ReconResult.load(tmp_path)
    assert back.seeds == (1, 2, 3)
    for a, b in zip(back.samples, samples):
        assert_array_equal(a.values, b.values)
    assert_allclose(back.mean.values, res.mean.values, rtol=1e-6)
    assert_allclose(back.std.values, res.std.values, rtol=1e-6, atol=1e-7)
    assert back.meta["eta"] == "0.01"


@pytest.mark.parametrize("bad", [{"mask_mode": "random"}, {"ambient_masks": 0},
                                 {"ambient_rate": 1.0}, {"ambient_rate": -0.1},
                                 {"ode_substeps": 0}, {"eta": 0.0}, {"solver": "rk4"}])
def test_daps_config_rejects_bad_values(bad):
    with pytest.raises(ValueError):
        DapsConfig(**bad)
