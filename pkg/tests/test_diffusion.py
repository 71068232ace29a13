import math

import numpy as np
import pytest
import torch

from lifelong_pose.diffusion import (DiffusionSampler, DiffusionSchedule, EmptyDomain, PoolConfigError,
                                     StepOutOfRange, UntrainedPredictor, ddim_sample, ddim_sigma, ddim_steps,
                                     forward_noise, new_sampler, sampler_pool, train_sampler)
from lifelong_pose.substrate import DTYPE, make_generator

SCHED = DiffusionSchedule()


def _poses(n=64, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((16, 2)) * 0.2
    return base + 0.01 * rng.standard_normal((n, 16, 2))


def _zero_sampler(schedule=SCHED):
    s = new_sampler(_poses(), 0, schedule, hidden=16, depth=1)
    s.predictor.net.zero_()
    s.trained = True
    return s


def test_schedule_endpoints():
    assert SCHED.betas[0] == 1e-4 and SCHED.betas[-1] == pytest.approx(0.02, abs=1e-15)
    assert SCHED.alpha_bar[0] == 1.0
    assert SCHED.alpha_bar[1] == pytest.approx(1 - 1e-4, abs=1e-15)
    assert np.all(np.diff(SCHED.alpha_bar) < 0)


@pytest.mark.parametrize("k", [1, 100, 400])
def test_forward_marginal_monte_carlo(k):
    n = 10_000
    x0 = torch.linspace(-1, 1, 32, dtype=DTYPE).reshape(1, 16, 2)
    noise = torch.randn((n, 16, 2), generator=make_generator(k), dtype=DTYPE)
    xk = forward_noise(x0.expand(n, -1, -1), k, noise, SCHED)
    ab = SCHED.alpha_bar[k]
    sd = math.sqrt(1 - ab)
    mean_err = (xk.mean(0) - math.sqrt(ab) * x0[0]).abs()
    assert torch.all(mean_err <= 4 * sd / math.sqrt(n))
    var = xk.var(0)
    assert torch.all((var / (1 - ab) - 1).abs() <= 0.05)


def test_step_out_of_range():
    x0 = torch.zeros(1, 16, 2, dtype=DTYPE)
    for k in (0, SCHED.T + 1):
        with pytest.raises(StepOutOfRange):
            forward_noise(x0, k, x0, SCHED)
    with pytest.raises(StepOutOfRange):
        ddim_steps(400, 0)


def test_ddim_sigma_matches_direct_formula():
    for k, prev, eta in ((400, 390, 0.2), (40, 30, 1.0), (10, 0, 0.5), (2, 1, 0.0)):
        ab, ap = SCHED.alpha_bar[k], SCHED.alpha_bar[prev]
        direct = eta * math.sqrt((1 - ap) / (1 - ab) * (1 - ab / ap))
        assert abs(ddim_sigma(ab, ap, eta) - direct) <= 1e-12


def test_ddim_step_schedules():
    assert ddim_steps(400, 40)[:3] == [400, 390, 380] and ddim_steps(400, 40)[-1] == 10
    assert ddim_steps(400, 400) == list(range(400, 0, -1))
    assert ddim_steps(400, 5, truncated=True) == [5, 4, 3, 2, 1]


def test_eta_zero_sampling_is_bitwise_deterministic():
    s = new_sampler(_poses(), 3, SCHED, hidden=16, depth=1)
    s.trained = True
    a = ddim_sample(s, 8, steps=10, eta=0.0, seed=1)
    b = ddim_sample(s, 8, steps=10, eta=0.0, seed=1)
    assert torch.equal(a, b)


def test_zero_predictor_closed_form_path():
    # with a zero noise prediction each deterministic step rescales x by sqrt(abar_prev / abar_k)
    s = _zero_sampler()
    steps = 10
    out = ddim_sample(s, 5, steps=steps, eta=0.0, seed=2, return_normalized=True)
    x_T = torch.randn((5, 16, 2), generator=make_generator(2), dtype=DTYPE)
    ks = ddim_steps(SCHED.T, steps)
    expected = x_T.clone()
    for i, k in enumerate(ks):
        prev = ks[i + 1] if i + 1 < len(ks) else 0
        expected = math.sqrt(SCHED.alpha_bar[prev]) * (expected / math.sqrt(SCHED.alpha_bar[k]))
    assert torch.equal(out, expected)
    assert torch.allclose(out, x_T / math.sqrt(SCHED.alpha_bar[SCHED.T]), rtol=1e-12)


def test_one_step_recovery_with_oracle_noise():
    x0 = torch.as_tensor(_poses(4), dtype=DTYPE)
    noise = torch.randn(x0.shape, generator=make_generator(0), dtype=DTYPE)
    k = 250
    xk = forward_noise(x0, k, noise, SCHED)
    ab = SCHED.alpha_bar[k]
    x0_hat = (xk - math.sqrt(1 - ab) * noise) / math.sqrt(ab)
    assert torch.allclose(x0_hat, x0, atol=1e-12)


def test_untrained_sampler_refuses():
    with pytest.raises(UntrainedPredictor):
        ddim_sample(new_sampler(_poses(), 0, SCHED, hidden=8, depth=1), 2, steps=2)


def test_empty_domain_and_pool_errors():
    with pytest.raises(EmptyDomain):
        new_sampler(np.zeros((0, 16, 2)), 0)
    with pytest.raises(PoolConfigError):
        sampler_pool(_zero_sampler(), 0)


def test_zero_steps_pool_is_scaled_noise():
    s = _zero_sampler()
    pool = sampler_pool(s, 6, steps=0, seed=4)
    z = torch.randn((6, 16, 2), generator=make_generator(4), dtype=DTYPE)
    assert torch.equal(pool, z * s.scale)


def test_training_is_deterministic_and_fits():
    poses = _poses(128)
    init = new_sampler(poses, 0, DiffusionSchedule(T=50), hidden=32, depth=2)
    a = train_sampler(poses, init, epochs=30, lr=2e-3, batch_size=32, seed=5)
    b = train_sampler(poses, init, epochs=30, lr=2e-3, batch_size=32, seed=5)
    assert a.predictor.param_hash() == b.predictor.param_hash()
    assert a.losses[-1] < 0.85 * a.losses[0]
    assert init.trained is False and train_sampler(poses, init, epochs=0).predictor.param_hash() == \
        init.predictor.param_hash()


def test_save_load_round_trip(tmp_path):
    s = _zero_sampler(DiffusionSchedule(T=30))
    s.save(tmp_path / "s")
    back = DiffusionSampler.load(tmp_path / "s")
    assert back.scale == s.scale and back.schedule.T == 30 and back.trained
    assert back.predictor.param_hash() == s.predictor.param_hash()
