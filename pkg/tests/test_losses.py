import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lifelong_pose.losses import (Discriminator, LossWeights, SkeletonMismatch, ZeroNormPose, loss_2d, loss_3d,
                                  loss_dis, loss_estimator_discriminator, loss_generator)
from lifelong_pose.probes import _probe_batch, gradient_probes
from lifelong_pose.substrate import DTYPE, make_generator


def _constant_critic(c=0.7):
    d = Discriminator(hidden=(8,))
    d.zero_()
    with torch.no_grad():
        d.layers[-1].bias.fill_(c)
    return d


def _linear_critic(w):
    d = Discriminator(hidden=(), activation="identity")
    with torch.no_grad():
        d.layers[0].weight.copy_(torch.as_tensor(w, dtype=DTYPE).reshape(1, -1))
        d.layers[0].bias.zero_()
    return d


def test_3d_loss_identity_is_zero():
    clip3d, *_ = _probe_batch(0)
    assert loss_3d(clip3d[:, 1], clip3d[:, 1]).item() == 0.0


def test_3d_loss_hand_case():
    y = torch.zeros(1, 16, 3, dtype=DTYPE)
    yt = torch.full((1, 16, 3), 0.1, dtype=DTYPE)
    assert loss_3d(y, yt).item() == pytest.approx(0.01 + abs(1 - np.exp(0.1)), rel=1e-12)


def test_2d_loss_scaled_copy_has_zero_shape_term():
    _, x, _, _ = _probe_batch(0)
    assert loss_2d(x, 2 * x).item() == pytest.approx(torch.mean(x**2).item(), rel=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 1000))
def test_losses_symmetric_and_nonnegative(seed):
    clip3d, x, prior, _ = _probe_batch(seed)
    a, b = clip3d[:, 0], clip3d[:, 2]
    assert loss_3d(a, b).item() == pytest.approx(loss_3d(b, a).item(), rel=1e-12)
    assert loss_2d(x, prior).item() == pytest.approx(loss_2d(prior, x).item(), rel=1e-12)
    assert loss_3d(a, b).item() >= 0 and loss_2d(x, prior).item() >= 0


def test_shape_and_zero_norm_errors():
    with pytest.raises(SkeletonMismatch):
        loss_3d(torch.zeros(2, 16, 3, dtype=DTYPE), torch.zeros(2, 17, 3, dtype=DTYPE))
    with pytest.raises(ZeroNormPose):
        loss_2d(torch.zeros(2, 16, 2, dtype=DTYPE), torch.ones(2, 16, 2, dtype=DTYPE))


@pytest.mark.parametrize("mode", ["as-written", "standard-gp"])
def test_constant_critic_gives_alpha(mode):
    _, x, prior, eps = _probe_batch(0)
    w = LossWeights(alpha=0.35, penalty_mode=mode)
    assert loss_dis(x, prior, _constant_critic(), w, eps=eps).item() == 0.35


def test_linear_critic_closed_form():
    _, x, prior, eps = _probe_batch(1)
    w = torch.as_tensor(np.random.default_rng(0).standard_normal(32) * 0.3, dtype=DTYPE)
    critic = _linear_critic(w)
    gap = (x.flatten(1) @ w).mean() - (prior.flatten(1) @ w).mean()
    n = torch.linalg.vector_norm(w)
    gp = loss_dis(x, prior, critic, LossWeights(alpha=0.35), eps=eps).item()
    aw = loss_dis(x, prior, critic, LossWeights(alpha=0.35, penalty_mode="as-written"), eps=eps).item()
    assert gp == pytest.approx((gap + 0.35 * (n - 1) ** 2).item(), rel=1e-12)
    assert aw == pytest.approx((gap + 0.35 * (1 - n)).item(), rel=1e-12)
    swapped = loss_dis(x, prior, critic, LossWeights(alpha=0.35, swap_critic_sign=True), eps=eps).item()
    assert swapped == pytest.approx((-gap + 0.35 * (n - 1) ** 2).item(), rel=1e-12)


def test_combined_objectives_weighting():
    clip3d, x, prior, eps = _probe_batch(2)
    critic = Discriminator(hidden=(8,), activation="tanh", gen=make_generator(0))
    w = LossWeights(beta=2.5, gamma=1.5)
    ld = loss_dis(x, prior, critic, w, eps=eps)
    y_hat, y_t = clip3d[:, 0], clip3d[:, 1]
    assert loss_generator(y_hat, y_t, x, prior, critic, w, eps=eps).item() == pytest.approx(
        (loss_3d(y_hat, y_t) - 2.5 * ld).item(), rel=1e-12)
    assert loss_estimator_discriminator(x, prior, critic, w, eps=eps).item() == pytest.approx(
        (loss_2d(x, prior) + 1.5 * ld).item(), rel=1e-12)


def test_interpolation_weights_seeded():
    _, x, prior, _ = _probe_batch(3)
    critic = Discriminator(hidden=(8,), activation="tanh", gen=make_generator(0))
    a = loss_dis(x, prior, critic, LossWeights(), gen=make_generator(9))
    b = loss_dis(x, prior, critic, LossWeights(), gen=make_generator(9))
    assert a.item() == b.item()


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1)
    with pytest.raises(ValueError):
        LossWeights(penalty_mode="other")


def test_all_gradient_probes_pass():
    results = gradient_probes()
    assert results and all(r.ok for r in results), [r.line() for r in results if not r.ok]
