import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from lifelong_pose.probes import finite_difference_check
from lifelong_pose.substrate import (DTYPE, MLP, DescriptorMismatch, NonFiniteGradient, NonFiniteLoss, ShapeMismatch,
                                     TemporalConvNet, apply_gradients, build_model, ema_update, gradient,
                                     load_checkpoint, make_generator, make_optimizer, save_checkpoint)


def test_zero_mlp_outputs_zero():
    m = MLP([5, 7, 3]).zero_()
    assert torch.count_nonzero(m(torch.randn(4, 5, dtype=DTYPE))) == 0


def test_identity_linear():
    m = MLP([4, 4])
    with torch.no_grad():
        m.layers[0].weight.copy_(torch.eye(4, dtype=DTYPE))
        m.layers[0].bias.zero_()
    x = torch.randn(3, 4, dtype=DTYPE)
    assert torch.equal(m(x), x)


def test_forward_determinism_and_seeding():
    a, b = MLP([6, 8, 2], gen=make_generator(3)), MLP([6, 8, 2], gen=make_generator(3))
    x = torch.randn(5, 6, generator=make_generator(1), dtype=DTYPE)
    assert torch.equal(a(x), b(x)) and a.param_hash() == b.param_hash()
    assert MLP([6, 8, 2], gen=make_generator(4)).param_hash() != a.param_hash()


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        MLP([3, 2])(torch.zeros(1, 4, dtype=DTYPE))
    with pytest.raises(ShapeMismatch):
        TemporalConvNet(4, 2, frames=9, dilations=(3,), channels=8)(torch.zeros(1, 8, 4, dtype=DTYPE))


def test_tcn_receptive_field():
    net = TemporalConvNet(4, 2, frames=27, channels=8, dilations=(3, 9))
    assert net.receptive_field == 27
    assert net(torch.zeros(2, 30, 4, dtype=DTYPE)).shape == (2, 4, 2)
    with pytest.raises(ValueError):
        TemporalConvNet(4, 2, frames=81, channels=8, dilations=(3, 9))


@pytest.mark.parametrize("sizes", [[3, 5], [3, 6, 2]])
def test_param_count_from_descriptor(sizes):
    m = MLP(sizes)
    assert build_model(m.descriptor).param_count() == m.param_count()
    assert m.param_count() == sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def test_half_square_norm_gradient_matches_fd():
    m = MLP([4, 3], activation="identity", gen=make_generator(0))
    x = torch.randn(6, 4, generator=make_generator(1), dtype=DTYPE)
    g = gradient(m, lambda mod: 0.5 * (mod(x) ** 2).sum())
    out = m(x).detach()
    np.testing.assert_allclose(g["layers.0.weight"].numpy(), (out.T @ x).numpy(), rtol=1e-12)
    err = finite_difference_check(lambda: 0.5 * (m(x) ** 2).sum(), list(m.parameters()), h=1e-5)
    assert err < 1e-4


def test_constant_loss_zero_gradient():
    m = MLP([2, 2])
    g = gradient(m, lambda mod: torch.tensor(3.0, dtype=DTYPE) + 0 * sum(p.sum() for p in mod.parameters()))
    assert all(torch.count_nonzero(v) == 0 for v in g.values())


def test_non_finite_loss():
    m = MLP([2, 2])
    with pytest.raises(NonFiniteLoss):
        gradient(m, lambda mod: mod(torch.zeros(1, 2, dtype=DTYPE)).sum() * float("nan"))


def test_linear_critic_gradient_norm_oracle():
    # ||grad_x (w.x)|| = ||w||, independent of x; its gradient w.r.t. w is w/||w||
    w = torch.tensor([0.3, -1.2, 0.5], dtype=DTYPE, requires_grad=True)
    x = torch.randn(5, 3, dtype=DTYPE, requires_grad=True)
    (gx,) = torch.autograd.grad((x @ w).sum(), x, create_graph=True)
    norm = torch.linalg.vector_norm(gx[0])
    (gw,) = torch.autograd.grad(norm, w)
    np.testing.assert_allclose(gw.numpy(), (w / w.norm()).detach().numpy(), rtol=1e-12)

    def f():
        (g,) = torch.autograd.grad((x @ w).sum(), x, create_graph=True)
        return torch.linalg.vector_norm(g[0])

    assert finite_difference_check(f, [w]) < 1e-4


def test_adam_first_step():
    w = torch.nn.Parameter(torch.tensor([2.0], dtype=DTYPE))
    opt = make_optimizer("adam", [w], lr=0.1)
    apply_gradients(opt, [w], [torch.tensor([1.0], dtype=DTYPE)])
    assert w.item() == pytest.approx(1.9, abs=1e-6)


def test_zero_gradient_adam_and_adamw():
    w = torch.nn.Parameter(torch.tensor([2.0], dtype=DTYPE))
    opt = make_optimizer("adam", [w], lr=0.1)
    apply_gradients(opt, [w], [torch.zeros(1, dtype=DTYPE)])
    assert w.item() == 2.0
    opt = make_optimizer("adamw", [w], lr=0.1, weight_decay=0.01)
    apply_gradients(opt, [w], [torch.zeros(1, dtype=DTYPE)])
    assert w.item() == pytest.approx(2.0 * (1 - 0.1 * 0.01), abs=1e-15)


def test_symmetric_parameters_update_identically():
    a = torch.nn.Parameter(torch.tensor([1.0], dtype=DTYPE))
    b = torch.nn.Parameter(torch.tensor([1.0], dtype=DTYPE))
    opt = make_optimizer("adamw", [a, b], lr=0.01)
    for g in (0.5, -0.2, 1.5):
        apply_gradients(opt, [a, b], [torch.tensor([g], dtype=DTYPE)] * 2)
    assert a.item() == b.item()


def test_non_finite_gradient():
    w = torch.nn.Parameter(torch.tensor([1.0], dtype=DTYPE))
    opt = make_optimizer("adam", [w], lr=0.1)
    with pytest.raises(NonFiniteGradient):
        apply_gradients(opt, [w], [torch.tensor([float("inf")], dtype=DTYPE)])


def _filled(v, sizes=(1, 1)):
    m = MLP(list(sizes))
    with torch.no_grad():
        for p in m.parameters():
            p.fill_(v)
    return m


def test_ema_endpoints_and_scalar_case():
    a, b = MLP([3, 4], gen=make_generator(0)), MLP([3, 4], gen=make_generator(1))
    assert ema_update(a, b, 1.0).param_hash() == a.param_hash()
    assert ema_update(a, b, 0.0).param_hash() == b.param_hash()
    assert ema_update(_filled(0.0), _filled(1.0), 0.99).layers[0].weight.item() == pytest.approx(0.01, abs=1e-15)
    with pytest.raises(DescriptorMismatch):
        ema_update(MLP([3, 4]), MLP([3, 5]), 0.5)


@given(st.floats(0, 1), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_ema_affine(eta, a, b, c, d):
    lhs = ema_update(_filled(a), _filled(b), eta).layers[0].weight.item() + \
        ema_update(_filled(c), _filled(d), eta).layers[0].weight.item()
    rhs = ema_update(_filled(a + c), _filled(b + d), eta).layers[0].weight.item()
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_checkpoint_bit_exact(tmp_path):
    m = TemporalConvNet(4, 2, frames=9, channels=8, dilations=(3,), gen=make_generator(5))
    save_checkpoint(tmp_path / "ck", {"net": m}, seed=5, step=0)
    models, man = load_checkpoint(tmp_path / "ck")
    assert man["seed"] == 5 and man["models"]["net"] == m.descriptor
    assert models["net"].param_hash() == m.param_hash()
    with np.load(tmp_path / "ck" / "arrays.npz") as z:
        assert all(z[k].dtype == np.dtype("<f8") for k in z.files)
