import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lifelong_pose.generators import (DegenerateQuaternion, GeneratorBundle, GeneratorConfig, augment, bones_t,
                                      encode_input, g_ba, g_bl, g_rt, joints_t, quaternion_to_matrix, rt_params,
                                      temporal_pool)
from lifelong_pose.probes import _probe_batch
from lifelong_pose.substrate import DTYPE, MLP, make_generator

CFG = GeneratorConfig(embed_dim=8, segment_dim=4, hidden=16)


def _bundle(seed=0, identity=False):
    return GeneratorBundle(embed_dim=8, segment_dim=4, hidden=16, gen=make_generator(seed), identity=identity)


def _randomize_heads(bundle, seed, scale=1.0):
    g = make_generator(seed)
    with torch.no_grad():
        for p in list(bundle.g_ba.parameters()) + list(bundle.g_bl.parameters()) + list(bundle.g_rt.parameters()):
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=DTYPE))
    return bundle


def test_fresh_bundle_is_identity():
    clip3d, _, prior, _ = _probe_batch(0)
    out = augment(_bundle(identity=True), clip3d, prior, CFG)
    np.testing.assert_allclose(out.detach().numpy(), clip3d[:, 1].numpy(), atol=1e-12)


def test_disabled_generators_are_identity():
    clip3d, _, prior, _ = _probe_batch(1)
    cfg = GeneratorConfig(embed_dim=8, segment_dim=4, hidden=16, ba=False, bl=False, rt=False)
    out = augment(_randomize_heads(_bundle(), 3), clip3d, prior, cfg)
    np.testing.assert_allclose(out.detach().numpy(), clip3d[:, 1].numpy(), atol=1e-12)


def test_kinematics_round_trip():
    clip3d, *_ = _probe_batch(2)
    pose = clip3d[:, 0]
    dirs, lengths = bones_t(pose)
    back = joints_t(dirs, lengths, root=pose[:, 0])
    assert torch.max(torch.abs(back - pose)) < 1e-12


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_bone_angle_output_is_unit(seed):
    clip3d, _, prior, _ = _probe_batch(seed % 7)
    b = _randomize_heads(_bundle(seed), seed, scale=3.0)
    inp = encode_input(b, clip3d, prior, CFG)
    dirs, lengths = bones_t(clip3d[:, 1])
    new_dirs, new_len = g_ba(inp, dirs, lengths, b.g_ba, CFG.direction_gain)
    assert torch.max(torch.abs(torch.linalg.vector_norm(new_dirs, dim=-1) - 1)) <= 1e-6
    assert torch.equal(new_len, lengths)


def test_bone_length_ratios_bounded_over_many_draws():
    clip3d, _, prior, _ = _probe_batch(0, b=50)
    dirs, lengths = bones_t(clip3d[:, 1])
    ratios = []
    for seed in range(200):  # 200 * 50 = 10^4 draws
        b = _randomize_heads(_bundle(seed), seed, scale=3.0)
        inp = encode_input(b, clip3d, prior, CFG)
        _, new_len = g_bl(inp, dirs, lengths, b.g_bl, CFG.length_range)
        ratios.append((new_len / lengths).detach().numpy())
    r = np.concatenate(ratios)
    assert r.min() > 0.7 and r.max() < 1.3


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_rotation_translation_is_isometry(seed):
    clip3d, _, prior, _ = _probe_batch(seed % 5)
    b = _randomize_heads(_bundle(seed), seed, scale=2.0)
    inp = encode_input(b, clip3d, prior, CFG)
    pose = clip3d[:, 1]
    out = g_rt(inp, pose, b.g_rt, 0.2)
    d_in = torch.cdist(pose, pose)
    d_out = torch.cdist(out, out)
    assert torch.max(torch.abs(d_in - d_out)) <= 1e-6
    q, t = rt_params(inp, b.g_rt, 0.2)
    rot = quaternion_to_matrix(q)
    assert torch.allclose(torch.linalg.det(rot), torch.ones(len(rot), dtype=DTYPE), atol=1e-9)
    assert torch.all(t.abs() <= 0.2)


def test_zero_quaternion_raises():
    clip3d, _, prior, _ = _probe_batch(0)
    b = _bundle()
    b.g_rt.zero_()
    with torch.no_grad():
        b.g_rt.layers[-1].bias[:4] = torch.tensor([-1.0, 0, 0, 0], dtype=DTYPE)
    with pytest.raises(DegenerateQuaternion):
        rt_params(encode_input(b, clip3d, prior, CFG), b.g_rt, 0.2)


def test_prior_only_reaches_its_own_slice():
    clip3d, _, prior, _ = _probe_batch(3)
    b = _bundle(5)
    a = encode_input(b, clip3d, prior, CFG)
    c = encode_input(b, clip3d, prior + 0.5, CFG)
    sl = a.slices()
    for name in ("jc", "bv", "ps", "te"):
        assert torch.equal(a.concatenated[:, sl[name]], c.concatenated[:, sl[name]])
    assert not torch.equal(a.de, c.de)


def test_disabled_encoders_give_zero_slices():
    clip3d, _, prior, _ = _probe_batch(3)
    cfg = GeneratorConfig(embed_dim=8, segment_dim=4, hidden=16, ps=False, te=False, de=False)
    inp = encode_input(_bundle(5), clip3d, prior, cfg)
    for t in (inp.ps, inp.te, inp.de):
        assert torch.count_nonzero(t) == 0


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_temporal_pool_is_convex_combination(seed):
    clip3d, *_ = _probe_batch(seed % 5)
    pool = MLP([48, 1], gen=make_generator(seed))
    out = temporal_pool(clip3d, pool)
    lo, hi = clip3d.min(dim=1).values, clip3d.max(dim=1).values
    assert torch.all(out >= lo - 1e-12) and torch.all(out <= hi + 1e-12)
