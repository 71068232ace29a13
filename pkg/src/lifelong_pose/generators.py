"""Pose-, temporal- and domain-aware 3D pose generators (bone angle, bone length, rotation/translation).

Everything is batched torch code: ``clip3d`` is ``(B, F, J, 3)`` with the
pose to augment at the centre frame, ``prior2d`` is ``(B, J, 2)``.
The generator heads are zero-initialised so a fresh bundle is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .skeleton import DEFAULT_SKELETON, Skeleton
from .substrate import DTYPE, MLP, ACTIVATIONS, ParamModel, ShapeMismatch, register

DEGENERATE_TOL = 1e-9
IDENTITY_QUATERNION = (1.0, 0.0, 0.0, 0.0)


class DegenerateDirection(ValueError):
    pass


class DegenerateQuaternion(ValueError):
    pass


@dataclass
class GeneratorConfig:
    embed_dim: int = 32
    segment_dim: int = 16
    hidden: int = 128
    te_frames: int = 9
    activation: str = "relu"
    direction_gain: float = 0.3
    length_range: float = 0.3
    max_translation_mm: float = 200.0
    # ablation switches: encoders (ps/te/de) and generators (ba/bl/rt)
    ps: bool = True
    te: bool = True
    de: bool = True
    ba: bool = True
    bl: bool = True
    rt: bool = True


@dataclass
class GeneratorInput:
    jc: torch.Tensor
    bv: torch.Tensor
    ps: torch.Tensor
    te: torch.Tensor
    de: torch.Tensor
    order: tuple = field(default=("jc", "bv", "ps", "te", "de"), repr=False)

    @property
    def concatenated(self) -> torch.Tensor:
        return torch.cat([getattr(self, k) for k in self.order], dim=-1)

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for k in self.order:
            n = getattr(self, k).shape[-1]
            out[k] = slice(start, start + n)
            start += n
        return out


# ------------------------------------------------------------------ differentiable kinematics


def bone_index(skel: Skeleton):
    par = torch.tensor([p for p, _ in skel.bones])
    chi = torch.tensor([c for _, c in skel.bones])
    return par, chi


def bones_t(joints, skel: Skeleton = DEFAULT_SKELETON):
    par, chi = bone_index(skel)
    vec = joints[..., chi, :] - joints[..., par, :]
    lengths = torch.linalg.vector_norm(vec, dim=-1)
    return vec / lengths.unsqueeze(-1), lengths


def joints_t(dirs, lengths, skel: Skeleton = DEFAULT_SKELETON, root=None):
    joints = [None] * skel.joint_count
    joints[0] = torch.zeros(dirs.shape[:-2] + (3,), dtype=dirs.dtype) if root is None else root
    for i, (p, c) in enumerate(skel.bones):
        joints[c] = joints[p] + lengths[..., i, None] * dirs[..., i, :]
    return torch.stack(joints, dim=-2)


def quaternion_to_matrix(q):
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def rigid_transform(pose, q, t):
    """Rotate every joint by unit quaternion ``q`` (about the origin) then translate by ``t``."""
    rot = quaternion_to_matrix(q)
    return pose @ rot.transpose(-1, -2) + t.unsqueeze(-2)


# ------------------------------------------------------------------------------ models


@register("generators")
class GeneratorBundle(ParamModel):
    """Projection encoders (E_JC, E_BV, E_PS, E_TE, E_DE), the temporal weighting
    network and the three generator heads."""

    def __init__(self, joints=16, segments=None, embed_dim=32, segment_dim=16, hidden=128,
                 prior_dims=2, activation="relu", gen=None, identity=True):
        super().__init__()
        segments = [list(s) for s in (segments or [j for _, j in DEFAULT_SKELETON.segments])]
        bones = joints - 1
        self.descriptor = {
            "kind": "generators", "joints": joints, "segments": segments, "embed_dim": embed_dim,
            "segment_dim": segment_dim, "hidden": hidden, "prior_dims": prior_dims,
            "activation": activation, "identity": identity,
        }
        self.act = ACTIVATIONS[activation]
        self.e_jc = MLP([joints * 3, embed_dim], gen=gen)
        self.e_bv = MLP([bones * 3, embed_dim], gen=gen)
        self.e_ps = nn.ModuleList(MLP([len(s) * 3, segment_dim], gen=gen) for s in segments)
        # 1-wide temporal convolution == per-frame linear map to a scalar logit
        self.te_pool = MLP([joints * 3, 1], gen=gen)
        self.e_te = MLP([joints * 3, embed_dim], gen=gen)
        self.e_de = MLP([joints * prior_dims, embed_dim], gen=gen)
        width = 4 * embed_dim + len(segments) * segment_dim
        self.input_dim = width
        self.g_ba = MLP([width, hidden, bones * 3], activation, gen=gen, zero_last=identity)
        self.g_bl = MLP([width, hidden, bones], activation, gen=gen, zero_last=identity)
        self.g_rt = MLP([width, hidden, 7], activation, gen=gen, zero_last=identity)

    def init_params(self, gen=None, zero_last=False):
        return self  # sub-models initialise themselves

    def encoder_parameters(self):
        mods = [self.e_jc, self.e_bv, self.e_ps, self.te_pool, self.e_te, self.e_de]
        return [p for m in mods for p in m.parameters()]


def temporal_pool(clip3d, pool: MLP):
    """Softmax-weighted average of the frames of ``clip3d`` ``(B, F, J, 3) -> (B, J, 3)``."""
    logits = pool(clip3d.flatten(-2)).squeeze(-1)
    w = torch.softmax(logits, dim=-1)
    return torch.einsum("bf,bfjc->bjc", w, clip3d)


def encode_input(bundle: GeneratorBundle, clip3d, prior2d, cfg: GeneratorConfig,
                 skel: Skeleton = DEFAULT_SKELETON) -> GeneratorInput:
    d = bundle.descriptor
    if clip3d.ndim != 4 or clip3d.shape[-2:] != (d["joints"], 3):
        raise ShapeMismatch(f"clip3d must be (B, F, {d['joints']}, 3), got {tuple(clip3d.shape)}")
    b = clip3d.shape[0]
    centre = clip3d[:, clip3d.shape[1] // 2]
    act = bundle.act
    jc = act(bundle.e_jc(centre.flatten(-2)))
    par, chi = bone_index(skel)
    bv = act(bundle.e_bv((centre[:, chi] - centre[:, par]).flatten(-2)))
    zeros = lambda n: torch.zeros(b, n, dtype=clip3d.dtype)
    if cfg.ps:
        ps = torch.cat([act(enc(centre[:, list(seg)].flatten(-2))) for enc, seg in zip(bundle.e_ps, d["segments"])], -1)
    else:
        ps = zeros(len(d["segments"]) * d["segment_dim"])
    if cfg.te:
        te = act(bundle.e_te(temporal_pool(clip3d, bundle.te_pool).flatten(-2)))
    else:
        te = zeros(d["embed_dim"])
    if cfg.de and prior2d is not None:
        if prior2d.shape != (b, d["joints"], d["prior_dims"]):
            raise ShapeMismatch(f"prior2d must be (B, J, {d['prior_dims']}), got {tuple(prior2d.shape)}")
        de = act(bundle.e_de(prior2d.flatten(-2)))
    else:
        de = zeros(d["embed_dim"])
    return GeneratorInput(jc, bv, ps, te, de)


def g_ba(inp: GeneratorInput, dirs, lengths, model: MLP, gain: float = 0.3):
    raw = model(inp.concatenated).reshape(dirs.shape)
    v = dirs + gain * raw
    n = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    if torch.any(n < DEGENERATE_TOL):
        raise DegenerateDirection("perturbed bone direction collapsed to zero")
    return v / n, lengths


def g_bl(inp: GeneratorInput, dirs, lengths, model: MLP, length_range: float = 0.3):
    # clamp keeps tanh strictly inside (-1, 1) in float64, so ratios never touch the bounds
    raw = model(inp.concatenated).clamp(-15.0, 15.0)
    ratio = 1.0 + length_range * torch.tanh(raw)
    return dirs, ratio * lengths


def rt_params(inp: GeneratorInput, model: MLP, max_translation: float):
    raw = model(inp.concatenated)
    q = raw[:, :4] + torch.tensor(IDENTITY_QUATERNION, dtype=raw.dtype)
    n = torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    if torch.any(n < DEGENERATE_TOL):
        raise DegenerateQuaternion("raw quaternion has zero norm")
    t = max_translation * torch.tanh(raw[:, 4:])
    return q / n, t


def g_rt(inp: GeneratorInput, pose, model: MLP, max_translation: float):
    q, t = rt_params(inp, model, max_translation)
    return rigid_transform(pose, q, t)


def augment(bundle: GeneratorBundle, clip3d, prior2d, cfg: GeneratorConfig, mm_per_unit: float = 1000.0,
            skel: Skeleton = DEFAULT_SKELETON):
    """Augment the centre frame of ``clip3d``: bones -> G_BA -> G_BL -> joints -> G_RT.

    ``mm_per_unit`` converts the millimetre translation bound into the pose units
    (poses are metres inside the training loop).
    """
    inp = encode_input(bundle, clip3d, prior2d, cfg, skel)
    base = clip3d[:, clip3d.shape[1] // 2]
    dirs, lengths = bones_t(base, skel)
    if cfg.ba:
        dirs, lengths = g_ba(inp, dirs, lengths, bundle.g_ba, cfg.direction_gain)
    if cfg.bl:
        dirs, lengths = g_bl(inp, dirs, lengths, bundle.g_bl, cfg.length_range)
    pose = joints_t(dirs, lengths, skel, root=base[:, 0])
    if cfg.rt:
        pose = g_rt(inp, pose, bundle.g_rt, cfg.max_translation_mm / mm_per_unit)
    return pose
