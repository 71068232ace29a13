"""2D pose denoising diffusion: noise-prediction training and DDIM sampling.

Poses are root-centred and divided by an RMS constant before diffusion; the
constant lives with the predictor and is undone on sampling.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .substrate import (DTYPE, MLP, ParamModel, apply_gradients, load_checkpoint, make_generator,
                        make_optimizer, register, save_checkpoint)


class StepOutOfRange(ValueError):
    pass


class EmptyDomain(ValueError):
    pass


class UntrainedPredictor(RuntimeError):
    pass


class PoolConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int = 400
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 1 or not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("invalid diffusion schedule")
        betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        # alpha_bar[0] = 1 so that index k is the cumulative product through step k
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    def check_step(self, k):
        k = np.asarray(k)
        if np.any(k < 1) or np.any(k > self.T):
            raise StepOutOfRange(f"step must lie in [1, {self.T}]")

    def hash(self) -> str:
        return hashlib.sha256(f"linear:{self.T}:{self.beta_start!r}:{self.beta_end!r}".encode()).hexdigest()[:16]


def timestep_embedding(k, dim: int):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half)
    args = k.to(DTYPE).unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


@register("noise_predictor")
class NoisePredictor(ParamModel):
    """MLP over (flattened noisy pose, sinusoidal step embedding) -> predicted noise."""

    def __init__(self, joints=16, dims=2, hidden=256, depth=3, temb_dim=32, activation="silu", gen=None):
        super().__init__()
        self.descriptor = {"kind": "noise_predictor", "joints": joints, "dims": dims, "hidden": hidden,
                           "depth": depth, "temb_dim": temb_dim, "activation": activation}
        width = joints * dims
        self.net = MLP([width + temb_dim] + [hidden] * depth + [width], activation, gen=gen)

    def init_params(self, gen=None, zero_last=False):
        return self

    def forward(self, x, k):
        d = self.descriptor
        flat = x.reshape(x.shape[0], -1)
        out = self.net(torch.cat([flat, timestep_embedding(k, d["temb_dim"])], dim=-1))
        return out.reshape(x.shape)


@dataclass
class DiffusionSampler:
    predictor: NoisePredictor
    scale: float
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    trained: bool = False
    losses: list = field(default_factory=list)

    def normalize(self, poses):
        poses = torch.as_tensor(poses, dtype=DTYPE)
        return (poses - poses[..., :1, :]) / self.scale

    def denormalize(self, z):
        return z * self.scale

    def clone(self) -> "DiffusionSampler":
        return DiffusionSampler(self.predictor.clone(), self.scale, self.schedule, self.trained, list(self.losses))

    def save(self, path, **manifest):
        s = self.schedule
        return save_checkpoint(path, {"predictor": self.predictor}, scale=self.scale, trained=self.trained,
                               schedule={"T": s.T, "beta_start": s.beta_start, "beta_end": s.beta_end},
                               schedule_hash=s.hash(), losses=self.losses, **manifest)

    @classmethod
    def load(cls, path) -> "DiffusionSampler":
        models, man = load_checkpoint(path)
        sched = DiffusionSchedule(**man["schedule"])
        if sched.hash() != man["schedule_hash"]:
            raise ValueError("schedule hash mismatch")
        return cls(models["predictor"], float(man["scale"]), sched, bool(man["trained"]), list(man["losses"]))


def new_sampler(poses2d, seed: int, schedule: DiffusionSchedule | None = None, hidden=256, depth=3) -> DiffusionSampler:
    poses2d = torch.as_tensor(poses2d, dtype=DTYPE)
    if poses2d.shape[0] == 0:
        raise EmptyDomain("no poses to fit the normalisation constant")
    joints, dims = poses2d.shape[-2:]
    centred = poses2d - poses2d[..., :1, :]
    scale = float(torch.sqrt(torch.mean(centred**2)))
    pred = NoisePredictor(joints, dims, hidden, depth, gen=make_generator(seed))
    return DiffusionSampler(pred, scale, schedule or DiffusionSchedule())


def forward_noise(x0, k, noise, sched: DiffusionSchedule):
    """x_k = sqrt(abar_k) x0 + sqrt(1 - abar_k) noise, ``k`` scalar or one step per batch element."""
    sched.check_step(k)
    ab = torch.as_tensor(sched.alpha_bar[np.asarray(k)], dtype=DTYPE)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise


def train_sampler(poses2d, init: DiffusionSampler, epochs: int = 10, lr: float = 2e-4, batch_size: int = 64,
                  seed: int = 0) -> DiffusionSampler:
    """Fit the noise predictor to ``poses2d`` starting from a copy of ``init``."""
    d = init.predictor.descriptor
    data = init.normalize(poses2d).reshape(-1, d["joints"], d["dims"])
    if data.shape[0] == 0:
        raise EmptyDomain("domain has no 2D poses")
    out = init.clone()
    if epochs <= 0:
        return out
    sched = out.schedule
    gen = make_generator(seed)
    model = out.predictor
    params = list(model.parameters())
    opt = make_optimizer("adam", params, lr)
    n = data.shape[0]
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for start in range(0, n, batch_size):
            x0 = data[perm[start : start + batch_size]]
            b = x0.shape[0]
            k = torch.randint(1, sched.T + 1, (b,), generator=gen)
            eps = torch.randn(x0.shape, generator=gen, dtype=DTYPE)
            xk = forward_noise(x0, k.numpy(), eps, sched)
            loss = torch.mean((eps - model(xk, k)) ** 2)
            grads = torch.autograd.grad(loss, params)
            apply_gradients(opt, params, grads)
            total += loss.item() * b
            count += b
        out.losses.append(total / count)
    out.trained = True
    return out


def ddim_sigma(ab_k, ab_prev, eta):
    return eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_k)) * math.sqrt(1.0 - ab_k / ab_prev)


def ddim_steps(T: int, steps: int, truncated: bool = False) -> list[int]:
    """Descending step sub-schedule: S evenly spaced steps over [1, T], or S..1 when truncated."""
    if not 1 <= steps <= T:
        raise StepOutOfRange(f"sampling steps must lie in [1, {T}]")
    if truncated:
        return list(range(steps, 0, -1))
    ks = np.unique(np.round(np.arange(1, steps + 1) * T / steps).astype(int))
    return [int(k) for k in ks[::-1]]


@torch.no_grad()
def ddim_sample(sampler: DiffusionSampler, n: int, steps: int = 40, eta: float = 0.2, seed: int = 0,
                truncated: bool = False, allow_untrained: bool = False, return_normalized=False):
    if not sampler.trained and not allow_untrained:
        raise UntrainedPredictor("sampler has not been trained")
    sched = sampler.schedule
    ks = ddim_steps(sched.T, steps, truncated)
    gen = make_generator(seed)
    d = sampler.predictor.descriptor
    x = torch.randn((n, d["joints"], d["dims"]), generator=gen, dtype=DTYPE)
    ab = sched.alpha_bar
    for i, k in enumerate(ks):
        prev = ks[i + 1] if i + 1 < len(ks) else 0
        eps_hat = sampler.predictor(x, torch.full((n,), k, dtype=torch.long))
        x0_hat = (x - math.sqrt(1.0 - ab[k]) * eps_hat) / math.sqrt(ab[k])
        sigma = ddim_sigma(ab[k], ab[prev], eta)
        x = math.sqrt(ab[prev]) * x0_hat + math.sqrt(max(1.0 - ab[prev] - sigma**2, 0.0)) * eps_hat
        if eta > 0:
            x = x + sigma * torch.randn(x.shape, generator=gen, dtype=DTYPE)
    return x if return_normalized else sampler.denormalize(x)


def sampler_pool(sampler: DiffusionSampler, pool_size: int, steps: int = 40, eta: float = 0.2, seed: int = 0,
                 truncated: bool = False):
    """Pre-generate the prior pool for one adaptation phase; ``steps == 0`` yields scaled Gaussian noise."""
    if pool_size <= 0:
        raise PoolConfigError("pool_size must be positive when domain-aware priors are enabled")
    if steps == 0:
        d = sampler.predictor.descriptor
        z = torch.randn((pool_size, d["joints"], d["dims"]), generator=make_generator(seed), dtype=DTYPE)
        return sampler.denormalize(z)
    return ddim_sample(sampler, pool_size, steps, eta, seed, truncated)
