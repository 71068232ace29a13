"""Invariant probes run by ``lifelong-pose check``: finite-difference gradient
checks of every objective, kinematic and file round trips, and the Procrustes oracle."""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import read_pose_file, write_pose_file
from .diffusion import DiffusionSchedule, ddim_sigma
from .generators import GeneratorBundle, GeneratorConfig, augment
from .lifter import LiftingModel
from .losses import (Discriminator, LossWeights, loss_2d, loss_3d, loss_dis, loss_estimator_discriminator,
                     loss_generator)
from .skeleton import (DEFAULT_SKELETON, bones_from_joints, joints_from_bones, mpjpe, pa_mpjpe)
from .substrate import DTYPE, MLP, ema_update, make_generator


@dataclass
class ProbeResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.2f}s)"


def finite_difference_check(loss_fn, tensors, n_coords: int = 12, h: float = 1e-6, seed: int = 0):
    """Largest relative error between autograd and central differences of scalar ``loss_fn()``.

    ``tensors`` are leaf tensors (parameters or inputs) perturbed in place; a random
    subset of ``n_coords`` coordinates per tensor is probed.
    """
    tensors = list(tensors)
    for t in tensors:
        t.requires_grad_(True)
    grads = torch.autograd.grad(loss_fn(), tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        picks = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
        for i in picks:
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
            up = loss_fn().item()
            with torch.no_grad():
                flat[i] = old - h
            down = loss_fn().item()
            with torch.no_grad():
                flat[i] = old
            numeric.append((up - down) / (2 * h))
            analytic.append(g.reshape(-1)[i].item())
    a, n = np.array(analytic), np.array(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def _probe_batch(seed=0, b=6):
    gen = make_generator(seed)
    rng = np.random.default_rng(seed)
    base = np.array([[0, 0, 0], [0, -.24, 0], [0, -.5, 0], [0, -.64, 0], [.16, -.47, 0], [.16, -.19, 0],
                     [.16, .06, 0], [-.16, -.47, 0], [-.16, -.19, 0], [-.16, .06, 0], [.11, 0, 0],
                     [.11, .44, 0], [.11, .87, 0], [-.11, 0, 0], [-.11, .44, 0], [-.11, .87, 0]])
    clip3d = torch.as_tensor(base[None, None] + 0.05 * rng.standard_normal((b, 3, 16, 3)), dtype=DTYPE)
    x = torch.as_tensor(0.1 * rng.standard_normal((b, 16, 2)), dtype=DTYPE)
    prior = torch.as_tensor(0.1 * rng.standard_normal((b, 16, 2)), dtype=DTYPE)
    eps = torch.rand(b, generator=gen, dtype=DTYPE)
    return clip3d, x, prior, eps


def _smooth_models(seed=0):
    gens = GeneratorBundle(embed_dim=4, segment_dim=3, hidden=8, activation="tanh", gen=make_generator(seed),
                           identity=False)
    disc = Discriminator(hidden=(8,), activation="tanh", gen=make_generator(seed + 1))
    return gens, disc


def _project(pose, offset=5.0):
    return pose[..., :2] / (pose[..., 2:3] + offset)


def gradient_probes(tol: float = 1e-4) -> list[ProbeResult]:
    """Finite-difference checks of every objective, including the penalty's double backward."""
    out = []
    clip3d, x, prior, eps = _probe_batch()
    y_hat = clip3d[:, 1].clone()
    cfg = GeneratorConfig(embed_dim=4, segment_dim=3, hidden=8)

    def record(name, fn, tensors):
        t0 = time.time()
        err = finite_difference_check(fn, tensors)
        out.append(ProbeResult(f"grad {name}", err < tol, f"rel err {err:.2e}", time.time() - t0))

    y_t = (y_hat + 0.03).clone()
    record("3d loss", lambda: loss_3d(y_hat, y_t), [y_t])
    x_t = (1.3 * x + 0.01).clone()
    record("2d loss", lambda: loss_2d(x, x_t), [x_t])
    for mode in ("standard-gp", "as-written"):
        gens, disc = _smooth_models()
        w = LossWeights(penalty_mode=mode)
        xt = (x + 0.05).clone()
        record(f"critic loss [{mode}] wrt critic", lambda: loss_dis(x, xt, disc, w, eps=eps), list(disc.parameters()))
        record(f"critic loss [{mode}] wrt fake poses", lambda: loss_dis(x, xt, disc, w, eps=eps), [xt])

        def l_g():
            ya = augment(gens, clip3d, prior, cfg)
            return loss_generator(clip3d[:, 1], ya, x, _project(ya), disc, w, eps=eps)

        record(f"generator loss [{mode}] wrt generators", l_g, list(gens.parameters()))

        lifter = LiftingModel(frames=3, channels=6, dilations=(), activation="tanh", gen=make_generator(3))
        clip2d = torch.as_tensor(np.random.default_rng(4).standard_normal((clip3d.shape[0], 3, 16, 2)) * 0.1,
                                 dtype=DTYPE)

        def l_dp():
            centre = lifter.centre(clip2d)
            c3 = torch.cat([clip3d[:, :1], centre[:, None], clip3d[:, 2:]], dim=1)
            ya = augment(gens, c3, prior, cfg)
            return loss_estimator_discriminator(x, _project(ya), disc, w, eps=eps)

        record(f"critic+estimator loss [{mode}]", l_dp, list(disc.parameters()) + list(lifter.parameters()))
    return out


def procrustes_pairs(rng, n: int):
    """Half similarity-moved noisy copies of a random pose, half independent random poses (mm)."""
    pairs = []
    for i in range(n):
        gt = rng.standard_normal((16, 3)) * 200
        if i % 2:
            pairs.append((rng.standard_normal((16, 3)) * 200, gt))
            continue
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        q = q * np.sign(np.linalg.det(q))
        pred = rng.uniform(0.5, 2.0) * gt @ q + rng.standard_normal(3) * 100 + rng.standard_normal((16, 3)) * 10
        pairs.append((pred, gt))
    return pairs


def geometry_probes() -> list[ProbeResult]:
    out = []
    rng = np.random.default_rng(0)
    t0 = time.time()
    pose = rng.standard_normal((100, 16, 3)) * 300
    err = np.abs(joints_from_bones(bones_from_joints(pose), pose[:, 0]) - pose).max()
    out.append(ProbeResult("kinematic round trip", err <= 1e-9, f"max err {err:.2e} mm", time.time() - t0))

    t0 = time.time()
    gt = rng.standard_normal((50, 16, 3)) * 200
    q, _ = np.linalg.qr(rng.standard_normal((50, 3, 3)))
    q = q * np.sign(np.linalg.det(q))[:, None, None]
    moved = 1.7 * gt @ q + rng.standard_normal((50, 1, 3)) * 100
    pa = pa_mpjpe(moved, gt)
    pairs = procrustes_pairs(rng, 1000)
    viol = sum(pa_mpjpe(p, g) > mpjpe(p, g) for p, g in pairs)
    out.append(ProbeResult("procrustes oracle", pa <= 1e-6 and viol == 0,
                           f"similarity copy {pa:.2e} mm, {viol} ordering violations", time.time() - t0))

    t0 = time.time()
    with tempfile.TemporaryDirectory() as d:
        seqs = [rng.standard_normal((37, 16, 3)) * 500, rng.standard_normal((5, 16, 3))]
        path = write_pose_file(Path(d) / "probe.pose", seqs, dims=3, units="mm", domain="probe")
        _, back = read_pose_file(path)
        same = all(np.array_equal(a, b) for a, b in zip(seqs, back))
    out.append(ProbeResult("pose file round trip", same, "bitwise" if same else "mismatch", time.time() - t0))

    t0 = time.time()
    a, b = MLP([1, 1]), MLP([1, 1])
    with torch.no_grad():
        for p in a.parameters():
            p.fill_(1.0)
        for p in b.parameters():
            p.fill_(0.0)
    v = ema_update(a, b, 0.99).layers[0].weight.item()
    ok = abs(v - 0.99) < 1e-15 and abs(ema_update(b, a, 0.99).layers[0].weight.item() - 0.01) < 1e-15
    out.append(ProbeResult("parameter EMA", ok, f"0.99*1 + 0.01*0 = {v!r}", time.time() - t0))

    t0 = time.time()
    s = DiffusionSchedule()
    worst = 0.0
    for k, prev in ((400, 390), (40, 30), (10, 0)):
        ab, ap = s.alpha_bar[k], s.alpha_bar[prev]
        direct = 0.2 * math.sqrt((1 - ap) / (1 - ab) * (1 - ab / ap))
        worst = max(worst, abs(ddim_sigma(ab, ap, 0.2) - direct))
    out.append(ProbeResult("ddim sigma", worst <= 1e-12, f"max diff {worst:.1e}", time.time() - t0))
    return out


def run_probes() -> list[ProbeResult]:
    return geometry_probes() + gradient_probes()
