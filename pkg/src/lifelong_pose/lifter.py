"""2D-to-3D lifting estimator: a dilated temporal convolution over a clip of 2D poses.

Inside the package the estimator reads normalised image coordinates
(``(u - cx) / fx``) and writes root-relative metres; ``predict`` wraps that
in the public pixel/millimetre units.
"""

from __future__ import annotations

import numpy as np
import torch

from .data import normalize_2d, padded_windows
from .skeleton import Camera
from .substrate import (DTYPE, ParamModel, ShapeMismatch, TemporalConvNet, apply_gradients, make_generator,
                        make_optimizer, register)

MM_PER_UNIT = 1000.0


class EmptySource(ValueError):
    pass


@register("lifter")
class LiftingModel(ParamModel):
    """Clip ``(B, L, J, 2)`` -> root-relative 3D poses ``(B, L - RF + 1, J, 3)``.

    With ``L == frames`` (the usual case) there is exactly one output, the centre frame.
    Longer inputs give one output per valid window in a single pass.
    """

    def __init__(self, joints=16, frames=27, channels=128, dilations=(3, 9), activation="relu",
                 input_gain=5.0, gen=None):
        super().__init__()
        self.descriptor = {"kind": "lifter", "joints": joints, "frames": frames, "channels": channels,
                           "dilations": list(dilations), "activation": activation, "input_gain": input_gain}
        self.tcn = TemporalConvNet(joints * 2, joints * 3, frames, channels, dilations, activation=activation, gen=gen)

    def init_params(self, gen=None, zero_last=False):
        self.tcn.init_params(gen, zero_last)
        return self

    @property
    def receptive_field(self) -> int:
        return self.tcn.receptive_field

    def forward(self, clip):
        j = self.descriptor["joints"]
        if clip.ndim != 4 or clip.shape[-2:] != (j, 2):
            raise ShapeMismatch(f"clip must be (B, L, {j}, 2), got {tuple(clip.shape)}")
        b, length = clip.shape[:2]
        x = (clip - clip[..., :1, :]) * self.descriptor["input_gain"]
        out = self.tcn(x.reshape(b, length, 2 * j)).reshape(b, -1, j, 3)
        return out - out[..., :1, :]

    def centre(self, clip):
        """Centre-frame prediction ``(B, J, 3)`` for clips of exactly ``frames`` frames."""
        if clip.ndim != 4 or clip.shape[1] != self.descriptor["frames"]:
            raise ShapeMismatch(f"clip length must be {self.descriptor['frames']}, got {tuple(clip.shape)}")
        return self(clip)[:, 0]


def new_lifter(frames=27, channels=128, dilations=(3, 9), activation="relu", input_gain=5.0, seed=0, joints=16):
    return LiftingModel(joints, frames, channels, dilations, activation, input_gain, gen=make_generator(seed))


@torch.no_grad()
def predict(model: LiftingModel, clip2d, cam: Camera = Camera()) -> np.ndarray:
    """Pixel clip(s) ``([B,] T, J, 2)`` -> centre-frame root-relative 3D pose(s) in millimetres."""
    clip = np.asarray(clip2d, dtype=np.float64)
    single = clip.ndim == 3
    if single:
        clip = clip[None]
    x = torch.as_tensor(normalize_2d(clip, cam), dtype=DTYPE)
    out = model.centre(x).numpy() * MM_PER_UNIT
    return out[0] if single else out


@torch.no_grad()
def predict_sequences(model: LiftingModel, sequences2d, cam: Camera = Camera(), chunk: int = 4096) -> list[np.ndarray]:
    """One prediction per frame of every (pixel) sequence, edge-padding the borders; millimetres."""
    half = model.descriptor["frames"] // 2
    norm = [normalize_2d(s, cam) for s in sequences2d]
    stacked, index = padded_windows(norm, half)
    stacked = torch.as_tensor(stacked, dtype=DTYPE)
    outs = [model.centre(stacked[torch.as_tensor(index[i : i + chunk])]) for i in range(0, len(index), chunk)]
    flat = torch.cat(outs).numpy() * MM_PER_UNIT
    bounds = np.cumsum([0] + [len(s) for s in sequences2d])
    return [flat[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def pretrain_source(model: LiftingModel, clips2d, poses3d, epochs: int = 40, lr: float = 5e-5,
                    batch_size: int = 1024, weight_decay: float = 0.01, seed: int = 0, log=None):
    """Supervised source training on normalised clips ``(N, T, J, 2)`` and root-relative metres ``(N, J, 3)``.

    Returns a trained copy of ``model`` and the per-epoch mean losses.
    """
    clips2d = torch.as_tensor(clips2d, dtype=DTYPE)
    poses3d = torch.as_tensor(poses3d, dtype=DTYPE)
    if clips2d.shape[0] == 0:
        raise EmptySource("no labelled source clips")
    if clips2d.shape[0] != poses3d.shape[0]:
        raise ShapeMismatch("clip and label counts differ")
    out = model.clone()
    if epochs <= 0:
        return out, []
    target = poses3d - poses3d[:, :1]
    params = list(out.parameters())
    opt = make_optimizer("adamw", params, lr, weight_decay=weight_decay)
    gen = make_generator(seed)
    n = clips2d.shape[0]
    losses = []
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            loss = torch.mean((out.centre(clips2d[idx]) - target[idx]) ** 2)
            grads = torch.autograd.grad(loss, params)
            apply_gradients(opt, params, grads)
            total += loss.item() * len(idx)
        losses.append(total / n)
        if log is not None:
            log(f"pretrain epoch {epoch + 1}/{epochs} loss {losses[-1]:.6f}")
    return out, losses
