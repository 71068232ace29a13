"""Small differentiable-model substrate on top of torch (float64, CPU).

Two architecture templates (``MLP`` and ``TemporalConvNet``), explicit seeded
initialisation, Adam/AdamW, parameter EMA and a bit-exact checkpoint format.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

DTYPE = torch.float64
CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class DescriptorMismatch(ValueError):
    pass


ACTIVATIONS = {
    "relu": F.relu,
    "leaky_relu": lambda x: F.leaky_relu(x, 0.2),
    "tanh": torch.tanh,
    "silu": F.silu,
    "softplus": F.softplus,
    "identity": lambda x: x,
}


def make_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) % (2**63))


class ParamModel(nn.Module):
    """Base class: a module fully described by ``self.descriptor`` (a JSON-able dict)."""

    descriptor: dict

    def init_params(self, gen: torch.Generator | None = None, zero_last: bool = False) -> "ParamModel":
        # uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor, drawn in registration order
        with torch.no_grad():
            for name, p in self.named_parameters():
                fan_in = self._fan_in(name, p)
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_((torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
            if zero_last:
                for p in self.last_layer_parameters():
                    p.zero_()
        return self

    def _fan_in(self, name, p) -> int:
        if p.ndim >= 2:
            return int(np.prod(p.shape[1:]))
        return max(1, self._bias_fan_in(name))

    def _bias_fan_in(self, name) -> int:
        weight = dict(self.named_parameters())[name.rsplit(".", 1)[0] + ".weight"]
        return int(np.prod(weight.shape[1:]))

    def last_layer_parameters(self):
        raise NotImplementedError

    def zero_(self) -> "ParamModel":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    def clone(self) -> "ParamModel":
        return copy.deepcopy(self)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().astype("<f8").ravel().copy() for k, v in self.state_dict().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> "ParamModel":
        state = self.state_dict()
        with torch.no_grad():
            for k, v in state.items():
                if k not in arrays:
                    raise DescriptorMismatch(f"missing parameter {k}")
                flat = np.asarray(arrays[k], dtype="<f8")
                if flat.size != v.numel():
                    raise DescriptorMismatch(f"parameter {k} has {flat.size} values, expected {v.numel()}")
                v.copy_(torch.from_numpy(flat.astype(np.float64).reshape(v.shape)))
        return self

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.arrays().items()):
            h.update(k.encode())
            h.update(v.tobytes())
        return h.hexdigest()


class MLP(ParamModel):
    def __init__(self, sizes, activation="relu", gen=None, zero_last=False):
        super().__init__()
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.descriptor = {"kind": "mlp", "sizes": sizes, "activation": activation}
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(sizes[:-1], sizes[1:]))
        self.act = ACTIVATIONS[activation]
        self.init_params(gen, zero_last)

    def last_layer_parameters(self):
        return list(self.layers[-1].parameters())

    def forward(self, x):
        width = self.layers[0].in_features
        if x.shape[-1] != width:
            raise ShapeMismatch(f"MLP expects last dim {width}, got {tuple(x.shape)}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return x


class TemporalConvNet(ParamModel):
    """Dilated temporal convolutions (valid padding) with residual blocks.

    Input ``(B, L, in_features)`` with ``L >= receptive_field``; output
    ``(B, L - receptive_field + 1, out_features)``.
    """

    def __init__(self, in_features, out_features, frames=27, channels=128, dilations=(3, 9),
                 kernel=3, activation="relu", gen=None, zero_last=False):
        super().__init__()
        self.descriptor = {
            "kind": "tcn",
            "in_features": int(in_features),
            "out_features": int(out_features),
            "frames": int(frames),
            "channels": int(channels),
            "dilations": [int(d) for d in dilations],
            "kernel": int(kernel),
            "activation": activation,
        }
        if kernel % 2 == 0:
            raise ValueError("kernel width must be odd")
        if self.receptive_field < frames:
            raise ValueError(f"receptive field {self.receptive_field} is smaller than {frames} frames")
        self.expand = nn.Conv1d(in_features, channels, kernel, dtype=DTYPE)
        self.blocks = nn.ModuleList()
        for d in dilations:
            self.blocks.append(nn.ModuleDict({
                "conv": nn.Conv1d(channels, channels, kernel, dilation=d, dtype=DTYPE),
                "mix": nn.Conv1d(channels, channels, 1, dtype=DTYPE),
            }))
        self.shrink = nn.Conv1d(channels, out_features, 1, dtype=DTYPE)
        self.act = ACTIVATIONS[activation]
        self.init_params(gen, zero_last)

    @property
    def receptive_field(self) -> int:
        k = self.descriptor["kernel"]
        return 1 + (k - 1) * (1 + sum(self.descriptor["dilations"]))

    def last_layer_parameters(self):
        return list(self.shrink.parameters())

    def forward(self, x):
        d = self.descriptor
        if x.ndim != 3 or x.shape[-1] != d["in_features"]:
            raise ShapeMismatch(f"expected (B, L, {d['in_features']}), got {tuple(x.shape)}")
        if x.shape[1] < self.receptive_field:
            raise ShapeMismatch(f"sequence of {x.shape[1]} frames is shorter than receptive field {self.receptive_field}")
        h = self.act(self.expand(x.transpose(1, 2)))
        half = (d["kernel"] - 1) // 2
        for dil, block in zip(d["dilations"], self.blocks):
            crop = half * dil
            res = h[:, :, crop : h.shape[2] - crop]
            h = res + self.act(block["mix"](self.act(block["conv"](h))))
        return self.shrink(h).transpose(1, 2)


MODEL_KINDS: dict[str, type] = {"mlp": MLP, "tcn": TemporalConvNet}


def register(kind: str):
    def deco(cls):
        MODEL_KINDS[kind] = cls
        return cls

    return deco


def build_model(descriptor: dict) -> ParamModel:
    """Instantiate an architecture from its descriptor; parameters are then loaded by the caller."""
    d = dict(descriptor)
    kind = d.pop("kind")
    if kind not in MODEL_KINDS:
        raise DescriptorMismatch(f"unknown model kind {kind!r}")
    return MODEL_KINDS[kind](**d)


def gradient(model: nn.Module, loss_fn, create_graph=False) -> dict[str, torch.Tensor]:
    """Gradients of the scalar ``loss_fn(model)`` w.r.t. every named parameter."""
    names, params = zip(*model.named_parameters())
    loss = loss_fn(model)
    if loss.ndim != 0:
        raise ValueError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss.item()}")
    grads = torch.autograd.grad(loss, params, allow_unused=True, create_graph=create_graph)
    return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}


def make_optimizer(kind: str, params, lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
    params = list(params)
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)
    if kind == "adamw":
        return torch.optim.AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


def apply_gradients(opt: torch.optim.Optimizer, params, grads) -> None:
    """Install ``grads`` on ``params`` and take one optimizer step."""
    for p, g in zip(params, grads):
        if g is None:
            g = torch.zeros_like(p)
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient")
        p.grad = g.detach().clone()
    opt.step()
    for p in params:
        p.grad = None


def ema_update(anchor: ParamModel, live: ParamModel, eta: float) -> ParamModel:
    """Return a new model with parameters ``eta * anchor + (1 - eta) * live``."""
    if anchor.descriptor != live.descriptor:
        raise DescriptorMismatch("anchor and live architectures differ")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    out = anchor.clone()
    live_state = live.state_dict()
    with torch.no_grad():
        for k, v in out.state_dict().items():
            if eta == 1.0:
                continue
            if eta == 0.0:
                v.copy_(live_state[k])
            else:
                v.copy_(eta * v + (1.0 - eta) * live_state[k])
    return out


# ---------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, models: dict[str, ParamModel], **manifest) -> Path:
    """Write ``manifest.json`` plus ``arrays.npz`` (little-endian float64) into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {}
    descriptors = {}
    for name, model in models.items():
        descriptors[name] = model.descriptor
        for k, v in model.arrays().items():
            arrays[f"{name}/{k}"] = v
    man = {"version": CHECKPOINT_VERSION, "models": descriptors, **manifest}
    (path / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=_json_default))
    with open(path / "arrays.npz", "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[dict[str, ParamModel], dict]:
    path = Path(path)
    man = json.loads((path / "manifest.json").read_text())
    if man.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {man.get('version')!r}")
    with np.load(path / "arrays.npz") as npz:
        flat = {k: npz[k] for k in npz.files}
    models = {}
    for name, desc in man["models"].items():
        model = build_model(desc)
        prefix = name + "/"
        model.load_arrays({k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)})
        models[name] = model
    return models, man


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")
