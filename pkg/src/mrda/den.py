"""Degradation extraction networks.

The teacher variant reads the MLN's adapted feature map, the student variant
reads the LR image; otherwise the two are the same network, so every entry
except the first conv has matching shapes across the pair.
"""

from dataclasses import dataclass

import torch

from . import netcore as nc


@dataclass(frozen=True)
class DENConfig:
    in_channels: int = 3
    channels: int = 64
    d: int = 256
    num_layers: int = 6


@dataclass
class DENModel:
    config: DENConfig
    params: nc.ParamSet

    def clone(self):
        return DENModel(self.config, self.params.clone())


def init_den(config, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    entries = {}
    c_in = config.in_channels
    for i in range(config.num_layers):
        nc.init_conv(entries, f"conv{i}", config.channels, c_in, 3, gen, dtype)
        c_in = config.channels
    nc.init_linear(entries, "fc", config.d, config.channels, gen, dtype)
    return DENModel(config, nc.ParamSet(entries))


def _stride(i):
    # stride 1, 2, 1, 2, ...
    return 2 if i % 2 else 1


def den_forward(model, x, params=None):
    """Conv stack (alternating stride 1/2) → global average pool → FC to ``d``."""
    p = model.params if params is None else params
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.shape[1] != model.config.in_channels:
        raise ValueError(f"DEN expects {model.config.in_channels} input channels, got {x.shape[1]}")
    for i in range(model.config.num_layers):
        x = nc.leaky_relu(nc.conv(p, f"conv{i}", x, stride=_stride(i)))
    return nc.linear(p, "fc", x.mean(dim=(2, 3)))


def softmax_normalize(v):
    """Softmax over the last axis with max subtraction."""
    z = v - v.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def transferable_names(src, dst):
    """Entries that can be copied between two DENs (everything but a mismatched first layer)."""
    return [n for n in dst.params if n in src.params and src.params[n].shape == dst.params[n].shape]
