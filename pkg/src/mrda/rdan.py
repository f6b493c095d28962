"""Region-degradation-aware SR network.

Each RDA conv turns the degradation vector into depthwise kernels, applies
them (followed by a learned 1×1 pointwise mix), and gates the result with a
sigmoid map computed from the input features:

    F1 = DynamicConv(F; w(D))
    M  = sigmoid(Conv(F))
    F2 = M * F1 + F

A block is RDA conv → LeakyReLU → RDA conv → LeakyReLU, all blocks share the
same ``D``, and a global residual runs from the head conv to the upscaler.
"""

from dataclasses import asdict, dataclass

import torch

from . import netcore as nc

MODULATIONS = ("rdam", "channel", "none")


@dataclass(frozen=True)
class RDANConfig:
    channels: int = 64
    num_blocks: int = 4
    d: int = 256
    dyn_kernel: int = 3
    scale: int = 4
    in_channels: int = 3
    kernel_hidden: int | None = None
    # ablation switches: "channel" gates per channel from D, "none" uses M = 1
    modulation: str = "rdam"
    dynamic: bool = True

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.dyn_kernel % 2 == 0:
            raise ValueError("dyn_kernel must be odd")
        if self.modulation not in MODULATIONS:
            raise ValueError(f"modulation must be one of {MODULATIONS}")
        nc.check_scale(self.scale)

    @property
    def hidden(self):
        return self.kernel_hidden or self.d


@dataclass
class RDANModel:
    config: RDANConfig
    params: nc.ParamSet

    def clone(self):
        return RDANModel(self.config, self.params.clone())


def rda_names(config):
    return [f"blocks.{b}.rda{j}" for b in range(config.num_blocks) for j in range(2)]


def init_rdan(config, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    c, k = config.channels, config.dyn_kernel
    entries = {}
    nc.init_conv(entries, "head", c, config.in_channels, 3, gen, dtype)
    for name in rda_names(config):
        if config.dynamic:
            nc.init_linear(entries, f"{name}.fc1", config.hidden, config.d, gen, dtype)
            # small second layer: predicted kernels start close to zero, so blocks start near identity
            nc.init_linear(entries, f"{name}.fc2", c * k * k, config.hidden, gen, dtype, scale=0.1)
        else:
            entries[f"{name}.static"] = torch.randn(c, 1, k, k, generator=gen, dtype=dtype) * 0.1 / k
        nc.init_conv(entries, f"{name}.pw", c, c, 1, gen, dtype, bias=False)
        if config.modulation == "rdam":
            nc.init_conv(entries, f"{name}.mod", c, c, 3, gen, dtype)
        elif config.modulation == "channel":
            nc.init_linear(entries, f"{name}.mod", c, config.d, gen, dtype)
    nc.init_conv(entries, "body_tail", c, c, 3, gen, dtype)
    nc.init_upscaler(entries, "upscaler", c, config.in_channels, config.scale, gen, dtype)
    return RDANModel(config, nc.ParamSet(entries))


def _vector(D):
    return D.unsqueeze(0) if D.dim() == 1 else D


def predict_dynamic_weights(D, params, name, channels, kernel):
    """Two-layer FC ``d -> hidden -> C·K·K`` reshaped to ``N×C×1×K×K``."""
    D = _vector(D)
    d_expected = params[f"{name}.fc1.weight"].shape[1]
    if D.shape[-1] != d_expected:
        raise ValueError(f"IDR length {D.shape[-1]} != expected {d_expected}")
    h = nc.leaky_relu(nc.linear(params, f"{name}.fc1", D))
    w = nc.linear(params, f"{name}.fc2", h)
    return w.reshape(D.shape[0], channels, 1, kernel, kernel)


def modulation_map(F, params, name, config, D=None):
    if config.modulation == "rdam":
        return torch.sigmoid(nc.conv(params, f"{name}.mod", F))
    if config.modulation == "channel":
        return torch.sigmoid(nc.linear(params, f"{name}.mod", _vector(D)))[:, :, None, None]
    return torch.ones_like(F)


def rda_conv(F, D, params, name, config):
    """One RDA conv layer: ``M ⊙ pointwise(depthwise(F; w(D))) + F``."""
    if F.dim() != 4 or F.shape[1] != config.channels:
        raise ValueError(f"expected N×{config.channels}×H×W features, got {tuple(F.shape)}")
    c, k = config.channels, config.dyn_kernel
    if config.dynamic:
        w = predict_dynamic_weights(D, params, name, c, k)
        if w.shape[0] == 1 and F.shape[0] > 1:
            w = w.expand(F.shape[0], *w.shape[1:])
        if w.shape[0] != F.shape[0]:
            raise ValueError(f"IDR batch {w.shape[0]} != feature batch {F.shape[0]}")
    else:
        w = params[f"{name}.static"]
    f1 = nc.conv2d(nc.dynamic_depthwise_conv(F, w), params[f"{name}.pw.weight"])
    return modulation_map(F, params, name, config, D) * f1 + F


def rdan_forward(model, lr, D, params=None):
    """SR image for an ``N×3×h×w`` LR batch guided by ``N×d`` (or ``d``) IDR vectors."""
    p = model.params if params is None else params
    cfg = model.config
    if lr.dim() == 3:
        lr = lr.unsqueeze(0)
    head = nc.conv(p, "head", lr)
    x = head
    for name in rda_names(cfg):
        x = nc.leaky_relu(rda_conv(x, D, p, name, cfg))
    x = nc.conv(p, "body_tail", x) + head
    return nc.upscale(x, p, cfg.scale)


def transfer_weights(src, dst):
    """Copy ``src`` parameters into a clone of ``dst`` after checking structure.

    Returns ``(new_params, report)``.  Any missing, extra or reshaped entry
    raises ``ValueError`` carrying the full report.
    """
    report = {"copied": [], "missing_in_source": [], "extra_in_source": [], "shape_mismatch": []}
    for n in dst.params:
        if n not in src.params:
            report["missing_in_source"].append(n)
        elif tuple(src.params[n].shape) != tuple(dst.params[n].shape):
            report["shape_mismatch"].append(
                {"name": n, "source": list(src.params[n].shape), "target": list(dst.params[n].shape)})
        else:
            report["copied"].append(n)
    report["extra_in_source"] = [n for n in src.params if n not in dst.params]
    report["compatible"] = not (report["missing_in_source"] or report["extra_in_source"]
                                or report["shape_mismatch"])
    if not report["compatible"]:
        raise ValueError(f"incompatible weight transfer: {report}")
    out = dst.params.clone()
    for n in report["copied"]:
        out[n] = src.params[n].detach().clone().to(dst.params[n].dtype)
    return out, report


def config_dict(model):
    return asdict(model.config)
