"""Meta-learning network: 8 conv layers with a global residual, plus an upscaler.

The feature map right after the global residual is the spatial degradation
representation handed to the teacher extractor.  Meta-learning (MAML) adapts
only the conv body; the upscaler is frozen once the bicubic warm-up is done.
"""

from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import netcore as nc
from .data import augment, make_pairs, random_crop, sample_images, to_tensor
from .degradation import DegradationSpec, KernelSpec, bicubic_downsample, sample_degradation


@dataclass(frozen=True)
class MLNConfig:
    channels: int = 64
    scale: int = 4
    in_channels: int = 3
    num_layers: int = 8


@dataclass
class MLNModel:
    config: MLNConfig
    params: nc.ParamSet

    def upscaler_names(self):
        return [n for n in self.params if n.startswith("upscaler.")]

    def body_names(self):
        return [n for n in self.params if n.startswith("body.")]

    def clone(self):
        return MLNModel(self.config, self.params.clone())


@dataclass
class TaskBatch:
    """Support/query LR-HR tensors sharing a single degradation."""

    support: tuple
    query: tuple
    spec: DegradationSpec | None = None


def init_mln(config, seed=0, dtype=torch.float32):
    nc.check_scale(config.scale)
    gen = torch.Generator().manual_seed(seed)
    entries = {}
    c = config.channels
    nc.init_conv(entries, "body.0", c, config.in_channels, 3, gen, dtype)
    for i in range(1, config.num_layers):
        nc.init_conv(entries, f"body.{i}", c, c, 3, gen, dtype)
    nc.init_upscaler(entries, "upscaler", c, config.in_channels, config.scale, gen, dtype)
    return MLNModel(config, nc.ParamSet(entries))


def freeze_upscaler(model):
    model.params.set_meta_mask(model.upscaler_names(), False)
    return model


def mln_forward(model, lr, params=None):
    """Return ``(sr, idr_map)`` for an ``N×3×h×w`` LR batch.

    ``idr_map`` is the post-residual body feature (``N×C'×h×w``); ``sr`` is its
    upscaled image.  ``params`` overrides the model's own parameters.
    """
    p = model.params if params is None else params
    n_layers = model.config.num_layers
    head = nc.conv(p, "body.0", lr)
    x = head
    for i in range(1, n_layers):
        x = nc.leaky_relu(x)
        x = nc.conv(p, f"body.{i}", x)
    feat = x + head
    return nc.upscale(feat, p, model.config.scale), feat


def l1(a, b):
    return (a - b).abs().mean()


def support_loss(model, params, lr, hr):
    return l1(mln_forward(model, lr, params)[0], hr)


def inner_adapt(model, support, n, alpha, params=None, create_graph=False):
    """``n`` plain gradient-descent steps on the support L1 loss.

    Only meta-updatable entries move; the upscaler (once frozen) is returned
    as the very same tensors.  The input ParamSet is never modified.  With
    ``create_graph=True`` the adapted tensors stay differentiable functions of
    the starting parameters (second-order MAML).
    """
    lr, hr = support
    if lr.shape[0] == 0:
        raise ValueError("support set is empty")
    if n < 0 or not alpha > 0:
        raise ValueError(f"need n >= 0 and alpha > 0, got n={n}, alpha={alpha}")
    base = model.params if params is None else params
    if n == 0:
        return base.clone() if not create_graph else base
    theta = base if create_graph else base.clone(requires_grad=False)
    names = theta.meta_names()
    for _ in range(n):
        if not create_graph:
            theta = theta.map(lambda v: v.detach())
            for name in names:
                theta[name] = theta[name].requires_grad_(True)
        with torch.enable_grad():
            loss = support_loss(model, theta, lr, hr)
            grads = torch.autograd.grad(loss, [theta[k] for k in names], create_graph=create_graph)
        theta = theta.masked_step(dict(zip(names, grads)), alpha)
    if not create_graph:
        theta = theta.map(lambda v: v.detach())
    return theta


def adapted_features(model, lr, hr, n, alpha):
    """Adapt on ``(lr, hr)`` for ``n`` steps and return the detached degradation feature map."""
    theta = inner_adapt(model, (lr, hr), n, alpha)
    with torch.no_grad():
        return mln_forward(model, lr, theta)[1]


def _adam(params, names, lr):
    return torch.optim.Adam([params[n] for n in names], lr=lr, betas=(0.9, 0.999))


def pretrain_bicubic(model, hr_dataset, gamma, steps, *, batch_size=8, patch_size=16, seed=0,
                     log=None, freeze=True):
    """Supervised L1 training on bicubic pairs, then freeze the upscaler.

    Returns a new model; the input model is untouched.
    """
    model = model.clone()
    if steps > 0:
        rng = np.random.default_rng(seed)
        scale = model.config.scale
        dtype = next(iter(model.params.values())).dtype
        names = model.params.names()
        for n in names:
            model.params[n].requires_grad_(True)
        opt = _adam(model.params, names, gamma)
        for step in range(steps):
            imgs = sample_images(hr_dataset, batch_size, rng)
            hrs = [_crop_aug(img, patch_size * scale, rng) for img in imgs]
            lrs = [bicubic_downsample(h, scale) for h in hrs]
            lr_t, hr_t = to_tensor(lrs, dtype), to_tensor(hrs, dtype)
            opt.zero_grad()
            loss = support_loss(model, model.params, lr_t, hr_t)
            loss.backward()
            opt.step()
            if log is not None:
                log({"step": step, "loss": loss.item()})
        model.params = model.params.clone()
    if freeze:
        freeze_upscaler(model)
    return model


def _crop_aug(img, size, rng):
    return augment(random_crop(img, size, rng), rng)


def make_task(hr_dataset, spec, rng, *, support_size=4, query_size=4, patch_size=16, dtype=torch.float32):
    """Sample disjoint support/query HR crops and degrade them under ``spec``."""
    idx = rng.permutation(len(hr_dataset))
    if len(idx) >= support_size + query_size:
        s_imgs = [hr_dataset[i] for i in idx[:support_size]]
        q_imgs = [hr_dataset[i] for i in idx[support_size:support_size + query_size]]
    else:
        # tiny datasets: disjoint crops drawn from shared images
        s_imgs = sample_images(hr_dataset, support_size, rng)
        q_imgs = sample_images(hr_dataset, query_size, rng)
    s_lr, s_hr = make_pairs(s_imgs, spec, patch_size, rng)
    q_lr, q_hr = make_pairs(q_imgs, spec, patch_size, rng)
    return TaskBatch((to_tensor(s_lr, dtype), to_tensor(s_hr, dtype)),
                     (to_tensor(q_lr, dtype), to_tensor(q_hr, dtype)), spec)


def family_sampler(mode=None, scale=4, widths=None, **kwargs):
    """Degradation sampler: a fixed list of isotropic widths, or a random ``mode``."""
    if widths is not None:
        kernels = [KernelSpec.isotropic(w) for w in widths]

        def sample(rng):
            k = kernels[rng.integers(len(kernels))]
            return DegradationSpec(kernel=k, scale=scale, rng_seed=int(rng.integers(2**31 - 1)), **kwargs)

        return sample
    return lambda rng: sample_degradation(mode, scale, rng, **kwargs)


def meta_pretrain(model, hr_dataset, sampler, *, m=5, n=5, alpha=1e-2, beta=2e-4, steps=0,
                  halve_every=None, first_order=True, support_size=4, query_size=4, patch_size=16,
                  seed=0, log=None):
    """MAML over degradation tasks (outer optimizer: Adam on the meta-updatable entries).

    Each outer step samples ``m`` tasks from ``sampler``, adapts a copy of the
    parameters on each support set for ``n`` steps and updates the shared
    initialization from the averaged query loss.  The default is the
    first-order approximation; ``first_order=False`` differentiates through
    the inner loop.
    """
    if m < 1:
        raise ValueError(f"need at least one task per meta-batch, got m={m}")
    model = model.clone()
    if steps <= 0:
        return model
    rng = np.random.default_rng(seed)
    dtype = next(iter(model.params.values())).dtype
    names = model.params.meta_names()
    for k in names:
        model.params[k].requires_grad_(True)
    opt = _adam(model.params, names, beta)
    for step in range(steps):
        for g in opt.param_groups:
            g["lr"] = nc.lr_schedule(step, beta, halve_every)
        opt.zero_grad()
        task_losses = []
        grads = {k: torch.zeros_like(model.params[k]) for k in names}
        for _ in range(m):
            task = make_task(hr_dataset, sampler(rng), rng, support_size=support_size,
                             query_size=query_size, patch_size=patch_size, dtype=dtype)
            if first_order:
                theta = inner_adapt(model, task.support, n, alpha)
                for k in names:
                    theta[k] = theta[k].requires_grad_(True)
                q_loss = support_loss(model, theta, *task.query) / m
                g = torch.autograd.grad(q_loss, [theta[k] for k in names])
            else:
                theta = inner_adapt(model, task.support, n, alpha, create_graph=True)
                q_loss = support_loss(model, theta, *task.query) / m
                g = torch.autograd.grad(q_loss, [model.params[k] for k in names])
            for k, gk in zip(names, g):
                grads[k] += gk.detach()
            task_losses.append(q_loss.item() * m)
        for k in names:
            model.params[k].grad = grads[k]
        opt.step()
        if log is not None:
            log({"step": step, "query_loss": float(np.mean(task_losses)), "task_losses": task_losses})
    model.params = model.params.clone()
    return model


def config_dict(model):
    return asdict(model.config)
