"""Losses, training configuration and the three training stages.

Stage 1 meta-pretrains the MLN, stage 2 trains the teacher extractor and SR
network on features of an MLN adapted per batch, stage 3 trains the student
extractor by distillation while fine-tuning a copy of the teacher SR network.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from . import netcore as nc
from .data import make_pairs, sample_images, to_tensor
from .degradation import MODES, SCALES
from .den import DENConfig, den_forward, init_den, softmax_normalize
from .mln import (MLNConfig, family_sampler, freeze_upscaler, init_mln, inner_adapt, meta_pretrain,
                  mln_forward, pretrain_bicubic)
from .rdan import RDANConfig, init_rdan, rdan_forward, transfer_weights

lr_schedule = nc.lr_schedule


# ---------------------------------------------------------------------------
# losses


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l_rec(sr, hr):
    """Mean absolute error."""
    _same_shape(sr, hr, "l_rec")
    return (sr - hr).abs().mean()


def l_kl(d_teacher, d_student):
    """``(1/d) Σ p log(p/q)`` with ``p, q`` the softmax of teacher and student vectors.

    The teacher vector is detached.  Batched inputs (``N×d``) are averaged over N.
    """
    _same_shape(d_teacher, d_student, "l_kl")
    t = d_teacher.detach()
    p = softmax_normalize(t)
    log_p = t - torch.logsumexp(t, dim=-1, keepdim=True)
    log_q = d_student - torch.logsumexp(d_student, dim=-1, keepdim=True)
    return (p * (log_p - log_q)).mean(dim=-1).mean()


def l_abs(d_teacher, d_student):
    """``(1/d) Σ |D_T - D_S|`` with the teacher detached (averaged over the batch)."""
    _same_shape(d_teacher, d_student, "l_abs")
    return (d_teacher.detach() - d_student).abs().mean()


def l_classic(sr, hr, d_teacher, d_student, lambda_kl=1.0, lambda_abs=0.01):
    loss = l_rec(sr, hr)
    if lambda_kl:
        loss = loss + lambda_kl * l_kl(d_teacher, d_student)
    if lambda_abs:
        loss = loss + lambda_abs * l_abs(d_teacher, d_student)
    return loss


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    mode: str = "classic_iso"
    scale: int = 4
    batch_size: int = 64
    patch_size: int = 64
    n: int = 5
    m: int = 5
    alpha: float = 1e-2
    beta: float = 2e-4
    gamma: float = 2e-4
    pretrain_lr: float = 2e-4
    lambda_kl: float = 1.0
    lambda_abs: float = 0.01
    seed: int = 0
    # fixed isotropic width family; None samples from ``mode``
    widths: list | None = None
    noise_levels: list = field(default_factory=lambda: [0, 10, 20, 25])
    kernel_size: int = 21
    first_order: bool = True
    support_size: int = 4
    query_size: int = 4
    # architecture
    mln_channels: int = 64
    den_channels: int = 64
    d: int = 256
    rdan_channels: int = 64
    rdan_blocks: int = 27
    dyn_kernel: int = 3
    # schedule (optimizer steps); halve_every=None scales with the stage length
    stage1_pretrain_steps: int = 1000
    stage1_meta_steps: int = 1000
    stage2_steps: int = 1000
    stage3_steps: int = 1000
    halve_every: int | None = None
    # HR source when no image directory is given
    hr_count: int = 64
    hr_size: int = 256
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}, got {self.scale}")
        if self.lambda_kl < 0 or self.lambda_abs < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.n < 1 or self.m < 1:
            raise ValueError("n and m must be >= 1")
        if min(self.batch_size, self.patch_size) < 1:
            raise ValueError("batch_size and patch_size must be positive")
        if self.hr_size < self.patch_size * self.scale:
            raise ValueError(f"hr_size {self.hr_size} smaller than HR patch {self.patch_size * self.scale}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def halve_for(self, steps):
        """Halving period: explicit, or 200/500 of the stage length."""
        if self.halve_every:
            return self.halve_every
        return max(1, round(steps * 200 / 500))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def mln_config(self):
        return MLNConfig(channels=self.mln_channels, scale=self.scale)

    def den_config(self, teacher):
        return DENConfig(in_channels=self.mln_channels if teacher else 3, channels=self.den_channels, d=self.d)

    def rdan_config(self):
        return RDANConfig(channels=self.rdan_channels, num_blocks=self.rdan_blocks, d=self.d,
                          dyn_kernel=self.dyn_kernel, scale=self.scale)

    def sampler(self):
        kwargs = {"kernel_size": self.kernel_size}
        if self.widths is not None:
            return family_sampler(scale=self.scale, widths=self.widths, **kwargs)
        if self.mode == "classic_aniso_noise":
            kwargs["noise_levels"] = tuple(self.noise_levels)
        return family_sampler(self.mode, self.scale, **kwargs)


def full_config(mode="classic_iso", scale=4):
    """Full-size hyperparameters (batch 64, 64px LR patches, 27 blocks); step counts are nominal."""
    return TrainConfig(mode=mode, scale=scale, alpha=2e-2 if mode == "realworld" else 1e-2)


def toy_config(**overrides):
    """Desk-scale preset: minutes on one CPU core."""
    base = dict(
        mode="classic_iso", scale=2, batch_size=4, patch_size=16, alpha=1e-2, beta=1e-3, gamma=2e-3,
        pretrain_lr=1e-3, mln_channels=16, den_channels=32, d=64, rdan_channels=32, rdan_blocks=4,
        widths=[0.5, 2.0, 3.5], stage1_pretrain_steps=150, stage1_meta_steps=40, stage2_steps=2000,
        stage3_steps=2000, hr_count=24, hr_size=64, kernel_size=21,
    )
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# stages


@dataclass
class Teacher:
    mln: object
    den: object
    rdan: object


@dataclass
class Student:
    den: object
    rdan: object


def sample_batch(config, hr_dataset, rng, spec=None):
    """One training batch sharing a single sampled degradation: ``(lr, hr, spec)`` tensors."""
    spec = spec or config.sampler()(rng)
    imgs = sample_images(hr_dataset, config.batch_size, rng)
    lrs, hrs = make_pairs(imgs, spec, config.patch_size, rng)
    return to_tensor(lrs, config.torch_dtype), to_tensor(hrs, config.torch_dtype), spec


def teacher_idr(mln, den_t, lr, hr, n, alpha):
    """Adapt the MLN on ``(lr, hr)``, then compress its feature map (no gradient to the MLN)."""
    theta = inner_adapt(mln, (lr, hr), n, alpha)
    with torch.no_grad():
        feat = mln_forward(mln, lr, theta)[1]
    return den_forward(den_t, feat)


def teacher_idr_per_image(mln, den_t, lr, hr, n, alpha):
    """IDR with a separate MLN adaptation per image."""
    return torch.cat([teacher_idr(mln, den_t, lr[i:i + 1], hr[i:i + 1], n, alpha) for i in range(lr.shape[0])])


def run_stage1(config, hr_dataset, log=None):
    """Bicubic warm-up, upscaler freeze, then MAML over the configured degradations."""
    mln = init_mln(config.mln_config(), seed=config.seed, dtype=config.torch_dtype)
    pre_log = None if log is None else (lambda r: log({"phase": "bicubic", **r}))
    mln = pretrain_bicubic(mln, hr_dataset, config.pretrain_lr, config.stage1_pretrain_steps,
                           batch_size=config.batch_size, patch_size=config.patch_size, seed=config.seed,
                           log=pre_log)
    freeze_upscaler(mln)
    meta_log = None if log is None else (lambda r: log({"phase": "meta", **r}))
    return meta_pretrain(
        mln, hr_dataset, config.sampler(), m=config.m, n=config.n, alpha=config.alpha, beta=config.beta,
        steps=config.stage1_meta_steps, halve_every=config.halve_for(config.stage1_meta_steps),
        first_order=config.first_order, support_size=config.support_size, query_size=config.query_size,
        patch_size=config.patch_size, seed=config.seed + 1, log=meta_log,
    )


def _adam(param_sets, lr):
    tensors = []
    for ps in param_sets:
        for name in ps.names():
            ps[name] = ps[name].detach().clone().requires_grad_(True)
            tensors.append(ps[name])
    return torch.optim.Adam(tensors, lr=lr, betas=(0.9, 0.999))


def train_stage2_teacher(config, mln, hr_dataset, den_t=None, rdan_t=None, log=None):
    """Jointly train DEN_T and RDAN_T from scratch; the MLN only runs adaptation."""
    config.validate()
    den_t = den_t.clone() if den_t else init_den(config.den_config(teacher=True), seed=config.seed + 2,
                                                   dtype=config.torch_dtype)
    rdan_t = rdan_t.clone() if rdan_t else init_rdan(config.rdan_config(), seed=config.seed + 3,
                                                       dtype=config.torch_dtype)
    if den_t.config.in_channels != mln.config.channels:
        raise ValueError(f"DEN_T expects {den_t.config.in_channels} channels, MLN emits {mln.config.channels}")
    rng = np.random.default_rng(config.seed + 20)
    opt = _adam([den_t.params, rdan_t.params], config.gamma)
    halve = config.halve_for(config.stage2_steps)
    for step in range(config.stage2_steps):
        for g in opt.param_groups:
            g["lr"] = lr_schedule(step, config.gamma, halve)
        lr, hr, spec = sample_batch(config, hr_dataset, rng)
        d_t = teacher_idr(mln, den_t, lr, hr, config.n, config.alpha)
        loss = l_rec(rdan_forward(rdan_t, lr, d_t), hr)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None:
            log({"step": step, "l_rec": loss.item(), "kernel": spec.kernel.label()})
    den_t.params = den_t.params.clone()
    rdan_t.params = rdan_t.params.clone()
    return Teacher(mln, den_t, rdan_t)


def init_student(config, teacher, seed=None):
    """Fresh DEN_S and an RDAN_S holding a copy of the teacher's RDAN weights."""
    seed = config.seed + 4 if seed is None else seed
    den_s = init_den(config.den_config(teacher=False), seed=seed, dtype=config.torch_dtype)
    rdan_s = init_rdan(teacher.rdan.config, seed=seed + 1, dtype=config.torch_dtype)
    rdan_s.params, _ = transfer_weights(teacher.rdan, rdan_s)
    return Student(den_s, rdan_s)


def train_stage3_student(config, teacher, hr_dataset, student=None, log=None):
    """Distill the teacher IDR into DEN_S while fine-tuning RDAN_S on the classic loss.

    Teacher parameters receive no gradient: the teacher IDR is computed under
    ``no_grad`` and only student tensors are handed to the optimizer.
    """
    config.validate()
    student = student or init_student(config, teacher)
    den_s, rdan_s = student.den.clone(), student.rdan.clone()
    rng = np.random.default_rng(config.seed + 30)
    opt = _adam([den_s.params, rdan_s.params], config.gamma)
    halve = config.halve_for(config.stage3_steps)
    for step in range(config.stage3_steps):
        for g in opt.param_groups:
            g["lr"] = lr_schedule(step, config.gamma, halve)
        lr, hr, spec = sample_batch(config, hr_dataset, rng)
        with torch.no_grad():
            d_t = teacher_idr(teacher.mln, teacher.den, lr, hr, config.n, config.alpha)
        d_s = den_forward(den_s, lr)
        sr = rdan_forward(rdan_s, lr, d_s)
        loss = l_classic(sr, hr, d_t, d_s, config.lambda_kl, config.lambda_abs)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None:
            log({"step": step, "loss": loss.item(), "l_rec": l_rec(sr, hr).item(),
                 "l_kl": l_kl(d_t, d_s).item(), "l_abs": l_abs(d_t, d_s).item(), "kernel": spec.kernel.label()})
    den_s.params = den_s.params.clone()
    rdan_s.params = rdan_s.params.clone()
    return Student(den_s, rdan_s)


def kd_gap(config, teacher, den_s, hr_dataset, batches=50, seed=12345):
    """Mean ``l_abs(D_T, D_S)`` over held-out batches drawn with ``seed``."""
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(batches):
        lr, hr, _ = sample_batch(config, hr_dataset, rng)
        with torch.no_grad():
            d_t = teacher_idr(teacher.mln, teacher.den, lr, hr, config.n, config.alpha)
            vals.append(l_abs(d_t, den_forward(den_s, lr)).item())
    return float(np.mean(vals))
