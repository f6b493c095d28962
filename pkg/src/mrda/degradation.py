"""Blur kernels and LR synthesis.

Images are ``H×W×C`` float arrays in ``[0, 1]`` with ``C`` in ``{1, 3}``.
Kernels are odd-sized, nonnegative and normalized to sum to one.

Two synthesis routes are provided:

* :func:`degrade_classic` -- blur (reflect padding), subsample every
  ``scale``-th pixel starting at offset 0, add Gaussian noise whose std is
  given in 8-bit units, clip.
* :func:`degrade_realworld` -- a first-order shuffled pipeline of blur,
  downsample, noise and JPEG stages (optionally a second pass of the
  non-resizing stages).
"""

import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from .kernels import blur_subsample

SCALES = (2, 4)
MODES = ("classic_iso", "classic_aniso_noise", "realworld")
STAGES = ("blur", "downsample", "noise", "jpeg")
RESIZE_MODES = ("nearest", "area", "bicubic")

# Isotropic training ranges for sigma, per scale.
ISO_SIGMA_RANGE = {2: (0.2, 2.0), 4: (0.2, 4.0)}
ANISO_EIGEN_RANGE = (0.2, 4.0)
# Test-time width ranges for the 8-kernel suite, per scale.
GAUSSIAN8_RANGE = {2: (0.8, 1.6), 4: (1.8, 3.2)}


@dataclass(frozen=True)
class KernelSpec:
    """Parametric description of a blur kernel.

    ``kind`` is ``"delta"``, ``"isotropic"`` (uses ``sigma``) or
    ``"anisotropic"`` (uses ``lambda1``, ``lambda2`` and ``theta``).
    """

    kind: str = "isotropic"
    sigma: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    theta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("delta", "isotropic", "anisotropic"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "isotropic" and not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.kind == "anisotropic" and not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError(f"eigenvalues must be positive, got {self.lambda1}, {self.lambda2}")

    def build(self, size=21):
        if self.kind == "delta":
            return make_delta_kernel(size)
        if self.kind == "isotropic":
            return make_isotropic_kernel(self.sigma, size)
        return make_anisotropic_kernel(self.lambda1, self.lambda2, self.theta, size)

    @classmethod
    def delta(cls):
        return cls(kind="delta")

    @classmethod
    def isotropic(cls, sigma):
        return cls(kind="isotropic", sigma=float(sigma))

    @classmethod
    def anisotropic(cls, lambda1, lambda2, theta):
        return cls(kind="anisotropic", lambda1=float(lambda1), lambda2=float(lambda2), theta=float(theta))

    def label(self):
        if self.kind == "delta":
            return "delta"
        if self.kind == "isotropic":
            return f"iso_{self.sigma:.4g}"
        return f"aniso_{self.lambda1:.4g}_{self.lambda2:.4g}_{self.theta:.4g}"


@dataclass(frozen=True)
class DegradationSpec:
    kernel: KernelSpec = field(default_factory=KernelSpec.delta)
    scale: int = 4
    noise_sigma: float = 0.0
    jpeg_quality: int | None = None
    op_order: tuple = ()
    rng_seed: int = 0
    kernel_size: int = 21
    resize_mode: str = "nearest"
    second_pass: bool = False

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValueError(f"unsupported scale {self.scale}; expected one of {SCALES}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.jpeg_quality is not None and not 30 <= self.jpeg_quality <= 95:
            raise ValueError(f"jpeg_quality must be in [30, 95], got {self.jpeg_quality}")
        if self.resize_mode not in RESIZE_MODES:
            raise ValueError(f"unknown resize mode {self.resize_mode!r}")
        order = tuple(self.op_order)
        if len(set(order)) != len(order) or any(s not in STAGES for s in order):
            raise ValueError(f"op_order must be a permutation of a subset of {STAGES}, got {order}")
        if order and "downsample" not in order:
            raise ValueError("op_order must contain the downsample stage")
        if "jpeg" in order and self.jpeg_quality is None:
            raise ValueError("jpeg stage requires jpeg_quality")
        object.__setattr__(self, "op_order", order)

    def to_dict(self):
        d = asdict(self)
        d["op_order"] = list(self.op_order)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["kernel"] = KernelSpec(**d["kernel"])
        d["op_order"] = tuple(d.get("op_order", ()))
        return cls(**d)


def _check_size(size):
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {size}")


def _grid(size):
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    # xx: column offset, yy: row offset
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    return xx, yy


def make_delta_kernel(size=21):
    _check_size(size)
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k


def make_isotropic_kernel(sigma, size=21):
    """Gaussian pdf sampled on the integer grid, normalized to sum one."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    _check_size(size)
    xx, yy = _grid(size)
    k = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    return k / k.sum()


def make_anisotropic_kernel(lambda1, lambda2, theta, size=21):
    """Zero-mean Gaussian with covariance ``R(theta) diag(l1, l2) R(theta)^T``."""
    if not (lambda1 > 0 and lambda2 > 0):
        raise ValueError(f"covariance eigenvalues must be positive, got {lambda1}, {lambda2}")
    _check_size(size)
    c, s = math.cos(theta), math.sin(theta)
    # inverse covariance in closed form: R diag(1/l1, 1/l2) R^T
    a = c * c / lambda1 + s * s / lambda2
    b = c * s * (1.0 / lambda1 - 1.0 / lambda2)
    d = s * s / lambda1 + c * c / lambda2
    xx, yy = _grid(size)
    k = np.exp(-0.5 * (a * xx**2 + 2.0 * b * xx * yy + d * yy**2))
    return k / k.sum()


def check_image(img, name="image"):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] not in (1, 3) or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"{name} must be H×W×C with C in (1, 3), got shape {img.shape}")
    return img


def _check_divisible(img, scale):
    h, w = img.shape[:2]
    if h % scale or w % scale:
        raise ValueError(f"image size {h}×{w} is not divisible by scale {scale}")


def blur(img, kernel, scale=1):
    """Convolve with ``kernel`` under reflect padding, keeping every ``scale``-th pixel.

    Kernels are flipped, so this is a true convolution for asymmetric kernels.
    """
    img = check_image(img).astype(np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel must have odd size, got {kernel.shape}")
    padded = np.pad(img, ((kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)), mode="reflect")
    h, w = img.shape[:2]
    out_h = (h + scale - 1) // scale
    out_w = (w + scale - 1) // scale
    return blur_subsample(padded, kernel[::-1, ::-1], scale, out_h, out_w)


def add_noise(img, noise_sigma, rng):
    if noise_sigma == 0:
        return img
    return img + rng.normal(0.0, noise_sigma / 255.0, size=img.shape)


def degrade_classic(hr, spec):
    """``LR = (HR ⊛ k)↓s + n``, clipped to ``[0, 1]``."""
    hr = check_image(hr, "hr")
    _check_divisible(hr, spec.scale)
    kernel = spec.kernel.build(spec.kernel_size)
    lr = blur(hr, kernel, spec.scale)
    lr = add_noise(lr, spec.noise_sigma, np.random.default_rng(spec.rng_seed))
    return np.clip(lr, 0.0, 1.0)


def downsample(img, scale, mode="nearest"):
    img = check_image(img).astype(np.float64)
    _check_divisible(img, scale)
    h, w, c = img.shape
    if mode == "nearest":
        return img[::scale, ::scale].copy()
    if mode == "area":
        return img.reshape(h // scale, scale, w // scale, scale, c).mean(axis=(1, 3))
    if mode == "bicubic":
        return bicubic_resize(img, (h // scale, w // scale))
    raise ValueError(f"unknown resize mode {mode!r}")


def bicubic_resize(img, size):
    """Bicubic resize of an H×W×C float image to ``size = (h, w)`` (antialiased when shrinking)."""
    img = check_image(img)
    h, w = size
    chans = [
        np.asarray(Image.fromarray(img[:, :, c].astype(np.float32), mode="F").resize((w, h), Image.BICUBIC))
        for c in range(img.shape[2])
    ]
    return np.stack(chans, axis=-1).astype(np.float64)


def bicubic_downsample(hr, scale):
    hr = check_image(hr, "hr")
    _check_divisible(hr, scale)
    return np.clip(bicubic_resize(hr, (hr.shape[0] // scale, hr.shape[1] // scale)), 0.0, 1.0)


def jpeg_roundtrip(img, quality):
    """Encode/decode through baseline JPEG at ``quality`` (8-bit quantized)."""
    img = check_image(img)
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    pil = Image.fromarray(u8[:, :, 0], mode="L") if u8.shape[2] == 1 else Image.fromarray(u8, mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    out = np.asarray(Image.open(buf), dtype=np.float64) / 255.0
    if out.ndim == 2:
        out = out[:, :, None]
    return out


def degrade_realworld(hr, spec):
    """Apply the stages in ``spec.op_order``; clip after every stage."""
    hr = check_image(hr, "hr")
    _check_divisible(hr, spec.scale)
    order = spec.op_order or STAGES[:3]
    rng = np.random.default_rng(spec.rng_seed)
    kernel = spec.kernel.build(spec.kernel_size)

    def run(img, stage):
        if stage == "blur":
            img = blur(img, kernel)
        elif stage == "downsample":
            img = downsample(img, spec.scale, spec.resize_mode)
        elif stage == "noise":
            img = add_noise(img, spec.noise_sigma, rng)
        else:
            img = jpeg_roundtrip(img, spec.jpeg_quality)
        return np.clip(img, 0.0, 1.0)

    img = hr.astype(np.float64)
    for stage in order:
        img = run(img, stage)
    if spec.second_pass:
        # second pass keeps the resolution: the scale contract is met by the first pass
        for stage in order:
            if stage != "downsample":
                img = run(img, stage)
    return img


def degrade(hr, spec):
    """Dispatch on ``spec``: a nonempty ``op_order`` selects the real-world pipeline."""
    if spec.op_order:
        return degrade_realworld(hr, spec)
    return degrade_classic(hr, spec)


def sample_degradation(mode, scale, rng, *, noise_levels=(0, 10, 20, 25), kernel_size=21,
                       sigma_range=None):
    """Draw a random :class:`DegradationSpec` for ``mode``.

    ``classic_iso`` draws the kernel width uniformly from the per-scale range,
    ``classic_aniso_noise`` draws both eigenvalues from U(0.2, 4), the angle
    from U(0, pi) and the noise std from ``noise_levels``; ``realworld`` draws
    a stage order and per-stage severities.
    """
    if mode not in MODES:
        raise ValueError(f"unknown degradation mode {mode!r}; expected one of {MODES}")
    if scale not in SCALES:
        raise ValueError(f"unsupported scale {scale}; expected one of {SCALES}")
    if mode == "classic_iso":
        lo, hi = sigma_range or ISO_SIGMA_RANGE[scale]
        kernel = KernelSpec.isotropic(rng.uniform(lo, hi))
        return DegradationSpec(kernel=kernel, scale=scale, rng_seed=int(rng.integers(2**31 - 1)),
                               kernel_size=kernel_size)
    if mode == "classic_aniso_noise":
        l1, l2 = rng.uniform(*ANISO_EIGEN_RANGE, size=2)
        kernel = KernelSpec.anisotropic(l1, l2, rng.uniform(0.0, math.pi))
        noise = float(noise_levels[rng.integers(len(noise_levels))])
        return DegradationSpec(kernel=kernel, scale=scale, noise_sigma=noise,
                               rng_seed=int(rng.integers(2**31 - 1)), kernel_size=kernel_size)

    if rng.uniform() < 0.5:
        kernel = KernelSpec.isotropic(rng.uniform(0.2, 3.0))
    else:
        l1, l2 = rng.uniform(*ANISO_EIGEN_RANGE, size=2)
        kernel = KernelSpec.anisotropic(l1, l2, rng.uniform(0.0, math.pi))
    order = tuple(STAGES[i] for i in rng.permutation(len(STAGES)))
    return DegradationSpec(
        kernel=kernel,
        scale=scale,
        noise_sigma=float(rng.uniform(1.0, 25.0)),
        jpeg_quality=int(rng.integers(30, 96)),
        op_order=order,
        rng_seed=int(rng.integers(2**31 - 1)),
        kernel_size=kernel_size,
        resize_mode=RESIZE_MODES[rng.integers(len(RESIZE_MODES))],
    )


def gaussian8_suite(scale, width_range=None):
    """Eight isotropic kernels with widths evenly spaced over the test range."""
    if scale not in GAUSSIAN8_RANGE:
        raise ValueError(f"unsupported scale {scale}; expected one of {tuple(GAUSSIAN8_RANGE)}")
    lo, hi = width_range or GAUSSIAN8_RANGE[scale]
    return [KernelSpec.isotropic(s) for s in np.linspace(lo, hi, 8)]
