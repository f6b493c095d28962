"""Differentiable building blocks shared by the three networks.

All networks are written functionally: a :class:`ParamSet` holds the tensors
and forwards take the ParamSet explicitly.  That is what lets the meta-learner
run a forward pass under adapted parameters without touching the originals.
Tensors are ``N×C×H×W`` torch tensors; reverse-mode gradients come from
``torch.autograd``.
"""

import hashlib
import json
import math
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

LEAKY_SLOPE = 0.1


class ParamSet:
    """Ordered ``name -> tensor`` map with a per-entry meta-update mask.

    ``meta_mask[name]`` is True when the entry may be changed by inner-loop
    adaptation and meta updates.  Shapes are fixed at construction.
    """

    def __init__(self, entries=None, meta_mask=None):
        self._entries = OrderedDict()
        self._mask = {}
        for name, value in (entries or {}).items():
            self._entries[name] = value
            self._mask[name] = True if meta_mask is None else bool(meta_mask.get(name, True))

    def __getitem__(self, name):
        return self._entries[name]

    def __setitem__(self, name, value):
        if name not in self._entries:
            raise KeyError(f"unknown parameter {name!r}; ParamSet entries are fixed at construction")
        if tuple(value.shape) != tuple(self._entries[name].shape):
            raise ValueError(
                f"shape of {name!r} is immutable: {tuple(self._entries[name].shape)} != {tuple(value.shape)}"
            )
        self._entries[name] = value

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    @property
    def meta_mask(self):
        return dict(self._mask)

    def is_meta(self, name):
        return self._mask[name]

    def meta_names(self):
        return [n for n in self._entries if self._mask[n]]

    def set_meta_mask(self, names, value):
        for n in names:
            if n not in self._entries:
                raise KeyError(n)
            self._mask[n] = bool(value)

    def shapes(self):
        return {n: tuple(v.shape) for n, v in self._entries.items()}

    def clone(self, requires_grad=False):
        """Detached deep copy (fresh storage for every entry)."""
        return ParamSet(
            {n: v.detach().clone().requires_grad_(requires_grad) for n, v in self._entries.items()},
            self._mask,
        )

    def map(self, fn):
        return ParamSet({n: fn(v) for n, v in self._entries.items()}, self._mask)

    def to(self, dtype):
        return self.map(lambda v: v.detach().to(dtype))

    def subset(self, prefix):
        """Entries starting with ``prefix``, with the prefix stripped."""
        return ParamSet(
            {n[len(prefix):]: v for n, v in self._entries.items() if n.startswith(prefix)},
            {n[len(prefix):]: m for n, m in self._mask.items() if n.startswith(prefix)},
        )

    def masked_step(self, grads, lr):
        """``p - lr * g`` for meta-updatable entries; other entries are shared as-is.

        ``grads`` maps names to gradient tensors; masked entries must all be present.
        """
        out = OrderedDict()
        for n, v in self._entries.items():
            out[n] = v - lr * grads[n] if self._mask[n] else v
        return ParamSet(out, self._mask)

    def numpy(self):
        return OrderedDict((n, v.detach().cpu().numpy()) for n, v in self._entries.items())

    def equal(self, other):
        """Bitwise equality of names, shapes, dtypes and values."""
        if self.names() != other.names():
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and torch.equal(a.detach(), b.detach())
            for a, b in zip(self.values(), other.values())
        )

    def digest(self):
        h = hashlib.sha256()
        for n, v in self._entries.items():
            h.update(n.encode())
            h.update(np.ascontiguousarray(v.detach().cpu().numpy()).tobytes())
        return h.hexdigest()

    def __repr__(self):
        return f"ParamSet({len(self)} entries, {sum(v.numel() for v in self.values())} values)"


# ---------------------------------------------------------------------------
# initialization


def kaiming_std(fan_in, slope=LEAKY_SLOPE):
    return math.sqrt(2.0 / (1.0 + slope**2)) / math.sqrt(fan_in)


def init_conv(entries, name, out_ch, in_ch, k, gen, dtype, bias=True, scale=1.0):
    std = kaiming_std(in_ch * k * k) * scale
    entries[f"{name}.weight"] = torch.randn(out_ch, in_ch, k, k, generator=gen, dtype=dtype) * std
    if bias:
        entries[f"{name}.bias"] = torch.zeros(out_ch, dtype=dtype)


def init_linear(entries, name, out_f, in_f, gen, dtype, scale=1.0):
    std = kaiming_std(in_f) * scale
    entries[f"{name}.weight"] = torch.randn(out_f, in_f, generator=gen, dtype=dtype) * std
    entries[f"{name}.bias"] = torch.zeros(out_f, dtype=dtype)


def init_upscaler(entries, prefix, channels, out_channels, scale, gen, dtype):
    check_scale(scale)
    for i in range(int(math.log2(scale))):
        init_conv(entries, f"{prefix}.up{i}", 4 * channels, channels, 3, gen, dtype)
    init_conv(entries, f"{prefix}.tail", out_channels, channels, 3, gen, dtype)


# ---------------------------------------------------------------------------
# primitives


def _batched(x):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() != 4:
        raise ValueError(f"expected C×H×W or N×C×H×W input, got shape {tuple(x.shape)}")
    return x, False


def conv2d(x, weight, bias=None, stride=1, padding=None):
    """Cross-correlation with zero padding (``padding=None`` keeps size at stride 1)."""
    x, squeeze = _batched(x)
    if weight.dim() != 4:
        raise ValueError(f"conv weight must be 4-D, got shape {tuple(weight.shape)}")
    if weight.shape[1] != x.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {tuple(bias.shape)} does not match {weight.shape[0]} outputs")
    if padding is None:
        padding = weight.shape[-1] // 2
    y = F.conv2d(x, weight, bias, stride=stride, padding=padding)
    return y[0] if squeeze else y


def conv(params, name, x, stride=1):
    return conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"] if f"{name}.bias" in params else None,
                  stride=stride)


def linear(params, name, x):
    return F.linear(x, params[f"{name}.weight"], params[f"{name}.bias"])


def leaky_relu(x, slope=LEAKY_SLOPE):
    return F.leaky_relu(x, negative_slope=slope)


def pixel_shuffle(x, factor):
    """Sub-pixel rearrangement ``(C·r²)×H×W -> C×(rH)×(rW)``."""
    x, squeeze = _batched(x)
    if x.shape[1] % (factor * factor):
        raise ValueError(f"channel count {x.shape[1]} not divisible by {factor}²")
    y = F.pixel_shuffle(x, factor)
    return y[0] if squeeze else y


def check_scale(scale):
    if scale not in (2, 4):
        raise ValueError(f"unsupported scale {scale}; expected 2 or 4")


def upscale(x, params, scale, prefix="upscaler"):
    """``log2(scale)`` stages of conv(C→4C) + pixel shuffle(2), then conv to output channels."""
    check_scale(scale)
    for i in range(int(math.log2(scale))):
        x = pixel_shuffle(conv(params, f"{prefix}.up{i}", x), 2)
    return conv(params, f"{prefix}.tail", x)


def dynamic_depthwise_conv(x, w):
    """Per-channel convolution of ``x`` with its own kernel slice of ``w``.

    ``x`` is ``N×C×H×W`` (or ``C×H×W``); ``w`` is ``C×1×Kh×Kw`` shared across
    the batch or ``N×C×1×Kh×Kw`` with one kernel bank per sample.  Zero
    padding, stride 1.
    """
    x, squeeze = _batched(x)
    n, c, h, wd = x.shape
    if w.dim() == 4:
        w = w.unsqueeze(0).expand(n, *w.shape)
    if w.dim() != 5 or w.shape[2] != 1:
        raise ValueError(f"dynamic weights must be [N×]C×1×Kh×Kw, got shape {tuple(w.shape)}")
    if w.shape[1] != c:
        raise ValueError(f"dynamic weights have {w.shape[1]} channels, input has {c}")
    if w.shape[0] != n:
        raise ValueError(f"dynamic weights batch {w.shape[0]} != input batch {n}")
    kh, kw = w.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"dynamic kernel size must be odd, got {kh}×{kw}")
    y = F.conv2d(x.reshape(1, n * c, h, wd), w.reshape(n * c, 1, kh, kw), padding=(kh // 2, kw // 2),
                 groups=n * c)
    y = y.reshape(n, c, h, wd)
    return y[0] if squeeze else y


def lr_schedule(t, base, halve_every):
    """Step decay: ``base * 0.5 ** floor(t / halve_every)`` (constant if ``halve_every`` is None)."""
    if not base > 0:
        raise ValueError(f"base learning rate must be positive, got {base}")
    if not halve_every:
        return base
    return base * 0.5 ** (t // halve_every)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(fn, inputs, eps=1e-6, max_elements=None, seed=0):
    """Max relative error between autograd and central-difference gradients.

    ``fn`` maps the list of ``inputs`` to a scalar tensor.  For every checked
    element the error is ``|g_auto - g_fd|`` divided by the largest gradient
    magnitude of that input (so near-zero entries are judged on the
    tensor's own scale).  ``max_elements`` limits the number of probed entries
    per input, chosen with ``seed``.
    """
    inputs = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = fn(inputs)
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    auto = torch.autograd.grad(out, inputs, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for k, x in enumerate(inputs):
            g_auto = torch.zeros_like(x) if auto[k] is None else auto[k]
            flat = x.view(-1)
            idx = np.arange(flat.numel())
            if max_elements is not None and idx.size > max_elements:
                idx = rng.choice(idx, size=max_elements, replace=False)
            g_fd = torch.zeros(len(idx), dtype=x.dtype)
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn(inputs).item()
                flat[i] = orig - eps
                down = fn(inputs).item()
                flat[i] = orig
                g_fd[j] = (up - down) / (2 * eps)
            g_a = g_auto.reshape(-1)[torch.as_tensor(idx)]
            scale = max(g_a.abs().max().item(), g_fd.abs().max().item(), 1e-300)
            worst = max(worst, (g_a - g_fd).abs().max().item() / scale)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_MAGIC = b"MRDACKPT"
CHECKPOINT_VERSION = 1

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(path, params, meta=None):
    """Write ``params`` as a JSON manifest followed by raw little-endian arrays.

    Layout: 8-byte magic, u64 little-endian header length, UTF-8 JSON header
    (``version``, ``meta``, ``entries`` with name/shape/dtype/meta_mask/offset/nbytes),
    then the concatenated array bytes.  Output is byte-for-byte deterministic.
    """
    blobs, entries, offset = [], [], 0
    for name, value in params.items():
        arr = value.detach().cpu()
        if arr.dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name}")
        raw = np.ascontiguousarray(arr.numpy().astype(_DTYPES[arr.dtype])).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": _DTYPES[arr.dtype],
            "meta_mask": params.is_meta(name),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": CHECKPOINT_VERSION, "meta": meta or {}, "entries": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(ParamSet, meta)``."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
    base = 16 + hlen
    entries, mask = OrderedDict(), {}
    for e in header["entries"]:
        start = base + e["offset"]
        arr = np.frombuffer(data[start:start + e["nbytes"]], dtype=e["dtype"]).reshape(e["shape"])
        entries[e["name"]] = torch.from_numpy(arr.copy()).to(_TORCH_DTYPES[e["dtype"]])
        mask[e["name"]] = e["meta_mask"]
    return ParamSet(entries, mask), header["meta"]


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
