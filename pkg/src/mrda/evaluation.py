"""Fidelity metrics, degradation-representation export and adaptation curves.

PSNR and SSIM are computed on the BT.601 luminance of RGB inputs
(``Y = 16 + 65.481 R + 128.553 G + 24.966 B`` on ``[0, 1]`` inputs, rescaled
back to ``[0, 1]``).
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .data import to_image, to_tensor
from .degradation import check_image, degrade
from .den import den_forward
from .kernels import filter_valid_separable
from .mln import inner_adapt, mln_forward
from .rdan import rdan_forward
from .training import teacher_idr

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def rgb_to_y(img):
    img = check_image(img)
    if img.shape[2] != 3:
        raise ValueError(f"rgb_to_y needs 3 channels, got {img.shape[2]}")
    y = 65.481 * img[:, :, 0] + 128.553 * img[:, :, 1] + 24.966 * img[:, :, 2] + 16.0
    return (y / 255.0)[:, :, None]


def _luma(img):
    img = check_image(img)
    return rgb_to_y(img) if img.shape[2] == 3 else img


def _pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, border_crop=0):
    """``10 log10(1 / MSE)`` on luminance after cropping ``border_crop`` pixels per side.

    Identical inputs give ``inf``.
    """
    a, b = _pair(a, b)
    a, b = _luma(a), _luma(b)
    if border_crop:
        a = a[border_crop:-border_crop, border_crop:-border_crop]
        b = b[border_crop:-border_crop, border_crop:-border_crop]
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_taps(size=11, sigma=1.5):
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, border_crop=0):
    """Mean SSIM over 'valid' 11×11 Gaussian windows (sigma 1.5) on luminance."""
    a, b = _pair(a, b)
    a, b = _luma(a)[:, :, 0], _luma(b)[:, :, 0]
    if border_crop:
        a = a[border_crop:-border_crop, border_crop:-border_crop]
        b = b[border_crop:-border_crop, border_crop:-border_crop]
    taps = gaussian_taps()
    mu_a, mu_b = filter_valid_separable(a, taps), filter_valid_separable(b, taps)
    var_a = filter_valid_separable(a * a, taps) - mu_a**2
    var_b = filter_valid_separable(b * b, taps) - mu_b**2
    cov = filter_valid_separable(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    dataset: str
    checkpoint: str
    rows: list = field(default_factory=list)

    def add(self, image_id, spec, sr, hr, border_crop):
        row = {"image_id": image_id, "kernel": spec.kernel.label(), "scale": spec.scale,
               "noise_sigma": spec.noise_sigma, "psnr": psnr(sr, hr, border_crop),
               "ssim": ssim(sr, hr, border_crop)}
        self.rows.append(row)
        return row

    def by_kernel(self):
        groups = {}
        for r in self.rows:
            groups.setdefault(r["kernel"], []).append(r)
        return [{"kernel": k, "count": len(v), "psnr": float(np.mean([r["psnr"] for r in v])),
                 "ssim": float(np.mean([r["ssim"] for r in v]))} for k, v in groups.items()]

    def aggregate(self):
        return {"count": len(self.rows), "psnr": float(np.mean([r["psnr"] for r in self.rows])),
                "ssim": float(np.mean([r["ssim"] for r in self.rows]))}

    def to_json(self, path):
        payload = {"dataset": self.dataset, "checkpoint": self.checkpoint, "per_image": self.rows,
                   "per_kernel": self.by_kernel(), "aggregate": self.aggregate()}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["kernel", "count", "psnr", "ssim"])
            for r in self.by_kernel():
                w.writerow([r["kernel"], r["count"], f"{r['psnr']:.6f}", f"{r['ssim']:.6f}"])
            agg = self.aggregate()
            w.writerow(["aggregate", agg["count"], f"{agg['psnr']:.6f}", f"{agg['ssim']:.6f}"])


def evaluate(sr_fn, hr_images, specs, *, dataset="synthetic", checkpoint="", border_crop=None):
    """Run ``sr_fn(lr, hr) -> sr`` over every (image, spec) pair and collect metrics.

    ``hr`` is handed to ``sr_fn`` because the teacher path adapts on it; the
    student path ignores it.
    """
    report = MetricReport(dataset, checkpoint)
    for spec in specs:
        crop = spec.scale if border_crop is None else border_crop
        for i, hr in enumerate(hr_images):
            lr = degrade(hr, spec)
            sr = np.clip(sr_fn(lr, hr), 0.0, 1.0)
            report.add(i, spec, sr, hr, crop)
    return report


def student_sr_fn(student, dtype=torch.float32):
    def run(lr, hr):
        with torch.no_grad():
            x = to_tensor(lr, dtype)
            return to_image(rdan_forward(student.rdan, x, den_forward(student.den, x)))
    return run


def teacher_sr_fn(teacher, n, alpha, dtype=torch.float32):
    def run(lr, hr):
        x, y = to_tensor(lr, dtype), to_tensor(hr, dtype)
        d_t = teacher_idr(teacher.mln, teacher.den, x, y, n, alpha)
        with torch.no_grad():
            return to_image(rdan_forward(teacher.rdan, x, d_t))
    return run


# ---------------------------------------------------------------------------
# degradation representation export


def teacher_extractor(teacher, n, alpha, dtype=torch.float32):
    def run(lr, hr):
        with torch.no_grad():
            return teacher_idr(teacher.mln, teacher.den, to_tensor(lr, dtype), to_tensor(hr, dtype), n, alpha)[0]
    return run


def student_extractor(den_s, dtype=torch.float32):
    def run(lr, hr):
        with torch.no_grad():
            return den_forward(den_s, to_tensor(lr, dtype))[0]
    return run


def export_idr(extractor, hr_images, specs, path_kind):
    """One row per (image, degradation): labels plus the IDR vector.

    Every image is degraded under every spec with that spec's own noise seed,
    so the export is deterministic.
    """
    if len({s.kernel.label() + f"/{s.noise_sigma}" for s in specs}) < 2:
        raise ValueError("export needs at least two distinct degradations")
    rows = []
    for spec in specs:
        for i, hr in enumerate(hr_images):
            vec = extractor(degrade(hr, spec), hr)
            rows.append({
                "image_id": i,
                "path": path_kind,
                "label": f"{spec.kernel.label()}|noise={spec.noise_sigma:g}",
                "kernel": asdict(spec.kernel),
                "scale": spec.scale,
                "noise_sigma": spec.noise_sigma,
                "idr": [float(v) for v in vec.double().tolist()],
            })
    return rows


def write_jsonl(path, rows):
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def silhouette(points, labels):
    """Mean silhouette coefficient with Euclidean distance."""
    x = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    groups, counts = np.unique(labels, return_counts=True)
    if len(groups) < 2:
        raise ValueError("need at least two labeled groups")
    if counts.min() < 2:
        raise ValueError("every group needs at least two points")
    dist = cdist(x, x)
    masks = [labels == g for g in groups]
    scores = np.empty(len(x))
    for i in range(len(x)):
        own = labels[i] == groups
        a = None
        b = np.inf
        for g, mask in enumerate(masks):
            if own[g]:
                a = dist[i, mask].sum() / (mask.sum() - 1)
            else:
                b = min(b, dist[i, mask].mean())
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def separability_score(rows):
    """Silhouette of IDR vectors grouped by degradation label (rows or a JSONL path)."""
    if isinstance(rows, (str, Path)):
        rows = read_jsonl(rows)
    return silhouette([r["idr"] for r in rows], [r["label"] for r in rows])


# ---------------------------------------------------------------------------
# MLN adaptation curve


def adaptation_psnr(mln, tasks, max_steps, alpha):
    """Per-task query PSNR after ``k`` inner steps: array of shape ``(tasks, max_steps + 1)``.

    ``tasks`` are :class:`mrda.mln.TaskBatch` objects; adaptation runs on the
    support pairs, PSNR is measured on the query pairs.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    per_task = np.zeros((len(tasks), max_steps + 1))
    for t, task in enumerate(tasks):
        theta = mln.params
        for k in range(max_steps + 1):
            if k:
                theta = inner_adapt(mln, task.support, 1, alpha, params=theta)
            with torch.no_grad():
                sr = mln_forward(mln, task.query[0], theta)[0].clamp(0, 1)
            per_task[t, k] = np.mean([psnr(to_image(sr[i]), to_image(task.query[1][i]))
                                      for i in range(sr.shape[0])])
    return per_task


def adaptation_curve(mln, tasks, max_steps, alpha):
    """``[(k, mean query PSNR after k inner steps)]`` for ``k = 0..max_steps``."""
    per_task = adaptation_psnr(mln, tasks, max_steps, alpha)
    return [(k, float(v)) for k, v in enumerate(per_task.mean(axis=0))]
