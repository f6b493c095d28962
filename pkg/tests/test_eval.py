import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mrda.data import synthetic_dataset, to_image
from mrda.degradation import DegradationSpec, KernelSpec
from mrda.den import DENConfig, init_den
from mrda.evaluation import (
    adaptation_curve,
    adaptation_psnr,
    evaluate,
    export_idr,
    psnr,
    read_jsonl,
    rgb_to_y,
    separability_score,
    silhouette,
    ssim,
    student_extractor,
    write_jsonl,
)
from mrda.mln import MLNConfig, init_mln, make_task, mln_forward

from oracles import silhouette_loops

# frozen reference values from an independent implementation (scikit-image),
# Y channel, PSNR with a 2-pixel crop
FIXTURE_VALUES = [
    (38.9845682192847, 0.9976382202406853),
    (25.442428743687337, 0.9494244321709691),
    (16.794759539561028, 0.6747847014330849),
    (30.90325185301576, 0.9846059218349991),
]


def fixture_pairs():
    rng = np.random.default_rng(2024)
    out = []
    for size, noise in [(24, 0.02), (32, 0.1), (40, 0.3), (33, 0.05)]:
        a = rng.uniform(size=(size, size, 3))
        out.append((a, np.clip(a + rng.normal(0, noise, size=a.shape), 0, 1)))
    return out


def test_y_channel_endpoints():
    assert rgb_to_y(np.zeros((1, 1, 3)))[0, 0, 0] == pytest.approx(16 / 255, abs=1e-12)
    assert rgb_to_y(np.ones((1, 1, 3)))[0, 0, 0] == pytest.approx(235 / 255, abs=1e-12)
    ramp = np.repeat(np.linspace(0, 1, 50)[:, None, None], 3, axis=2)
    assert np.all(np.diff(rgb_to_y(ramp)[:, 0, 0]) > 0)
    with pytest.raises(ValueError):
        rgb_to_y(np.zeros((2, 2, 4)))


def test_psnr_cases():
    a = np.random.default_rng(0).uniform(size=(8, 8, 1))
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    b = np.random.default_rng(1).uniform(size=(8, 8, 1))
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / np.mean((a - b) ** 2)), abs=1e-6)
    with pytest.raises(ValueError):
        psnr(a, a[:4])


def test_frozen_fixture_values():
    for (a, b), (p_ref, s_ref) in zip(fixture_pairs(), FIXTURE_VALUES):
        assert abs(psnr(a, b, 2) - p_ref) < 1e-4
        assert abs(ssim(a, b) - s_ref) < 1e-5


def test_against_skimage():
    sk = pytest.importorskip("skimage.metrics")
    for a, b in fixture_pairs():
        ya, yb = rgb_to_y(a)[:, :, 0], rgb_to_y(b)[:, :, 0]
        ref = sk.structural_similarity(ya, yb, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                       data_range=1.0)
        assert abs(ssim(a, b) - ref) < 1e-5
        assert abs(psnr(a, b, 3) - sk.peak_signal_noise_ratio(ya[3:-3, 3:-3], yb[3:-3, 3:-3], data_range=1.0)) < 1e-4


def test_ssim_properties():
    a, b = fixture_pairs()[1]
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9
    y, x = np.mgrid[:32, :32]
    checker = (((x // 4) + (y // 4)) % 2).astype(float)[:, :, None]
    assert ssim(checker, 1 - checker) < 0.5


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), noise=st.floats(0.0, 0.5))
def test_ssim_range(seed, noise):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(16, 16, 1))
    b = np.clip(a + rng.normal(0, noise, size=a.shape), 0, 1)
    assert -1 <= ssim(a, b) <= 1 + 1e-12


# ---------------------------------------------------------------------------
# silhouette


def test_silhouette_matches_loops_and_sklearn():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(30, 5))
    labels = np.repeat(["a", "b", "c"], 10)
    pts[labels == "b"] += 1.5
    ours = silhouette(pts, labels)
    assert ours == pytest.approx(silhouette_loops(pts, labels), abs=1e-12)
    metrics = pytest.importorskip("sklearn.metrics")
    assert ours == pytest.approx(metrics.silhouette_score(pts, labels), abs=1e-12)


def test_silhouette_fixtures():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(50, 4))
    b = rng.normal(size=(50, 4)) + 20
    assert silhouette(np.vstack([a, b]), [0] * 50 + [1] * 50) > 0.8
    same = rng.normal(size=(1000, 4))
    assert abs(silhouette(same, rng.permutation([0, 1] * 500))) < 0.1


def test_silhouette_degenerate():
    with pytest.raises(ValueError):
        silhouette(np.zeros((2, 3)), [0, 1])
    with pytest.raises(ValueError):
        silhouette(np.zeros((4, 3)), [0, 0, 0, 0])


def test_separability_permutation_invariant(tmp_path):
    rng = np.random.default_rng(2)
    rows = [{"idr": list(rng.normal(size=3) + (i % 3)), "label": str(i % 3)} for i in range(30)]
    path = tmp_path / "rows.jsonl"
    write_jsonl(path, rows)
    shuffled = [rows[i] for i in rng.permutation(30)]
    assert separability_score(path) == pytest.approx(separability_score(shuffled), abs=1e-12)


# ---------------------------------------------------------------------------
# export and reports


@pytest.fixture(scope="module")
def small_set():
    return synthetic_dataset(10, 16, seed=5)


def width_specs(widths=(0.5, 2.0, 3.5)):
    return [DegradationSpec(kernel=KernelSpec.isotropic(w), scale=2) for w in widths]


def test_export_cardinality_labels_determinism(small_set):
    den = init_den(DENConfig(in_channels=3, channels=4, d=6), seed=0)
    extractor = student_extractor(den)
    rows = export_idr(extractor, small_set, width_specs(), "student")
    assert len(rows) == 30
    assert {r["label"] for r in rows} == {"iso_0.5|noise=0", "iso_2|noise=0", "iso_3.5|noise=0"}
    assert rows == export_idr(extractor, small_set, width_specs(), "student")
    assert all(len(r["idr"]) == 6 for r in rows)
    assert set(rows[0]) == {"image_id", "path", "label", "kernel", "scale", "noise_sigma", "idr"}
    with pytest.raises(ValueError):
        export_idr(extractor, small_set, width_specs((1.0, 1.0)), "student")


def test_evaluate_report(small_set, tmp_path):
    report = evaluate(lambda lr, hr: hr, small_set[:3], width_specs((0.8, 1.6)), checkpoint="abc")
    assert len(report.rows) == 6
    assert [r["kernel"] for r in report.by_kernel()] == ["iso_0.8", "iso_1.6"]
    assert report.aggregate()["count"] == 6
    report.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "kernel,count,psnr,ssim" and lines[-1].startswith("aggregate,6,")
    report.to_json(tmp_path / "m.json")
    assert all(r["psnr"] == math.inf and r["ssim"] == pytest.approx(1.0) for r in report.rows)


def test_adaptation_curve(small_set):
    mln = init_mln(MLNConfig(channels=4, scale=2), seed=0)
    rng = np.random.default_rng(0)
    tasks = [make_task(small_set, s, rng, support_size=2, query_size=2, patch_size=6) for s in width_specs((0.5, 2.0))]
    snapshot = mln.params.clone()
    curve = adaptation_curve(mln, tasks, 3, 1e-2)
    assert [k for k, _ in curve] == [0, 1, 2, 3]
    per_task = adaptation_psnr(mln, tasks, 3, 1e-2)
    assert per_task.shape == (2, 4)
    with torch.no_grad():
        sr = mln_forward(mln, tasks[0].query[0])[0].clamp(0, 1)
    base = np.mean([psnr(to_image(sr[i]), to_image(tasks[0].query[1][i])) for i in range(2)])
    assert per_task[0, 0] == pytest.approx(base)
    assert mln.params.equal(snapshot)
    with pytest.raises(ValueError):
        adaptation_curve(mln, tasks, 0, 1e-2)


def test_jsonl_roundtrip(tmp_path):
    rows = [{"a": 1, "idr": [0.5, 1.5]}, {"a": 2, "idr": [2.0, 3.0]}]
    write_jsonl(tmp_path / "x.jsonl", rows)
    assert read_jsonl(tmp_path / "x.jsonl") == rows
