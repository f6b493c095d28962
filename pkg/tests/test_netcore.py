import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mrda import netcore as nc

from oracles import conv2d_loops, depthwise_loops, leaky


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def test_conv2d_identity_1x1():
    x = torch.randn(3, 5, 5, dtype=torch.float64)
    w = torch.eye(3, dtype=torch.float64)[:, :, None, None]
    assert torch.equal(nc.conv2d(x, w), x)


def test_conv2d_zero_weights():
    x = torch.randn(2, 3, 4, 4)
    out = nc.conv2d(x, torch.zeros(5, 3, 3, 3), torch.zeros(5))
    assert out.shape == (2, 5, 4, 4)
    assert torch.count_nonzero(out) == 0


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(1, 4, 4)), rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2)
    out = nc.conv2d(t64(x), t64(w), t64(b)).numpy()
    np.testing.assert_allclose(out, conv2d_loops(x, w, b, padding=1), atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), stride=st.sampled_from([1, 2]), k=st.sampled_from([1, 3, 5]))
def test_conv2d_oracle_property(seed, stride, k):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, 7, 6)), rng.normal(size=(3, 2, k, k)), rng.normal(size=3)
    out = nc.conv2d(t64(x), t64(w), t64(b), stride=stride).numpy()
    np.testing.assert_allclose(out, conv2d_loops(x, w, b, stride=stride, padding=k // 2), atol=1e-9)


def test_conv2d_shape_errors():
    with pytest.raises(ValueError):
        nc.conv2d(torch.zeros(1, 3, 4, 4), torch.zeros(2, 4, 3, 3))
    with pytest.raises(ValueError):
        nc.conv2d(torch.zeros(1, 3, 4, 4), torch.zeros(2, 3, 3, 3), torch.zeros(3))
    with pytest.raises(ValueError):
        nc.conv2d(torch.zeros(4, 4), torch.zeros(2, 3, 3, 3))


def test_leaky_relu_values():
    out = nc.leaky_relu(torch.tensor([0.0, -1.0, 2.5], dtype=torch.float64))
    assert out.tolist() == [0.0, pytest.approx(-0.1, abs=1e-15), 2.5]
    x = np.random.default_rng(1).normal(size=50)
    np.testing.assert_allclose(nc.leaky_relu(t64(x)).numpy(), leaky(x))


def _upscaler(c, scale, dtype=torch.float64, seed=0):
    entries = {}
    nc.init_upscaler(entries, "upscaler", c, 3, scale, torch.Generator().manual_seed(seed), dtype)
    return nc.ParamSet(entries)


@pytest.mark.parametrize("scale", [2, 4])
def test_upscale_shape(scale):
    x = torch.randn(2, 4, 5, 3, dtype=torch.float64)
    assert nc.upscale(x, _upscaler(4, scale), scale).shape == (2, 3, 5 * scale, 3 * scale)


def test_upscale_rejects_scale_3():
    with pytest.raises(ValueError):
        nc.upscale(torch.zeros(1, 4, 2, 2), _upscaler(4, 2), 3)


def test_pixel_shuffle_constant():
    x = torch.full((1, 8, 3, 3), 0.25)
    out = nc.pixel_shuffle(x, 2)
    assert out.shape == (1, 2, 6, 6)
    assert torch.all(out == 0.25)
    with pytest.raises(ValueError):
        nc.pixel_shuffle(torch.zeros(1, 6, 2, 2), 2)


def test_upscale_gradient():
    p = _upscaler(2, 2)
    x = torch.randn(1, 2, 3, 3, dtype=torch.float64)
    target = torch.randn(1, 3, 6, 6, dtype=torch.float64)
    w = p["upscaler.up0.weight"]

    def fn(ins):
        q = p.clone()
        q["upscaler.up0.weight"] = ins[1]
        return ((nc.upscale(ins[0], q, 2) - target) ** 2).sum()

    assert nc.grad_check(fn, [x, w], max_elements=40) < 1e-4


def test_depthwise_delta_and_zero():
    x = torch.randn(2, 3, 5, 5, dtype=torch.float64)
    delta = torch.zeros(3, 1, 3, 3, dtype=torch.float64)
    delta[:, 0, 1, 1] = 1.0
    assert torch.equal(nc.dynamic_depthwise_conv(x, delta), x)
    assert torch.count_nonzero(nc.dynamic_depthwise_conv(x, torch.zeros_like(delta))) == 0


def test_depthwise_matches_loop_oracle():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 5, 5)), rng.normal(size=(2, 1, 3, 3))
    np.testing.assert_allclose(nc.dynamic_depthwise_conv(t64(x), t64(w)).numpy(), depthwise_loops(x, w), atol=1e-6)


def test_depthwise_per_sample_kernels():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 1, 3, 3))
    out = nc.dynamic_depthwise_conv(t64(x), t64(w)).numpy()
    for i in range(2):
        np.testing.assert_allclose(out[i], depthwise_loops(x[i], w[i]), atol=1e-9)


def test_depthwise_errors():
    with pytest.raises(ValueError):
        nc.dynamic_depthwise_conv(torch.zeros(1, 3, 4, 4), torch.zeros(2, 1, 3, 3))
    with pytest.raises(ValueError):
        nc.dynamic_depthwise_conv(torch.zeros(1, 2, 4, 4), torch.zeros(2, 1, 2, 2))
    with pytest.raises(ValueError):
        nc.dynamic_depthwise_conv(torch.zeros(2, 2, 4, 4), torch.zeros(3, 2, 1, 3, 3))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(-2, 2), b=st.floats(-2, 2))
def test_depthwise_superposition(seed, a, b):
    g = torch.Generator().manual_seed(seed)
    x1, x2 = (torch.randn(1, 3, 5, 5, generator=g, dtype=torch.float64) for _ in range(2))
    w1, w2 = (torch.randn(3, 1, 3, 3, generator=g, dtype=torch.float64) for _ in range(2))
    f = nc.dynamic_depthwise_conv
    torch.testing.assert_close(f(x1, a * w1 + b * w2), a * f(x1, w1) + b * f(x1, w2), atol=1e-10, rtol=0)
    torch.testing.assert_close(f(a * x1 + b * x2, w1), a * f(x1, w1) + b * f(x2, w1), atol=1e-10, rtol=0)


def test_grad_check_linear_exact():
    a = torch.randn(6, dtype=torch.float64)
    assert nc.grad_check(lambda ins: (ins[0] * a).sum(), [torch.randn(6, dtype=torch.float64)]) < 1e-8


def test_grad_check_depthwise_sum():
    x = torch.randn(1, 2, 5, 5, dtype=torch.float64)
    w = torch.randn(2, 1, 3, 3, dtype=torch.float64)
    err = nc.grad_check(lambda ins: (nc.dynamic_depthwise_conv(ins[0], ins[1]) ** 2).sum(), [x, w])
    assert err < 1e-4


def test_grad_check_leaky_away_from_zero():
    x = torch.tensor([-2.0, -0.5, 0.7, 3.0], dtype=torch.float64)
    assert nc.grad_check(lambda ins: (nc.leaky_relu(ins[0]) ** 3).sum(), [x]) < 1e-6


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * 2

        @staticmethod
        def backward(ctx, g):
            return g * 3

    assert nc.grad_check(lambda ins: Wrong.apply(ins[0]).sum(), [torch.randn(3, dtype=torch.float64)]) > 0.1


def test_conv2d_gradient():
    x = torch.randn(1, 2, 5, 5, dtype=torch.float64)
    w = torch.randn(3, 2, 3, 3, dtype=torch.float64)
    b = torch.randn(3, dtype=torch.float64)
    err = nc.grad_check(lambda ins: (nc.conv2d(ins[0], ins[1], ins[2], stride=2) ** 2).sum(), [x, w, b])
    assert err < 1e-4


# ---------------------------------------------------------------------------
# ParamSet


def _pset():
    g = torch.Generator().manual_seed(0)
    return nc.ParamSet({"a": torch.randn(2, 2, generator=g), "b": torch.randn(3, generator=g)}, {"b": False})


def test_paramset_mask_and_shapes():
    p = _pset()
    assert p.meta_mask == {"a": True, "b": False}
    assert p.meta_names() == ["a"]
    with pytest.raises(ValueError):
        p["a"] = torch.zeros(3)
    with pytest.raises(KeyError):
        p["c"] = torch.zeros(1)


def test_masked_step_only_touches_masked():
    p = _pset()
    before = p.clone()
    q = p.masked_step({"a": torch.ones(2, 2), "b": torch.ones(3)}, 0.5)
    assert torch.equal(q["b"], before["b"])
    assert torch.equal(q["a"], before["a"] - 0.5)
    assert p.equal(before)


def test_clone_is_independent():
    p = _pset()
    q = p.clone()
    q["a"] = q["a"] + 1
    assert not torch.equal(p["a"], q["a"])
    assert q.meta_mask == p.meta_mask


def test_lr_schedule():
    assert nc.lr_schedule(0, 2e-4, 200) == 2e-4
    assert nc.lr_schedule(199, 2e-4, 200) == 2e-4
    assert nc.lr_schedule(200, 2e-4, 200) == 1e-4
    assert nc.lr_schedule(400, 2e-4, 200) == 5e-5
    assert nc.lr_schedule(999, 1.0, None) == 1.0
    with pytest.raises(ValueError):
        nc.lr_schedule(0, 0.0, 10)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    p = nc.ParamSet({"x": torch.randn(2, 3), "y": torch.randn(4, dtype=torch.float64)}, {"y": False})
    path = nc.save_checkpoint(tmp_path / "a.ckpt", p, {"stage": 1})
    q, meta = nc.load_checkpoint(path)
    assert meta == {"stage": 1}
    assert q.equal(p)
    assert q.meta_mask == p.meta_mask
    assert q["y"].dtype == torch.float64


def test_checkpoint_deterministic_bytes(tmp_path):
    p = _pset()
    nc.save_checkpoint(tmp_path / "a.ckpt", p, {"k": [1, 2]})
    nc.save_checkpoint(tmp_path / "b.ckpt", p.clone(), {"k": [1, 2]})
    assert nc.file_digest(tmp_path / "a.ckpt") == nc.file_digest(tmp_path / "b.ckpt")


def test_checkpoint_layout(tmp_path):
    import json
    import struct

    path = nc.save_checkpoint(tmp_path / "c.ckpt", nc.ParamSet({"w": torch.arange(3.0)}))
    raw = path.read_bytes()
    assert raw[:8] == b"MRDACKPT"
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    assert header["version"] == 1
    assert header["entries"][0] == {"name": "w", "shape": [3], "dtype": "<f4", "meta_mask": True,
                                    "offset": 0, "nbytes": 12}
    assert np.frombuffer(raw[16 + hlen:], "<f4").tolist() == [0.0, 1.0, 2.0]


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        nc.load_checkpoint(bad)
