import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mrda import netcore as nc
from mrda.den import DENConfig, den_forward, init_den, softmax_normalize, transferable_names


def tiny(in_channels=3, d=16, dtype=torch.float64, seed=0):
    return init_den(DENConfig(in_channels=in_channels, channels=8, d=d), seed=seed, dtype=dtype)


def test_zero_input_gives_zero():
    out = den_forward(tiny(), torch.zeros(2, 3, 8, 8, dtype=torch.float64))
    assert out.shape == (2, 16)
    assert torch.count_nonzero(out) == 0


@pytest.mark.parametrize("size", [(8, 8), (13, 21), (32, 32)])
def test_output_length_independent_of_size(size):
    assert den_forward(tiny(), torch.rand(1, 3, *size, dtype=torch.float64)).shape == (1, 16)


def test_channel_mismatch():
    with pytest.raises(ValueError):
        den_forward(tiny(in_channels=16), torch.rand(1, 3, 8, 8, dtype=torch.float64))


def test_first_layer_gradient():
    m = tiny()
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)

    def fn(ins):
        p = m.params.clone()
        p["conv0.weight"] = ins[0]
        return (den_forward(m, x, p) ** 2).sum()

    assert nc.grad_check(fn, [m.params["conv0.weight"]], max_elements=40) < 1e-4


def test_shift_invariance_of_interior_blob():
    m = tiny(seed=3)
    g = torch.Generator().manual_seed(0)
    for n in m.params.names():
        if n.endswith(".bias"):
            m.params[n] = torch.randn(m.params[n].shape, generator=g, dtype=torch.float64) * 0.1
    blob = torch.rand(3, 5, 5, generator=g, dtype=torch.float64)
    a = torch.zeros(1, 3, 96, 96, dtype=torch.float64)
    b = torch.zeros_like(a)
    a[0, :, 40:45, 40:45] = blob
    # total stride is 8, so an 8-pixel shift maps to a whole-cell shift of the final grid
    b[0, :, 48:53, 48:53] = blob
    assert (den_forward(m, a) - den_forward(m, b)).abs().max() < 1e-5


def test_periodic_pattern_roll():
    m = tiny(seed=4)
    y, x = np.mgrid[:64, :64]
    pat = np.stack([np.sin(2 * np.pi * x / 8), np.cos(2 * np.pi * y / 8), np.sin(2 * np.pi * (x + y) / 8)])
    a = torch.as_tensor(pat)[None]
    b = torch.roll(a, shifts=(8, 16), dims=(2, 3))
    assert (den_forward(m, a) - den_forward(m, b)).abs().max() < 1e-5


def test_softmax_examples():
    out = softmax_normalize(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64))
    np.testing.assert_allclose(out.numpy(), [0.09003, 0.24473, 0.66524], atol=1e-5)
    np.testing.assert_allclose(softmax_normalize(torch.full((4,), 7.0, dtype=torch.float64)).numpy(), 0.25)
    big = softmax_normalize(torch.tensor([1000.0, 1000.0], dtype=torch.float64))
    assert torch.isfinite(big).all()


@settings(max_examples=50, deadline=None)
@given(v=st.lists(st.floats(-50, 50), min_size=2, max_size=32), c=st.floats(-100, 100))
def test_softmax_probability_and_shift(v, c):
    t = torch.tensor(v, dtype=torch.float64)
    p = softmax_normalize(t)
    assert (p >= 0).all()
    assert abs(p.sum().item() - 1) < 1e-9
    torch.testing.assert_close(softmax_normalize(t + c), p, atol=1e-12, rtol=1e-9)


def test_teacher_student_checkpoints_interchangeable(tmp_path):
    teacher = tiny(in_channels=16, seed=1)
    student = tiny(in_channels=3, seed=2)
    names = transferable_names(teacher, student)
    assert names == [n for n in student.params.names() if n != "conv0.weight"]
    path = nc.save_checkpoint(tmp_path / "den_t.ckpt", teacher.params)
    loaded, _ = nc.load_checkpoint(path)
    for n in names:
        student.params[n] = loaded[n]
    with pytest.raises(ValueError):
        student.params["conv0.weight"] = loaded["conv0.weight"]
    assert den_forward(student, torch.rand(1, 3, 8, 8, dtype=torch.float64)).shape == (1, 16)
