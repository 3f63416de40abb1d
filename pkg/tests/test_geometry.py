import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from create_ffpe.core import GeometryError, ImageTensor, Magnification
from create_ffpe.geometry import centercrop, make_resolution_pair, resize

from oracles import box_downsample2, mean_abs


def test_centercrop_4x4():
    x = torch.arange(1, 17, dtype=torch.float64).reshape(1, 4, 4)
    assert centercrop(x, 2).tolist() == [[[6.0, 7.0], [10.0, 11.0]]]


def test_centercrop_identity_and_offset():
    x = torch.randn(3, 448, 448)
    assert torch.equal(centercrop(x, 448), x)
    c = centercrop(x, 112)
    assert torch.equal(c, x[:, 168:280, 168:280])


@pytest.mark.parametrize("size", [0, 9, 3])
def test_centercrop_errors(size):
    with pytest.raises(GeometryError):
        centercrop(torch.zeros(3, 8, 8), size)


@given(k=st.integers(1, 8), extra=st.integers(0, 8))
def test_centercrop_composes(k, extra):
    s = 2 * k
    n = 2 * s + 2 * extra
    x = torch.arange(n * n, dtype=torch.float64).reshape(1, n, n)
    assert torch.equal(centercrop(centercrop(x, 2 * s), s), centercrop(x, s))


def test_centercrop_composes_explicit():
    x = torch.randn(3, 64, 64)
    for s in (2, 8, 16, 30):
        assert torch.equal(centercrop(centercrop(x, 2 * s), s), centercrop(x, s))


def test_resize_identity_and_constant():
    x = torch.randn(3, 12, 12)
    assert resize(x, 12) is x
    c = torch.full((3, 10, 10), 0.37, dtype=torch.float64)
    for size in (1, 3, 5, 17, 40):
        assert torch.allclose(resize(c, size), torch.full((3, size, size), 0.37, dtype=torch.float64))


def test_resize_2x2_to_1():
    x = torch.tensor([[[0.0, 1.0], [0.0, 1.0]]], dtype=torch.float64)
    assert resize(x, 1).item() == pytest.approx(0.5, abs=1e-15)


def test_resize_half_is_box_average(rng):
    x = rng.uniform(-1, 1, (3, 20, 20))
    got = resize(torch.from_numpy(x), 10).numpy()
    np.testing.assert_allclose(got, box_downsample2(x), atol=1e-12)


def test_resize_down_up_ramp():
    ramp = torch.linspace(-1, 1, 448, dtype=torch.float64).expand(3, 448, 448).contiguous()
    back = resize(resize(ramp, 224), 448)
    assert float((back - ramp).abs().mean()) < 0.01 * 2.0
    c = torch.full((3, 448, 448), -0.2, dtype=torch.float64)
    assert torch.equal(resize(resize(c, 224), 448), c)


def test_resize_keeps_tag():
    img = ImageTensor(torch.zeros(3, 16, 16), Magnification.X5, "t")
    out = resize(img, 8)
    assert isinstance(out, ImageTensor) and out.magnification == Magnification.X5 and out.shape == (3, 8, 8)


def test_pair_constant_source():
    src = ImageTensor(torch.full((3, 448, 448), 0.25), id="s0")
    pair = make_resolution_pair(src)
    assert pair.fs_10x.shape == pair.fs_5x.shape == (3, 224, 224)
    assert pair.fs_10x.magnification == Magnification.X10 and pair.fs_5x.magnification == Magnification.X5
    assert pair.source_id == "s0"
    assert torch.equal(centercrop(pair.fs_5x.data, 112), resize(pair.fs_10x.data, 112))


def test_pair_geometry_band_limited(rng):
    # smooth random field: sum of a few low-frequency cosines
    yy, xx = np.mgrid[0:448, 0:448] / 448.0
    field = sum(rng.uniform(-0.3, 0.3) * np.cos(2 * np.pi * (rng.integers(1, 6) * yy + rng.integers(1, 6) * xx))
                for _ in range(4))
    src = torch.from_numpy(np.stack([field] * 3))
    pair = make_resolution_pair(src)
    a = centercrop(pair.fs_5x.data, 112).numpy()
    b = resize(pair.fs_10x.data, 112).numpy()
    assert mean_abs(a[0], b[0]) < 0.02


def test_pair_marked_pixels():
    src = torch.full((3, 448, 448), -1.0)
    src[:, 0, 0] = 1.0
    pair = make_resolution_pair(src)
    assert float(pair.fs_10x.data.max()) == -1.0
    assert float(pair.fs_5x.data[:, 0, 0].max()) == pytest.approx(-0.5)  # 2x2 mean of (1,-1,-1,-1)

    src = torch.full((3, 448, 448), -1.0)
    src[:, 224, 224] = 1.0
    pair = make_resolution_pair(src)
    assert float(pair.fs_10x.data[:, 112, 112].min()) == 1.0
    assert float(pair.fs_5x.data[:, 112, 112].min()) == pytest.approx(-0.5)


def test_pair_wrong_size():
    with pytest.raises(GeometryError):
        make_resolution_pair(torch.zeros(3, 224, 224))
