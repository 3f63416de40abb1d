import copy
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from create_ffpe.core import ConfigError, ShapeError
from create_ffpe.geometry import centercrop
from create_ffpe.losses import (
    crcm_loss, gan_losses, generator_loss, info_nce, patchnce_loss, wdgm_loss,
)
from create_ffpe.models import (
    FeatureStack, GeneratorSpec, PatchSampleHeads, ResnetGenerator, encode_features, init_weights,
)

from oracles import box_downsample2, infonce_loops, mean_abs


def const(v, size=224):
    return torch.full((3, size, size), float(v), dtype=torch.float64)


def test_crcm_constants():
    assert float(crcm_loss(const(0.3), const(0.3))) == 0.0
    assert float(crcm_loss(const(1.0), const(0.0))) == 1.0


def test_crcm_matches_elementwise_oracle(rng):
    a, b = rng.uniform(-1, 1, (2, 3, 224, 224))
    got = float(crcm_loss(torch.from_numpy(a), torch.from_numpy(b)))
    want = mean_abs(a[:, 56:168, 56:168], box_downsample2(b))
    assert got == pytest.approx(want, rel=1e-12)


def test_crcm_shape_mismatch():
    with pytest.raises(ShapeError):
        crcm_loss(const(0), const(0, 112))


def test_wdgm_values(rng):
    assert float(wdgm_loss(const(0.2), const(0.2))) == 0.0
    assert float(wdgm_loss(const(0.7), const(0.2))) == pytest.approx(0.5)
    a, b = rng.uniform(-1, 1, (2, 3, 32, 32))
    assert float(wdgm_loss(torch.from_numpy(a), torch.from_numpy(b))) == pytest.approx(mean_abs(a, b), rel=1e-12)
    with pytest.raises(ShapeError):
        wdgm_loss(const(0, 32), const(0, 16))


@pytest.mark.parametrize("real,fake,ld,lg", [(1.0, 0.0, 0.0, 1.0), (0.0, 1.0, 1.0, 0.0), (0.5, 0.5, 0.25, 0.25)])
def test_gan_examples(real, fake, ld, lg):
    d, g = gan_losses(torch.full((1, 26, 26), real), torch.full((1, 26, 26), fake))
    assert float(d) == pytest.approx(ld) and float(g) == pytest.approx(lg)


def test_gan_d_side_is_detached():
    fake = torch.zeros(1, 4, 4, requires_grad=True)
    d, g = gan_losses(torch.ones(1, 4, 4), fake * 1.0)
    assert not d.requires_grad
    g.backward()
    assert fake.grad.abs().sum() > 0


def test_info_nce_closed_forms():
    # N=2, positive similarity 1, negative 0, tau 1
    q = torch.eye(2, dtype=torch.float64)
    assert float(info_nce(q, q, 1.0)) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert float(info_nce(q, q, 1.0)) == pytest.approx(0.3133, abs=1e-4)
    # equal similarities -> uniform softmax
    n = 17
    ones = torch.ones(n, 4, dtype=torch.float64) / 2
    assert float(info_nce(ones, ones, 0.07)) == pytest.approx(math.log(n), abs=1e-12)
    # orthonormal rows, tau 0.07, N=256
    e = torch.eye(256, dtype=torch.float64)
    want = -math.log(math.exp(1 / 0.07) / (math.exp(1 / 0.07) + 255))
    assert float(info_nce(e, e, 0.07)) == pytest.approx(want, rel=1e-9)
    assert want < 1e-3


def test_info_nce_against_loops(rng):
    q = rng.normal(size=(12, 5))
    k = rng.normal(size=(12, 5))
    got = float(info_nce(torch.from_numpy(q), torch.from_numpy(k), 0.2))
    assert got == pytest.approx(infonce_loops(q, k, 0.2), rel=1e-10)


def _stacks(seed=0, size=32):
    torch.manual_seed(seed)
    g = ResnetGenerator(GeneratorSpec(8, 1, 2, "tanh")).double()
    init_weights(g, torch.Generator().manual_seed(seed))
    layers = [0, 1, 2, 3, 4]
    heads = PatchSampleHeads(g.tap_channels(layers), 16).double()
    gen = torch.Generator().manual_seed(seed + 1)
    src = torch.rand(1, 3, size, size, generator=gen, dtype=torch.float64) * 2 - 1
    out = g(src)
    return g, heads, encode_features(g, src, layers), encode_features(g, out, layers)


def test_patchnce_nonnegative_and_seeded():
    _, heads, fs, fo = _stacks()
    a = patchnce_loss(fs, fo, heads, 16, 0.07, torch.Generator().manual_seed(5))
    b = patchnce_loss(fs, fo, heads, 16, 0.07, torch.Generator().manual_seed(5))
    assert a.item() >= 0 and a.item() == b.item()


def test_patchnce_gradient_only_through_queries():
    g, heads, fs, fo = _stacks()
    loss = patchnce_loss(fs, fo, heads, 16, 0.07, torch.Generator().manual_seed(5))
    src_map = fs.maps[1]
    assert src_map.requires_grad
    grads = torch.autograd.grad(loss, [src_map, fo.maps[1]], allow_unused=True)
    assert grads[0] is None or float(grads[0].abs().sum()) == 0.0
    assert float(grads[1].abs().sum()) > 0


def test_patchnce_too_many_patches():
    _, heads, fs, fo = _stacks(size=16)
    # deepest tap is 4x4 = 16 locations
    with pytest.raises(ConfigError):
        patchnce_loss(fs, fo, heads, 17, 0.07, torch.Generator().manual_seed(0))


def test_patchnce_layer_mismatch():
    _, heads, fs, fo = _stacks()
    with pytest.raises(ConfigError):
        patchnce_loss(fs, FeatureStack(fo.maps[:2], fo.layer_ids[:2]), heads, 8, 0.07)


@settings(max_examples=20)
@given(seed=st.integers(0, 2**31))
def test_patchnce_permutation_invariant(seed):
    # a common permutation of the sampled locations only reorders rows of q and k
    rng = np.random.default_rng(seed)
    q = F.normalize(torch.from_numpy(rng.normal(size=(24, 8))), dim=-1)
    k = F.normalize(torch.from_numpy(rng.normal(size=(24, 8))), dim=-1)
    perm = torch.from_numpy(rng.permutation(24))
    assert float(info_nce(q[perm], k[perm], 0.07)) == pytest.approx(float(info_nce(q, k, 0.07)), rel=1e-12)


def test_patchnce_permuted_spatial_maps():
    # permuting pixels of both maps identically leaves the loss distribution
    # unchanged; with every location sampled the value is identical
    _, heads, fs, fo = _stacks(size=16)
    n = 16
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(3))

    def shuffle(stack):
        last = stack.maps[-1]
        flat = last.flatten(2)[:, :, perm].reshape(last.shape)
        return FeatureStack([flat], [stack.layer_ids[-1]])

    one = PatchSampleHeads([fs.maps[-1].shape[1]], 16).double()
    one.mlps[0].load_state_dict(heads.mlps[-1].state_dict())
    base = patchnce_loss(FeatureStack([fs.maps[-1]], [4]), FeatureStack([fo.maps[-1]], [4]), one, n, 0.07,
                         torch.Generator().manual_seed(0))
    shuf = patchnce_loss(shuffle(fs), shuffle(fo), one, n, 0.07, torch.Generator().manual_seed(0))
    assert float(shuf.detach()) == pytest.approx(float(base.detach()), rel=1e-10)


def test_generator_loss_arithmetic():
    names = ("gan_G", "patchNCE", "crcm", "wdgm")
    unit = dict.fromkeys(names, 1.0)
    assert generator_loss(dict.fromkeys(names, 1.0), unit) == 4.0
    parts = dict(zip(names, (0.5, 0.2, 0.1, 0.3)))
    assert generator_loss(parts, unit) == pytest.approx(1.1, rel=1e-12)
    baseline = {"gan_G": 1.0, "patchNCE": 1.0, "crcm": 0.0, "wdgm": 0.0}
    assert generator_loss(parts, baseline) == pytest.approx(0.7, rel=1e-12)
    with pytest.raises(ConfigError):
        generator_loss({"gan_G": 1.0}, unit)


@given(parts=st.lists(st.floats(0, 100), min_size=4, max_size=4),
       weights=st.lists(st.floats(0, 10), min_size=4, max_size=4))
def test_generator_loss_is_weighted_sum(parts, weights):
    names = ("gan_G", "patchNCE", "crcm", "wdgm")
    got = generator_loss(dict(zip(names, parts)), dict(zip(names, weights)))
    want = math.fsum(p * w for p, w in zip(parts, weights))
    assert got == pytest.approx(want, rel=1e-6, abs=1e-12)


def test_crcm_gradient_asymmetry():
    # separate copies of G for the two branches make the per-branch gradient visible
    torch.manual_seed(0)
    g10 = ResnetGenerator(GeneratorSpec(8, 1, 2, "tanh")).double()
    init_weights(g10, torch.Generator().manual_seed(0))
    g5 = copy.deepcopy(g10)
    x10 = torch.rand(1, 3, 32, 32, dtype=torch.float64) * 2 - 1
    x5 = torch.rand(1, 3, 32, 32, dtype=torch.float64) * 2 - 1
    crcm_loss(g5(x5), g10(x10), 16).backward()
    assert all(p.grad is None or float(p.grad.norm()) == 0.0 for p in g5.parameters())
    assert sum(float(p.grad.norm()) for p in g10.parameters() if p.grad is not None) > 0


def test_wdgm_gradient_reaches_both_sides():
    torch.manual_seed(0)
    g = ResnetGenerator(GeneratorSpec(8, 1, 2, "tanh")).double()
    aux = ResnetGenerator(GeneratorSpec(8, 1, 2, "linear")).double()
    init_weights(g, torch.Generator().manual_seed(1))
    init_weights(aux, torch.Generator().manual_seed(2))
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64) * 2 - 1
    loss = wdgm_loss(g(x), aux(x))
    loss.backward()
    assert sum(float(p.grad.norm()) for p in aux.parameters() if p.grad is not None) > 0
    assert sum(float(p.grad.norm()) for p in g.parameters() if p.grad is not None) > 0


@settings(max_examples=25)
@given(seed=st.integers(0, 2**31))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = (torch.from_numpy(rng.uniform(-1, 1, (3, 16, 16))) for _ in range(2))
    assert float(crcm_loss(a, b)) >= 0 and float(wdgm_loss(a, b)) >= 0
    d, gl = gan_losses(torch.from_numpy(rng.normal(size=(1, 5, 5))), torch.from_numpy(rng.normal(size=(1, 5, 5))))
    assert float(d) >= 0 and float(gl) >= 0


def test_crcm_center_region_only():
    a = const(0.0)
    b = const(0.0)
    a[:, :56] = 1.0  # outside the compared 5x center
    assert float(crcm_loss(a, b)) == 0.0
    assert torch.equal(centercrop(a, 112), torch.zeros(3, 112, 112, dtype=torch.float64))
