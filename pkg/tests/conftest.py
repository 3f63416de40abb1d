import hypothesis
import numpy as np
import pytest
import torch

hypothesis.settings.register_profile("default", deadline=None, max_examples=50)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=10)
hypothesis.settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tgen():
    return torch.Generator().manual_seed(1234)


def synth_tiles(n, seed=0, size=448, contaminated=True):
    """(fs, ffpe, labels) lists of CHW float32 tensors rendered in memory."""
    from create_ffpe.core import pixels_to_tensor
    from create_ffpe.data import SynthSpec, _render_content, render_ffpe, render_fs
    from create_ffpe.geometry import resize

    spec = SynthSpec() if contaminated else SynthSpec(contamination_blob_rate=0.0)
    fs, ffpe, labels = [], [], []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        positive = bool(rng.random() < 0.5)
        a = _render_content(rng, spec, positive)
        b = _render_content(rng, spec, positive)
        fs.append(pixels_to_tensor(render_fs(rng, a, spec, positive)))
        ffpe.append(pixels_to_tensor(render_ffpe(b)))
        labels.append("positive" if positive else "negative")
    if size != 448:
        fs = [resize(t, size) for t in fs]
        ffpe = [resize(t, size) for t in ffpe]
    return fs, ffpe, labels


@pytest.fixture(scope="session")
def small_tiles():
    return synth_tiles(4, seed=99, size=128)


def tiny(**kw):
    """Small-geometry training config (128 -> 64 -> 32) for fast tests."""
    from create_ffpe.core import TrainConfig

    base = dict(tile_size_source=128, tile_size_net=64, compare_size=32, n_patches=64, total_iterations=200,
                gen_width=8, gen_aux_width=4, n_resblocks=1, disc_width=8, nce_head_dim=32)
    base.update(kw)
    return TrainConfig.desk(**base)
