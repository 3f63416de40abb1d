import csv
import math
import statistics

import pytest
import torch

from create_ffpe.core import ConfigError, NumericError, TrainConfig, lr_at, parse_config
from create_ffpe.geometry import pair_tensors
from create_ffpe.losses import crcm_loss
from create_ffpe.trainer import CSV_COLUMNS, init_state, load_state, save_state, train, train_step

from conftest import synth_tiles, tiny


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


def test_report_columns_and_total(small_tiles):
    fs, ffpe, _ = small_tiles
    state = init_state(tiny())
    _, report = train_step(state, fs[0], ffpe[1])
    assert set(CSV_COLUMNS[1:]) <= set(report.values)
    report.check_total(state.config.loss_weights)
    assert state.iteration == 1 and report.iteration == 0


def test_optimizer_partition(small_tiles):
    fs, ffpe, _ = small_tiles
    state = init_state(tiny())
    gen_side = ("G", "G_aux", "heads")
    seen = {}

    def wrap(opt, frozen, moving, tag):
        inner = opt.step

        def step(*a, **k):
            before_f = {n: snapshot(state.nets[n]) for n in frozen}
            before_m = {n: snapshot(state.nets[n]) for n in moving}
            out = inner(*a, **k)
            assert all(same(before_f[n], snapshot(state.nets[n])) for n in frozen)
            seen[tag] = any(not same(before_m[n], snapshot(state.nets[n])) for n in moving)
            return out
        opt.step = step

    wrap(state.opt_d, gen_side, ("D",), "d")
    wrap(state.opt_g, ("D",), gen_side, "g")
    for i in range(3):
        train_step(state, fs[i], ffpe[i + 1])
    assert seen == {"d": True, "g": True}


def test_lr_applied_each_step(small_tiles):
    fs, ffpe, _ = small_tiles
    cfg = tiny(total_iterations=6, decay_start_fraction=0.5)
    state = init_state(cfg)
    for t in range(6):
        train_step(state, fs[t % 4], ffpe[(t + 1) % 4])
        for opt in (state.opt_g, state.opt_d):
            assert all(g["lr"] == lr_at(t, cfg) for g in opt.param_groups)


def test_checkpoint_roundtrip_bitwise(small_tiles, tmp_path):
    fs, ffpe, _ = small_tiles
    state = init_state(tiny(seed=3))
    for i in range(2):
        train_step(state, fs[i], ffpe[i])
    save_state(state, tmp_path / "c.pt")
    back = load_state(tmp_path / "c.pt", state.config)
    assert back.iteration == 2
    for k in state.nets:
        assert same(snapshot(state.nets[k]), snapshot(back.nets[k]))
    for a, b in ((state.opt_g, back.opt_g), (state.opt_d, back.opt_d)):
        sa, sb = a.state_dict()["state"], b.state_dict()["state"]
        assert sa.keys() == sb.keys()
        for i in sa:
            assert all(torch.equal(sa[i][m], sb[i][m]) for m in sa[i])


def test_load_rejects_other_config_and_pruned(small_tiles, tmp_path):
    state = init_state(tiny())
    save_state(state, tmp_path / "c.pt")
    with pytest.raises(ConfigError):
        load_state(tmp_path / "c.pt", tiny(seed=99))
    save_state(state, tmp_path / "g.pt", nets=("G",))
    with pytest.raises(ConfigError):
        load_state(tmp_path / "g.pt")


def test_zero_weight_terms_reported_not_used(small_tiles):
    fs, ffpe, _ = small_tiles
    w = {"gan_G": 1.0, "patchNCE": 1.0, "crcm": 0.0, "wdgm": 0.0}
    state = init_state(tiny(loss_weights=w))
    aux_before = snapshot(state.nets["G_aux"])
    _, report = train_step(state, fs[0], ffpe[0])
    v = report.values
    assert v["crcm"] > 0 and v["wdgm"] > 0
    assert v["total_G"] == pytest.approx(v["gan_G"] + v["patchNCE"], rel=1e-6)
    # G_aux learns only through the wavelet term
    assert same(aux_before, snapshot(state.nets["G_aux"]))


def test_nan_aborts_with_name(small_tiles):
    fs, ffpe, _ = small_tiles
    state = init_state(tiny())
    with torch.no_grad():
        next(state.nets["G"].parameters()).fill_(float("nan"))
    with pytest.raises(NumericError, match="out_10x"):
        train_step(state, fs[0], ffpe[0])


def test_parameters_stay_finite(small_tiles):
    fs, ffpe, _ = small_tiles
    state = init_state(tiny(seed=5, lr_initial=1e-3))
    for t in range(100):
        train_step(state, fs[t % 4], ffpe[(3 * t + 1) % 4])
        for net in state.nets.values():
            assert all(torch.isfinite(p).all() for p in net.parameters())


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_writes_outputs_and_resumes(small_tiles, tmp_path):
    fs, ffpe, _ = small_tiles
    cfg = tiny(seed=2, total_iterations=20, deterministic=True, sample_every=10)
    full = train(cfg, fs, ffpe, tmp_path / "full")
    assert full.iteration == 20
    rows = _rows(tmp_path / "full" / "losses.csv")
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 21
    assert (tmp_path / "full" / "samples" / "step_0000010.png").exists()
    assert parse_config((tmp_path / "full" / "config.txt").read_text()) == cfg

    half = train(cfg, fs, ffpe, tmp_path / "part", iterations=10)
    assert half.iteration == 10
    train(cfg, fs, ffpe, tmp_path / "part", resume=tmp_path / "part" / "checkpoint.pt")
    assert _rows(tmp_path / "part" / "losses.csv") == rows


def test_train_deterministic_repeat(small_tiles, tmp_path):
    fs, ffpe, _ = small_tiles
    cfg = tiny(seed=4, total_iterations=8, deterministic=True)
    train(cfg, fs, ffpe, tmp_path / "a")
    train(cfg, fs, ffpe, tmp_path / "b")
    assert (tmp_path / "a" / "losses.csv").read_bytes() == (tmp_path / "b" / "losses.csv").read_bytes()


def test_train_needs_tiles(tmp_path):
    with pytest.raises(ConfigError):
        train(tiny(), [], [torch.zeros(3, 128, 128)], tmp_path)


@pytest.mark.slow
def test_smoke_100_steps_total_decreases():
    fs, ffpe, _ = synth_tiles(8, seed=7)
    state = init_state(TrainConfig.desk(seed=7))
    totals = []
    for t in range(100):
        _, report = train_step(state, fs[t % 8], ffpe[(t + 3) % 8])
        assert all(math.isfinite(x) for x in report.values.values())
        totals.append(report.values["total_G"])
    assert totals[-1] < totals[0]


@pytest.mark.slow
def test_crcm_trend_500_steps():
    fs, ffpe, _ = synth_tiles(16, seed=11)
    held_out, _, _ = synth_tiles(4, seed=12)
    held = torch.stack(held_out)

    def held_crcm(state):
        g = state.nets["G"]
        with torch.no_grad():
            fs_10x, fs_5x = pair_tensors(held, 224)
            return float(crcm_loss(g(fs_5x), g(fs_10x), 112))

    ratios = []
    for seed in (0, 1, 2):
        state = init_state(TrainConfig.desk(seed=seed))
        start = held_crcm(state)
        for t in range(500):
            train_step(state, fs[(t * 7 + seed) % 16], ffpe[(t * 5 + 1) % 16])
        ratios.append(held_crcm(state) / start)
    assert statistics.median(ratios) < 1.0, ratios
