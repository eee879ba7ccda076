import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from roomcross import nn
from roomcross.data import Dataset, Episode, episode_inputs, stack_frames
from roomcross.expert import recovery_label
from roomcross.nn import NetworkSpec
from roomcross.sensors import RECOVERY_OFFSET, CameraModel, CameraRig
from roomcross.training import (DaggerConfig, SequenceData, TrainConfig, WindowSample, augment_recovery,
                                dataset_loss, guideline_report, replay_state, replay_states,
                                sample_windows_ww, train, train_epoch, windows_sliding)
from roomcross.world import YAW, make_room_one

SMALL = (1, 4, 6)


def synthetic_dataset(lengths, seed=0, constant_label=None):
    rng = np.random.default_rng(seed)
    episodes = []
    for n, T in enumerate(lengths):
        depth = rng.uniform(0.5, 40.0, size=(T,) + SMALL[1:])
        labels = rng.uniform(-1, 1, size=(T, 6)) if constant_label is None else np.tile(constant_label, (T, 1))
        poses = np.column_stack([np.zeros(T), np.linspace(-16, 0, T), np.full(T, 1.5), np.zeros(T)])
        episodes.append(Episode(0, poses, labels, labels.copy(), depth=depth, episode_id=n))
    return Dataset(episodes)


# ---------------------------------------------------------------- sampling

def test_window_starts_stay_in_range():
    rng = np.random.default_rng(0)
    cfg = TrainConfig(window=20)
    for s in sample_windows_ww([100], cfg, rng):
        assert 0 <= s.start <= 80 and s.start + s.length <= 100


def test_fifty_windows_per_thousand_frames():
    assert len(sample_windows_ww([1000], TrainConfig(window=20), np.random.default_rng(0))) == 50


def test_epoch_budget_rounds_up():
    assert len(sample_windows_ww([30, 31], TrainConfig(window=20), np.random.default_rng(0))) == 4


def test_window_start_histogram_is_uniform():
    rng = np.random.default_rng(11)
    cfg = TrainConfig(window=20)
    starts = []
    while len(starts) < 10_000:
        starts += [s.start for s in sample_windows_ww([100], cfg, rng)]
    counts = np.bincount(starts[:10_000], minlength=81)
    assert stats.chisquare(counts).pvalue > 0.01


def test_episode_choice_proportional_to_length():
    rng = np.random.default_rng(2)
    cfg = TrainConfig(window=10)
    picks = []
    for _ in range(300):
        picks += [s.episode for s in sample_windows_ww([100, 300], cfg, rng)]
    share = np.mean(np.array(picks) == 1)
    assert share == pytest.approx(0.75, abs=0.02)


def test_consecutive_windows_are_decorrelated():
    rng = np.random.default_rng(5)
    cfg = TrainConfig(window=5)
    prev, nxt = [], []
    for _ in range(1000):
        tx = [s.start for s in sample_windows_ww([50, 80, 120], cfg, rng)]
        prev += tx[:-1]
        nxt += tx[1:]
    assert stats.kendalltau(prev, nxt).pvalue > 0.01


def test_short_episodes_rejected_or_skipped():
    with pytest.raises(ValueError):
        sample_windows_ww([5, 10], TrainConfig(window=20), np.random.default_rng(0))
    samples = sample_windows_ww([5, 40], TrainConfig(window=20), np.random.default_rng(0))
    assert {s.episode for s in samples} == {1}


def test_random_window_lengths():
    cfg = TrainConfig(window=20, window_min=10, window_max=30)
    samples = sample_windows_ww([200] * 5, cfg, np.random.default_rng(0))
    lengths = {s.length for s in samples}
    assert min(lengths) >= 10 and max(lengths) <= 30 and len(lengths) > 5
    assert all(s.start + s.length <= 200 for s in samples)


def test_window_sample_validation():
    with pytest.raises(ValueError):
        WindowSample(0, -1, 3)
    with pytest.raises(ValueError):
        TrainConfig(window=0)


# ---------------------------------------------------------------- sliding

def test_sliding_examples():
    assert [s.start for s, _ in windows_sliding(60, 20, 20)] == [0, 20, 40]
    assert [s.start for s, _ in windows_sliding(22, 20, 1)] == [0, 1, 2]
    assert [c for _, c in windows_sliding(22, 20, 1)] == [1, 1, None]


@given(st.integers(1, 300), st.integers(1, 40))
def test_sliding_with_stride_w_covers_every_frame_once(T, w):
    counts = np.zeros(T, dtype=int)
    for s, _ in windows_sliding(T, w):
        counts[s.start:s.start + s.length] += 1
    assert np.all(counts == 1)


def test_sliding_training_matches_manual_carry():
    spec = NetworkSpec("LSTM", SMALL, (5,))
    ds = synthetic_dataset([45])
    params = nn.init_params(spec, 0)
    cfg = TrainConfig(scheme="sliding", window=20, lr=1e-3, dtype="float64")
    new, _, _ = train_epoch(spec, params, nn.AdamState.zeros_like(params), SequenceData(ds, spec, np.float64),
                            cfg, np.random.default_rng(0))
    # manual: windows [0,20) [20,40) [40,45) with carried state and an Adam step each
    x = episode_inputs(ds.episodes[0], spec, np.float64)
    y = ds.episodes[0].expert
    p, opt, state = params, nn.AdamState.zeros_like(params), None
    for a, b in ((0, 20), (20, 40), (40, 45)):
        _, grads, cache = nn.loss_and_grad(spec, p, x[None, a:b], y[None, a:b], state)
        state = nn.states_after(cache, [b - a])
        p, opt = nn.adam_update(p, grads, opt, 1e-3)
    for k in p:
        assert np.allclose(new[k], p[k], atol=1e-13)


# ---------------------------------------------------------------- replay

def test_replay_zero_and_stateless():
    spec = NetworkSpec("LSTM", SMALL, (5, 4))
    params = nn.init_params(spec, 0)
    x = episode_inputs(synthetic_dataset([30]).episodes[0], spec, np.float64)
    for h, c in replay_state(spec, params, x, 0):
        assert not h.any() and not c.any()
    fc = NetworkSpec("FC", SMALL, (5,))
    assert replay_state(fc, nn.init_params(fc, 0), x, 17) == []


def test_replay_continuity():
    spec = NetworkSpec("LSTM", SMALL, (6, 5))
    params = nn.init_params(spec, 1)
    x = episode_inputs(synthetic_dataset([60], seed=3).episodes[0], spec, np.float64)
    full, _ = nn.forward_window(spec, params, x)
    for t_x in (1, 17, 59):
        tail, _ = nn.forward_window(spec, params, x[t_x:], replay_state(spec, params, x, t_x))
        assert np.abs(tail - full[t_x:]).max() <= 1e-12


def test_batched_replay_matches_single():
    spec = NetworkSpec("LSTM", SMALL, (5,))
    ds = synthetic_dataset([40, 25, 60], seed=4)
    params = nn.init_params(spec, 2)
    data = SequenceData(ds, spec, np.float64)
    samples = [WindowSample(2, 33, 10), WindowSample(0, 0, 10), WindowSample(1, 12, 5), WindowSample(2, 5, 3)]
    batched = replay_states(spec, params, data, samples, chunk=2)
    for r, s in enumerate(samples):
        single = replay_state(spec, params, data.inputs(s.episode, 0, int(data.lengths[s.episode])), s.start)
        for (hb, cb), (hs, cs) in zip(batched, single):
            assert np.abs(hb[r] - hs[0]).max() <= 1e-12 and np.abs(cb[r] - cs[0]).max() <= 1e-12


def test_window_gradient_equals_full_gradient_at_origin():
    spec = NetworkSpec("LSTM", SMALL, (6, 5))
    ds = synthetic_dataset([28], seed=6)
    params = nn.init_params(spec, 3)
    data = SequenceData(ds, spec, np.float64)
    sample = WindowSample(0, 0, 28)
    s0 = replay_states(spec, params, data, [sample])
    X, Y, M = data.batch([(0, 0, 28)])
    _, g_window, _ = nn.loss_and_grad(spec, params, X, Y, s0, M)
    _, g_full, _ = nn.loss_and_grad(spec, params, X, Y, None, M)
    for k in g_full:
        assert np.allclose(g_window[k], g_full[k], rtol=1e-10, atol=1e-14)


def test_gradient_truncated_at_window_start():
    spec = NetworkSpec("LSTM", SMALL, (5,))
    ds = synthetic_dataset([50], seed=7)
    params = nn.init_params(spec, 4)

    def window_grads(dataset):
        data = SequenceData(dataset, spec, np.float64)
        s = WindowSample(0, 30, 15)
        s0 = replay_states(spec, params, data, [s])
        X, Y, M = data.batch([(0, 30, 15)])
        return nn.loss_and_grad(spec, params, X, Y, s0, M)[1]

    base = window_grads(ds)
    relabeled = synthetic_dataset([50], seed=7)
    relabeled.episodes[0].expert[:30] = 0.0
    for k, g in window_grads(relabeled).items():
        assert np.array_equal(g, base[k])
    reobserved = synthetic_dataset([50], seed=7)
    reobserved.episodes[0].depth[:30] *= 0.5
    assert any(not np.allclose(g, base[k]) for k, g in window_grads(reobserved).items())


# ---------------------------------------------------------------- epochs

@pytest.mark.parametrize("scheme", ["window", "sliding", "full"])
def test_training_is_deterministic(scheme):
    spec = NetworkSpec("LSTM", SMALL, (6,))
    ds = synthetic_dataset([30, 45, 22], seed=8)
    cfg = TrainConfig(scheme=scheme, window=10, epochs=2, lr=1e-3)
    a = train(spec, ds, cfg, log=None)
    b = train(spec, ds, cfg, log=None)
    assert [h[1] for h in a.history] == [h[1] for h in b.history]
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_exact_replay_mode_runs():
    spec = NetworkSpec("LSTM", SMALL, (6,))
    ds = synthetic_dataset([30, 45], seed=9)
    r = train(spec, ds, TrainConfig(window=10, epochs=1, replay="exact", lr=1e-3), log=None)
    assert np.isfinite(r.history[0][1])


def test_constant_labels_descend():
    spec = NetworkSpec("FC", SMALL, (8,))
    ds = synthetic_dataset([40] * 8, seed=10, constant_label=np.array([0.8, 0, 0.1, 0, 0, -0.3]))
    data = SequenceData(ds, spec)
    params = nn.init_params(spec, 0, np.float32)
    before = dataset_loss(spec, params, data)
    r = train(spec, data, TrainConfig(scheme="window", window=8, epochs=70, lr=1e-3), params=params, log=None)
    steps = r.opt.t
    assert steps >= 200
    assert dataset_loss(spec, r.params, data) < before


def test_fc5_trains_on_stacked_frames():
    spec = NetworkSpec("FC5", SMALL, (6, 5))
    ds = synthetic_dataset([30, 20], seed=12)
    r = train(spec, ds, TrainConfig(window=5, epochs=1, lr=1e-3), log=None)
    assert np.isfinite(r.history[0][1])


def test_dimension_mismatch_rejected():
    spec = NetworkSpec("LSTM", (1, 24, 32), (4,))
    with pytest.raises(ValueError):
        train(spec, synthetic_dataset([30]), TrainConfig(epochs=1), log=None)


def test_log_line_format():
    lines = []
    spec = NetworkSpec("FC", SMALL, (4,))
    train(spec, synthetic_dataset([30]), TrainConfig(window=10, epochs=2), log=lines.append)
    parts = lines[1].split("\t")
    assert parts[:3] == ["1", "window", "10"] and len(parts) == 5
    float(parts[3]), float(parts[4])


def test_config_text_round_trip():
    cfg = TrainConfig(scheme="sliding", window=7, stride=3, lr=3e-4, seed=9, finetune_from="a.rckp")
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    decayed = TrainConfig(lr=1e-3, lr_final=3e-5, epochs=25, ema=0.999)
    assert TrainConfig.from_text(decayed.to_text()) == decayed


def test_weight_average_matches_hand_recursion():
    spec = NetworkSpec("FC", SMALL, (4,))
    data = synthetic_dataset([10])
    cfg = TrainConfig(window=10, batch_size=4, lr=1e-2, seed=1)  # one window, one step per epoch
    raw = [nn.init_params(spec, 1, np.float32)] + [train(spec, data, replace(cfg, epochs=k), log=None).params
                                                   for k in (1, 2, 3)]
    result = train(spec, data, replace(cfg, epochs=3, ema=0.9), log=None)
    for name in raw[0]:
        expect = raw[0][name].astype(np.float64)
        for p in raw[1:]:
            expect = 0.9 * expect + 0.1 * p[name]
        assert np.allclose(result.final[name], expect, rtol=0, atol=1e-6)
        assert np.array_equal(result.params[name], raw[3][name])
    assert train(spec, data, replace(cfg, epochs=1), log=None).final is not None
    with pytest.raises(ValueError):
        TrainConfig(ema=1.0)


def test_lr_decay_is_geometric():
    cfg = TrainConfig(lr=1e-3, lr_final=1e-5, epochs=3)
    assert [cfg.lr_at(e) for e in range(3)] == pytest.approx([1e-3, 1e-4, 1e-5], rel=1e-12)
    assert TrainConfig(lr=2e-4, epochs=5).lr_at(4) == 2e-4
    with pytest.raises(ValueError):
        TrainConfig(lr_final=0.0)


def test_guideline_report():
    spec = NetworkSpec("LSTM", (768,))
    text = guideline_report(spec, 270_000, 20)
    assert "non-overlapping windows\t13500" in text and "verdict\tok" in text


# ---------------------------------------------------------------- stacking

def test_stack_frames_padding_and_order():
    x = np.arange(12, dtype=float).reshape(12, 1)
    s = stack_frames(x, 5)
    assert s.shape == (12, 5)
    assert list(s[0]) == [0, 0, 0, 0, 0]
    assert list(s[10]) == [6, 7, 8, 9, 10]


def test_stack_frames_conv_channels():
    x = np.random.default_rng(0).normal(size=(6, 3, 4, 5))
    s = stack_frames(x, 5)
    assert s.shape == (6, 15, 4, 5)
    assert np.array_equal(s[5, 12:], x[5]) and np.array_equal(s[5, :3], x[1])


# ---------------------------------------------------------------- recovery

def test_augment_recovery_triples_and_labels():
    room = make_room_one(0)
    ds = synthetic_dataset([6, 4, 5, 3, 7])
    for e in ds.episodes:
        e.depth = e.depth[:, :4, :6].astype(np.float32)
    rig = CameraRig.around(CameraModel(6, 4, max_range=40.0))
    before = [e.expert.copy() for e in ds.episodes]
    out = augment_recovery(ds, {0: room}, rig)
    assert len(out) == 15
    for e, b in zip(out.episodes[:5], before):
        assert np.array_equal(e.expert, b) and e.camera == "center"
    left = [e for e in out.episodes if e.camera == "left"]
    right = [e for e in out.episodes if e.camera == "right"]
    assert len(left) == len(right) == 5
    for center, l, r in zip(ds.episodes, left, right):
        assert l.provenance == r.provenance == "recovery"
        expect_l = np.stack([recovery_label(c, -RECOVERY_OFFSET) for c in center.expert])
        expect_r = np.stack([recovery_label(c, RECOVERY_OFFSET) for c in center.expert])
        assert np.array_equal(l.expert, expect_l) and np.array_equal(r.expert, expect_r)
        unclipped = np.abs(center.expert[:, YAW]) < 0.75
        assert np.allclose((l.expert - center.expert)[unclipped, YAW], -0.25)
        assert np.array_equal(l.poses, center.poses)


def test_augment_requires_known_room():
    with pytest.raises(ValueError):
        augment_recovery(synthetic_dataset([3]), {}, CameraRig.around(CameraModel(6, 4)))


def test_dagger_schedule():
    d = DaggerConfig()
    assert d.roles(1) == ("train-initial",)
    assert d.roles(4)[-1] == "dagger-3" and d.roles(7) == d.roles(4)
    with pytest.raises(ValueError):
        DaggerConfig(iterations=0)


def test_dataset_aggregation_is_append_only():
    ds = synthetic_dataset([3, 4])
    more = ds.aggregate(synthetic_dataset([5]).episodes)
    assert more.episodes[:2] == ds.episodes
    assert [e.episode_id for e in more.episodes] == [0, 1, 2]
