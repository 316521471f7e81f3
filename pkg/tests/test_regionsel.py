import numpy as np
import pytest

from texqual.devices import DeviceProfile, LabeledCapture, simulate
from texqual.charts import DeadLeavesParams, gen_dead_leaves
from texqual.errors import SizeError
from texqual.image import ImageF, Rect
from texqual.regionsel import (ConfidenceMap, Dr2sConfig, confidence_map,
                               equalized_heatmap, predict_device, run_dr2s,
                               score_map, select_region, split_confidence_maps,
                               whole_chart_region)
from texqual.regressor import RegressorNet, TrainConfig, forward


def degenerate_net(cs=(0.3, 0.2, 0.5, 0.4), seed=0):
    net = RegressorNet(1, widths=(3, 4, 5, 4), dtype=np.float64, init_seed=seed)
    for w, b, c in zip(net.conv_w, net.conv_b, cs):
        w[...] = 0.0
        b[...] = c
    return net


def test_score_map_degenerate_net_is_constant(rng):
    net = degenerate_net()
    img = ImageF.from_array(rng.random((64, 64)))
    sm = score_map(net, img)
    c = max(0.4, 0.0)
    z = float(net.head_w.sum() * c + net.head_b[0])
    expected = 1.0 / (1.0 + np.exp(-z))
    assert np.abs(sm.lowres - expected).max() < 1e-12
    assert np.abs(sm.full - expected).max() < 1e-9
    assert sm.full.shape == (64, 64)


def test_score_map_constant_equals_global_prediction(rng):
    # With spatially constant features, sigmoid(GAP) == per-location score.
    net = degenerate_net()
    img = ImageF.from_array(rng.random((64, 64)))
    global_score, _ = forward(net, img)
    sm = score_map(net, img)
    assert abs(global_score - sm.lowres[0, 0]) < 1e-12


def test_score_map_pointwise_head_oracle(rng):
    net = RegressorNet(1, widths=(4, 5, 6, 5), dtype=np.float64, init_seed=3)
    img = ImageF.from_array(rng.random((96, 96)))
    _, psi = forward(net, img)
    sm = score_map(net, img)
    hp, wp = sm.lowres.shape
    rr = np.random.default_rng(0)
    for _ in range(10):
        h = int(rr.integers(0, hp))
        w = int(rr.integers(0, wp))
        z = float(net.head_w @ psi[:, h, w] + net.head_b[0])
        expected = 1.0 / (1.0 + np.exp(-z))
        assert abs(sm.lowres[h, w] - expected) < 1e-6


def test_confidence_identical_maps_zero(rng):
    m = rng.random((32, 32))
    conf = confidence_map([m, m.copy(), m.copy()], region_size=8)
    assert np.abs(conf.values).max() < 1e-30


def test_confidence_single_pixel_formula():
    a = np.zeros((16, 16))
    b = np.zeros((16, 16))
    b[5, 7] = 1.0
    conf = confidence_map([a, b], region_size=4)
    assert conf.values[5, 7] == pytest.approx(0.25)
    mask = np.ones((16, 16), bool)
    mask[5, 7] = False
    assert np.abs(conf.values[mask]).max() == 0.0


def test_confidence_matches_brute_force(rng):
    maps = [rng.random((24, 24)) for _ in range(5)]
    conf = confidence_map(maps, region_size=6)
    brute = np.var(np.stack(maps), axis=0)
    assert np.abs(conf.values - brute).max() < 1e-12


def test_confidence_permutation_invariant(rng):
    maps = [rng.random((16, 16)) for _ in range(4)]
    a = confidence_map(maps, 4).values
    b = confidence_map(maps[::-1], 4).values
    assert np.abs(a - b).max() < 1e-15


def test_confidence_shift_invariant(rng):
    maps = [rng.random((16, 16)) for _ in range(4)]
    a = confidence_map(maps, 4).values
    b = confidence_map([m + 0.123 for m in maps], 4).values
    assert np.abs(a - b).max() < 1e-12


def test_confidence_validation(rng):
    with pytest.raises(SizeError):
        confidence_map([rng.random((8, 8))], 4)
    with pytest.raises(SizeError):
        confidence_map([rng.random((8, 8)), rng.random((9, 8))], 4)


def test_select_region_argmax_and_ties():
    m = np.zeros((16, 16))
    m[2:4, 3:5] = 1.0
    r = select_region(m, 4)
    assert (r.x, r.y) == (1, 0)  # window mean maximal, first in (y, x) order
    # Perfect tie: two identical bumps; lexicographically smallest wins.
    m2 = np.zeros((16, 16))
    m2[1, 1] = m2[9, 9] = 1.0
    r2 = select_region(m2, 3)
    assert (r2.y, r2.x) == (0, 0)
    assert ImageF.from_array(m2).rect.contains(r2)


def test_select_region_too_large():
    with pytest.raises(SizeError):
        select_region(np.zeros((8, 8)), 9)


def test_split_confidence_maps(rng):
    maps = [rng.random((12, 12)) + i for i in range(6)]
    labels = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9]
    low, high = split_confidence_maps(maps, labels, region_size=4)
    assert low.n_images == 3 and high.n_images == 3
    assert np.abs(low.values - np.var(np.stack(maps[:3]), axis=0)).max() < 1e-12


def test_split_confidence_degenerate_halves(rng):
    maps = [rng.random((8, 8)) for _ in range(4)]
    with pytest.raises(SizeError):
        split_confidence_maps(maps, [0.5, 0.5, 0.5, 0.5], 4)  # all equal labels
    with pytest.raises(SizeError):
        split_confidence_maps(maps, [0.4, 0.5, 0.6, 0.7], 4, threshold=0.1)


def test_equalized_heatmap_range(rng):
    m = rng.random((10, 10)) * 7
    eq = equalized_heatmap(m)
    assert eq.min() == 0.0 and eq.max() == 1.0
    flat_ranks = np.argsort(m.ravel())
    assert np.argmin(eq.ravel()) == flat_ranks[0]


def test_predict_device_single_position(rng):
    net = RegressorNet(1, widths=(3, 4, 5, 4), dtype=np.float64, init_seed=1)
    img = ImageF.from_array(rng.random((64, 64)))
    region = Rect(10, 10, 40, 40)
    score = predict_device(net, img, region, 1, seed=3, patch_size=40)
    from texqual.image import crop

    direct, _ = forward(net, crop(img, region))
    assert abs(score - direct) < 1e-12


def test_predict_device_constant_net(rng):
    net = degenerate_net()
    img = ImageF.from_array(rng.random((96, 96)))
    score = predict_device(net, img, Rect(0, 0, 96, 96), 16, seed=5)
    z = float(net.head_w.sum() * 0.4 + net.head_b[0])
    assert abs(score - 1.0 / (1.0 + np.exp(-z))) < 1e-12


def test_predict_device_averaging_stability(rng):
    net = RegressorNet(1, widths=(4, 5, 6, 5), dtype=np.float64, init_seed=9)
    chart = gen_dead_leaves(DeadLeavesParams(size=256, r_min=2, r_max=40, seed=5))
    a = predict_device(net, chart, Rect(0, 0, 256, 256), 64, seed=1)
    b = predict_device(net, chart, Rect(0, 0, 256, 256), 256, seed=2)
    assert abs(a - b) < 0.02


def test_predict_device_region_bounds(rng):
    net = degenerate_net()
    img = ImageF.from_array(rng.random((64, 64)))
    with pytest.raises(SizeError):
        predict_device(net, img, Rect(40, 40, 64, 64), 4, seed=0)


def test_whole_chart_region():
    img = ImageF.full(200, 100, 0.5)
    r = whole_chart_region(img, 0.05)
    assert r.as_tuple() == (10, 5, 180, 90)


def test_run_dr2s_degenerate_fleet_falls_back(rng, caplog):
    # Identical devices: stage-2 variance is ~0 everywhere, the pipeline
    # must warn, fall back to the centered region, and still complete.
    chart = gen_dead_leaves(DeadLeavesParams(size=160, r_min=2, r_max=30, seed=8))
    cap = simulate(chart, DeviceProfile("d", 0, blur_sigma=1.0))
    caps = [cap, ImageF(cap.data.copy()), ImageF(cap.data.copy())]
    cfg = Dr2sConfig(
        train=TrainConfig(epochs=2, patches_per_image=2, batch_size=4, seed=3),
        region_size=96,
        seed=4,
    )
    import logging

    with caplog.at_level(logging.WARNING, logger="texqual.regionsel"):
        res = run_dr2s(caps, [0.5, 0.5, 0.5], cfg)
    assert res.report["fallback_center"]
    assert res.confidence.selected.as_tuple() == (32, 32, 96, 96)
    assert res.net_final is not None
