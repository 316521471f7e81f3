"""Score maps, confidence maps and the three-stage region-selection run.

Stage 1 trains a patch regressor on random crops of the whole chart.
Stage 2 applies the trained head at every feature-map location of every
training capture (the class-activation-map construction adapted to
regression), upsamples the per-location score maps to image resolution,
and takes their location-wise population variance across the training
set: regions where device quality changes the prediction a lot get high
variance, uniform regions get almost none.  The square window with the
highest mean confidence becomes the selected region.  Stage 3 retrains
from a fresh initialization on patches drawn only from that region.

The confidence map stores raw variance (values in [0, 0.25] for sigmoid
scores); normalization happens only for display.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import SizeError
from .image import ImageF, Rect, crop, patch_positions, resize_bicubic_array
from .regressor import RegressorNet, TrainConfig, forward_batch, train
from .rng import derive_seed, make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreMap:
    """Per-location scores at feature resolution plus the upsampled map."""

    lowres: np.ndarray
    full: np.ndarray

    @property
    def shape(self):
        return self.full.shape


def score_map(net: RegressorNet, img: ImageF) -> ScoreMap:
    """Sigmoid head applied at every feature location, bicubic-upsampled.

    With a spatially constant feature tensor this reduces to the global
    prediction (sigmoid of the head applied to the GAP vector).
    """
    xb = np.ascontiguousarray(img.data.transpose(2, 0, 1)[None], dtype=net.dtype)
    _, cache = forward_batch(net, xb)
    psi = cache["acts"][-1][0]
    z = np.tensordot(net.head_w, psi, axes=([0], [0])) + net.head_b[0]
    low = 1.0 / (1.0 + np.exp(-z.astype(np.float64)))
    full = resize_bicubic_array(low, img.width, img.height)
    eps = 1e-12
    np.clip(full, eps, 1.0 - eps, out=full)
    np.clip(low, eps, 1.0 - eps, out=low)
    return ScoreMap(lowres=low, full=full)


def compute_score_maps(net: RegressorNet, images, workers: int | None = None):
    """Score maps for several images, optionally across a thread pool.

    Results are ordered like `images` regardless of scheduling, so the
    outcome does not depend on the worker count.
    """
    if workers and workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda im: score_map(net, im), images))
    return [score_map(net, im) for im in images]


@dataclass(frozen=True)
class ConfidenceMap:
    """Location-wise variance of score maps with the selected window."""

    values: np.ndarray
    selected: Rect
    n_images: int


def _box_means(m: np.ndarray, size: int) -> np.ndarray:
    """Mean of every fully-contained size x size window (integral image)."""
    h, w = m.shape
    if size > h or size > w:
        raise SizeError(f"window {size} exceeds map {h}x{w}")
    ii = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(np.cumsum(m, axis=0), axis=1, out=ii[1:, 1:])
    s = size
    tot = ii[s:, s:] - ii[:-s, s:] - ii[s:, :-s] + ii[:-s, :-s]
    return tot / (s * s)


def select_region(m: np.ndarray, size: int) -> Rect:
    """Window of side `size` maximizing the mean of `m`; ties break to the
    lexicographically smallest (y, x)."""
    means = _box_means(m, size)
    idx = int(np.argmax(means))
    y, x = divmod(idx, means.shape[1])
    return Rect(int(x), int(y), size, size)


def _stack_variance(maps) -> np.ndarray:
    """Two-pass population variance (numerically clean near zero)."""
    arrs = [m.full if isinstance(m, ScoreMap) else np.asarray(m) for m in maps]
    shape = arrs[0].shape
    for a in arrs:
        if a.shape != shape:
            raise SizeError(f"score map shape mismatch: {a.shape} vs {shape}")
    n = len(arrs)
    mean = np.zeros(shape, dtype=np.float64)
    for a in arrs:
        mean += a
    mean /= n
    var = np.zeros(shape, dtype=np.float64)
    for a in arrs:
        d = a - mean
        var += d * d
    var /= n
    return var


def confidence_map(maps, region_size: int) -> ConfidenceMap:
    """Population variance of score maps plus the selected region."""
    if len(maps) < 2:
        raise SizeError(f"need at least 2 score maps, got {len(maps)}")
    var = _stack_variance(maps)
    return ConfidenceMap(values=var, selected=select_region(var, region_size),
                         n_images=len(maps))


def split_confidence_maps(maps, labels, region_size: int, threshold: float | None = None):
    """Confidence maps of the low- and high-quality halves of the set.

    Devices with label < threshold go to the low half, the rest to the
    high half; the default threshold is the median label.  Both halves
    need at least two members.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if len(maps) != labels.size:
        raise SizeError("one label per score map required")
    thr = float(np.median(labels)) if threshold is None else float(threshold)
    low = [m for m, l in zip(maps, labels) if l < thr]
    high = [m for m, l in zip(maps, labels) if l >= thr]
    if len(low) < 2 or len(high) < 2:
        raise SizeError(
            f"degenerate split at threshold {thr}: {len(low)} low / {len(high)} high"
        )
    return (confidence_map(low, region_size), confidence_map(high, region_size))


def equalized_heatmap(m: np.ndarray) -> np.ndarray:
    """Histogram-equalized copy in [0, 1] for display."""
    flat = m.ravel()
    order = np.argsort(flat, kind="stable")
    ranks = np.empty_like(order, dtype=np.float64)
    ranks[order] = np.arange(flat.size)
    return (ranks / max(flat.size - 1, 1)).reshape(m.shape)


def predict_device(net: RegressorNet, capture: ImageF, region: Rect,
                   n_patches: int, seed: int, patch_size: int = 64) -> float:
    """Mean score over `n_patches` random patches from `region`."""
    if not capture.rect.contains(region):
        raise SizeError(f"region {region.as_tuple()} outside capture")
    rng = make_rng(seed)
    pos = patch_positions(region, patch_size, n_patches, rng)
    p = patch_size
    xb = np.empty((n_patches, capture.channels, p, p), dtype=net.dtype)
    for j, (x, y) in enumerate(pos):
        xb[j] = capture.data[y : y + p, x : x + p, :].transpose(2, 0, 1)
    scores, _ = forward_batch(net, xb)
    return float(scores.mean())


@dataclass
class Dr2sConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    region_size: int = 384
    border_crop: float = 0.05
    predict_patches: int = 64
    seed: int = 0


@dataclass
class Dr2sResult:
    net_stage1: RegressorNet
    net_final: RegressorNet
    confidence: ConfidenceMap
    report: dict


def whole_chart_region(img: ImageF, border_crop: float) -> Rect:
    """Full image minus a border fraction (lens-shading style margin)."""
    bx = int(round(img.width * border_crop))
    by = int(round(img.height * border_crop))
    return Rect(bx, by, img.width - 2 * bx, img.height - 2 * by)


def run_dr2s(captures, labels, cfg: Dr2sConfig, workers: int | None = None,
             stage1_net: RegressorNet | None = None,
             map_images=None) -> Dr2sResult:
    """Three-stage pipeline on one training set.

    `captures` must be registered to a common frame (synthetic captures
    are aligned by construction); alternatively pass warped copies as
    `map_images`, in which case stage 2 aggregates over those while
    training still uses the originals.  Stage 2 uses only training
    captures, so cross-validation callers never leak test devices into
    the map.  A precomputed `stage1_net` (e.g. a checkpoint) skips the
    stage-1 training.
    """
    from .devices import LabeledCapture

    data = [
        LabeledCapture(image=img, label=float(lab), device=None, chart_id="train")
        if not isinstance(img, LabeledCapture)
        else img
        for img, lab in zip(captures, labels)
    ]
    base = data[0].image
    full_region = whole_chart_region(base, cfg.border_crop)

    if stage1_net is None:
        stage1_cfg = _with_seed(cfg.train, derive_seed(cfg.seed, "stage1"))
        stage1 = train(data, full_region, stage1_cfg)
        stage1_net = stage1.net
        stage1_trace = stage1.loss_trace
    else:
        stage1_trace = []

    maps = compute_score_maps(
        stage1_net,
        map_images if map_images is not None else [c.image for c in data],
        workers,
    )
    conf = confidence_map(maps, cfg.region_size)
    fallback = False
    peak = float(_box_means(conf.values, cfg.region_size).max())
    if peak < 1e-10:
        cx = (base.width - cfg.region_size) // 2
        cy = (base.height - cfg.region_size) // 2
        conf = ConfidenceMap(values=conf.values,
                             selected=Rect(cx, cy, cfg.region_size, cfg.region_size),
                             n_images=conf.n_images)
        fallback = True
        log.warning("degenerate confidence map; falling back to center region")

    stage3_cfg = _with_seed(cfg.train, derive_seed(cfg.seed, "stage3"))
    stage3 = train(data, conf.selected, stage3_cfg)

    report = {
        "selected_region": list(conf.selected.as_tuple()),
        "fallback_center": fallback,
        "stage1_final_loss": stage1_trace[-1] if stage1_trace else None,
        "stage3_final_loss": stage3.loss_trace[-1],
        "stage1_loss_trace": stage1_trace,
        "stage3_loss_trace": stage3.loss_trace,
        "confidence_peak_window_mean": peak,
        "n_train_images": len(data),
    }
    return Dr2sResult(net_stage1=stage1_net, net_final=stage3.net,
                      confidence=conf, report=report)


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    from dataclasses import replace

    return replace(cfg, seed=seed)
