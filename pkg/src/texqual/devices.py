"""Simulated camera devices and oracle quality labels.

A device is a parametric degradation pipeline standing in for one
physical camera at one lighting condition (the two are not modeled
separately; a profile encodes the pair).  The processing order is part
of the contract:

    exposure gain 2^ev -> Gaussian blur -> additive Gaussian noise
    -> edge-preserving denoise (strength-blended bilateral)
    -> unsharp mask -> clamp to [0, 1]

Ground-truth labels come from a high-pass retention oracle instead of
human annotation: the label is the regression coefficient of the
high-passed capture onto the high-passed chart over a fine-detail
window, clamped to [0, 1].  It is 1 exactly for a perfect capture and
decreases monotonically with blur.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .charts import DeadLeavesParams, gen_dead_leaves
from .errors import BoundsError, ConfigError, FleetError
from .image import ImageF, Rect, crop
from .kernels import bilateral_filter
from .rng import derive_seed, make_rng

DENOISE_RADIUS = 3
DENOISE_SIGMA_S = 2.0
DENOISE_SIGMA_R = 0.1
SHARPEN_SIGMA = 1.0
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    brand_id: int
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    denoise_strength: float = 0.0
    sharpen_amount: float = 0.0
    exposure_ev: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ConfigError("blur_sigma and noise_sigma must be >= 0")
        if not (0 <= self.denoise_strength <= 1 and 0 <= self.sharpen_amount <= 1):
            raise ConfigError("denoise_strength and sharpen_amount must be in [0, 1]")
        if not -1 <= self.exposure_ev <= 1:
            raise ConfigError("exposure_ev must be in [-1, 1]")


@dataclass(frozen=True)
class LabeledCapture:
    image: ImageF
    label: float
    device: DeviceProfile
    chart_id: str

    def __post_init__(self):
        if not 0 <= self.label <= 1:
            raise ConfigError(f"label must be in [0, 1], got {self.label}")


def _blur(a: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return a
    return gaussian_filter(a, sigma=sigma, mode="reflect", truncate=4.0)


def _denoise(a: np.ndarray, strength: float) -> np.ndarray:
    if strength <= 0:
        return a
    smooth = bilateral_filter(
        np.ascontiguousarray(a), DENOISE_RADIUS, DENOISE_SIGMA_S, DENOISE_SIGMA_R
    )
    return (1.0 - strength) * a + strength * smooth


def _sharpen(a: np.ndarray, amount: float) -> np.ndarray:
    if amount <= 0:
        return a
    return a + amount * (a - _blur(a, SHARPEN_SIGMA))


def simulate(chart: ImageF, d: DeviceProfile, noise_seed: int | None = None) -> ImageF:
    """Capture of `chart` through device `d`; deterministic given seeds.

    `noise_seed` defaults to the profile seed; callers shooting several
    charts with one device derive a per-chart seed so noise fields
    differ across captures.
    """
    rng = make_rng(d.seed if noise_seed is None else noise_seed)
    out = np.empty_like(chart.data)
    gain = 2.0**d.exposure_ev
    for c in range(chart.channels):
        a = chart.data[:, :, c] * gain
        a = _blur(a, d.blur_sigma)
        if d.noise_sigma > 0:
            a = a + rng.normal(0.0, d.noise_sigma, a.shape)
        a = _denoise(a, d.denoise_strength)
        a = _sharpen(a, d.sharpen_amount)
        out[:, :, c] = a
    np.clip(out, 0.0, 1.0, out=out)
    return ImageF(out)


def _highpass(a: np.ndarray) -> np.ndarray:
    out = (
        -4.0 * a[1:-1, 1:-1]
        + a[:-2, 1:-1]
        + a[2:, 1:-1]
        + a[1:-1, :-2]
        + a[1:-1, 2:]
    )
    return out


def oracle_label(chart: ImageF, captured: ImageF, window: Rect | None = None) -> float:
    """High-pass retention score in [0, 1].

    label = clamp(sum(HP(cap) * HP(chart)) / sum(HP(chart)^2), 0, 1)
    with HP the 3x3 Laplacian, evaluated over `window` (default: the
    image minus a 16-px border).  Requires `captured` registered to
    `chart`, which synthetic captures are by construction.
    """
    if window is None:
        m = min(16, chart.width // 8, chart.height // 8)
        window = Rect(m, m, chart.width - 2 * m, chart.height - 2 * m)
    if not chart.rect.contains(window):
        raise BoundsError(f"window {window.as_tuple()} outside chart")
    ref = _highpass(crop(chart, window).luma())
    cap = _highpass(crop(captured, window).luma())
    denom = float(np.sum(ref * ref))
    if denom <= 0:
        return 0.0
    score = float(np.sum(cap * ref) / denom)
    return min(max(score, 0.0), 1.0)


# Reference chart used only for the fleet label-spread check.
_SPREAD_CHART_PARAMS = DeadLeavesParams(size=256, r_min=1.5, r_max=24.0, seed=20240601)
_spread_chart_cache: ImageF | None = None


def _spread_chart() -> ImageF:
    global _spread_chart_cache
    if _spread_chart_cache is None:
        _spread_chart_cache = gen_dead_leaves(_SPREAD_CHART_PARAMS)
    return _spread_chart_cache


def _draw_fleet(n_devices: int, n_brands: int, seed: int) -> list[DeviceProfile]:
    rng = make_rng(seed)
    # A brand is a processing style (denoise / sharpen / exposure /
    # noise floor); its devices span the full blur range, like a real
    # maker's lineup from flagship to budget.  Every brand-disjoint
    # training fold therefore still covers the whole quality range.
    # Ranges keep the high-pass oracle clear of its [0, 1] clamp:
    # sharpening and exposure gain can lift the score, so their budgets
    # are small.
    styles = []
    for b in range(n_brands):
        styles.append(
            dict(
                noise_sigma=float(rng.uniform(0.003, 0.035)),
                denoise_strength=float(rng.uniform(0.1, 0.75)),
                sharpen_amount=float(rng.uniform(0.0, 0.15)),
                exposure_ev=float(rng.uniform(-0.07, 0.07)),
            )
        )
    counts = [n_devices // n_brands + (1 if i < n_devices % n_brands else 0) for i in range(n_brands)]
    fleet = []
    idx = 0
    for b in range(n_brands):
        if counts[b] > 1:
            tiers = np.linspace(0.45, 1.35, counts[b])
        else:
            tiers = np.array([rng.uniform(0.45, 1.35)])
        style = styles[b]
        for t in range(counts[b]):
            fleet.append(
                DeviceProfile(
                    device_id=f"dev{idx:03d}",
                    brand_id=b,
                    blur_sigma=float(tiers[t] * rng.uniform(0.93, 1.07)),
                    noise_sigma=style["noise_sigma"] * float(rng.uniform(0.8, 1.2)),
                    denoise_strength=float(
                        np.clip(style["denoise_strength"] + rng.uniform(-0.08, 0.08), 0, 1)
                    ),
                    sharpen_amount=float(
                        np.clip(style["sharpen_amount"] + rng.uniform(-0.03, 0.03), 0, 1)
                    ),
                    exposure_ev=float(
                        np.clip(style["exposure_ev"] + rng.uniform(-0.02, 0.02), -1, 1)
                    ),
                    seed=derive_seed(seed, "device", idx),
                )
            )
            idx += 1
    return fleet


def fleet_labels(fleet, chart: ImageF, window: Rect | None = None) -> dict[str, float]:
    """Oracle label per device for captures of `chart`."""
    out = {}
    for d in fleet:
        cap = simulate(chart, d)
        out[d.device_id] = oracle_label(chart, cap, window)
    return out


def gen_fleet(n_devices: int, n_brands: int, seed: int) -> list[DeviceProfile]:
    """Fleet of devices grouped into brands, with guaranteed label spread.

    Devices jitter around per-brand base recipes.  The fleet is redrawn
    (up to 100 times, each from a derived seed) until the oracle-label
    spread on a reference chart is at least 0.5.
    """
    if n_brands < 1 or n_devices < 1:
        raise ConfigError("need at least one device and one brand")
    if n_brands > n_devices:
        raise ConfigError(f"n_brands {n_brands} exceeds n_devices {n_devices}")
    chart = _spread_chart()
    for attempt in range(100):
        fleet = _draw_fleet(n_devices, n_brands, derive_seed(seed, "fleet", attempt))
        if n_devices == 1:
            return fleet
        labels = fleet_labels(fleet, chart)
        vals = list(labels.values())
        if max(vals) - min(vals) >= 0.5:
            return fleet
    raise FleetError(
        f"could not reach label spread 0.5 in 100 redraws "
        f"(n_devices={n_devices}, n_brands={n_brands}, seed={seed})"
    )


def fleet_to_json(fleet, seed: int | None = None) -> str:
    payload = {
        "seed": seed,
        "devices": [
            {
                "device_id": d.device_id,
                "brand_id": d.brand_id,
                "blur_sigma": d.blur_sigma,
                "noise_sigma": d.noise_sigma,
                "denoise_strength": d.denoise_strength,
                "sharpen_amount": d.sharpen_amount,
                "exposure_ev": d.exposure_ev,
                "seed": d.seed,
            }
            for d in fleet
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def fleet_from_json(text: str) -> list[DeviceProfile]:
    payload = json.loads(text)
    return [DeviceProfile(**dev) for dev in payload["devices"]]


def capture_chart(chart: ImageF, d: DeviceProfile, chart_id: str) -> ImageF:
    """Capture with a per-(device, chart) noise stream."""
    return simulate(chart, d, noise_seed=derive_seed(d.seed, "chart", chart_id))
