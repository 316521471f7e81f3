"""Deterministic synthesis of test charts.

Two families:

* dead-leaves: occluding disks with power-law radii, the classical
  scale-invariant texture target (gray or color);
* composite: a tiled chart mixing uniform zones, fine and coarse
  dead-leaves texture, sinusoidal gratings, resolution line groups and
  low-contrast detail, so that some regions discriminate device quality
  and some do not.

All charts are pure functions of their parameter structs; the disk
parameters used here are toolkit defaults, not values taken from any
published chart.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SizeError
from .image import ImageF, Rect
from .rng import Rng, make_rng

INTENSITY_LO = 0.15
INTENSITY_HI = 0.85
MAX_DISKS = 1_000_000

TILE_KINDS = (
    "uniform",
    "dead-leaves-fine",
    "dead-leaves-coarse",
    "sinusoidal-grating",
    "resolution-lines",
    "low-contrast-detail",
)


@dataclass(frozen=True)
class DeadLeavesParams:
    size: int
    r_min: float = 5.0
    r_max: float = 120.0
    radius_exponent: float = 3.0
    gray: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.size < 8:
            raise SizeError(f"chart size must be >= 8, got {self.size}")
        if not (0 < self.r_min < self.r_max < self.size / 2):
            raise ConfigError(
                f"need 0 < r_min < r_max < size/2, got "
                f"r_min={self.r_min}, r_max={self.r_max}, size={self.size}"
            )


def sample_radii(p: DeadLeavesParams, n: int, rng: Rng) -> np.ndarray:
    """Draw `n` radii from the truncated power law f(r) ~ r^-exponent.

    Inverse-CDF sampling; exponent 1 is handled as the log-uniform limit.
    """
    u = rng.random(n)
    a = p.radius_exponent
    if abs(a - 1.0) < 1e-12:
        return p.r_min * np.exp(u * np.log(p.r_max / p.r_min))
    e = 1.0 - a
    lo, hi = p.r_min**e, p.r_max**e
    return (lo + u * (hi - lo)) ** (1.0 / e)


def gen_dead_leaves(p: DeadLeavesParams) -> ImageF:
    """Dead-leaves chart: disks drawn newest-on-top until full coverage.

    Gray charts are single channel with per-disk intensity uniform in
    [0.15, 0.85]; color charts draw an independent RGB triple per disk
    in the same range.  Deterministic given the seed.
    """
    rng = make_rng(p.seed)
    size = p.size
    channels = 1 if p.gray else 3
    canvas = np.full((size, size, channels), -1.0, dtype=np.float64)
    covered = np.zeros((size, size), dtype=bool)
    remaining = size * size

    yy = np.arange(size, dtype=np.float64)
    batch = 1024
    drawn = 0
    while remaining > 0 and drawn < MAX_DISKS:
        n = min(batch, MAX_DISKS - drawn)
        cx = rng.random(n) * size
        cy = rng.random(n) * size
        rr = sample_radii(p, n, rng)
        colors = INTENSITY_LO + rng.random((n, channels)) * (INTENSITY_HI - INTENSITY_LO)
        for i in range(n):
            r = rr[i]
            x0 = max(int(np.floor(cx[i] - r)), 0)
            x1 = min(int(np.ceil(cx[i] + r)) + 1, size)
            y0 = max(int(np.floor(cy[i] - r)), 0)
            y1 = min(int(np.ceil(cy[i] + r)) + 1, size)
            if x0 >= x1 or y0 >= y1:
                continue
            dy = yy[y0:y1] - cy[i]
            dx = yy[x0:x1] - cx[i]
            mask = (dy * dy)[:, None] + (dx * dx)[None, :] <= r * r
            if not mask.any():
                continue
            sub = covered[y0:y1, x0:x1]
            remaining -= int(np.count_nonzero(mask & ~sub))
            sub |= mask
            canvas[y0:y1, x0:x1][mask] = colors[i]
        drawn += n

    if remaining > 0:
        # Unreachable for sane parameters; fill so the contract holds.
        canvas[~covered] = 0.5
    return ImageF(canvas)


@dataclass(frozen=True)
class TileSpec:
    kind: str
    rect: Rect
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CompositeChartSpec:
    size: int = 1024
    rows: int = 4
    cols: int = 4
    kinds: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.size % self.rows or self.size % self.cols:
            raise ConfigError(
                f"size {self.size} not divisible by grid {self.rows}x{self.cols}"
            )
        kinds = self.kinds or _default_kind_layout(self.rows, self.cols)
        if len(kinds) != self.rows * self.cols:
            raise ConfigError(
                f"need {self.rows * self.cols} tile kinds, got {len(kinds)}"
            )
        for k in kinds:
            if k not in TILE_KINDS:
                raise ConfigError(f"unknown tile kind {k!r}")
        if "uniform" not in kinds or "dead-leaves-fine" not in kinds:
            raise ConfigError("layout must contain a uniform and a fine-detail tile")
        object.__setattr__(self, "kinds", tuple(kinds))


def _default_kind_layout(rows: int, cols: int):
    # Fine-detail tiles clustered near the center so a selection window
    # can sit on rich texture; uniform tiles spread across the chart.
    base = [
        "dead-leaves-fine", "uniform", "sinusoidal-grating", "dead-leaves-coarse",
        "uniform", "dead-leaves-fine", "resolution-lines", "uniform",
        "sinusoidal-grating", "dead-leaves-fine", "dead-leaves-fine", "low-contrast-detail",
        "dead-leaves-coarse", "resolution-lines", "low-contrast-detail", "uniform",
    ]
    n = rows * cols
    if n <= len(base):
        kinds = base[:n]
    else:
        kinds = (base * (n // len(base) + 1))[:n]
    # Guarantee the invariant even for tiny grids.
    if "uniform" not in kinds:
        kinds[-1] = "uniform"
    if "dead-leaves-fine" not in kinds:
        kinds[0] = "dead-leaves-fine"
    return kinds


def _tile_uniform(side: int, rng: Rng, params: dict) -> np.ndarray:
    level = params.setdefault("level", round(0.25 + 0.5 * rng.random(), 4))
    return np.full((side, side), level)


def _tile_dead_leaves(side: int, rng: Rng, params: dict, fine: bool) -> np.ndarray:
    if fine:
        r_min, r_max = 1.5, max(6.0, side / 40)
    else:
        r_min, r_max = side / 24, side / 4
    p = DeadLeavesParams(
        size=side, r_min=r_min, r_max=r_max, gray=True,
        seed=int(rng.integers(0, 2**63)),
    )
    params.update(r_min=r_min, r_max=r_max)
    return gen_dead_leaves(p).data[:, :, 0]


def _tile_grating(side: int, rng: Rng, params: dict) -> np.ndarray:
    freq = params.setdefault("freq", round(float(rng.uniform(0.12, 0.28)), 4))
    theta = params.setdefault("theta", round(float(rng.uniform(0, np.pi)), 4))
    y, x = np.mgrid[0:side, 0:side]
    phase = 2 * np.pi * freq * (np.cos(theta) * x + np.sin(theta) * y)
    return 0.5 + 0.3 * np.sin(phase)


def _tile_lines(side: int, rng: Rng, params: dict) -> np.ndarray:
    # Vertical bar groups with period shrinking left to right.
    periods = params.setdefault("periods", [24, 16, 12, 8, 6, 4, 3, 2])
    tile = np.full((side, side), 0.7)
    n_groups = len(periods)
    gw = side // n_groups
    x = np.arange(side)
    for g, period in enumerate(periods):
        x0, x1 = g * gw, side if g == n_groups - 1 else (g + 1) * gw
        bars = ((x[x0:x1] - x0) // max(period // 2, 1)) % 2 == 0
        tile[:, x0:x1] = np.where(bars, 0.2, 0.8)
    return tile


def _tile_low_contrast(side: int, rng: Rng, params: dict) -> np.ndarray:
    p = DeadLeavesParams(
        size=side, r_min=1.5, r_max=max(6.0, side / 40), gray=True,
        seed=int(rng.integers(0, 2**63)),
    )
    full = gen_dead_leaves(p).data[:, :, 0]
    # Compressed contrast around mid-gray, but still clearly discriminant:
    # low-contrast fine detail separates devices well.
    return 0.5 + (full - 0.5) * 0.35


def gen_composite(spec: CompositeChartSpec):
    """Composite chart plus per-tile metadata.

    Returns (ImageF, list[TileSpec]); the tile list records kind,
    rectangle and the parameters each tile was built with, so later
    stages can score map semantics against known content.
    """
    rng = make_rng(spec.seed)
    th = spec.size // spec.rows
    tw = spec.size // spec.cols
    canvas = np.zeros((spec.size, spec.size), dtype=np.float64)
    tiles = []
    for r in range(spec.rows):
        for c in range(spec.cols):
            kind = spec.kinds[r * spec.cols + c]
            rect = Rect(c * tw, r * th, tw, th)
            params: dict = {}
            side = th
            if kind == "uniform":
                tile = _tile_uniform(side, rng, params)
            elif kind == "dead-leaves-fine":
                tile = _tile_dead_leaves(side, rng, params, fine=True)
            elif kind == "dead-leaves-coarse":
                tile = _tile_dead_leaves(side, rng, params, fine=False)
            elif kind == "sinusoidal-grating":
                tile = _tile_grating(side, rng, params)
            elif kind == "resolution-lines":
                tile = _tile_lines(side, rng, params)
            else:
                tile = _tile_low_contrast(side, rng, params)
            sy, sx = rect.slices()
            canvas[sy, sx] = tile[:, :tw]
            tiles.append(TileSpec(kind=kind, rect=rect, params=params))
    return ImageF.from_array(canvas), tiles


def tiles_to_json(tiles, seed: int, size: int) -> str:
    payload = {
        "kind": "composite",
        "seed": seed,
        "size": size,
        "tiles": [
            {"kind": t.kind, "rect": list(t.rect.as_tuple()), "params": t.params}
            for t in tiles
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def tiles_from_json(text: str):
    payload = json.loads(text)
    return [
        TileSpec(kind=t["kind"], rect=Rect(*t["rect"]), params=t.get("params", {}))
        for t in payload["tiles"]
    ]


def finest_tile(tiles) -> Rect:
    """Rect of the first fine dead-leaves tile (the oracle's window)."""
    for t in tiles:
        if t.kind == "dead-leaves-fine":
            return t.rect
    raise ConfigError("chart has no fine dead-leaves tile")
