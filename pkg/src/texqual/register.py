"""Correspondence-based homography registration.

Harris corners on the source image are matched into the destination by
normalized cross-correlation over a bounded search window (a deliberate
simplification of descriptor matching: the targets are planar,
high-texture charts where template matching is reliable).  A homography
is then estimated with normalized DLT inside RANSAC and refit by least
squares on the inliers.

`warp` treats the homography as the source-to-output transform and
resamples by inverse mapping with bicubic interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import RegistrationError, SizeError
from .image import ImageF
from .rng import make_rng


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform, normalized so h[2,2] == 1 when nonzero."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise SizeError(f"homography must be 3x3, got {m.shape}")
        det = np.linalg.det(m)
        if abs(det) < 1e-12:
            raise RegistrationError(f"homography is singular (det={det:.3e})")
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        object.__setattr__(self, "matrix", m)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Map (n, 2) xy points through the transform."""
        p = np.asarray(pts, dtype=np.float64)
        ones = np.ones((p.shape[0], 1))
        q = np.hstack([p, ones]) @ self.matrix.T
        return q[:, :2] / q[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def compose(self, other: "Homography") -> "Homography":
        """self after other: (self . other)(x) = self(other(x))."""
        return Homography(self.matrix @ other.matrix)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))


@dataclass(frozen=True)
class Correspondence:
    p_src: tuple
    p_dst: tuple
    score: float


def detect_corners(img: ImageF, max_n: int = 200) -> np.ndarray:
    """Harris corners, 5-px non-max suppressed, strongest `max_n` first.

    Returns an (n, 2) array of xy pixel coordinates; raises
    RegistrationError when fewer than 4 corners are found.
    """
    a = img.luma().astype(np.float64)
    gy, gx = np.gradient(a)
    sxx = gaussian_filter(gx * gx, 1.5, mode="reflect")
    syy = gaussian_filter(gy * gy, 1.5, mode="reflect")
    sxy = gaussian_filter(gx * gy, 1.5, mode="reflect")
    det = sxx * syy - sxy * sxy
    tr = sxx + syy
    resp = det - 0.05 * tr * tr

    thresh = resp.max() * 0.01
    if thresh <= 0:
        raise RegistrationError("no corner response (blank image?)")
    # 5-px-radius non-max suppression via dilation on an 11x11 window.
    from scipy.ndimage import maximum_filter

    local_max = (resp == maximum_filter(resp, size=11, mode="nearest")) & (resp > thresh)
    # Keep a margin so NCC templates fit.
    local_max[:8, :] = local_max[-8:, :] = False
    local_max[:, :8] = local_max[:, -8:] = False
    ys, xs = np.nonzero(local_max)
    if xs.size < 4:
        raise RegistrationError(f"only {xs.size} corners detected, need >= 4")
    order = np.argsort(resp[ys, xs], kind="stable")[::-1][:max_n]
    return np.stack([xs[order], ys[order]], axis=1).astype(np.float64)


def _ncc_surface(template: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation of `template` at every offset in `region`.

    The sliding dot products run in float32 (plenty for correlation
    scores); the sums behind the normalization stay float64.
    """
    th, tw = template.shape
    rh, rw = region.shape
    oh, ow = rh - th + 1, rw - tw + 1
    t = template - template.mean()
    tnorm = np.sqrt((t * t).sum())
    if tnorm < 1e-12:
        return np.full((oh, ow), -1.0)

    # Centering the region keeps the integral-image variance free of
    # catastrophic cancellation on flat windows (dots are shift-invariant
    # because the template is zero-mean).
    region = region - region.mean()

    from numpy.lib.stride_tricks import sliding_window_view

    wins = sliding_window_view(region.astype(np.float32), (th, tw))
    dots = np.tensordot(wins, t.astype(np.float32), axes=([2, 3], [0, 1]))
    ii = np.cumsum(np.cumsum(np.pad(region, ((1, 0), (1, 0))), axis=0), axis=1)
    ii2 = np.cumsum(np.cumsum(np.pad(region * region, ((1, 0), (1, 0))), axis=0), axis=1)
    s1 = ii[th:, tw:] - ii[:-th, tw:] - ii[th:, :-tw] + ii[:-th, :-tw]
    s2 = ii2[th:, tw:] - ii2[:-th, tw:] - ii2[th:, :-tw] + ii2[:-th, :-tw]
    var = s2 - s1 * s1 / (th * tw)
    wnorm = np.sqrt(np.clip(var, 0.0, None))
    with np.errstate(invalid="ignore", divide="ignore"):
        ncc = dots.astype(np.float64) / (tnorm * wnorm)
    # Correlation is undefined on (near-)flat windows; never match there.
    ncc[(wnorm < 1e-4) | ~np.isfinite(ncc)] = -1.0
    return ncc


def _parabolic_refine(surface: np.ndarray, y: int, x: int) -> tuple:
    """Quadratic sub-pixel peak refinement along each axis."""

    def refine_1d(fm, f0, fp):
        denom = fm - 2 * f0 + fp
        if abs(denom) < 1e-12:
            return 0.0
        d = 0.5 * (fm - fp) / denom
        return float(np.clip(d, -0.5, 0.5))

    dy = dx = 0.0
    if 0 < y < surface.shape[0] - 1:
        dy = refine_1d(surface[y - 1, x], surface[y, x], surface[y + 1, x])
    if 0 < x < surface.shape[1] - 1:
        dx = refine_1d(surface[y, x - 1], surface[y, x], surface[y, x + 1])
    return dy, dx


def match_ncc(src: ImageF, dst: ImageF, corners: np.ndarray, window: int = 15,
              search_radius: int = 40, min_ncc: float = 0.8):
    """Best NCC match in `dst` for a template around each `src` corner.

    Matches with peak correlation below `min_ncc` are dropped; raises
    RegistrationError if nothing survives.
    """
    a_src = src.luma().astype(np.float64)
    a_dst = dst.luma().astype(np.float64)
    half = window // 2
    out = []
    for cx, cy in corners:
        ix, iy = int(round(cx)), int(round(cy))
        if not (half <= ix < src.width - half and half <= iy < src.height - half):
            continue
        template = a_src[iy - half : iy + half + 1, ix - half : ix + half + 1]
        x0 = max(ix - half - search_radius, 0)
        y0 = max(iy - half - search_radius, 0)
        x1 = min(ix + half + search_radius + 1, dst.width)
        y1 = min(iy + half + search_radius + 1, dst.height)
        region = a_dst[y0:y1, x0:x1]
        if region.shape[0] < window or region.shape[1] < window:
            continue
        surf = _ncc_surface(template, region)
        py, px = np.unravel_index(np.argmax(surf), surf.shape)
        score = float(surf[py, px])
        if score < min_ncc:
            continue
        dy, dx = _parabolic_refine(surf, int(py), int(px))
        mx = x0 + px + dx + half
        my = y0 + py + dy + half
        out.append(Correspondence((float(cx), float(cy)), (mx, my), score))
    if not out:
        raise RegistrationError("no NCC matches above threshold")
    return out


def _normalize_points(pts: np.ndarray):
    centroid = pts.mean(axis=0)
    d = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if d < 1e-12:
        raise RegistrationError("degenerate point configuration")
    s = np.sqrt(2.0) / d
    t = np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1]])
    ones = np.ones((pts.shape[0], 1))
    return (np.hstack([pts, ones]) @ t.T)[:, :2], t


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Direct linear transform with Hartley normalization."""
    sp, ts = _normalize_points(src)
    dp, td = _normalize_points(dst)
    n = src.shape[0]
    a = np.zeros((2 * n, 9))
    x, y = sp[:, 0], sp[:, 1]
    u, v = dp[:, 0], dp[:, 1]
    a[0::2, 0] = -x
    a[0::2, 1] = -y
    a[0::2, 2] = -1
    a[0::2, 6] = u * x
    a[0::2, 7] = u * y
    a[0::2, 8] = u
    a[1::2, 3] = -x
    a[1::2, 4] = -y
    a[1::2, 5] = -1
    a[1::2, 6] = v * x
    a[1::2, 7] = v * y
    a[1::2, 8] = v
    _, _, vh = np.linalg.svd(a)
    h = vh[-1].reshape(3, 3)
    return np.linalg.inv(td) @ h @ ts


def estimate_homography_ransac(matches, iters: int = 500, inlier_px: float = 2.0,
                               seed: int = 0):
    """(Homography, inlier mask) from correspondences via RANSAC + refit.

    Minimal 4-point DLT hypotheses, reprojection threshold `inlier_px`,
    final least-squares DLT on the best consensus set; deterministic
    given `seed`.  Raises RegistrationError with fewer than 4 inliers.
    """
    if len(matches) < 4:
        raise RegistrationError(f"need >= 4 matches, got {len(matches)}")
    src = np.array([m.p_src for m in matches], dtype=np.float64)
    dst = np.array([m.p_dst for m in matches], dtype=np.float64)
    n = len(matches)
    rng = make_rng(seed)

    best_mask = None
    best_count = 3
    best_rms = np.inf
    # Adaptive termination: stop once enough samples have been drawn to
    # hit an all-inlier quadruple with 99.9% confidence.
    needed = iters
    it = 0
    while it < min(iters, needed):
        it += 1
        sel = rng.choice(n, size=4, replace=False)
        quad = src[sel]
        # Reject near-collinear samples: triangle areas of all triples.
        def _area2(i, j, k):
            u = quad[j] - quad[i]
            v = quad[k] - quad[i]
            return abs(u[0] * v[1] - u[1] * v[0])

        areas = [_area2(i, j, k) for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3))]
        if min(areas) < 1e-6:
            continue
        try:
            h = Homography(_dlt(quad, dst[sel]))
        except (RegistrationError, np.linalg.LinAlgError):
            continue
        err = np.sqrt(((h.apply(src) - dst) ** 2).sum(axis=1))
        mask = err < inlier_px
        count = int(mask.sum())
        if count < 4:
            continue
        rms = float(np.sqrt((err[mask] ** 2).mean()))
        if count > best_count or (count == best_count and rms < best_rms):
            best_mask, best_count, best_rms = mask, count, rms
            w = count / n
            if w >= 1.0:
                break
            needed = int(np.ceil(np.log(1e-3) / np.log(1.0 - w**4)))
    if best_mask is None:
        raise RegistrationError("RANSAC found no consensus of >= 4 inliers")
    h = Homography(_dlt(src[best_mask], dst[best_mask]))
    err = np.sqrt(((h.apply(src) - dst) ** 2).sum(axis=1))
    return h, err < inlier_px


def _bicubic_sample(a: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Catmull-Rom sampling of a 2-d array at float coords (clamped)."""
    from .image import _catmull_rom_weights

    h, w = a.shape
    bx = np.floor(xs).astype(np.int64)
    by = np.floor(ys).astype(np.int64)
    tx = xs - bx
    ty = ys - by
    wx = _catmull_rom_weights(tx)
    wy = _catmull_rom_weights(ty)
    out = np.zeros(xs.shape, dtype=np.float64)
    for j in range(4):
        yy = np.clip(by + (j - 1), 0, h - 1)
        row = np.zeros(xs.shape, dtype=np.float64)
        for i in range(4):
            xx = np.clip(bx + (i - 1), 0, w - 1)
            row += wx[..., i] * a[yy, xx]
        out += wy[..., j] * row
    return out


def warp(img: ImageF, h: Homography, out_size: tuple, return_mask: bool = False):
    """Resample `img` under `h` (source -> output coords) onto an
    out_size = (width, height) canvas.

    Inverse mapping with bicubic interpolation; coordinates outside the
    source are clamped to the border and flagged invalid in the optional
    mask.
    """
    ow, oh = out_size
    inv = h.inverse().matrix
    ys, xs = np.mgrid[0:oh, 0:ow]
    denom = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / denom
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / denom
    valid = (sx >= 0) & (sx <= img.width - 1) & (sy >= 0) & (sy <= img.height - 1)
    out = np.empty((oh, ow, img.channels), dtype=np.float64)
    for c in range(img.channels):
        out[:, :, c] = _bicubic_sample(img.data[:, :, c], sx, sy)
    result = ImageF(out)
    if return_mask:
        return result, valid
    return result


def register_capture(capture: ImageF, reference: ImageF, max_corners: int = 150,
                     window: int = 15, search_radius: int = 40, iters: int = 500,
                     inlier_px: float = 2.0, seed: int = 0,
                     return_aligned: bool = True):
    """Align `capture` to the frame of `reference`.

    Corners are detected on the reference, matched into the capture, and
    a reference->capture homography G is estimated; the aligned image is
    warp(capture, G^-1).  Returns (G, aligned, inlier_count, rms); the
    aligned image is None when `return_aligned` is False.
    """
    corners = detect_corners(reference, max_corners)
    matches = match_ncc(reference, capture, corners, window, search_radius)
    g, inliers = estimate_homography_ransac(matches, iters, inlier_px, seed)
    src = np.array([m.p_src for m in matches])
    dst = np.array([m.p_dst for m in matches])
    err = np.sqrt(((g.apply(src) - dst) ** 2).sum(axis=1))
    rms = float(np.sqrt((err[inliers] ** 2).mean()))
    aligned = None
    if return_aligned:
        aligned = warp(capture, g.inverse(), (reference.width, reference.height))
    return g, aligned, int(inliers.sum()), rms
