"""FFT-based spectra, MTF estimation and CSF-weighted acutance.

Estimation recipe (documented so oracles can reproduce it exactly):

* The input is reduced to one channel (Rec. 709 luma) and center-cropped
  to a square of side S.
* Four half-overlapping sub-tiles of side N = 2 * (S // 3), anchored at
  offsets {0, S - N} per axis, are mean-subtracted, windowed with a
  separable Hann window and Fourier transformed.
* Periodograms |F|^2 are normalized by the window energy sum(W^2), so a
  white-noise input of variance s^2 gives a flat spectrum at level s^2.
* Radial averaging uses integer-radius annuli: bin k collects frequency
  samples with round(sqrt(fx^2+fy^2) * N) == k, i.e. bin width 1/N
  cycles/pixel.  Bins above 0.45 cyc/px are discarded as
  window-contaminated; bin k=1 is dropped, so the lowest retained
  frequency is 2/N.

MTF curves are normalized to 1 at that lowest retained bin.  The
full-reference estimator radially averages the complex cross spectrum
first and takes the magnitude afterwards, which is what makes it robust
to slight misregistration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SizeError
from .image import ImageF

F_MAX = 0.45
K_MIN = 2


@dataclass(frozen=True)
class RadialSpectrum:
    """Radially averaged spectrum; freqs in cycles/pixel, ascending."""

    freqs: np.ndarray
    values: np.ndarray
    bin_count: int

    def __post_init__(self):
        if len(self.freqs) != len(self.values):
            raise SizeError("freqs and values length mismatch")
        if len(self.freqs) and np.any(np.diff(self.freqs) <= 0):
            raise SizeError("freqs must be strictly increasing")


@dataclass(frozen=True)
class MtfCurve:
    base: RadialSpectrum

    @property
    def freqs(self) -> np.ndarray:
        return self.base.freqs

    @property
    def values(self) -> np.ndarray:
        return self.base.values

    @classmethod
    def from_values(cls, freqs, values, bin_count=0) -> "MtfCurve":
        v = np.clip(np.asarray(values, dtype=np.float64), 0.0, None)
        return cls(RadialSpectrum(np.asarray(freqs, dtype=np.float64), v, bin_count))


@dataclass(frozen=True)
class ViewingConditions:
    """Print height and viewing distance in centimeters."""

    print_height: float = 120.0
    view_distance: float = 100.0

    def __post_init__(self):
        if self.print_height <= 0 or self.view_distance <= 0:
            raise ConfigError("viewing conditions must be positive")

    @property
    def print_height_deg(self) -> float:
        return math.degrees(2.0 * math.atan(self.print_height / (2.0 * self.view_distance)))


def _center_square(a: np.ndarray) -> np.ndarray:
    h, w = a.shape
    s = min(h, w)
    y0 = (h - s) // 2
    x0 = (w - s) // 2
    return a[y0 : y0 + s, x0 : x0 + s]


def _tiles(a: np.ndarray):
    s = a.shape[0]
    n = 2 * (s // 3)
    offs = sorted({0, s - n})
    for oy in offs:
        for ox in offs:
            yield a[oy : oy + n, ox : ox + n]


def _hann2(n: int) -> np.ndarray:
    w = np.hanning(n)
    return np.outer(w, w)


def _radial_bins(n: int):
    f = np.fft.fftfreq(n)
    fr = np.hypot(f[:, None], f[None, :])
    k = np.rint(fr * n).astype(np.int64)
    k_max = int(F_MAX * n)
    return k, k_max


def _as_plane(img: ImageF) -> np.ndarray:
    a = img.luma()
    a = _center_square(np.asarray(a, dtype=np.float64))
    if a.shape[0] < 32:
        raise SizeError(f"image too small for spectral analysis: side {a.shape[0]}")
    return a


def _spectra(img: ImageF):
    """Windowed tile FFTs plus binning info: (ffts, win_energy, k, k_max, n)."""
    a = _as_plane(img)
    n = 2 * (a.shape[0] // 3)
    win = _hann2(n)
    energy = float(np.sum(win * win))
    ffts = []
    for t in _tiles(a):
        t = t - t.mean()
        ffts.append(np.fft.fft2(t * win))
    k, k_max = _radial_bins(n)
    return ffts, energy, k, k_max, n


def _radial_average(values_2d: np.ndarray, k: np.ndarray, k_max: int) -> np.ndarray:
    """Mean of `values_2d` per integer radial bin 0..k_max (complex ok)."""
    flat_k = k.ravel()
    sel = flat_k <= k_max
    v = values_2d.ravel()[sel]
    kk = flat_k[sel]
    counts = np.bincount(kk, minlength=k_max + 1)
    if np.iscomplexobj(values_2d):
        sums = np.bincount(kk, weights=v.real, minlength=k_max + 1) + 1j * np.bincount(
            kk, weights=v.imag, minlength=k_max + 1
        )
    else:
        sums = np.bincount(kk, weights=v, minlength=k_max + 1)
    return sums / np.maximum(counts, 1)


def psd_radial(img: ImageF) -> RadialSpectrum:
    """Radially averaged power spectral density of `img`.

    Non-square inputs are center-cropped; color is reduced to luma.
    A constant image yields (numerically) zero at all retained bins.
    """
    ffts, energy, k, k_max, n = _spectra(img)
    p = np.zeros(k_max + 1, dtype=np.float64)
    for f in ffts:
        p += _radial_average(np.abs(f) ** 2, k, k_max).real
    p /= len(ffts) * energy
    freqs = np.arange(K_MIN, k_max + 1, dtype=np.float64) / n
    return RadialSpectrum(freqs, p[K_MIN:], bin_count=n)


def _resample_to(sp: RadialSpectrum, freqs: np.ndarray) -> np.ndarray:
    if len(sp.freqs) == len(freqs) and np.allclose(sp.freqs, freqs):
        return sp.values
    return np.interp(freqs, sp.freqs, sp.values)


def _normalize(freqs, values, bin_count) -> MtfCurve:
    if len(values) == 0:
        raise SizeError("empty MTF curve")
    v0 = values[0]
    if v0 <= 0:
        raise SizeError("cannot normalize MTF: lowest bin is not positive")
    return MtfCurve.from_values(freqs, values / v0, bin_count)


def mtf_rr(captured_texture: ImageF, captured_uniform: ImageF, ideal_psd: RadialSpectrum) -> MtfCurve:
    """Reduced-reference MTF from the captured chart PSD.

    MTF(f) = sqrt(max(PSD_cap(f) - PSD_noise(f), 0) / PSD_ideal(f)) with
    the noise PSD measured on a captured uniform patch.  Only the PSD of
    the ideal chart is needed, not the chart image itself.  Denoising in
    the device suppresses noise on the uniform patch more than on
    texture, which biases this estimator (the classical failure mode the
    full-reference method avoids).
    """
    cap = psd_radial(captured_texture)
    noise = psd_radial(captured_uniform)
    ideal = _resample_to(ideal_psd, cap.freqs)
    noise_v = _resample_to(noise, cap.freqs)
    good = ideal > 1e-12 * ideal.max()
    num = np.clip(cap.values - noise_v, 0.0, None)
    mtf = np.sqrt(num[good] / ideal[good])
    return _normalize(cap.freqs[good], mtf, cap.bin_count)


def mtf_fr(captured: ImageF, reference: ImageF) -> MtfCurve:
    """Full-reference MTF from the cross power spectrum.

    MTF(f) = |radial_avg(CrossPSD)| / radial_avg(PSD_ref).  The radial
    average runs over the complex cross spectrum before the magnitude is
    taken; additive noise uncorrelated with the reference averages out.
    Inputs must be registered to within a couple of pixels.
    """
    if (captured.width, captured.height) != (reference.width, reference.height):
        raise SizeError(
            f"size mismatch: {captured.width}x{captured.height} vs "
            f"{reference.width}x{reference.height}"
        )
    f_cap, energy, k, k_max, n = _spectra(captured)
    f_ref, _, _, _, _ = _spectra(reference)
    cross = np.zeros(k_max + 1, dtype=np.complex128)
    pref = np.zeros(k_max + 1, dtype=np.float64)
    for fc, fr in zip(f_cap, f_ref):
        cross += _radial_average(fc * np.conj(fr), k, k_max)
        pref += _radial_average(np.abs(fr) ** 2, k, k_max).real
    vals = np.abs(cross[K_MIN:]) / np.maximum(pref[K_MIN:], 1e-300)
    freqs = np.arange(K_MIN, k_max + 1, dtype=np.float64) / n
    return _normalize(freqs, vals, n)


# Mannos-Sakrison contrast sensitivity: a(f) = 2.6 (0.0192 + 0.114 f)
# exp(-(0.114 f)^1.1), clipped to its peak below the peak frequency.
_CSF_PEAK: tuple | None = None


def _csf_raw(f):
    x = 0.114 * np.asarray(f, dtype=np.float64)
    return 2.6 * (0.0192 + x) * np.exp(-(x**1.1))


def _csf_peak() -> tuple:
    global _CSF_PEAK
    if _CSF_PEAK is None:
        from scipy.optimize import minimize_scalar

        res = minimize_scalar(lambda f: -_csf_raw(f), bounds=(0.5, 30.0), method="bounded")
        _CSF_PEAK = (float(res.x), float(_csf_raw(res.x)))
    return _CSF_PEAK


def csf(f_cpd) -> np.ndarray | float:
    """Contrast sensitivity weight at `f_cpd` cycles/degree (scalar or array)."""
    f = np.asarray(f_cpd, dtype=np.float64)
    if np.any(f < 0):
        raise ConfigError("frequency must be nonnegative")
    f_peak, peak = _csf_peak()
    out = np.where(f < f_peak, peak, _csf_raw(f))
    return float(out) if np.isscalar(f_cpd) or out.ndim == 0 else out


def acutance(mtf: MtfCurve, vc: ViewingConditions, source_height_px: int) -> float:
    """CSF-weighted MTF integral ratio, in [0, ~1.2].

    Cycles/pixel map to cycles/degree through the viewing geometry:
    f_cpd = f_cpp * source_height_px / print_height_deg, where
    print_height_deg = 2 atan(print_height / (2 view_distance)).  This
    pixel-to-angle convention is the toolkit's own and is applied
    uniformly to every device, so rankings do not depend on it.  Both
    integrals are trapezoidal over the curve's support.
    """
    if len(mtf.freqs) < 2:
        raise SizeError("MTF curve needs at least two samples")
    px_per_deg = source_height_px / vc.print_height_deg
    f_cpd = mtf.freqs * px_per_deg
    w = csf(f_cpd)
    num = np.trapezoid(mtf.values * w, f_cpd)
    den = np.trapezoid(w, f_cpd)
    return float(num / den)


def spectrum_to_csv(sp) -> str:
    lines = ["freq,value"]
    for f, v in zip(sp.freqs, sp.values):
        lines.append(f"{f!r},{v!r}")
    return "\n".join(lines) + "\n"
