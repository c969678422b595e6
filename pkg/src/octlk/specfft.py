"""Depth profiles from spectra: band-limited transform, peak detection, windows."""

from __future__ import annotations

import math
import warnings

import numpy as np

from .errors import DomainError, GridMismatchError, NoSignalError, WindowCollisionWarning
from .model import AScanSpectrum, DepthProfile

DEFAULT_PAD = 64
_SQRT_2PI = math.sqrt(2 * math.pi)


def transform_matrix(k_grid: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Rows ``dk / sqrt(2 pi) * exp(-i k z)``, so ``matrix @ C`` is the transform at ``z``."""
    k = np.asarray(k_grid, dtype=float)
    dk = (k[-1] - k[0]) / (k.size - 1)
    return dk / _SQRT_2PI * np.exp(-1j * np.outer(np.asarray(z, dtype=float), k))


def transform_at(spectrum_values, k_grid, z) -> np.ndarray:
    """Transform evaluated at arbitrary depths by direct summation."""
    k = np.asarray(k_grid, dtype=float)
    dk = (k[-1] - k[0]) / (k.size - 1)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    out = np.empty(z.size, dtype=complex)
    v = np.asarray(spectrum_values)
    step = 4096
    for s in range(0, z.size, step):
        zz = z[s:s + step]
        out[s:s + step] = np.exp(-1j * np.outer(zz, k)) @ v
    return dk / _SQRT_2PI * out


def band_limited_transform(spectrum: AScanSpectrum, z=None, pad_factor: int = DEFAULT_PAD,
                           z_max: float | None = None) -> DepthProfile:
    """``(1/sqrt(2 pi)) int_S C(k) exp(-i k z) dk`` as a Riemann sum.

    Without ``z`` the result lives on the zero-padded FFT grid restricted to
    ``0 <= z < z_max`` (default: the full alias-free range).  With ``z`` the sum
    is evaluated directly at those depths.
    """
    k = spectrum.k_grid
    dk = spectrum.dk
    lk = 0.5 * (k[-1] - k[0])
    kbar = 0.5 * (k[-1] + k[0])
    if z is not None:
        z = np.asarray(z, dtype=float)
        vals = transform_at(spectrum.values, k, z)
        return DepthProfile(z, vals, k_bar=kbar, half_bandwidth=lk)
    if pad_factor < 1:
        raise DomainError("pad factor must be >= 1")
    n = k.size * int(pad_factor)
    dz = 2 * math.pi / (n * dk)
    # fft term exp(-2 pi i p m / n) equals exp(-i (p dk)(m dz)); k1 offset restored below
    raw = np.fft.fft(spectrum.values, n)
    zg = np.arange(n) * dz
    keep = n // 2
    if z_max is not None:
        keep = min(keep, int(math.floor(z_max / dz)) + 1)
    zg = zg[:keep]
    vals = dk / _SQRT_2PI * np.exp(-1j * k[0] * zg) * raw[:keep]
    return DepthProfile(zg, vals, k_bar=kbar, half_bandwidth=lk)


def detect_peaks(profile: DepthProfile, min_separation: float = 50.0,
                 threshold_ratio: float = 0.05, reference: float | None = None,
                 sidelobe_margin: float = 1.5, z_min: float = 0.0):
    """Interface peaks of a depth profile as ``[(z, magnitude), ...]`` sorted by depth.

    Candidates are local maxima above ``threshold_ratio * reference`` (the
    global maximum by default).  They are accepted greedily by magnitude; a
    candidate is dropped when it lies within ``min_separation`` of an accepted
    peak or under ``sidelobe_margin`` times the summed sinc envelopes
    ``A / (half_bandwidth * |dz|)`` of the accepted peaks.  The envelope test needs the profile's
    half bandwidth and is skipped without it.
    """
    if not 0 < threshold_ratio < 1:
        raise DomainError("threshold_ratio must lie in (0, 1)")
    mag = profile.magnitude
    z = profile.z_grid
    if mag.size < 3:
        raise NoSignalError("profile too short for peak detection")
    ref = float(np.max(mag)) if reference is None else float(reference)
    if not ref > 0:
        raise NoSignalError("profile is identically zero")
    inner = (mag[1:-1] >= mag[:-2]) & (mag[1:-1] > mag[2:])
    idx = np.nonzero(inner)[0] + 1
    idx = idx[(mag[idx] >= threshold_ratio * ref) & (z[idx] >= z_min)]
    if idx.size == 0:
        raise NoSignalError(f"no peak above {threshold_ratio:g} of {ref:.3g}")
    lk = profile.half_bandwidth
    order = idx[np.argsort(-mag[idx], kind="stable")]
    accepted: list[int] = []
    for i in order:
        gaps = np.abs(z[i] - z[accepted]) if accepted else np.empty(0)
        if np.any(gaps < min_separation):
            continue
        # sidelobes of several strong peaks can add up, so compare with their summed envelope
        if lk and accepted and mag[i] < sidelobe_margin * np.sum(mag[accepted] / (lk * gaps)):
            continue
        accepted.append(int(i))
    accepted.sort(key=lambda i: z[i])
    return [(float(z[i]), float(mag[i])) for i in accepted]


def refine_peak(profile: DepthProfile, z_peak: float) -> float:
    """Sub-grid peak location from a parabola through the three nearest samples."""
    z = profile.z_grid
    i = int(np.clip(np.searchsorted(z, z_peak), 1, z.size - 2))
    if abs(z[i - 1] - z_peak) < abs(z[i] - z_peak):
        i = max(i - 1, 1)
    m0, m1, m2 = profile.magnitude[i - 1:i + 2]
    denom = m0 - 2 * m1 + m2
    if denom >= 0:
        return float(z[i])
    return float(z[i] + 0.5 * (m0 - m2) / denom * (z[i + 1] - z[i]))


def select_window(profile: DepthProfile, z_peak: float, M: int = 401,
                  neighbors=(), spacing: float | None = None) -> np.ndarray:
    """``M`` equally spaced depths centred on ``z_peak``.

    The spacing defaults to the profile spacing.  If the half-width would
    exceed half the distance to a neighbouring peak, the spacing is kept and
    ``M`` is reduced with a :class:`WindowCollisionWarning`.
    """
    if M < 1 or M % 2 == 0:
        raise DomainError(f"window size must be odd and positive, got {M}")
    h = profile.dz if spacing is None else float(spacing)
    half = (M - 1) // 2
    limit = math.inf
    for nb in neighbors:
        gap = abs(nb - z_peak)
        if gap > 0:
            limit = min(limit, 0.5 * gap)
    if half * h >= limit:
        new_half = max(int(math.floor(limit / h)) - 1, 0)
        warnings.warn(f"window of {M} points overlaps a neighbouring peak; using "
                      f"{2 * new_half + 1}", WindowCollisionWarning, stacklevel=2)
        half = new_half
    zs = z_peak + h * np.arange(-half, half + 1)
    if zs[0] < profile.z_grid[0] or zs[-1] > profile.z_grid[-1]:
        raise DomainError("window extends beyond the profile range")
    return zs


def subtract_contribution(spectrum: AScanSpectrum, model_spectra, scale: float = 1.0
                          ) -> AScanSpectrum:
    """Residual ``C - scale * sum(models)``; models are arrays or spectra on the same grid."""
    total = np.zeros_like(spectrum.values)
    for m in model_spectra:
        if isinstance(m, AScanSpectrum):
            if m.k_grid.shape != spectrum.k_grid.shape or not np.array_equal(m.k_grid,
                                                                             spectrum.k_grid):
                raise GridMismatchError("model spectrum lives on a different grid")
            m = m.values
        m = np.asarray(m, dtype=float)
        if m.shape != spectrum.values.shape:
            raise GridMismatchError(f"model length {m.shape} differs from {spectrum.values.shape}")
        total += m
    return AScanSpectrum(spectrum.k_grid, spectrum.values - scale * total, q0=spectrum.q0)
