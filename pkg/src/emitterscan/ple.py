"""Widefield photoluminescence-excitation extraction.

A frequency-tagged frame stack becomes a catalog of fitted emission lines:
frames are smoothed, sectioned into frequency bands, max-projected into
per-band aggregate images, candidate sites detected on the aggregates,
per-site intensity traces summed over a fixed window, divided by the
global per-frequency background to cancel excitation-power drift, and fit
with pseudo-Voigt profiles.  Also fits two-line spectra from pointwise
(confocal-style) scans.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import find_peaks, peak_widths

from .errors import EmitterScanError
from .imageproc import EmitterSite, detect_spots, gaussian_smooth, max_project, robust_sigma
from .physics import NVLabels, lifetime_limit_mhz, nv_labels

MHZ_PER_THZ = 1e6


class SiteWindowError(EmitterScanError):
    """Site too close to the frame edge for its summation window."""


class DegenerateBackgroundError(EmitterScanError):
    """Background trace contains non-positive values; cannot normalize."""


class ModelMismatchError(EmitterScanError):
    """Spectrum does not expose the peaks the requested model expects."""


@dataclass
class FrameStack:
    """Ordered widefield frames, one per excitation frequency."""

    frequencies_thz: np.ndarray
    exposures_s: np.ndarray
    frames: np.ndarray            # (n, height, width) counts
    pixel_size_um: float = 1.0

    def __post_init__(self):
        self.frequencies_thz = np.asarray(self.frequencies_thz, dtype=float)
        self.exposures_s = np.asarray(self.exposures_s, dtype=float)
        self.frames = np.asarray(self.frames, dtype=float)
        n = len(self.frequencies_thz)
        if self.frames.ndim != 3 or self.frames.shape[0] != n or len(self.exposures_s) != n:
            raise ValueError("frames/frequencies/exposures do not align")
        diffs = np.diff(self.frequencies_thz)
        if n > 1 and not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ValueError("frequencies must be strictly monotone")

    def __len__(self):
        return len(self.frequencies_thz)


@dataclass(frozen=True)
class FrequencyBand:
    lo_thz: float
    hi_thz: float
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)


@dataclass
class PLESpectrum:
    site_id: str
    frequencies_thz: np.ndarray
    raw: np.ndarray
    background: np.ndarray
    corrected: np.ndarray


@dataclass
class PeakFit:
    center_thz: float
    fwhm_mhz: float
    eta: float                    # Lorentzian fraction
    amplitude: float
    baseline: float
    residual_norm: float


@dataclass
class PipelineConfig:
    band_width_ghz: float = 10.0
    smooth_sigma_px: float = 2.0
    detect_sigma_lp: float = 2.0
    detect_sigma_hp: float = 6.0
    detect_threshold_k: float = 5.0
    min_separation_px: float = 4.0
    fit_window_px: int = 15
    site_half_window: int = 3     # 7x7 summation window
    normalize: bool = True
    peak_prominence_k: float = 5.0
    min_fwhm_mhz: float = field(default_factory=lifetime_limit_mhz)
    max_fwhm_mhz: float = 2000.0
    threads: int = 1
    keep_spectra: bool = False


@dataclass
class CatalogRow:
    site_id: str
    x_px: float
    y_px: float
    band_lo_thz: float
    band_hi_thz: float
    center_thz: float
    fwhm_mhz: float
    eta: float
    amplitude: float
    baseline: float
    residual: float


@dataclass
class PeakCatalog:
    rows: list
    n_sites: int
    n_skipped_sites: int
    n_dropped_peaks: int
    config: PipelineConfig
    spectra: list = field(default_factory=list)


def section_bands(stack: FrameStack, band_width_ghz: float = 10.0) -> list[FrequencyBand]:
    """Contiguous non-overlapping bands covering the scan; the last may be short."""
    if len(stack) == 0:
        raise ValueError("empty stack")
    if band_width_ghz <= 0:
        raise ValueError("band width must be positive")
    freqs = stack.frequencies_thz
    lo, hi = float(freqs.min()), float(freqs.max())
    width = band_width_ghz / 1000.0
    n_bands = max(1, int(np.ceil((hi - lo) / width - 1e-9)))
    bands = []
    for b in range(n_bands):
        b_lo = lo + b * width
        b_hi = lo + (b + 1) * width
        if b == n_bands - 1:
            sel = (freqs >= b_lo - 1e-12) & (freqs <= hi + 1e-12)
            b_hi = hi
        else:
            sel = (freqs >= b_lo - 1e-12) & (freqs < b_hi - 1e-12)
        idx = np.nonzero(sel)[0]
        if len(idx):
            bands.append(FrequencyBand(lo_thz=b_lo, hi_thz=b_hi, indices=idx))
    return bands


def band_aggregate(stack: FrameStack, band: FrequencyBand,
                   smooth_sigma_px: float = 2.0,
                   smoothed_frames: np.ndarray | None = None) -> np.ndarray:
    """Max projection of the band's smoothed frames."""
    if len(band) == 0:
        raise ValueError("empty band")
    if smoothed_frames is not None:
        return np.max(smoothed_frames[band.indices], axis=0)
    return max_project([gaussian_smooth(stack.frames[i], smooth_sigma_px)
                        for i in band.indices])


def _round_half_down(v: float) -> int:
    return int(np.ceil(v - 0.5))


def extract_intensity(stack: FrameStack, center_px: tuple[float, float],
                      half_window: int = 3, smooth_sigma_px: float = 2.0,
                      smoothed_frames: np.ndarray | None = None,
                      indices: np.ndarray | None = None) -> np.ndarray:
    """Per-frequency sum of the smoothed frames over a (2h+1)^2 pixel window.

    The window is centered on the site center rounded to the nearest pixel
    (ties toward the lower index).  Sites whose window would cross the frame
    edge raise SiteWindowError.
    """
    frames = smoothed_frames
    if frames is None:
        frames = np.stack([gaussian_smooth(f, smooth_sigma_px) for f in stack.frames])
    if indices is None:
        indices = np.arange(len(stack))
    h, w = frames.shape[1:]
    cx = _round_half_down(center_px[0])
    cy = _round_half_down(center_px[1])
    if (cx - half_window < 0 or cx + half_window >= w
            or cy - half_window < 0 or cy + half_window >= h):
        raise SiteWindowError(f"site at {center_px} too close to the frame edge")
    window = frames[indices][:, cy - half_window:cy + half_window + 1,
                             cx - half_window:cx + half_window + 1]
    return window.sum(axis=(1, 2))


def laser_background(stack: FrameStack, smooth_sigma_px: float = 2.0,
                     smoothed_frames: np.ndarray | None = None) -> np.ndarray:
    """Per-frequency mean over all pixels of the smoothed frame."""
    if len(stack) == 0:
        raise ValueError("empty stack")
    if smoothed_frames is not None:
        return smoothed_frames.mean(axis=(1, 2))
    return np.array([gaussian_smooth(f, smooth_sigma_px).mean() for f in stack.frames])


def normalize(raw: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Element-wise division of the raw trace by the background trace."""
    raw = np.asarray(raw, dtype=float)
    background = np.asarray(background, dtype=float)
    if raw.shape != background.shape:
        raise ValueError("trace length mismatch")
    if np.any(background <= 0):
        raise DegenerateBackgroundError("background trace has non-positive entries")
    return raw / background


def _pseudo_voigt(nu, center, fwhm, eta, amplitude):
    u = 2.0 * (nu - center) / fwhm
    lor = 1.0 / (1.0 + u**2)
    gau = np.exp(-np.log(2.0) * u**2)
    return amplitude * (eta * lor + (1.0 - eta) * gau)


def fit_peaks(frequencies_thz, trace, prominence_k: float = 5.0,
              max_peaks: int = 8, window_fwhms: float = 5.0) -> tuple[list[PeakFit], int]:
    """Locate and fit pseudo-Voigt lines in a spectrum.

    Returns (fits, n_dropped).  Peaks are local maxima whose prominence
    exceeds prominence_k robust sigmas of the trace; peaks with overlapping
    fit windows (+- window_fwhms estimated widths) share a joint fit with a
    common baseline.  Fits run in MHz offsets from the scan center to keep
    the optimizer conditioned at hundreds of THz.
    """
    freqs = np.asarray(frequencies_thz, dtype=float)
    trace = np.asarray(trace, dtype=float)
    if freqs.shape != trace.shape:
        raise ValueError("frequency/trace mismatch")
    if len(freqs) < 10:
        raise ValueError("need at least 10 samples to fit peaks")
    order = np.argsort(freqs)
    freqs, trace = freqs[order], trace[order]
    f0 = float(freqs[len(freqs) // 2])
    nu = (freqs - f0) * MHZ_PER_THZ
    step = float(np.median(np.diff(nu)))

    # noise scale from the first-differenced (detrended) trace, so wide lines
    # do not inflate it; the relative floor keeps noiseless traces from
    # admitting tiny ripples
    sigma = robust_sigma(np.diff(trace)) / np.sqrt(2.0)
    baseline_med = float(np.median(trace))
    prominence = max(prominence_k * sigma, 0.05 * (float(trace.max()) - baseline_med))
    if prominence <= 0:
        return [], 0
    peaks_idx, _ = find_peaks(trace, prominence=prominence)
    if len(peaks_idx) == 0:
        return [], 0
    heights = trace[peaks_idx]
    keep = np.argsort(heights)[::-1][:max_peaks]
    peaks_idx = np.sort(peaks_idx[keep])

    widths_samples = peak_widths(trace, peaks_idx, rel_height=0.5)[0]
    widths_mhz = np.maximum(widths_samples * step, step)

    # group peaks whose fit windows overlap
    lo_edges = nu[peaks_idx] - window_fwhms * widths_mhz
    hi_edges = nu[peaks_idx] + window_fwhms * widths_mhz
    groups: list[list[int]] = [[0]] if len(peaks_idx) else []
    for i in range(1, len(peaks_idx)):
        if lo_edges[i] <= hi_edges[groups[-1][-1]]:
            groups[-1].append(i)
        else:
            groups.append([i])

    fits: list[PeakFit] = []
    dropped = 0
    baseline0 = float(np.median(trace))
    for group in groups:
        sel = (nu >= min(lo_edges[i] for i in group)) & \
              (nu <= max(hi_edges[i] for i in group))
        if sel.sum() < 4 * len(group) + 1:
            sel = np.ones_like(nu, dtype=bool)
        nu_g, y_g = nu[sel], trace[sel]
        k = len(group)
        p0, lo_b, hi_b = [], [], []
        for i in group:
            c0 = float(nu[peaks_idx[i]])
            w0 = float(widths_mhz[i])
            a0 = float(trace[peaks_idx[i]] - baseline0)
            p0 += [c0, w0, 0.5, max(a0, sigma)]
            lo_b += [nu_g.min() - step, step / 2.0, 0.0, 0.0]
            hi_b += [nu_g.max() + step, float(np.ptp(nu_g)) + step, 1.0, np.inf]
        p0.append(baseline0)
        lo_b.append(-np.inf)
        hi_b.append(np.inf)

        def model(p):
            out = np.full_like(nu_g, p[-1])
            for j in range(k):
                c, w, eta, amp = p[4 * j:4 * j + 4]
                out = out + _pseudo_voigt(nu_g, c, w, eta, amp)
            return out

        res = least_squares(lambda p: model(p) - y_g, p0, bounds=(lo_b, hi_b),
                            xtol=1e-10, ftol=1e-10, max_nfev=400 * (k + 1))
        if not res.success:
            dropped += k
            continue
        rnorm = float(np.linalg.norm(res.fun))
        for j in range(k):
            c, w, eta, amp = res.x[4 * j:4 * j + 4]
            fits.append(PeakFit(center_thz=f0 + c / MHZ_PER_THZ, fwhm_mhz=float(w),
                                eta=float(eta), amplitude=float(amp),
                                baseline=float(res.x[-1]), residual_norm=rnorm))
    fits.sort(key=lambda p: p.center_thz)
    return fits, dropped


def filter_peaks(peaks, min_fwhm_mhz: float | None = None,
                 max_fwhm_mhz: float = 2000.0) -> list[PeakFit]:
    """Keep peaks with min_fwhm < FWHM < max_fwhm (defaults: the 1.7 ns
    lifetime limit and 2 GHz)."""
    if min_fwhm_mhz is None:
        min_fwhm_mhz = lifetime_limit_mhz()
    if min_fwhm_mhz >= max_fwhm_mhz:
        raise ValueError("min_fwhm must be below max_fwhm")
    return [p for p in peaks if min_fwhm_mhz < p.fwhm_mhz < max_fwhm_mhz]


def run_widefield_pipeline(stack: FrameStack,
                           config: PipelineConfig | None = None) -> PeakCatalog:
    """Full stack-to-catalog extraction.

    Per-site failures (edge windows, non-convergent fits) are counted and
    skipped, never fatal.  The catalog row order is (band, site) and is
    deterministic for a fixed stack and config, independent of threading.
    """
    config = config or PipelineConfig()
    frames = stack.frames
    if len(stack) and not np.allclose(stack.exposures_s, stack.exposures_s[0]):
        frames = frames / stack.exposures_s[:, None, None]
    smoothed = np.stack([gaussian_smooth(f, config.smooth_sigma_px) for f in frames])
    background = smoothed.mean(axis=(1, 2))

    rows: list[CatalogRow] = []
    spectra: list[PLESpectrum] = []
    n_sites = 0
    n_skipped = 0
    n_dropped = 0

    def process_site(args):
        band_idx, band, site_idx, site = args
        site_id = f"b{band_idx:03d}s{site_idx:03d}"
        try:
            raw = extract_intensity(stack, site.center_px,
                                    half_window=config.site_half_window,
                                    smoothed_frames=smoothed, indices=band.indices)
        except SiteWindowError:
            return site_id, None, None, 0
        bg = background[band.indices]
        if config.normalize:
            corrected = normalize(raw, bg)
        else:
            corrected = raw
        try:
            fits, dropped = fit_peaks(stack.frequencies_thz[band.indices], corrected,
                                      prominence_k=config.peak_prominence_k)
        except ValueError:
            return site_id, None, None, 0
        fits = filter_peaks(fits, config.min_fwhm_mhz, config.max_fwhm_mhz)
        spectrum = None
        if config.keep_spectra:
            spectrum = PLESpectrum(site_id=site_id,
                                   frequencies_thz=stack.frequencies_thz[band.indices],
                                   raw=raw, background=bg, corrected=corrected)
        return site_id, (site, band), (fits, spectrum), dropped

    tasks = []
    for band_idx, band in enumerate(section_bands(stack, config.band_width_ghz)):
        aggregate = band_aggregate(stack, band, smoothed_frames=smoothed)
        sites = detect_spots(aggregate, sigma_lp=config.detect_sigma_lp,
                             sigma_hp=config.detect_sigma_hp,
                             threshold_k=config.detect_threshold_k,
                             min_separation=config.min_separation_px,
                             fit_window=config.fit_window_px)
        for site_idx, site in enumerate(sites):
            tasks.append((band_idx, band, site_idx, site))

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(process_site, tasks))
    else:
        results = [process_site(t) for t in tasks]

    for (band_idx, band, site_idx, site), (site_id, ctx, payload, dropped) in zip(tasks, results):
        n_sites += 1
        n_dropped += dropped
        if ctx is None:
            n_skipped += 1
            continue
        fits, spectrum = payload
        if spectrum is not None:
            spectra.append(spectrum)
        for fit in fits:
            rows.append(CatalogRow(site_id=site_id,
                                   x_px=site.center_px[0], y_px=site.center_px[1],
                                   band_lo_thz=band.lo_thz, band_hi_thz=band.hi_thz,
                                   center_thz=fit.center_thz, fwhm_mhz=fit.fwhm_mhz,
                                   eta=fit.eta, amplitude=fit.amplitude,
                                   baseline=fit.baseline, residual=fit.residual_norm))
    return PeakCatalog(rows=rows, n_sites=n_sites, n_skipped_sites=n_skipped,
                       n_dropped_peaks=n_dropped, config=config, spectra=spectra)


def fit_confocal_ple(frequencies_thz, trace, model: str = "nv-two-peak",
                     prominence_k: float = 5.0):
    """Fit a pointwise-scanned spectrum.

    For the two-line model, returns (labels, fits) where the labels hold the
    mean frequency and the line splitting; fewer than two resolvable peaks
    is a model mismatch.  The generic model returns (None, fits).
    """
    fits, _ = fit_peaks(frequencies_thz, trace, prominence_k=prominence_k)
    if model == "generic":
        return None, fits
    if model != "nv-two-peak":
        raise ValueError(f"unknown model {model!r}")
    if len(fits) < 2:
        raise ModelMismatchError(f"two-line model needs 2 peaks, found {len(fits)}")
    strongest = sorted(fits, key=lambda p: -p.amplitude)[:2]
    labels = nv_labels(strongest[0].center_thz, strongest[1].center_thz)
    return labels, fits
