"""Distribution statistics: Gaussian-kernel density estimation, mixture
fitting on the density curve, binned linewidth summaries, the
confocal-versus-widefield timing model, and Hartigan's dip statistic
with a uniform-null bootstrap p-value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import find_peaks

from .errors import FitError

_SQRT2PI = float(np.sqrt(2.0 * np.pi))


@dataclass
class KDE:
    """A kernel density estimate evaluated on a fixed grid."""

    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


@dataclass(frozen=True)
class GaussianComponent:
    center: float
    sigma: float
    weight: float


@dataclass(frozen=True)
class TimingModel:
    """Per-step durations (seconds) and scan dimensions of a PLE run."""

    t_move: float
    t_tune_coarse: float
    t_repump: float
    t_tune_fine: float
    t_collect_confocal: float
    t_collect_widefield: float
    m_sites: int
    n_bins: int

    def __post_init__(self):
        times = (self.t_move, self.t_tune_coarse, self.t_repump,
                 self.t_tune_fine, self.t_collect_confocal, self.t_collect_widefield)
        if any(t < 0 for t in times):
            raise ValueError("times must be non-negative")
        if self.m_sites < 1 or self.n_bins < 1:
            raise ValueError("m_sites and n_bins must be >= 1")


@dataclass
class LinewidthBin:
    lo_thz: float
    hi_thz: float
    count: int
    kept: bool
    mean_fwhm_mhz: float | None
    sem_fwhm_mhz: float | None


def kde(samples, bandwidth: float, grid=None, pad_bandwidths: float = 6.0,
        grid_size: int = 1024) -> KDE:
    """Normalized Gaussian-kernel density estimate.

    Each sample contributes a unit-mass Gaussian of width ``bandwidth``; the
    result integrates to one.  The default grid spans the samples padded by
    pad_bandwidths on each side.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("kde needs at least one sample")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if grid is None:
        grid = np.linspace(samples.min() - pad_bandwidths * bandwidth,
                           samples.max() + pad_bandwidths * bandwidth, grid_size)
    else:
        grid = np.asarray(grid, dtype=float)
    z = (grid[:, None] - samples[None, :]) / bandwidth
    density = np.exp(-0.5 * z**2).sum(axis=1) / (samples.size * bandwidth * _SQRT2PI)
    return KDE(grid=grid, density=density, bandwidth=bandwidth)


def silverman_bandwidth(samples) -> float:
    """Rule-of-thumb bandwidth; degenerate samples fall back to a tiny width."""
    samples = np.asarray(samples, dtype=float)
    sd = float(np.std(samples))
    if sd == 0:
        return max(1e-9, 1e-9 * abs(float(samples[0])))
    return 1.06 * sd * samples.size ** (-0.2)


def fit_gaussians(density_or_samples, k: int, bandwidth: float | None = None):
    """Least-squares fit of a k-component Gaussian mixture to a density curve.

    Accepts a KDE directly, or raw samples plus a bandwidth to build one.
    Components come back sorted by center.  Initial centers are the top
    density peaks (quantiles when fewer peaks than components exist).
    """
    if isinstance(density_or_samples, KDE):
        est = density_or_samples
    else:
        if bandwidth is None:
            bandwidth = silverman_bandwidth(density_or_samples)
        est = kde(density_or_samples, bandwidth)
    if k < 1:
        raise ValueError("k must be >= 1")

    # standardized coordinates keep the optimizer conditioned when the grid
    # sits at hundreds of THz with MHz-scale structure
    x0 = float(est.grid.mean())
    scale = float(est.grid.std()) or 1.0
    z = (est.grid - x0) / scale
    y = est.density * scale

    peaks, props = find_peaks(y, prominence=0.02 * float(y.max()))
    order = np.argsort(props["prominences"])[::-1] if len(peaks) else []
    centers0 = [z[peaks[i]] for i in order[:k]]
    while len(centers0) < k:
        q = (len(centers0) + 1.0) / (k + 1.0)
        centers0.append(float(np.interp(q, np.cumsum(y) / y.sum(), z)))
    sigma0 = max(est.bandwidth / scale, float(np.std(z)) / (2.0 * k))
    p0 = []
    for c in sorted(centers0):
        p0 += [c, sigma0, 1.0 / k]

    def unpack(p):
        arr = np.asarray(p).reshape(k, 3)
        return arr[:, 0], arr[:, 1], arr[:, 2]

    def model(p):
        c, s, w = unpack(p)
        u = (z[:, None] - c[None, :]) / s[None, :]
        return (w[None, :] * np.exp(-0.5 * u**2) / (s[None, :] * _SQRT2PI)).sum(axis=1)

    lo = [-np.inf, 1e-9, 0.0] * k
    hi = [np.inf, np.inf, np.inf] * k
    res = least_squares(lambda p: model(p) - y, p0, bounds=(lo, hi),
                        xtol=1e-12, ftol=1e-12, max_nfev=2000)
    if not res.success:
        raise FitError(f"{k}-Gaussian mixture fit did not converge")
    c, s, w = unpack(res.x)
    comps = [GaussianComponent(center=float(ci * scale + x0),
                               sigma=float(si * scale), weight=float(wi))
             for ci, si, wi in zip(c, s, w)]
    comps.sort(key=lambda g: g.center)
    return comps


def binned_linewidths(centers_thz, fwhms_mhz, bin_width_ghz: float = 20.0,
                      min_count: int = 10, kde_bandwidth_mhz: float | None = None):
    """Per-frequency-bin linewidth summaries.

    Peaks are grouped into contiguous bins of bin_width_ghz starting at the
    lowest center.  Bins holding at least min_count peaks get a mean from a
    single-Gaussian fit to the linewidth density and an error bar equal to
    the standard deviation of the mean; thinner bins are flagged discarded.
    """
    if bin_width_ghz <= 0:
        raise ValueError("bin_width_ghz must be positive")
    centers = np.asarray(centers_thz, dtype=float)
    fwhms = np.asarray(fwhms_mhz, dtype=float)
    if centers.shape != fwhms.shape:
        raise ValueError("centers and fwhms must align")
    if centers.size == 0:
        return []
    width_thz = bin_width_ghz / 1000.0
    lo = centers.min()
    n_bins = int(np.floor((centers.max() - lo) / width_thz)) + 1
    idx = np.minimum(((centers - lo) / width_thz).astype(int), n_bins - 1)
    out = []
    for b in range(n_bins):
        sel = fwhms[idx == b]
        rec = LinewidthBin(lo_thz=lo + b * width_thz, hi_thz=lo + (b + 1) * width_thz,
                           count=int(sel.size), kept=sel.size >= min_count,
                           mean_fwhm_mhz=None, sem_fwhm_mhz=None)
        if rec.kept:
            bw = kde_bandwidth_mhz or silverman_bandwidth(sel)
            if np.ptp(sel) == 0:
                rec.mean_fwhm_mhz = float(sel[0])
                rec.sem_fwhm_mhz = 0.0
            else:
                comp = fit_gaussians(kde(sel, bw), 1)[0]
                rec.mean_fwhm_mhz = comp.center
                rec.sem_fwhm_mhz = float(np.std(sel, ddof=1) / np.sqrt(sel.size))
        out.append(rec)
    return out


def timing(model: TimingModel) -> tuple[float, float, float]:
    """(confocal total, widefield total, confocal/widefield ratio) in seconds."""
    per_bin_c = model.t_tune_fine + model.t_collect_confocal
    per_bin_w = model.t_tune_fine + model.t_collect_widefield
    t_confocal = model.m_sites * (model.t_move + model.t_tune_coarse + model.t_repump
                                  + model.n_bins * per_bin_c)
    t_widefield = (model.t_tune_coarse + model.t_repump
                   + model.n_bins * per_bin_w)
    return t_confocal, t_widefield, t_confocal / t_widefield


def speedup_factor(n_emitters: float, gamma_mhz: float, big_gamma_mhz: float,
                   t_collect_confocal: float, t_collect_widefield: float) -> float:
    """Predicted widefield-over-confocal throughput gain:
    N * (homogeneous linewidth / inhomogeneous spread) * (collection-time ratio)."""
    if min(n_emitters, gamma_mhz, big_gamma_mhz,
           t_collect_confocal, t_collect_widefield) <= 0:
        raise ValueError("all speedup factors must be positive")
    return n_emitters * (gamma_mhz / big_gamma_mhz) * (t_collect_confocal / t_collect_widefield)


# ---------------------------------------------------------------------------
# Hartigan's dip statistic

def _lower_hull(xs, ys, lo, hi):
    idx = [lo]
    for i in range(lo + 1, hi + 1):
        while len(idx) >= 2:
            a, b = idx[-2], idx[-1]
            if (ys[b] - ys[a]) * (xs[i] - xs[b]) >= (ys[i] - ys[b]) * (xs[b] - xs[a]):
                idx.pop()
            else:
                break
        idx.append(i)
    return idx


def _upper_hull(xs, ys, lo, hi):
    idx = [lo]
    for i in range(lo + 1, hi + 1):
        while len(idx) >= 2:
            a, b = idx[-2], idx[-1]
            if (ys[b] - ys[a]) * (xs[i] - xs[b]) <= (ys[i] - ys[b]) * (xs[b] - xs[a]):
                idx.pop()
            else:
                break
        idx.append(i)
    return idx


def _hull_value(xs, ys, verts, xq):
    for a, b in zip(verts[:-1], verts[1:]):
        if xs[a] <= xq <= xs[b]:
            if xs[b] == xs[a]:
                return min(ys[a], ys[b])
            return ys[a] + (ys[b] - ys[a]) * (xq - xs[a]) / (xs[b] - xs[a])
    return ys[verts[-1]]


def dip_statistic(samples) -> float:
    """Sup-norm distance from the empirical CDF to the nearest unimodal CDF.

    Iteratively shrinks a modal interval: within it the convex minorant of
    the ECDF's lower corners and the concave majorant of its upper corners
    must stay within the working dip of each other; outside it the tail
    deviation from the hulls accumulates into the dip.  Exact, including
    tied samples (validated against an LP formulation in the test suite).
    """
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    if n < 1:
        raise ValueError("empty sample")
    if n == 1 or x[0] == x[-1]:
        return 0.0
    caps = np.arange(n) / n          # ECDF left limits
    floors = np.arange(1, n + 1) / n  # ECDF values
    low, high = 0, n - 1
    dip = 1.0 / n                     # gap units; halved on return

    while True:
        gcm = _lower_hull(x, caps, low, high)
        lcm = _upper_hull(x, floors, low, high)

        d = 0.0
        modal = (low, high)
        for v in lcm:
            if v in (low, high):
                continue
            dx = floors[v] - _hull_value(x, caps, gcm, x[v])
            if dx >= d:
                d = dx
                modal = (max(g for g in gcm if g <= v), v)
        for u in gcm:
            if u in (low, high):
                continue
            dx = _hull_value(x, floors, lcm, x[u]) - caps[u]
            if dx > d:
                d = dx
                modal = (u, min(l for l in lcm if l >= u))

        if d < dip:
            break

        new_low, new_high = modal
        dip_l = 0.0
        for a, b in zip(gcm[:-1], gcm[1:]):
            if b <= new_low:
                seg = 1.0 / n
                if b - a >= 1 and x[b] > x[a]:
                    jj = np.arange(a, b + 1)
                    chord = caps[a] + (caps[b] - caps[a]) * (x[jj] - x[a]) / (x[b] - x[a])
                    seg = max(seg, float(np.max(floors[jj] - chord)))
                dip_l = max(dip_l, seg)
        dip_u = 0.0
        for a, b in zip(lcm[:-1], lcm[1:]):
            if a >= new_high:
                seg = 1.0 / n
                if b - a >= 1 and x[b] > x[a]:
                    jj = np.arange(a, b + 1)
                    chord = floors[a] + (floors[b] - floors[a]) * (x[jj] - x[a]) / (x[b] - x[a])
                    seg = max(seg, float(np.max(chord - caps[jj])))
                dip_u = max(dip_u, seg)
        dip = max(dip, dip_l, dip_u)

        if (new_low, new_high) == (low, high):
            break
        low, high = new_low, new_high

    return dip / 2.0


def dip_pvalue(samples, n_boot: int = 500, seed: int = 0) -> tuple[float, float]:
    """(dip, p-value) of the sample against a uniform unimodal null.

    The null distribution is the dip of uniform samples of the same size;
    the p-value uses the add-one bootstrap estimator.
    """
    samples = np.asarray(samples, dtype=float)
    observed = dip_statistic(samples)
    rng = np.random.default_rng(seed)
    exceed = sum(dip_statistic(rng.uniform(size=samples.size)) >= observed
                 for _ in range(n_boot))
    return observed, (1.0 + exceed) / (n_boot + 1.0)
