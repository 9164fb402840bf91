"""Post-processing of trajectory records: ensemble means, waiting times, spectra, paired comparisons."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .engine import TrajectoryRecord


class GridMismatchError(ValueError):
    """Records or series do not share a common time or frequency grid."""


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    normalized_density: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])


@dataclass(frozen=True)
class SpectrumSeries:
    frequencies: np.ndarray
    power: np.ndarray

    def integrated_power(self) -> float:
        """Trapezoidal integral of ``power`` over the frequency grid."""
        return float(np.trapezoid(self.power, self.frequencies))

    def band_power(self, lo: float, hi: float) -> float:
        mask = (self.frequencies >= lo) & (self.frequencies <= hi)
        if mask.sum() < 2:
            raise ValueError(f"band [{lo}, {hi}] holds fewer than two grid points")
        return float(np.trapezoid(self.power[mask], self.frequencies[mask]))


@dataclass(frozen=True)
class PairedReport:
    delta_p: np.ndarray
    matched: np.ndarray
    max_abs_delta: float
    mean_abs_delta: float
    match_fraction: float


def ensemble_average(
    records: Sequence[TrajectoryRecord],
    selector: Callable[[TrajectoryRecord], np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise mean and standard error of a per-record series.

    ``selector`` defaults to the conditioned ``sigma_z`` series. Records must
    share their sampling grid.
    """
    if len(records) < 2:
        raise ValueError("an ensemble average needs at least two records")
    if selector is None:
        selector = _sigma_z
    rows = [np.asarray(selector(r)) for r in records]
    first_times = records[0].sigma_z_times if selector is _sigma_z else None
    shape = rows[0].shape
    for r, row in zip(records, rows):
        if row.shape != shape:
            raise GridMismatchError(f"series of shape {row.shape} does not match {shape}")
        if first_times is not None and not np.array_equal(r.sigma_z_times, first_times):
            raise GridMismatchError("records are sampled on different time grids")
    return ensemble_average_array(np.stack(rows))


def ensemble_average_array(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error along axis 0."""
    samples = np.asarray(samples)
    n = samples.shape[0]
    if n < 2:
        raise ValueError("an ensemble average needs at least two samples")
    return samples.mean(axis=0), samples.std(axis=0, ddof=1) / np.sqrt(n)


def _sigma_z(record: TrajectoryRecord) -> np.ndarray:
    return record.sigma_z_series


def waiting_times(record_or_times) -> np.ndarray:
    """Intervals between successive detections; the wait from t = 0 to the first click is dropped."""
    if isinstance(record_or_times, TrajectoryRecord):
        times = record_or_times.detection_times
    else:
        times = np.asarray(record_or_times, dtype=float)
    if times.size < 2:
        return np.empty(0)
    return np.diff(times)


def pooled_waiting_times(records: Sequence[TrajectoryRecord]) -> np.ndarray:
    parts = [waiting_times(r) for r in records]
    return np.concatenate(parts) if parts else np.empty(0)


def waiting_time_histogram(
    waits: np.ndarray,
    gamma: float = 1.0,
    bins: int = 100,
    t_max: float | None = None,
) -> Histogram:
    """Histogram over ``[0, t_max]`` (default ``10 / gamma``) normalized to unit area.

    Waits beyond ``t_max`` are excluded from both counts and normalization.
    """
    t_max = 10.0 / gamma if t_max is None else t_max
    counts, edges = np.histogram(np.asarray(waits, dtype=float), bins=bins, range=(0.0, t_max))
    total = counts.sum()
    widths = np.diff(edges)
    density = counts / (total * widths) if total > 0 else np.zeros(bins)
    return Histogram(edges, counts, density)


def ks_compare(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and p-value."""
    res = stats.ks_2samp(a, b)
    return float(res.statistic), float(res.pvalue)


def two_sided_correlation(taus: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Extend ``C`` on ``tau >= 0`` (starting at 0) to negative lags with ``C(-tau) = conj C(tau)``."""
    taus = np.asarray(taus, dtype=float)
    C = np.asarray(C, dtype=complex)
    _check_uniform(taus)
    if taus[0] != 0.0:
        raise GridMismatchError("the correlation grid must start at tau = 0")
    full_t = np.concatenate([-taus[:0:-1], taus])
    full_c = np.concatenate([np.conj(C[:0:-1]), C])
    return full_t, full_c


def spectrum(taus: np.ndarray, C: np.ndarray, hann: bool = False) -> SpectrumSeries:
    """``S(omega) = int dtau exp(i omega tau) C(tau)`` by FFT; real part returned.

    ``C`` is sampled on a uniform grid ``tau = 0, dtau, ...`` and is extended
    to negative lags by Hermitian symmetry. The sum uses trapezoid end weights
    so that ``int S domega = 2 pi C(0)`` up to the grid truncation.
    """
    full_t, full_c = two_sided_correlation(taus, C)
    dtau = full_t[1] - full_t[0]
    m = full_t.size
    weights = np.ones(m)
    weights[0] = weights[-1] = 0.5
    if hann:
        weights = weights * np.hanning(m + 2)[1:-1]
    samples = full_c * weights
    # the e^{+i omega tau} convention is an inverse DFT up to the factor m
    omega = 2 * np.pi * np.fft.fftfreq(m, d=dtau)
    # tau_k = tau_0 + k dtau, so the tau_0 offset contributes a phase
    S = m * np.fft.ifft(samples) * np.exp(1j * omega * full_t[0]) * dtau
    order = np.argsort(omega)
    return SpectrumSeries(omega[order], np.real(S[order]))


def _check_uniform(grid: np.ndarray, rtol: float = 1e-9) -> None:
    if grid.size < 2:
        raise GridMismatchError("need at least two grid points")
    d = np.diff(grid)
    if np.any(np.abs(d - d[0]) > rtol * abs(d[0])):
        raise GridMismatchError("grid is not uniform")


def find_peaks(series: SpectrumSeries, min_prominence: float = 0.0) -> np.ndarray:
    """Frequencies of strict local maxima of ``power`` above ``min_prominence``."""
    p = series.power
    idx = np.flatnonzero((p[1:-1] > p[:-2]) & (p[1:-1] > p[2:])) + 1
    idx = idx[p[idx] > min_prominence]
    return series.frequencies[idx]


def sideband_powers(series: SpectrumSeries, center: float, half_width: float) -> tuple[float, float]:
    """Integrated power in ``[±center - half_width, ±center + half_width]`` as ``(lower, upper)``."""
    lower = series.band_power(-center - half_width, -center + half_width)
    upper = series.band_power(center - half_width, center + half_width)
    return lower, upper


def paired_compare(nmqt: TrajectoryRecord, esm: TrajectoryRecord) -> PairedReport:
    """Step-by-step comparison of two records drawn from the same random stream.

    Only the common prefix of steps is compared, since a record may stop
    early at a detection cap.
    """
    if nmqt.seed != esm.seed or nmqt.traj_index != esm.traj_index:
        raise GridMismatchError("records come from different random streams")
    if not np.isclose(nmqt.dt, esm.dt, rtol=1e-12, atol=0.0):
        raise GridMismatchError(f"step sizes differ: {nmqt.dt} vs {esm.dt}")
    n = min(len(nmqt.p_click_series), len(esm.p_click_series))
    delta = np.asarray(nmqt.p_click_series[:n]) - np.asarray(esm.p_click_series[:n])
    matched = np.asarray(nmqt.outcomes[:n]) == np.asarray(esm.outcomes[:n])
    abs_delta = np.abs(delta)
    return PairedReport(
        delta_p=delta,
        matched=matched,
        max_abs_delta=float(abs_delta.max()) if n else 0.0,
        mean_abs_delta=float(abs_delta.mean()) if n else 0.0,
        match_fraction=float(matched.mean()) if n else 1.0,
    )


def survival_curve(records: Sequence[TrajectoryRecord], times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of records without a detection up to each time, and its binomial standard error."""
    first = np.array([r.detection_times[0] if len(r.detection_time_indices) else np.inf for r in records])
    times = np.asarray(times, dtype=float)
    frac = (first[None, :] > times[:, None]).mean(axis=1)
    se = np.sqrt(frac * (1 - frac) / len(records))
    return frac, se
