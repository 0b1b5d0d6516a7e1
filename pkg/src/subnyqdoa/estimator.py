"""Joint carrier-frequency and DOA recovery from sub-Nyquist snapshots.

Pipeline: sample covariance, eigendecomposition, information-criterion
model order, per-subband search of the Kronecker-structured manifold,
matched-filter periodogram for the in-subband carrier offset, then
angle recovery by phase inversion.  Every estimate is born inside one
subband, so frequency/angle association needs no pair matching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import InsufficientDataError, OutOfRangeError
from .model import (
    ArrayGeometry,
    SamplingConfig,
    doa_from_phase,
    modulation_matrix,
    steering_from_phases,
)
from .synth import SnapshotBlock

_EIG_FLOOR_REL = 1e-15


@dataclass(frozen=True)
class Estimate:
    """One recovered source."""

    subband: int          # 1-based
    phase: float          # spatial phase, radians
    freq: float           # carrier frequency, Hz
    theta_deg: float      # NaN when the phase has no physical angle at freq
    peak_height: float    # pseudo-spectrum value at the refined phase


@dataclass(frozen=True)
class EstimationResult:
    estimates: tuple[Estimate, ...]
    k_detected: int
    mismatch: bool        # detected peak count differs from k_detected
    eigenvalues: np.ndarray  # descending


@dataclass(frozen=True)
class EstimatorConfig:
    """Knobs of :func:`estimate_all`.

    ``known_count=None`` selects automatic model order (MDL by default);
    an integer pins the source count and switches peak selection to the
    globally largest ``known_count`` refined peaks.
    """

    known_count: int | None = None
    criterion: str = "mdl"
    grid_points: int = 4096
    refine_tol: float = 1e-7
    peak_threshold: float = 10.0  # times the per-subband median pseudo-spectrum


@dataclass(frozen=True)
class SearchGrid:
    """Uniform spatial-phase grid with a refinement tolerance."""

    phi_values: np.ndarray
    refine_tol: float = 1e-7

    def __post_init__(self):
        if len(self.phi_values) < 3:
            raise ValueError("SearchGrid: need at least 3 grid points")

    @property
    def step(self) -> float:
        return float(self.phi_values[1] - self.phi_values[0])

    @classmethod
    def for_array(
        cls,
        geometry: ArrayGeometry,
        points: int = 4096,
        refine_tol: float = 1e-7,
    ) -> "SearchGrid":
        """Grid over ``[-pi*spacing, pi*spacing)``.

        With integer sensor positions the manifold is 2*pi-periodic in
        the phase, so for unit spacing this covers every distinguishable
        steering vector exactly once.
        """
        r = geometry.spacing
        values = -math.pi * r + (2.0 * math.pi * r / points) * np.arange(points)
        return cls(values, refine_tol)

    def validate_for(self, geometry: ArrayGeometry) -> None:
        limit = math.pi / (10.0 * geometry.aperture)
        if self.step > limit:
            raise ValueError(
                f"SearchGrid: step {self.step:.3e} too coarse for aperture "
                f"{geometry.aperture} (limit {limit:.3e}); peaks may be skipped"
            )


@dataclass(frozen=True)
class SubbandPeak:
    subband: int
    phase: float
    height: float


def _data_matrix(snapshots) -> np.ndarray:
    if isinstance(snapshots, SnapshotBlock):
        return snapshots.data
    return np.asarray(snapshots)


def sample_covariance(snapshots) -> np.ndarray:
    """Hermitian sample covariance ``Y Y^H / T`` of stacked snapshots."""
    y = _data_matrix(snapshots)
    if y.ndim != 2 or y.shape[1] < 1:
        raise ValueError("sample_covariance: expected a matrix with >= 1 column")
    r = y @ y.conj().T / y.shape[1]
    return (r + r.conj().T) / 2.0


def _order_statistics(eigenvalues: np.ndarray, n_snapshots: int) -> np.ndarray:
    """Log arithmetic/geometric mean ratio statistic for each candidate order."""
    p = eigenvalues.size
    stats = np.empty(p)
    for k in range(p):
        tail = eigenvalues[k:]
        am = float(np.mean(tail))
        gm = float(np.exp(np.mean(np.log(tail))))
        stats[k] = n_snapshots * (p - k) * math.log(max(am / gm, 1.0))
    return stats


def estimate_source_count(
    eigenvalues, n_snapshots: int, criterion: str = "mdl"
) -> int:
    """Signal-subspace dimension from descending covariance eigenvalues.

    MDL (default, consistent) or AIC.  Eigenvalues are floored at a tiny
    fraction of the largest so that noise-free covariances behave.
    """
    eigs = np.asarray(eigenvalues, dtype=float)
    if eigs.ndim != 1 or eigs.size < 2:
        raise ValueError("estimate_source_count: need at least 2 eigenvalues")
    if n_snapshots < 1:
        raise ValueError("estimate_source_count: n_snapshots must be >= 1")
    if np.any(np.diff(eigs) > 1e-9 * max(abs(eigs[0]), 1e-300)):
        raise ValueError("estimate_source_count: eigenvalues must be descending")
    if eigs[0] < 0 or not np.all(np.isfinite(eigs)):
        raise ValueError("estimate_source_count: eigenvalues must be finite and >= 0")
    if eigs[0] == 0.0:
        return 0
    eigs = np.maximum(eigs, eigs[0] * _EIG_FLOOR_REL)
    p = eigs.size
    stats = _order_statistics(eigs, n_snapshots)
    k = np.arange(p)
    if criterion == "mdl":
        penalty = 0.5 * k * (2 * p - k) * math.log(n_snapshots)
    elif criterion == "aic":
        penalty = k * (2.0 * p - k)
    else:
        raise ValueError(f"estimate_source_count: unknown criterion {criterion!r}")
    return int(np.argmin(stats + penalty))


def noise_subspace(covariance: np.ndarray, n_sources: int) -> np.ndarray:
    """Orthonormal eigenbasis of the ``dim - n_sources`` smallest eigenvalues."""
    covariance = np.asarray(covariance)
    dim = covariance.shape[0]
    if covariance.shape != (dim, dim):
        raise ValueError("noise_subspace: covariance must be square")
    if not 0 <= n_sources < dim:
        raise ValueError(
            f"noise_subspace: need 0 <= n_sources < {dim}, got {n_sources}"
        )
    _, vecs = np.linalg.eigh(covariance)
    return vecs[:, : dim - n_sources]


def _subband_projector(noise_basis: np.ndarray, branch_col: np.ndarray, m: int):
    """Collapse the branch dimension: returns ``W`` with ``En^H(a(x)b) = W @ a``."""
    r = noise_basis.shape[1]
    folded = noise_basis.conj().reshape(m, -1, r)
    return np.einsum("mpr,p->rm", folded, branch_col)


def pseudo_spectrum(
    noise_basis: np.ndarray,
    geometry: ArrayGeometry,
    sampling: SamplingConfig,
    subband: int,
    phi_values: np.ndarray,
) -> np.ndarray:
    """MUSIC pseudo-spectrum of one subband over an array of phases.

    ``1 / ||En^H g(phi)||^2`` with the manifold vector normalized to
    unit norm.
    """
    b = modulation_matrix(sampling.offsets, sampling.reduction)
    w = _subband_projector(noise_basis, b[:, subband - 1], geometry.n_sensors)
    a = steering_from_phases(geometry.position_array(), np.asarray(phi_values))
    norm2 = geometry.n_sensors * float(np.sum(np.abs(b[:, subband - 1]) ** 2))
    q = np.sum(np.abs(w @ a) ** 2, axis=0) / norm2
    return 1.0 / np.maximum(q, 1e-300)


def _local_maxima(values: np.ndarray, circular: bool) -> list[int]:
    n = values.size
    idx = []
    for i in range(n):
        if circular:
            left, right = values[(i - 1) % n], values[(i + 1) % n]
        else:
            left = values[i - 1] if i > 0 else -np.inf
            right = values[i + 1] if i < n - 1 else -np.inf
        if values[i] > left and values[i] >= right:
            idx.append(i)
    return idx


def _refine_peak(q_of, phi_values: np.ndarray, heights: np.ndarray, i: int,
                 circular: bool, refine_tol: float) -> tuple[float, float]:
    """Parabolic seed plus bounded minimization of the null spectrum."""
    n = phi_values.size
    step = float(phi_values[1] - phi_values[0])
    phi0 = float(phi_values[i])
    if circular:
        hl, hr = heights[(i - 1) % n], heights[(i + 1) % n]
    else:
        hl = heights[i - 1] if i > 0 else heights[i]
        hr = heights[i + 1] if i < n - 1 else heights[i]
    denom = hl - 2.0 * heights[i] + hr
    delta = 0.0 if denom == 0 else 0.5 * (hl - hr) / denom
    delta = float(np.clip(delta, -0.5, 0.5))
    seed = phi0 + delta * step
    lo, hi = seed - step, seed + step
    res = minimize_scalar(
        q_of, bounds=(lo, hi), method="bounded",
        options={"xatol": refine_tol},
    )
    phi_hat = float(res.x)
    height = 1.0 / max(float(res.fun), 1e-300)
    return phi_hat, height


def music_search(
    noise_basis: np.ndarray,
    geometry: ArrayGeometry,
    sampling: SamplingConfig,
    grid: SearchGrid | None = None,
    threshold_ratio: float | None = 10.0,
) -> list[SubbandPeak]:
    """Locate pseudo-spectrum peaks in every subband.

    Grid maxima (above ``threshold_ratio`` times the subband median when
    a threshold is given) are refined by parabolic interpolation
    followed by bounded scalar optimization.  Refined peaks closer than
    the refinement tolerance are merged, keeping the larger.
    """
    if grid is None:
        grid = SearchGrid.for_array(geometry)
    grid.validate_for(geometry)
    phi_values = np.asarray(grid.phi_values)
    span = phi_values[-1] - phi_values[0] + grid.step
    circular = abs(span - 2.0 * math.pi) < 1e-9
    m = geometry.n_sensors
    b = modulation_matrix(sampling.offsets, sampling.reduction)
    positions = geometry.position_array()
    peaks: list[SubbandPeak] = []
    for band in range(1, sampling.reduction + 1):
        b_col = b[:, band - 1]
        w = _subband_projector(noise_basis, b_col, m)
        norm2 = m * float(np.sum(np.abs(b_col) ** 2))
        a = steering_from_phases(positions, phi_values)
        q_grid = np.sum(np.abs(w @ a) ** 2, axis=0) / norm2
        heights = 1.0 / np.maximum(q_grid, 1e-300)
        cand = _local_maxima(heights, circular)
        if threshold_ratio is not None:
            floor = threshold_ratio * float(np.median(heights))
            cand = [i for i in cand if heights[i] >= floor]

        def q_of(phi, _w=w, _n=norm2):
            v = _w @ np.exp(-1j * phi * positions)
            return float(np.sum(np.abs(v) ** 2)) / _n

        refined = [
            _refine_peak(q_of, phi_values, heights, i, circular, grid.refine_tol)
            for i in cand
        ]
        if circular:
            period = 2.0 * math.pi
            lo = phi_values[0]
            refined = [(((p - lo) % period) + lo, h) for p, h in refined]
        refined.sort()
        merged: list[tuple[float, float]] = []
        for phi_hat, height in refined:
            if merged and phi_hat - merged[-1][0] <= grid.refine_tol:
                if height > merged[-1][1]:
                    merged[-1] = (phi_hat, height)
            else:
                merged.append((phi_hat, height))
        if circular and len(merged) > 1:
            first, last = merged[0], merged[-1]
            if (first[0] + 2.0 * math.pi) - last[0] <= grid.refine_tol:
                keep = first if first[1] >= last[1] else last
                merged = merged[1:-1] + [keep]
                merged.sort()
        peaks.extend(SubbandPeak(band, p, h) for p, h in merged)
    return peaks


def fine_frequency(
    snapshots,
    subband: int,
    phase: float,
    geometry: ArrayGeometry,
    sampling: SamplingConfig,
) -> float:
    """Carrier frequency of one detected source, in Hz.

    Matched-filters the snapshots with the unit manifold vector of
    (subband, phase), then interpolates the periodogram peak of the
    resulting scalar stream: peak bin plus 3-point parabolic offset,
    mapped back through the subband origin.
    """
    y = _data_matrix(snapshots)
    t = y.shape[1]
    if t < 8:
        raise InsufficientDataError(f"fine_frequency: need >= 8 snapshots, got {t}")
    b = modulation_matrix(sampling.offsets, sampling.reduction)
    a = np.exp(-1j * phase * geometry.position_array())
    g = np.kron(a, b[:, subband - 1])
    g = g / np.linalg.norm(g)
    z = g.conj() @ y
    mag = np.abs(np.fft.fft(z))
    i0 = int(np.argmax(mag))
    left, mid, right = mag[(i0 - 1) % t], mag[i0], mag[(i0 + 1) % t]
    denom = left - 2.0 * mid + right
    delta = 0.0 if denom == 0 else 0.5 * (left - right) / denom
    delta = float(np.clip(delta, -0.5, 0.5))
    f_sub = sampling.sub_rate
    f_base = ((i0 + delta) / t) * f_sub
    f_base %= f_sub
    return (subband - 1) * f_sub + f_base


def estimate_all(
    snapshots,
    geometry: ArrayGeometry,
    sampling: SamplingConfig,
    config: EstimatorConfig = EstimatorConfig(),
) -> EstimationResult:
    """Full recovery pipeline on model-domain snapshots.

    Returns estimates sorted by (subband, phase).  ``mismatch`` is set
    when the number of usable peaks differs from the detected source
    count; the peaks found are returned either way.
    """
    y = _data_matrix(snapshots)
    dim = y.shape[0]
    t = y.shape[1]
    r = sample_covariance(y)
    eig_vals, eig_vecs = np.linalg.eigh(r)
    eigs_desc = eig_vals[::-1].copy()
    eigs_desc[eigs_desc < 0] = 0.0
    if config.known_count is not None:
        if not 0 <= config.known_count < dim:
            raise ValueError("estimate_all: known_count outside [0, dim)")
        k_hat = config.known_count
    else:
        k_hat = estimate_source_count(eigs_desc, t, config.criterion)
    if k_hat == 0:
        return EstimationResult((), 0, False, eigs_desc)
    basis = eig_vecs[:, : dim - k_hat]
    grid = SearchGrid.for_array(geometry, config.grid_points, config.refine_tol)
    threshold = None if config.known_count is not None else config.peak_threshold
    peaks = music_search(basis, geometry, sampling, grid, threshold)
    if config.known_count is not None:
        peaks = sorted(peaks, key=lambda pk: pk.height, reverse=True)[:k_hat]
    mismatch = len(peaks) != k_hat
    estimates = []
    for pk in peaks:
        freq = fine_frequency(y, pk.subband, pk.phase, geometry, sampling)
        try:
            theta = doa_from_phase(pk.phase, freq, geometry.spacing, sampling.f_nyquist)
        except (OutOfRangeError, ValueError):
            theta = math.nan
        estimates.append(Estimate(pk.subband, pk.phase, freq, theta, pk.height))
    estimates.sort(key=lambda e: (e.subband, e.phase))
    return EstimationResult(tuple(estimates), k_hat, mismatch, eigs_desc)
