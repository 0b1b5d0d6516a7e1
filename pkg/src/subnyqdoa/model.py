"""Deterministic model of a multicoset-sampled antenna array.

Builds the steering matrix of a (possibly sparse) linear array, the
branch modulation matrix of the multicoset front end, and the joint
measurement matrix whose columns are Kronecker products of the two.
All values are immutable after construction and safe to share across
threads.

Subband indices are 1-based: subband ``l`` covers frequencies
``[(l-1)*f_sub, l*f_sub)`` where ``f_sub = f_nyquist / reduction``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import OutOfRangeError

MRA7_POSITIONS = (0, 1, 4, 10, 16, 22, 28)


def spatial_phase(theta_deg: float, freq: float, spacing: float, f_nyquist: float) -> float:
    """Per-position phase increment of a plane wave, in radians.

    Compounds arrival angle and carrier frequency into the single
    quantity the array actually observes:
    ``pi * spacing * sin(theta) * freq / f_nyquist``.

    Args:
        theta_deg: Arrival angle in degrees, ``|theta| < 90``.
        freq: Carrier frequency in Hz.
        spacing: Base sensor spacing in half-wavelengths at ``f_nyquist``.
        f_nyquist: Nyquist rate in Hz, positive.
    """
    if not all(math.isfinite(v) for v in (theta_deg, freq, spacing, f_nyquist)):
        raise ValueError("spatial_phase: all inputs must be finite")
    if f_nyquist <= 0:
        raise ValueError("spatial_phase: f_nyquist must be positive")
    if abs(theta_deg) >= 90:
        raise ValueError(f"spatial_phase: |theta| must be < 90 deg, got {theta_deg}")
    return math.pi * spacing * math.sin(math.radians(theta_deg)) * freq / f_nyquist


def doa_from_phase(phi: float, freq: float, spacing: float, f_nyquist: float) -> float:
    """Invert :func:`spatial_phase` for the arrival angle, in degrees.

    Raises:
        OutOfRangeError: ``|phi * f_nyquist / (pi * spacing * freq)| > 1``,
            i.e. no physical angle produces this phase at this frequency.
        ValueError: ``freq`` is zero or inputs are not finite.
    """
    if not all(math.isfinite(v) for v in (phi, freq, spacing, f_nyquist)):
        raise ValueError("doa_from_phase: all inputs must be finite")
    if freq <= 0:
        raise ValueError("doa_from_phase: freq must be positive")
    arg = phi * f_nyquist / (math.pi * spacing * freq)
    if abs(arg) > 1:
        raise OutOfRangeError(
            f"doa_from_phase: sin(theta) = {arg:.6g} outside [-1, 1]"
        )
    return math.degrees(math.asin(arg))


@dataclass(frozen=True)
class ArrayGeometry:
    """Linear array with sensors at integer multiples of a base spacing.

    ``positions`` are in units of ``spacing``; ``spacing`` is in
    half-wavelengths at the Nyquist rate.  A uniform array is the
    special case ``positions = (0, 1, ..., M-1)``.
    """

    positions: tuple[int, ...]
    spacing: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(int(p) for p in self.positions))
        if len(self.positions) < 2:
            raise ValueError("ArrayGeometry: at least 2 sensors required")
        if self.positions[0] != 0:
            raise ValueError("ArrayGeometry: first position must be 0")
        if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise ValueError("ArrayGeometry: positions must be strictly increasing")
        if not (math.isfinite(self.spacing) and self.spacing > 0):
            raise ValueError("ArrayGeometry: spacing must be positive and finite")

    @property
    def n_sensors(self) -> int:
        return len(self.positions)

    @property
    def aperture(self) -> int:
        """Largest sensor position, in units of ``spacing``."""
        return self.positions[-1]

    def position_array(self) -> np.ndarray:
        return np.asarray(self.positions, dtype=float)

    @classmethod
    def ula(cls, n_sensors: int, spacing: float = 1.0) -> "ArrayGeometry":
        return cls(tuple(range(n_sensors)), spacing)

    @classmethod
    def mra7(cls, spacing: float = 1.0) -> "ArrayGeometry":
        """7-sensor minimum redundancy array with aperture 28."""
        return cls(MRA7_POSITIONS, spacing)


@dataclass(frozen=True)
class SamplingConfig:
    """Multicoset front-end configuration.

    Every sensor feeds ``n_branches`` decimators; branch ``p`` keeps
    samples at Nyquist indices ``n * reduction + offsets[p]``, so each
    branch runs at ``sub_rate = f_nyquist / reduction``.
    """

    f_nyquist: float
    reduction: int
    n_branches: int
    offsets: tuple[int, ...] = field(default=None)  # default: (0, ..., n_branches-1)

    def __post_init__(self):
        if not (math.isfinite(self.f_nyquist) and self.f_nyquist > 0):
            raise ValueError("SamplingConfig: f_nyquist must be positive and finite")
        if self.reduction < 1:
            raise ValueError("SamplingConfig: reduction must be a positive integer")
        if not 1 <= self.n_branches <= self.reduction:
            raise ValueError(
                f"SamplingConfig: need 1 <= n_branches <= reduction, "
                f"got {self.n_branches} > {self.reduction}"
            )
        offsets = self.offsets
        if offsets is None:
            offsets = tuple(range(self.n_branches))
        offsets = tuple(int(c) for c in offsets)
        object.__setattr__(self, "offsets", offsets)
        if len(offsets) != self.n_branches:
            raise ValueError("SamplingConfig: len(offsets) must equal n_branches")
        if len(set(offsets)) != len(offsets):
            raise ValueError("SamplingConfig: offsets must be distinct")
        if any(not 0 <= c < self.reduction for c in offsets):
            raise ValueError("SamplingConfig: offsets must lie in [0, reduction)")

    @property
    def sub_rate(self) -> float:
        """Per-branch sampling rate, Hz."""
        return self.f_nyquist / self.reduction

    @property
    def nyquist_period(self) -> float:
        return 1.0 / self.f_nyquist

    def subband_of(self, freq: float) -> int:
        """1-based subband index containing ``freq``."""
        if not 0 <= freq < self.f_nyquist:
            raise ValueError(f"frequency {freq} outside [0, f_nyquist)")
        return min(int(freq // self.sub_rate) + 1, self.reduction)


@dataclass(frozen=True)
class SourceSpec:
    """One narrowband far-field source."""

    theta_deg: float
    freq: float
    power: float = 1.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.theta_deg, self.freq, self.power)):
            raise ValueError("SourceSpec: fields must be finite")
        if abs(self.theta_deg) >= 90:
            raise ValueError(f"SourceSpec: |theta| must be < 90 deg, got {self.theta_deg}")
        if self.freq < 0:
            raise ValueError("SourceSpec: freq must be non-negative")
        if self.power <= 0:
            raise ValueError("SourceSpec: power must be positive")


@dataclass(frozen=True)
class Scenario:
    """Full simulation scenario: array, front end, sources, noise, snapshots.

    Sources are re-ordered at construction by (subband, spatial phase) so
    that every matrix built from the scenario has a deterministic column
    order.  With ``require_identifiable=True`` (the default) the scenario
    is rejected unless every subband holds at most ``n_sensors - 1``
    sources with pairwise distinct spatial phases; pass ``False`` to
    build deliberately degenerate scenarios for rank experiments.
    """

    geometry: ArrayGeometry
    sampling: SamplingConfig
    sources: tuple[SourceSpec, ...]
    noise_power: float = 0.0
    snapshots: int = 1
    require_identifiable: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.noise_power) and self.noise_power >= 0):
            raise ValueError("Scenario: noise_power must be >= 0 and finite")
        if self.snapshots < 1:
            raise ValueError("Scenario: snapshots must be a positive integer")
        sources = tuple(self.sources)
        for i, src in enumerate(sources):
            if not src.freq < self.sampling.f_nyquist:
                raise ValueError(
                    f"Scenario: source {i} frequency {src.freq} not below f_nyquist"
                )
        keyed = sorted(
            sources,
            key=lambda s: (self.sampling.subband_of(s.freq), self._phase_of(s)),
        )
        object.__setattr__(self, "sources", tuple(keyed))
        if self.require_identifiable:
            self._check_identifiable()

    def _phase_of(self, src: SourceSpec) -> float:
        return spatial_phase(
            src.theta_deg, src.freq, self.geometry.spacing, self.sampling.f_nyquist
        )

    def _check_identifiable(self):
        m = self.geometry.n_sensors
        per_band: dict[int, list[float]] = {}
        for src, band, phi in zip(self.sources, self.subbands, self.phases):
            per_band.setdefault(band, []).append(phi)
        for band, phis in per_band.items():
            if len(phis) > m - 1:
                raise ValueError(
                    f"Scenario: subband {band} holds {len(phis)} sources, "
                    f"identifiability requires at most {m - 1}"
                )
            if len(set(phis)) != len(phis):
                raise ValueError(
                    f"Scenario: subband {band} has repeated spatial phases"
                )
        if self.n_sources > (m - 1) * self.sampling.reduction:
            raise ValueError(
                f"Scenario: {self.n_sources} sources exceed the classifiable "
                f"maximum {(m - 1) * self.sampling.reduction}"
            )

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @cached_property
    def subbands(self) -> tuple[int, ...]:
        """1-based subband index of every source, in column order."""
        return tuple(self.sampling.subband_of(s.freq) for s in self.sources)

    @cached_property
    def phases(self) -> tuple[float, ...]:
        """Spatial phase of every source, in column order."""
        return tuple(self._phase_of(s) for s in self.sources)

    @cached_property
    def powers(self) -> tuple[float, ...]:
        return tuple(s.power for s in self.sources)

    def baseband_freqs(self) -> np.ndarray:
        """Aliased in-subband frequency of every source, in [0, sub_rate)."""
        f_sub = self.sampling.sub_rate
        return np.array(
            [s.freq - (b - 1) * f_sub for s, b in zip(self.sources, self.subbands)]
        )

    def restrict_to_subband(self, band: int) -> "Scenario":
        """New scenario keeping only the sources of one subband."""
        kept = tuple(
            s for s, b in zip(self.sources, self.subbands) if b == band
        )
        return Scenario(
            self.geometry, self.sampling, kept, self.noise_power,
            self.snapshots, self.require_identifiable,
        )


def steering_from_phases(positions: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """Steering matrix ``exp(-1j * phi_k * p_m)`` for raw spatial phases.

    Returns an ``len(positions) x len(phases)`` complex matrix with
    unit-modulus entries.
    """
    positions = np.asarray(positions, dtype=float)
    phases = np.asarray(phases, dtype=float)
    return np.exp(-1j * np.outer(positions, phases))


def steering_matrix(
    geometry: ArrayGeometry,
    sources: tuple[SourceSpec, ...],
    sampling: SamplingConfig,
) -> np.ndarray:
    """Array steering matrix for a source list, one column per source.

    Columns follow the order of ``sources``; pass ``scenario.sources``
    to keep the deterministic (subband, phase) ordering.
    """
    phis = np.array(
        [
            spatial_phase(s.theta_deg, s.freq, geometry.spacing, sampling.f_nyquist)
            for s in sources
        ]
    )
    return steering_from_phases(geometry.position_array(), phis)


def modulation_matrix(offsets: tuple[int, ...], reduction: int) -> np.ndarray:
    """Branch-to-subband coupling matrix of the multicoset front end.

    Entry (i, l) is ``exp(2j*pi*offsets[i]*(l-1)/reduction) / sqrt(reduction)``
    with a zero-based column exponent, so for ``n_branches == reduction``
    and offsets forming a permutation of ``{0..reduction-1}`` the matrix
    is unitary.
    """
    c = np.asarray(offsets, dtype=float)[:, None]
    l = np.arange(reduction, dtype=float)[None, :]
    return np.exp(2j * np.pi * c * l / reduction) / np.sqrt(reduction)


@dataclass(frozen=True)
class MeasurementModel:
    """Assembled matrices of the joint space-time model.

    ``combined`` stacks one Kronecker column ``steering_col (x) branch_col``
    per source; its row index runs sensor-major, branch-minor, matching
    the snapshot layout of :mod:`subnyqdoa.synth`.
    """

    steering: np.ndarray           # n_sensors x K
    branch_coupling: np.ndarray    # n_branches x reduction
    combined: np.ndarray           # (n_sensors * n_branches) x K
    subbands: tuple[int, ...]      # 1-based subband of each column

    @property
    def n_sources(self) -> int:
        return self.combined.shape[1]

    def subband_block(self, band: int) -> np.ndarray:
        """Columns of ``combined`` belonging to one subband."""
        idx = [k for k, b in enumerate(self.subbands) if b == band]
        return self.combined[:, idx]


def measurement_matrix(scenario: Scenario) -> MeasurementModel:
    """Build steering, branch-coupling, and combined matrices for a scenario."""
    a = steering_matrix(scenario.geometry, scenario.sources, scenario.sampling)
    b = modulation_matrix(scenario.sampling.offsets, scenario.sampling.reduction)
    m = scenario.geometry.n_sensors
    p = scenario.sampling.n_branches
    k = scenario.n_sources
    g = np.zeros((m * p, k), dtype=complex)
    for col, band in enumerate(scenario.subbands):
        g[:, col] = np.kron(a[:, col], b[:, band - 1])
    return MeasurementModel(a, b, g, scenario.subbands)


def apply_branch_coupling(branch_coupling: np.ndarray, stacked: np.ndarray) -> np.ndarray:
    """Apply ``I_M (x) B`` to sensor-major stacked data without materializing it.

    ``stacked`` has ``M * reduction`` rows (sensor-major, subband-minor);
    the result has ``M * n_branches`` rows in the same layout.
    """
    p, l = branch_coupling.shape
    rows, cols = stacked.shape
    if rows % l != 0:
        raise ValueError("apply_branch_coupling: row count not a multiple of reduction")
    m = rows // l
    blocks = stacked.reshape(m, l, cols)
    out = np.einsum("pl,mlt->mpt", branch_coupling, blocks)
    return out.reshape(m * p, cols)


def numerical_rank(matrix: np.ndarray, rel_tol: float = 1e-10) -> int:
    """Number of singular values above ``rel_tol`` times the largest.

    Raises:
        ValueError: empty matrix or ``rel_tol`` outside (0, 1).
    """
    matrix = np.asarray(matrix)
    if matrix.size == 0:
        raise ValueError("numerical_rank: empty matrix")
    if not 0 < rel_tol < 1:
        raise ValueError("numerical_rank: rel_tol must lie in (0, 1)")
    s = np.linalg.svd(matrix, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.count_nonzero(s > rel_tol * s[0]))
