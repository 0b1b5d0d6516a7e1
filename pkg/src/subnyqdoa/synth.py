"""Synthetic data generation for the multicoset array model.

Two generation paths exist.  The model-domain path draws snapshots
directly from the joint measurement matrix and is what every estimation
experiment runs on.  The time-domain path synthesizes Nyquist-rate
sensor streams and pushes them through an explicit multicoset sampler;
it exists to validate the model path and the front-end algebra.

Plain offset decimation and the branch-coupling model differ by a fixed
invertible per-branch factor: branch ``p`` of a decimated stream carries
an extra ``sqrt(reduction) * exp(2j*pi*f*offsets[p]*nyquist_period)``
relative to the branch-coupling matrix acting on the folded spectrum.
:func:`front_end_spectrum_check` and
:func:`predicted_decimated_covariance` apply exactly this correction,
which leaves subspaces, projections, and bounds unchanged.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .model import (
    SamplingConfig,
    Scenario,
    apply_branch_coupling,
    measurement_matrix,
    modulation_matrix,
)

_HEADER = struct.Struct("<4sIIIQd")  # magic, version, M, P, T, sub_rate
_MAGIC = b"SNYQ"
_VERSION = 1


@dataclass(frozen=True)
class SnapshotBlock:
    """Stacked branch outputs: row ``m * n_branches + p`` is sensor m, branch p."""

    data: np.ndarray  # (n_sensors * n_branches) x T complex
    rate: float       # per-branch sampling rate, Hz
    mode: str         # "model-domain" | "time-domain"

    @property
    def n_snapshots(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SourceWaveformSpec:
    """Waveform family for all sources of a scenario.

    ``tone`` sources are complex exponentials with a per-trial random
    initial phase (zero envelope bandwidth); ``gaussian`` sources are
    i.i.d. circular Gaussian per snapshot, which is the covariance-level
    model the bound calculations assume.
    """

    mode: str = "tone"
    envelope_bandwidth_fraction: float = 0.0

    def __post_init__(self):
        if self.mode not in ("tone", "gaussian"):
            raise ValueError(f"SourceWaveformSpec: unknown mode {self.mode!r}")
        if not 0.0 <= self.envelope_bandwidth_fraction < 1.0:
            raise ValueError(
                "SourceWaveformSpec: envelope_bandwidth_fraction must lie in [0, 1)"
            )
        if self.mode == "tone" and self.envelope_bandwidth_fraction != 0.0:
            raise ValueError("SourceWaveformSpec: tone mode implies zero bandwidth")


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _source_streams(
    scenario: Scenario, spec: SourceWaveformSpec, n: int, rng: np.random.Generator
) -> np.ndarray:
    """K x n matrix of baseband source samples at the sub-Nyquist rate."""
    k = scenario.n_sources
    powers = np.asarray(scenario.powers)
    if spec.mode == "tone":
        psi = rng.uniform(0.0, 2.0 * np.pi, size=k)
        f_base = scenario.baseband_freqs() / scenario.sampling.sub_rate
        t = np.arange(n)
        return np.sqrt(powers)[:, None] * np.exp(
            1j * (2.0 * np.pi * f_base[:, None] * t[None, :] + psi[:, None])
        )
    noise = rng.standard_normal((k, n)) + 1j * rng.standard_normal((k, n))
    return np.sqrt(powers / 2.0)[:, None] * noise


def generate_snapshots(
    scenario: Scenario, spec: SourceWaveformSpec, n_snapshots: int, seed
) -> SnapshotBlock:
    """Draw model-domain snapshots.

    Column ``n`` is ``sum_k g_k s_k[n] + w[n]`` with ``g_k`` the k-th
    combined-matrix column and ``w`` branch-coupled white noise, so for
    a full branch bank the noise covariance is exactly
    ``noise_power * I``.  Identical arguments (seed included) give
    bit-identical output.
    """
    if n_snapshots < 1:
        raise ValueError("generate_snapshots: n_snapshots must be >= 1")
    rng = _as_rng(seed)
    mm = measurement_matrix(scenario)
    m = scenario.geometry.n_sensors
    p = scenario.sampling.n_branches
    l = scenario.sampling.reduction
    data = np.zeros((m * p, n_snapshots), dtype=complex)
    if scenario.n_sources:
        data += mm.combined @ _source_streams(scenario, spec, n_snapshots, rng)
    if scenario.noise_power > 0:
        sigma = np.sqrt(scenario.noise_power / 2.0)
        eps = sigma * (
            rng.standard_normal((m * l, n_snapshots))
            + 1j * rng.standard_normal((m * l, n_snapshots))
        )
        data += apply_branch_coupling(mm.branch_coupling, eps)
    return SnapshotBlock(data, scenario.sampling.sub_rate, "model-domain")


def synthesize_nyquist(
    scenario: Scenario, spec: SourceWaveformSpec, n_samples: int, seed
) -> np.ndarray:
    """Nyquist-rate analytic sensor streams, one row per sensor.

    Only tone waveforms are supported on this path; it exists to
    validate the model-domain generator, and a tone is the one waveform
    whose Nyquist-rate samples are specified exactly.
    """
    if spec.mode != "tone":
        raise ValueError("synthesize_nyquist: only tone waveforms are supported")
    if n_samples < 1:
        raise ValueError("synthesize_nyquist: n_samples must be >= 1")
    rng = _as_rng(seed)
    mm = measurement_matrix(scenario)
    m = scenario.geometry.n_sensors
    t_n = scenario.sampling.nyquist_period
    data = np.zeros((m, n_samples), dtype=complex)
    if scenario.n_sources:
        powers = np.asarray(scenario.powers)
        freqs = np.array([s.freq for s in scenario.sources])
        psi = rng.uniform(0.0, 2.0 * np.pi, size=scenario.n_sources)
        t = np.arange(n_samples)
        streams = np.sqrt(powers)[:, None] * np.exp(
            1j * (2.0 * np.pi * freqs[:, None] * t_n * t[None, :] + psi[:, None])
        )
        data += mm.steering @ streams
    if scenario.noise_power > 0:
        sigma = np.sqrt(scenario.noise_power / 2.0)
        data += sigma * (
            rng.standard_normal((m, n_samples))
            + 1j * rng.standard_normal((m, n_samples))
        )
    return data


def multicoset_sample(nyquist_data: np.ndarray, sampling: SamplingConfig) -> SnapshotBlock:
    """Decimate Nyquist-rate streams into per-branch sub-Nyquist streams.

    Branch ``p`` of sensor ``m`` keeps ``x_m[n * reduction + offsets[p]]``;
    nothing else is applied (pure decimation with per-branch offset).
    """
    nyquist_data = np.asarray(nyquist_data)
    if nyquist_data.ndim != 2:
        raise ValueError("multicoset_sample: expected a 2-D sensor-by-sample array")
    m, n = nyquist_data.shape
    l = sampling.reduction
    if n < l:
        raise ValueError(f"multicoset_sample: need at least {l} samples, got {n}")
    n_sub = n // l
    p = sampling.n_branches
    out = np.empty((m, p, n_sub), dtype=complex)
    for i, c in enumerate(sampling.offsets):
        out[:, i, :] = nyquist_data[:, c::l][:, :n_sub]
    return SnapshotBlock(out.reshape(m * p, n_sub), sampling.sub_rate, "time-domain")


def model_covariance(scenario: Scenario) -> np.ndarray:
    """Exact snapshot covariance of the model-domain path.

    ``combined @ diag(powers) @ combined^H + noise_power * I``; the
    gaussian waveform's sample covariance converges to this.
    """
    mm = measurement_matrix(scenario)
    dim = mm.combined.shape[0]
    r = (mm.combined * np.asarray(scenario.powers)) @ mm.combined.conj().T
    return r + scenario.noise_power * np.eye(dim)


def predicted_decimated_covariance(scenario: Scenario) -> np.ndarray:
    """Expected snapshot covariance of the decimated time-domain path.

    Applies the documented per-branch correction: relative to the
    model-domain column ``g_k``, the decimated stream of source k is
    scaled by ``sqrt(reduction)`` and carries the branch phase
    ``exp(2j*pi*f_base_k*offsets[p]*nyquist_period)``.
    """
    mm = measurement_matrix(scenario)
    samp = scenario.sampling
    offs = np.asarray(samp.offsets, dtype=float)
    dim = mm.combined.shape[0]
    r = np.zeros((dim, dim), dtype=complex)
    f_base = scenario.baseband_freqs()
    for k in range(scenario.n_sources):
        branch_phase = np.exp(2j * np.pi * f_base[k] * offs * samp.nyquist_period)
        m = scenario.geometry.n_sensors
        col = mm.combined[:, k].reshape(m, samp.n_branches) * branch_phase[None, :]
        u = np.sqrt(samp.reduction) * col.reshape(-1)
        r += scenario.powers[k] * np.outer(u, u.conj())
    return r + scenario.noise_power * np.eye(dim)


def front_end_spectrum_check(
    nyquist_data: np.ndarray,
    sampling: SamplingConfig,
    energy_floor: float = 1e-8,
):
    """Compare decimated branch spectra against the branch-coupling model.

    For every sensor, the corrected branch DFT
    ``sqrt(reduction) * exp(-2j*pi*bin*offset/N) * DFT(y_branch)`` is
    checked against the branch-coupling matrix applied to the folded
    Nyquist DFT.  Bins where the model magnitude falls below
    ``energy_floor`` times its maximum are excluded from the relative
    error (they carry no usable energy).

    Returns:
        (max_rel_error, n_checked, n_excluded)
    """
    nyquist_data = np.asarray(nyquist_data)
    m, n = nyquist_data.shape
    l = sampling.reduction
    n_sub = n // l
    if n_sub < 1:
        raise ValueError("front_end_spectrum_check: fewer samples than reduction")
    trimmed = nyquist_data[:, : n_sub * l]
    block = multicoset_sample(trimmed, sampling)
    p = sampling.n_branches
    b = modulation_matrix(sampling.offsets, l)
    offs = np.asarray(sampling.offsets, dtype=float)
    bins = np.arange(n_sub, dtype=float)
    correction = np.exp(-2j * np.pi * np.outer(offs, bins) / (n_sub * l))

    max_rel = 0.0
    n_checked = 0
    n_excluded = 0
    for mi in range(m):
        branch = block.data[mi * p : (mi + 1) * p, :]
        lhs = np.sqrt(l) * correction * np.fft.fft(branch, axis=1)
        spectrum = np.fft.fft(trimmed[mi])
        folded = spectrum.reshape(l, n_sub)  # row l-1 holds bins of subband l
        rhs = b @ folded
        mag = np.abs(rhs)
        floor = energy_floor * mag.max() if mag.max() > 0 else 0.0
        keep = mag > floor
        n_excluded += int((~keep).sum())
        n_checked += int(keep.sum())
        if keep.any():
            rel = np.abs(lhs[keep] - rhs[keep]) / mag[keep]
            max_rel = max(max_rel, float(rel.max()))
    return max_rel, n_checked, n_excluded


def write_snapshots(path, block: SnapshotBlock, n_branches: int) -> None:
    """Dump a snapshot block to the binary interchange format.

    Layout: 32-byte header (magic ``SNYQ``, version, sensor count,
    branch count, snapshot count, per-branch rate) followed by the data
    matrix row-major as little-endian interleaved re/im float64.
    """
    rows, t = block.data.shape
    if rows % n_branches != 0:
        raise ValueError("write_snapshots: row count not a multiple of n_branches")
    m = rows // n_branches
    header = _HEADER.pack(_MAGIC, _VERSION, m, n_branches, t, block.rate)
    payload = np.ascontiguousarray(block.data, dtype="<c16").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_snapshots(path, mode: str = "model-domain") -> SnapshotBlock:
    """Read a block written by :func:`write_snapshots`."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise ValueError("read_snapshots: truncated header")
        magic, version, m, p, t, rate = _HEADER.unpack(raw)
        if magic != _MAGIC:
            raise ValueError(f"read_snapshots: bad magic {magic!r}")
        if version != _VERSION:
            raise ValueError(f"read_snapshots: unsupported version {version}")
        payload = fh.read()
    expected = m * p * t * 16
    if len(payload) != expected:
        raise ValueError(
            f"read_snapshots: payload holds {len(payload)} bytes, expected {expected}"
        )
    data = np.frombuffer(payload, dtype="<c16").reshape(m * p, t).astype(complex)
    return SnapshotBlock(data, rate, mode)
