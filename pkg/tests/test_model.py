import math

import numpy as np
import pytest

from subnyqdoa.errors import OutOfRangeError
from subnyqdoa.model import (
    ArrayGeometry,
    MRA7_POSITIONS,
    SamplingConfig,
    Scenario,
    SourceSpec,
    apply_branch_coupling,
    doa_from_phase,
    measurement_matrix,
    modulation_matrix,
    numerical_rank,
    spatial_phase,
    steering_from_phases,
    steering_matrix,
)

F_NYQ = 10e9


def brute_kron_column(steering_col, branch_col):
    """Oracle: elementwise Kronecker product, no library call."""
    out = np.empty(len(steering_col) * len(branch_col), dtype=complex)
    i = 0
    for a in steering_col:
        for b in branch_col:
            out[i] = a * b
            i += 1
    return out


def random_identifiable_scenario(rng, f_nyquist=F_NYQ):
    """Random scenario with at most M-1 well-separated phases per subband."""
    m = int(rng.integers(3, 8))
    l = int(rng.integers(2, 8))
    geometry = ArrayGeometry.ula(m) if rng.random() < 0.5 else ArrayGeometry(
        (0,) + tuple(np.sort(rng.choice(np.arange(1, 30), size=m - 1, replace=False)))
    )
    sampling = SamplingConfig(f_nyquist, l, l)
    f_sub = sampling.sub_rate
    sources = []
    for band in range(1, l + 1):
        k_band = int(rng.integers(0, m))  # 0 .. m-1 sources in this subband
        thetas = np.sort(rng.uniform(-60, 60, size=k_band))
        for j, theta in enumerate(thetas):
            frac = (j + rng.uniform(0.2, 0.8)) / max(k_band, 1)
            freq = (band - 1) * f_sub + frac * f_sub
            sources.append(SourceSpec(theta, freq))
    if len(sources) < 1:
        sources.append(SourceSpec(10.0, 0.5 * f_sub))
    scn = Scenario(geometry, sampling, tuple(sources), noise_power=0.0,
                   snapshots=16, require_identifiable=False)
    # keep only scenarios whose per-subband phases are separated enough
    # for a clean rank decision
    for band in set(scn.subbands):
        phis = sorted(p for p, b in zip(scn.phases, scn.subbands) if b == band)
        if any(b - a < 1e-3 for a, b in zip(phis, phis[1:])):
            return None
    return scn


class TestSpatialPhase:
    def test_broadside_is_zero(self):
        assert spatial_phase(0.0, 3e9, 1.0, F_NYQ) == 0.0

    def test_direct_evaluation(self):
        # sin(30 deg) = 0.5 and f/f_N = 0.5 give pi/4
        phi = spatial_phase(30.0, 5e9, 1.0, F_NYQ)
        assert phi == pytest.approx(0.7853981633974483, abs=1e-15)

    def test_odd_symmetry(self):
        assert spatial_phase(-30.0, 5e9, 1.0, F_NYQ) == pytest.approx(
            -spatial_phase(30.0, 5e9, 1.0, F_NYQ), abs=0.0
        )

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(ValueError):
            spatial_phase(bad, 5e9, 1.0, F_NYQ)
        with pytest.raises(ValueError):
            spatial_phase(10.0, bad, 1.0, F_NYQ)

    def test_angle_range_enforced(self):
        with pytest.raises(ValueError):
            spatial_phase(90.0, 5e9, 1.0, F_NYQ)

    def test_bad_nyquist_rate(self):
        with pytest.raises(ValueError):
            spatial_phase(10.0, 5e9, 1.0, 0.0)


class TestDoaFromPhase:
    def test_inverse_of_direct_example(self):
        assert doa_from_phase(math.pi / 4, 5e9, 1.0, F_NYQ) == pytest.approx(30.0, abs=1e-12)

    def test_zero_phase(self):
        assert doa_from_phase(0.0, 5e9, 1.0, F_NYQ) == 0.0

    def test_out_of_range(self):
        # argument would be 10
        with pytest.raises(OutOfRangeError):
            doa_from_phase(math.pi, 1e9, 1.0, F_NYQ)

    def test_zero_freq_rejected(self):
        with pytest.raises(ValueError):
            doa_from_phase(0.1, 0.0, 1.0, F_NYQ)

    def test_round_trip(self):
        rng = np.random.default_rng(7)
        for theta in np.linspace(-89, 89, 41):
            freq = rng.uniform(0.05, 0.999) * F_NYQ
            phi = spatial_phase(theta, freq, 1.0, F_NYQ)
            assert doa_from_phase(phi, freq, 1.0, F_NYQ) == pytest.approx(theta, abs=1e-10)


class TestSteering:
    def test_broadside_all_ones(self):
        a = steering_from_phases(np.arange(7), np.array([0.0]))
        assert np.allclose(a[:, 0], 1.0)

    def test_quarter_turn_column(self):
        a = steering_from_phases(np.arange(3), np.array([math.pi / 2]))
        expected = np.array([1.0, -1j, -1.0])
        assert np.allclose(a[:, 0], expected, atol=1e-15)

    def test_mra_phases(self):
        geom = ArrayGeometry.mra7()
        a = steering_from_phases(geom.position_array(), np.array([math.pi / 4]))
        for m, p in enumerate(MRA7_POSITIONS):
            angle = np.angle(a[m, 0])
            wrapped = (-math.pi / 4 * p + math.pi) % (2 * math.pi) - math.pi
            assert angle == pytest.approx(wrapped, abs=1e-12)

    def test_from_sources_matches_phase_definition(self):
        geom = ArrayGeometry.ula(4)
        sampling = SamplingConfig(F_NYQ, 4, 4)
        srcs = (SourceSpec(20.0, 3.3e9), SourceSpec(-35.0, 7.1e9))
        a = steering_matrix(geom, srcs, sampling)
        for k, s in enumerate(srcs):
            phi = spatial_phase(s.theta_deg, s.freq, geom.spacing, F_NYQ)
            assert np.allclose(a[:, k], np.exp(-1j * phi * geom.position_array()))


class TestModulationMatrix:
    def test_two_branch(self):
        b = modulation_matrix((0, 1), 2)
        expected = np.array([[1.0, 1.0], [1.0, -1.0]]) / math.sqrt(2)
        assert np.allclose(b, expected, atol=1e-15)

    def test_degenerate_single(self):
        assert np.allclose(modulation_matrix((0,), 1), [[1.0]])

    def test_full_unitarity(self):
        b = modulation_matrix(tuple(range(7)), 7)
        gram = b.conj().T @ b
        assert np.max(np.abs(gram - np.eye(7))) < 1e-12

    def test_partial_branches_unit_columns_scaled(self):
        b = modulation_matrix((0, 2, 3), 5)
        assert b.shape == (3, 5)
        assert np.allclose(np.abs(b), 1 / math.sqrt(5))


class TestMeasurementMatrix:
    def test_single_source_two_sensors(self):
        geom = ArrayGeometry.ula(2)
        sampling = SamplingConfig(F_NYQ, 2, 2)
        # theta = 0 puts the phase at 0 regardless of frequency
        scn = Scenario(geom, sampling, (SourceSpec(0.0, 0.3 * sampling.sub_rate),))
        mm = measurement_matrix(scn)
        expected = np.array([1.0, 1.0, 1.0, 1.0]) / math.sqrt(2)
        assert np.allclose(mm.combined[:, 0], expected)
        oracle = brute_kron_column(mm.steering[:, 0], mm.branch_coupling[:, 0])
        assert np.allclose(mm.combined[:, 0], oracle)

    def test_columns_match_kron_oracle(self):
        rng = np.random.default_rng(3)
        scn = None
        while scn is None:
            scn = random_identifiable_scenario(rng)
        mm = measurement_matrix(scn)
        for k, band in enumerate(mm.subbands):
            oracle = brute_kron_column(mm.steering[:, k], mm.branch_coupling[:, band - 1])
            assert np.allclose(mm.combined[:, k], oracle, atol=1e-14)

    def test_gram_is_block_diagonal(self):
        geom = ArrayGeometry.mra7()
        sampling = SamplingConfig(F_NYQ, 7, 7)
        f_sub = sampling.sub_rate
        srcs = tuple(
            SourceSpec(t, f)
            for t, f in [(-40, 0.4 * f_sub), (10, 0.7 * f_sub),
                         (25, 2.3 * f_sub), (-5, 4.6 * f_sub), (55, 4.9 * f_sub)]
        )
        scn = Scenario(geom, sampling, srcs)
        mm = measurement_matrix(scn)
        gram = mm.combined.conj().T @ mm.combined
        a_gram = mm.steering.conj().T @ mm.steering
        for i in range(len(srcs)):
            for j in range(len(srcs)):
                if mm.subbands[i] == mm.subbands[j]:
                    assert gram[i, j] == pytest.approx(a_gram[i, j], abs=1e-12)
                else:
                    assert abs(gram[i, j]) < 1e-12

    def test_cross_subband_columns_orthogonal(self):
        geom = ArrayGeometry.ula(3)
        sampling = SamplingConfig(F_NYQ, 4, 4)
        f_sub = sampling.sub_rate
        scn = Scenario(geom, sampling,
                       (SourceSpec(20, 0.5 * f_sub), SourceSpec(20, 2.5 * f_sub)))
        mm = measurement_matrix(scn)
        assert abs(np.vdot(mm.combined[:, 0], mm.combined[:, 1])) < 1e-12

    def test_column_norms(self):
        rng = np.random.default_rng(11)
        scn = None
        while scn is None:
            scn = random_identifiable_scenario(rng)
        mm = measurement_matrix(scn)
        m = scn.geometry.n_sensors
        norms = np.linalg.norm(mm.combined, axis=0)
        assert np.allclose(norms, math.sqrt(m), atol=1e-12)

    def test_kron_block_orthogonality(self):
        geom = ArrayGeometry.ula(5)
        sampling = SamplingConfig(F_NYQ, 6, 6)
        b = modulation_matrix(sampling.offsets, sampling.reduction)
        rng = np.random.default_rng(5)
        phases = rng.uniform(-2.5, 2.5, size=(6, 3))
        blocks = [
            np.kron(steering_from_phases(geom.position_array(), phases[l]), b[:, [l]])
            for l in range(6)
        ]
        for i in range(6):
            for j in range(6):
                if i != j:
                    cross = blocks[i].conj().T @ blocks[j]
                    assert np.max(np.abs(cross)) < 1e-12


class TestApplyBranchCoupling:
    def test_matches_materialized_kron(self):
        rng = np.random.default_rng(2)
        b = modulation_matrix((0, 2, 3), 5)
        x = rng.normal(size=(4 * 5, 9)) + 1j * rng.normal(size=(4 * 5, 9))
        full = np.kron(np.eye(4), b) @ x
        assert np.allclose(apply_branch_coupling(b, x), full, atol=1e-13)

    def test_bad_row_count(self):
        b = modulation_matrix((0, 1), 2)
        with pytest.raises(ValueError):
            apply_branch_coupling(b, np.zeros((3, 4)))


class TestNumericalRank:
    def test_identity(self):
        assert numerical_rank(np.eye(4)) == 4

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            numerical_rank(np.zeros((0, 3)))

    def test_zero_matrix(self):
        assert numerical_rank(np.zeros((3, 3))) == 0

    def test_duplicate_column_drops_rank(self):
        geom = ArrayGeometry.ula(4)
        sampling = SamplingConfig(F_NYQ, 3, 3)
        f_sub = sampling.sub_rate
        # identical (subband, phase) pair; distinct third source
        srcs = (
            SourceSpec(15.0, 0.25 * f_sub),
            SourceSpec(15.0, 0.25 * f_sub),
            SourceSpec(-30.0, 1.5 * f_sub),
        )
        scn = Scenario(geom, sampling, srcs, require_identifiable=False)
        mm = measurement_matrix(scn)
        assert numerical_rank(mm.combined) == 2

    def test_rank_additivity_sample(self):
        rng = np.random.default_rng(42)
        checked = 0
        while checked < 25:
            scn = random_identifiable_scenario(rng)
            if scn is None:
                continue
            mm = measurement_matrix(scn)
            assert numerical_rank(mm.combined) == scn.n_sources
            checked += 1


class TestInvariantsAndValidation:
    def test_geometry_invariants(self):
        with pytest.raises(ValueError):
            ArrayGeometry((0,))
        with pytest.raises(ValueError):
            ArrayGeometry((1, 2, 3))
        with pytest.raises(ValueError):
            ArrayGeometry((0, 2, 2))
        with pytest.raises(ValueError):
            ArrayGeometry((0, 1, 2), spacing=0.0)

    def test_sampling_invariants(self):
        with pytest.raises(ValueError):
            SamplingConfig(F_NYQ, 4, 5)
        with pytest.raises(ValueError):
            SamplingConfig(F_NYQ, 4, 2, (0, 0))
        with pytest.raises(ValueError):
            SamplingConfig(F_NYQ, 4, 2, (0, 4))
        cfg = SamplingConfig(F_NYQ, 4, 4)
        assert cfg.offsets == (0, 1, 2, 3)
        assert cfg.sub_rate == pytest.approx(F_NYQ / 4)
        assert cfg.nyquist_period == pytest.approx(1.0 / F_NYQ)

    def test_subband_of(self):
        cfg = SamplingConfig(F_NYQ, 5, 5)
        assert cfg.subband_of(0.0) == 1
        assert cfg.subband_of(cfg.sub_rate) == 2
        assert cfg.subband_of(0.999 * F_NYQ) == 5
        with pytest.raises(ValueError):
            cfg.subband_of(F_NYQ)

    def test_source_invariants(self):
        with pytest.raises(ValueError):
            SourceSpec(95.0, 1e9)
        with pytest.raises(ValueError):
            SourceSpec(10.0, 1e9, power=0.0)
        with pytest.raises(ValueError):
            SourceSpec(10.0, -1e9)

    def test_scenario_rejects_overfull_subband(self):
        geom = ArrayGeometry.ula(3)
        sampling = SamplingConfig(F_NYQ, 2, 2)
        f_sub = sampling.sub_rate
        srcs = tuple(SourceSpec(t, 0.3 * f_sub) for t in (-20.0, 0.0, 20.0))
        with pytest.raises(ValueError):
            Scenario(geom, sampling, srcs)
        # allowed when the identifiability requirement is lifted
        Scenario(geom, sampling, srcs, require_identifiable=False)

    def test_scenario_rejects_duplicate_phase(self):
        geom = ArrayGeometry.ula(4)
        sampling = SamplingConfig(F_NYQ, 2, 2)
        f_sub = sampling.sub_rate
        srcs = (SourceSpec(10.0, 0.5 * f_sub), SourceSpec(10.0, 0.5 * f_sub))
        with pytest.raises(ValueError):
            Scenario(geom, sampling, srcs)

    def test_scenario_orders_sources(self):
        geom = ArrayGeometry.ula(4)
        sampling = SamplingConfig(F_NYQ, 4, 4)
        f_sub = sampling.sub_rate
        srcs = (
            SourceSpec(40.0, 2.5 * f_sub),
            SourceSpec(-10.0, 2.4 * f_sub),
            SourceSpec(5.0, 0.5 * f_sub),
        )
        scn = Scenario(geom, sampling, srcs)
        assert scn.subbands == (1, 3, 3)
        assert scn.phases[1] < scn.phases[2]

    def test_scenario_rejects_frequency_at_nyquist(self):
        geom = ArrayGeometry.ula(3)
        sampling = SamplingConfig(F_NYQ, 2, 2)
        with pytest.raises(ValueError):
            Scenario(geom, sampling, (SourceSpec(0.0, F_NYQ),))
