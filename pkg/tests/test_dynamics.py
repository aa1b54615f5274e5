import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg, special

from latticeaccel.dynamics import (
    REPORTED_TOTAL_US,
    AccelerationVector,
    ControlWaveform,
    MomentumGrid,
    SequenceTiming,
    adiabatic_load,
    fit_kapitza_dirac_depth,
    gauge_shift,
    propagate,
    read_waveform,
    simulate_bloch_oscillations,
    simulate_kapitza_dirac,
    simulate_michelson_1d,
    simulate_michelson_2d,
    write_waveform,
)
from latticeaccel.errors import ConvergenceError
from latticeaccel.estimation import fit_bloch_period
from latticeaccel.lattice import (
    BlochIndex,
    LatticeConfig,
    MomentumWavefunction,
    bloch_state,
    build_hamiltonian,
)

CFG = LatticeConfig()


def expm_reference(psi, cfg, phases, dt_ns):
    """Independent oracle: dense matrix exponential per sample at fixed q."""
    h = cfg.physical.seconds_to_internal(dt_ns * 1e-9)
    c = psi.amplitudes.copy()
    for p in phases:
        c = linalg.expm(-1j * h * build_hamiltonian(cfg, psi.quasimomentum, p)) @ c
    return c


def random_state(rng, truncation=8, spread=3):
    c = np.zeros(2 * truncation + 1, complex)
    mid = truncation
    c[mid - spread:mid + spread + 1] = rng.normal(size=2 * spread + 1) + 1j * rng.normal(size=2 * spread + 1)
    return MomentumWavefunction(0.0, c / np.linalg.norm(c))


def test_shaken_propagation_matches_matrix_exponential():
    rng = np.random.default_rng(1)
    psi = random_state(rng)
    wf = ControlWaveform(rng.uniform(-1, 1, 40))
    out = propagate(psi, CFG, wf)
    np.testing.assert_allclose(out.amplitudes, expm_reference(psi, CFG, wf.samples, 50.0), atol=1e-10)


def test_static_lattice_only_adds_eigenphase():
    psi = bloch_state(CFG, BlochIndex(2, 0.0))
    out = propagate(psi, CFG, duration_us=37.3)
    assert abs(np.vdot(psi.amplitudes, out.amplitudes)) == pytest.approx(1.0, abs=1e-12)


def test_drift_converges_with_substeps():
    psi = bloch_state(CFG, BlochIndex(0, 0.0))
    wf = ControlWaveform(0.5 * np.sin(np.arange(400) * 0.1))
    coarse = propagate(psi, CFG, wf, accel_g=1.5)
    fine = propagate(psi, CFG, wf, accel_g=1.5, substeps=32)
    assert coarse.quasimomentum == pytest.approx(fine.quasimomentum, abs=1e-12)
    assert np.max(np.abs(coarse.amplitudes - fine.amplitudes)) < 1e-4


def test_quasimomentum_advances_at_drift_rate():
    psi = bloch_state(CFG, BlochIndex(0, 0.0))
    out = propagate(psi, CFG, duration_us=100.0, accel_g=1.0)
    expected = CFG.physical.drift_rate(1.0) * CFG.physical.seconds_to_internal(100e-6)
    assert out.quasimomentum == pytest.approx(expected, rel=1e-9)


def test_full_bloch_period_returns_to_ground_state():
    psi = bloch_state(CFG, BlochIndex(0, 0.0))
    period_us = CFG.physical.bloch_period(2.0) * 1e6
    out = propagate(psi, CFG, duration_us=period_us, accel_g=2.0, substeps=2)
    assert abs(out.quasimomentum) < 1e-9
    assert abs(np.vdot(psi.amplitudes, out.amplitudes)) ** 2 > 0.99


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=30), st.floats(-1.5, 1.5),
       st.integers(0, 2**32 - 1))
def test_norm_preserved(samples, accel, seed):
    psi = random_state(np.random.default_rng(seed))
    out = propagate(psi, CFG, ControlWaveform(samples), accel_g=accel)
    assert out.norm == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=30), st.floats(-np.pi, np.pi),
       st.floats(-1.0, 1.0))
def test_constant_phase_offset_is_a_gauge_shift(samples, delta, accel):
    psi = bloch_state(CFG, BlochIndex(0, 0.0))
    wf = ControlWaveform(samples)
    a = propagate(gauge_shift(psi, delta), CFG, wf.shifted(delta), accel_g=accel)
    b = gauge_shift(propagate(psi, CFG, wf, accel_g=accel), delta)
    np.testing.assert_allclose(a.amplitudes, b.amplitudes, atol=1e-10)


def test_short_waveform_is_padded_with_warning(caplog):
    psi = bloch_state(CFG, BlochIndex(0, 0.0))
    wf = ControlWaveform([0.3] * 10)
    with caplog.at_level(logging.WARNING):
        out = propagate(psi, CFG, wf, duration_us=1.0)
    assert "padding" in caplog.text
    ref = propagate(psi, CFG, ControlWaveform([0.3] * 20))
    np.testing.assert_allclose(out.amplitudes, ref.amplitudes, atol=1e-12)


def test_leakage_raises():
    psi = MomentumWavefunction.plane_wave(8, j=8)
    with pytest.raises(ConvergenceError):
        propagate(psi, CFG, duration_us=1.0)


def test_unnormalized_input_rejected():
    with pytest.raises(ValueError):
        propagate(MomentumWavefunction(0.0, np.ones(17)), CFG, duration_us=1.0)


def test_kapitza_dirac_raman_nath_oracle():
    cfg = LatticeConfig(depth=100.0, truncation=12)
    p = simulate_kapitza_dirac(cfg, 1.0)
    arg = cfg.depth * cfg.physical.seconds_to_internal(1e-6) / 2
    np.testing.assert_allclose(p, special.jv(np.arange(-3, 4), arg) ** 2, atol=1e-3)


def test_kapitza_dirac_zero_pulse():
    np.testing.assert_array_equal(simulate_kapitza_dirac(CFG, 0.0), [0, 0, 0, 1, 0, 0, 0])


def test_kapitza_dirac_depth_fit_recovers_depth():
    cfg = LatticeConfig(depth=12.3)
    pops = simulate_kapitza_dirac(cfg, 20.0)
    fit = fit_kapitza_dirac_depth(pops, 20.0, cfg, np.arange(8.0, 16.01, 0.5))
    assert fit == pytest.approx(12.3, abs=0.05)


def test_adiabatic_load_fidelity():
    assert adiabatic_load(CFG, 1.0).fidelity >= 0.99


def test_sudden_load_is_not_adiabatic():
    assert adiabatic_load(CFG, 0.0).fidelity < 0.9


def test_bloch_oscillation_period_one_g():
    times = np.round(np.arange(0, 4.0 + 1e-9, 0.02), 9)
    series = simulate_bloch_oscillations(CFG, 1.0, times)
    fit = fit_bloch_period(times, series.populations, CFG.physical)
    assert abs(fit.period_ms - 0.8800532853279189) < 2 * fit.period_sigma_ms
    assert fit.period_ms == pytest.approx(0.8800532853279189, rel=2e-3)
    assert not series.flagged


def test_bloch_zero_acceleration_is_static():
    series = simulate_bloch_oscillations(CFG, 0.0, [0.0, 0.5, 1.0])
    np.testing.assert_allclose(series.populations, series.populations[[0, 0, 0]], atol=1e-12)


def test_strong_force_flags_interband_transitions(caplog):
    with caplog.at_level(logging.WARNING):
        series = simulate_bloch_oscillations(LatticeConfig(depth=1.0), 50.0, [0.0, 0.05])
    assert series.flagged


def test_sequence_timing():
    t = SequenceTiming()
    assert t.total_us == 472.0
    assert REPORTED_TOTAL_US == 460.0
    assert SequenceTiming(propagation_us=10).total_us == 492.0
    with pytest.raises(ValueError):
        SequenceTiming(beamsplitter_us=0)


def test_michelson_checks_component_durations():
    bs = ControlWaveform.constant(100.0)
    mirror = ControlWaveform.constant(236.0)
    with pytest.raises(ValueError, match="beamsplitter"):
        simulate_michelson_1d(CFG, bs, mirror, 0.0, SequenceTiming())


def test_michelson_without_shaking_returns_ground_state():
    bs = ControlWaveform.constant(118.0)
    mirror = ControlWaveform.constant(236.0)
    res = simulate_michelson_1d(CFG, bs, mirror, 0.0, SequenceTiming(), record_stages=True)
    assert set(res.stages) == {"initial", "after_beamsplitter", "before_mirror", "after_mirror"}
    np.testing.assert_allclose(res.populations, res.stages["initial"], atol=1e-12)
    grid = simulate_michelson_2d(CFG, (bs, mirror), (bs, mirror), AccelerationVector(), SequenceTiming())
    np.testing.assert_allclose(grid.probabilities, np.outer(res.populations, res.populations))


def test_michelson_phase_offset_is_invisible_in_populations():
    rng = np.random.default_rng(4)
    bs = ControlWaveform(rng.uniform(-1, 1, 2360))
    mirror = ControlWaveform(rng.uniform(-1, 1, 4720))
    a = simulate_michelson_1d(CFG, bs, mirror, 0.1, SequenceTiming()).populations
    b = simulate_michelson_1d(CFG, bs, mirror, 0.1, SequenceTiming(), phase_offset=0.7).populations
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_waveform_file_round_trip(tmp_path):
    wf = ControlWaveform(np.random.default_rng(0).normal(size=25), 50.0, "z")
    write_waveform(tmp_path / "w.txt", wf, comments=["made by a test"])
    back = read_waveform(tmp_path / "w.txt")
    np.testing.assert_array_equal(back.samples, wf.samples)
    assert back.axis == "z" and back.dt_ns == 50.0


def test_waveform_file_errors(tmp_path):
    (tmp_path / "a.txt").write_text("dt_ns=50\naxis=y\n0.1\n")
    with pytest.raises(ValueError, match="header"):
        read_waveform(tmp_path / "a.txt")
    (tmp_path / "b.txt").write_text("dt_ns=50\naxis=x\nzero\n")
    with pytest.raises(ValueError, match="bad sample"):
        read_waveform(tmp_path / "b.txt")


def test_waveform_validation():
    with pytest.raises(ValueError):
        ControlWaveform([0.0, np.nan])
    with pytest.raises(ValueError):
        ControlWaveform([0.0], dt_ns=0)
    assert ControlWaveform.constant(118.0).duration_us == pytest.approx(118.0)


def test_momentum_grid():
    g = MomentumGrid.delta(-1, 2)
    assert g.probabilities[5, 2] == 1
    u = np.array([0.1, 0.2, 0.1, 0.2, 0.1, 0.2, 0.1])
    v = np.full(7, 1 / 7)
    grid = MomentumGrid.from_marginals(u, v)
    assert grid.quadrant_mass("lower_left") == pytest.approx(3 / 7 * 0.4)
    assert grid.quadrant_mass("upper_right") == pytest.approx(3 / 7 * 0.4)
    with pytest.raises(ValueError):
        MomentumGrid(np.ones((7, 7)))
    with pytest.raises(ValueError):
        MomentumGrid(np.ones((6, 6)) / 36)


def test_acceleration_vector_validation():
    with pytest.raises(ValueError):
        AccelerationVector(np.inf, 0.0)
