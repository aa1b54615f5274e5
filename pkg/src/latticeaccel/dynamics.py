"""Time evolution on the momentum ladder under lattice shaking and applied acceleration.

Acceleration enters as a comoving-frame drift of the quasimomentum,
q -> q + m a t / (hbar k), which is what a linear frequency sweep of one
lattice beam produces. Each waveform sample is a piecewise-constant
Hamiltonian and is applied as an exact exponential. When q leaves the
Brillouin zone it is wrapped by 2 and the ladder is re-indexed (Bragg
reflection). The dipole-trap potential is neglected: the sequences last
< 0.5 ms against trap periods of several ms.
"""

from dataclasses import dataclass, field
import logging
import math
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import ConvergenceError
from .lattice import (
    BlochIndex,
    MomentumWavefunction,
    N_PORTS,
    bloch_state,
    momentum_populations,
    tridiagonal,
)

log = logging.getLogger(__name__)

DEFAULT_DT_NS = 50.0
LEAKAGE_LIMIT = 1e-3
INTERBAND_FLAG = 0.05
REPORTED_TOTAL_US = 460.0  # quoted sequence length; the default components add up to 472 us


@dataclass
class ControlWaveform:
    """Lattice phase samples (rad), one per ``dt_ns`` interval."""

    samples: np.ndarray
    dt_ns: float = DEFAULT_DT_NS
    axis: str = "x"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).ravel()
        if not (self.dt_ns > 0 and math.isfinite(self.dt_ns)):
            raise ValueError(f"dt_ns must be > 0, got {self.dt_ns!r}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform samples must be finite")

    def __len__(self):
        return self.samples.size

    @property
    def duration_us(self):
        return self.samples.size * self.dt_ns * 1e-3

    @classmethod
    def constant(cls, duration_us, value=0.0, dt_ns=DEFAULT_DT_NS, axis="x"):
        n = int(round(duration_us * 1e3 / dt_ns))
        return cls(np.full(n, float(value)), dt_ns, axis)

    def reversed(self):
        return ControlWaveform(self.samples[::-1].copy(), self.dt_ns, self.axis)

    def shifted(self, offset):
        return ControlWaveform(self.samples + offset, self.dt_ns, self.axis)


@dataclass(frozen=True)
class AccelerationVector:
    a_x: float = 0.0
    a_z: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.a_x) and math.isfinite(self.a_z)):
            raise ValueError("acceleration components must be finite")

    def as_array(self):
        return np.array([self.a_x, self.a_z])


@dataclass(frozen=True)
class SequenceTiming:
    beamsplitter_us: float = 118.0
    mirror_us: float = 236.0
    propagation_us: float = 0.0

    def __post_init__(self):
        if self.beamsplitter_us <= 0 or self.mirror_us <= 0 or self.propagation_us < 0:
            raise ValueError("component durations must be > 0 and propagation >= 0")

    @property
    def total_us(self):
        return 2 * self.beamsplitter_us + self.mirror_us + 2 * self.propagation_us


@dataclass
class MomentumGrid:
    """7x7 port probabilities; rows are z ports, columns x ports, both ordered -6..+6 hbar k."""

    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        if p.shape != (N_PORTS, N_PORTS):
            raise ValueError(f"grid must be {N_PORTS}x{N_PORTS}, got {p.shape}")
        if np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            raise ValueError("grid entries must be >= 0 and sum to 1")
        self.probabilities = p

    @classmethod
    def from_marginals(cls, marginal_x, marginal_z):
        return cls(np.outer(marginal_z, marginal_x))

    @classmethod
    def delta(cls, j_x=0, j_z=0):
        p = np.zeros((N_PORTS, N_PORTS))
        p[j_z + N_PORTS // 2, j_x + N_PORTS // 2] = 1
        return cls(p)

    def quadrant_mass(self, quadrant):
        """Mass of a 3x3 corner block: 'lower_left' is negative x and z."""
        h = N_PORTS // 2
        rows = slice(0, h) if quadrant.startswith("lower") else slice(h + 1, None)
        cols = slice(0, h) if quadrant.endswith("left") else slice(h + 1, None)
        return float(self.probabilities[rows, cols].sum())


# waveform file: "dt_ns=<int>", "axis=<x|z>", then one sample per line; "#" lines are comments

def write_waveform(path, waveform, comments=()):
    lines = [f"# {c}" for c in comments]
    lines += [f"dt_ns={int(round(waveform.dt_ns))}", f"axis={waveform.axis}"]
    lines += [repr(float(s)) for s in waveform.samples]
    Path(path).write_text("\n".join(lines) + "\n")


def read_waveform(path):
    header = {}
    samples = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line:
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
            continue
        try:
            samples.append(float(line))
        except ValueError:
            raise ValueError(f"{path}:{n}: bad sample {line!r}") from None
    if "dt_ns" not in header or header.get("axis") not in ("x", "z"):
        raise ValueError(f"{path}: header needs dt_ns=<int> and axis=<x|z>")
    return ControlWaveform(np.array(samples), float(int(header["dt_ns"])), header["axis"])


def gauge_shift(psi, delta):
    """State of a lattice displaced by phase ``delta``: c_j -> e^{i j delta} c_j."""
    j = np.arange(-psi.truncation, psi.truncation + 1)
    return MomentumWavefunction(psi.quasimomentum, psi.amplitudes * np.exp(1j * j * delta))


def _shift_ladder(c, up):
    out = np.zeros_like(c)
    if up:
        out[1:] = c[:-1]
        lost = abs(c[-1]) ** 2
    else:
        out[:-1] = c[1:]
        lost = abs(c[0]) ** 2
    return out, lost


class _Evolver:
    """Stateful stepper holding (c, q) and the accumulated ladder losses."""

    def __init__(self, psi, config, accel_g=0.0):
        if not math.isfinite(accel_g):
            raise ValueError(f"acceleration must be finite, got {accel_g!r}")
        self.c = psi.amplitudes.astype(complex).copy()
        self.q = float(psi.quasimomentum)
        self.config = config
        self.J = psi.truncation
        if self.J != config.truncation:
            raise ValueError("wavefunction truncation does not match lattice config")
        self.j = np.arange(-self.J, self.J + 1)
        self.rate = config.physical.drift_rate(accel_g)
        self.lost = 0.0
        self._static = {}

    def _static_propagator(self, h, depth):
        key = (h, depth)
        if key in self._static:
            return self._static[key]
        diag, off = tridiagonal(self.q, depth, self.J)
        w, v = linalg.eigh_tridiagonal(diag, off) if depth > 0 else (diag, np.eye(diag.size))
        u = (v * np.exp(-1j * w * h)) @ v.T
        if depth == self.config.depth:
            self._static[key] = u
        return u

    def _wrap(self, q_mid):
        if q_mid > 1:
            self.q -= 2
            self.c, lost = _shift_ladder(self.c, up=True)
            self.lost += lost
        elif q_mid < -1:
            self.q += 2
            self.c, lost = _shift_ladder(self.c, up=False)
            self.lost += lost

    def step(self, phase, h, depth=None, substeps=1):
        """Advance by ``h`` internal time units at constant lattice phase."""
        depth = self.config.depth if depth is None else depth
        d = np.exp(1j * self.j * phase)
        if self.rate == 0:
            u = self._static_propagator(h, depth)
            self.c = d * (u @ (np.conj(d) * self.c))
            return
        hs = h / substeps
        for _ in range(substeps):
            self._wrap(self.q + 0.5 * self.rate * hs)
            diag, off = tridiagonal(self.q + 0.5 * self.rate * hs, depth, self.J)
            if depth > 0:
                w, v = linalg.eigh_tridiagonal(diag, off)
                x = v.T @ (np.conj(d) * self.c)
                self.c = d * (v @ (np.exp(-1j * w * hs) * x))
            else:
                self.c = self.c * np.exp(-1j * diag * hs)
            self.q += self.rate * hs

    def run(self, phases, h, substeps=1):
        for p in phases:
            self.step(p, h, substeps=substeps)

    def state(self, check=True):
        if check:
            edge = float(np.sum(np.abs(self.c[[0, 1, -2, -1]]) ** 2))
            leak = self.lost + edge
            if leak > LEAKAGE_LIMIT:
                raise ConvergenceError(
                    f"ladder leakage {leak:.3g} exceeds {LEAKAGE_LIMIT:g}; increase truncation")
        return MomentumWavefunction(self.q, self.c.copy())


def _phase_schedule(waveform, duration_us, dt_ns):
    """Per-step phases and the (possibly shorter) final step, in samples of dt."""
    if waveform is None:
        n_full = int(math.floor(duration_us * 1e3 / dt_ns + 1e-9))
        rest = duration_us * 1e3 / dt_ns - n_full
        phases = np.zeros(n_full + (1 if rest > 1e-9 else 0))
        return phases, rest
    dt_ns = waveform.dt_ns
    if duration_us is None:
        return waveform.samples, 0.0
    exact = duration_us * 1e3 / dt_ns
    n_full = int(math.floor(exact + 1e-9))
    rest = exact - n_full
    n_needed = n_full + (1 if rest > 1e-9 else 0)
    samples = waveform.samples
    if n_needed > samples.size:
        log.warning("waveform %.3f us shorter than %.3f us; padding with last value",
                    waveform.duration_us, duration_us)
        pad_value = samples[-1] if samples.size else 0.0
        samples = np.concatenate([samples, np.full(n_needed - samples.size, pad_value)])
    return samples[:n_needed], rest


def propagate(psi, config, waveform=None, accel_g=0.0, duration_us=None,
              substeps=1, check=True):
    """Evolve ``psi`` under the shaken lattice for ``duration_us``.

    Parameters
    ----------
    psi : MomentumWavefunction
        Normalized initial state.
    config : LatticeConfig
    waveform : ControlWaveform or None
        Lattice phase program. ``None`` means no shaking (phase 0).
    accel_g : float
        Acceleration along this axis in units of g.
    duration_us : float or None
        Defaults to the waveform duration. A longer duration pads the
        waveform with its last sample.
    substeps : int
        Sub-intervals per sample for the quasimomentum drift.

    Returns
    -------
    MomentumWavefunction
        Final state with its drifted quasimomentum.
    """
    psi.check_normalized(1e-9)
    if waveform is None and duration_us is None:
        raise ValueError("need a waveform or a duration")
    dt_ns = waveform.dt_ns if waveform is not None else DEFAULT_DT_NS
    phases, rest = _phase_schedule(waveform, duration_us, dt_ns)
    h = config.physical.seconds_to_internal(dt_ns * 1e-9)
    ev = _Evolver(psi, config, accel_g)
    n_full = phases.size - (1 if rest > 1e-9 else 0)
    ev.run(phases[:n_full], h, substeps)
    if rest > 1e-9:
        ev.step(phases[-1], rest * h, substeps=substeps)
    return ev.state(check)


@dataclass
class LoadResult:
    state: MomentumWavefunction
    fidelity: float


def adiabatic_load(config, ramp_time_ms=1.0, dt_ns=DEFAULT_DT_NS):
    """Ramp the depth linearly 0 -> V0 starting from the zero-momentum plane wave."""
    if ramp_time_ms < 0:
        raise ValueError("ramp_time_ms must be >= 0")
    psi = MomentumWavefunction.plane_wave(config.truncation)
    ground = bloch_state(config, BlochIndex(0, 0.0))
    if ramp_time_ms == 0:
        return LoadResult(psi, _overlap2(ground, psi))
    total = ramp_time_ms * 1e6
    n = max(int(math.ceil(total / dt_ns - 1e-9)), 1)
    h = config.physical.seconds_to_internal(total * 1e-9 / n)
    ev = _Evolver(psi, config)
    for k in range(n):
        ev.step(0.0, h, depth=config.depth * (k + 0.5) / n)
    state = ev.state()
    return LoadResult(state, _overlap2(ground, state))


def _overlap2(a, b):
    return float(abs(np.vdot(a.amplitudes, b.amplitudes)) ** 2)


@dataclass
class BlochSeries:
    hold_times_ms: np.ndarray
    populations: np.ndarray  # (n_times, 7)
    interband_leakage: float
    accel_g: float

    @property
    def flagged(self):
        return self.interband_leakage > INTERBAND_FLAG


def simulate_bloch_oscillations(config, accel_g, hold_times_ms, initial=None,
                                dt_ns=DEFAULT_DT_NS):
    """Port populations of the shake-free lattice after each hold time under constant force."""
    times = np.asarray(hold_times_ms, dtype=float)
    order = np.argsort(times, kind="stable")
    psi = initial if initial is not None else bloch_state(config, BlochIndex(0, 0.0))
    h = config.physical.seconds_to_internal(dt_ns * 1e-9)
    ev = _Evolver(psi, config, accel_g)
    pops = np.zeros((times.size, N_PORTS))
    t_now = 0.0
    worst = 0.0
    for i in order:
        span = times[i] - t_now
        if span < 0:
            raise ValueError("hold times must be >= 0")
        n = int(math.floor(span * 1e6 / dt_ns + 1e-9))
        ev.run(np.zeros(n), h)
        rest = span * 1e6 / dt_ns - n
        if rest > 1e-9:
            ev.step(0.0, rest * h)
        t_now = times[i]
        state = ev.state()
        ground = bloch_state(config, BlochIndex(0, float(np.clip(state.quasimomentum, -1, 1))))
        worst = max(worst, 1 - _overlap2(ground, state))
        pops[i] = momentum_populations(state).probabilities
    series = BlochSeries(times, pops, worst, accel_g)
    if series.flagged:
        log.warning("interband leakage %.3g: %.3g g too strong for depth %g",
                    worst, accel_g, config.depth)
    return series


def simulate_kapitza_dirac(config, pulse_time_us):
    """Diffraction of a plane wave at rest by a static lattice pulse."""
    if pulse_time_us < 0:
        raise ValueError("pulse_time_us must be >= 0")
    psi = MomentumWavefunction.plane_wave(config.truncation)
    t = config.physical.seconds_to_internal(pulse_time_us * 1e-6)
    ev = _Evolver(psi, config)
    if t > 0:
        ev.step(0.0, t)
    return momentum_populations(ev.state()).probabilities


def fit_kapitza_dirac_depth(populations, pulse_time_us, config, depth_grid):
    """Depth on ``depth_grid`` whose simulated diffraction best matches ``populations``."""
    depth_grid = np.asarray(depth_grid, dtype=float)
    cost = np.array([
        np.sum((simulate_kapitza_dirac(config.with_depth(d), pulse_time_us) - populations) ** 2)
        for d in depth_grid
    ])
    k = int(np.argmin(cost))
    if 0 < k < depth_grid.size - 1:
        y0, y1, y2 = cost[k - 1:k + 2]
        denom = y0 - 2 * y1 + y2
        if denom > 0:
            step = depth_grid[k + 1] - depth_grid[k]
            return float(depth_grid[k] + 0.5 * step * (y0 - y2) / denom)
    return float(depth_grid[k])


@dataclass
class MichelsonResult:
    populations: np.ndarray
    state: MomentumWavefunction
    stages: dict = field(default_factory=dict)


def _check_timing(waveform, expected_us, name):
    if abs(waveform.duration_us - expected_us) > 0.5 * waveform.dt_ns * 1e-3:
        raise ValueError(
            f"{name} waveform lasts {waveform.duration_us:g} us but timing expects {expected_us:g} us")


def simulate_michelson_1d(config, beamsplitter, mirror, accel_g, timing,
                          initial=None, phase_offset=0.0, substeps=1, record_stages=False):
    """Beamsplitter, mirror and time-reversed beamsplitter under constant acceleration.

    Optional propagation stages hold the lattice phase at the last value of
    the preceding component. ``phase_offset`` displaces the whole program and
    the initial state together.
    """
    _check_timing(beamsplitter, timing.beamsplitter_us, "beamsplitter")
    _check_timing(mirror, timing.mirror_us, "mirror")
    if beamsplitter.dt_ns != mirror.dt_ns:
        raise ValueError("beamsplitter and mirror sample intervals differ")
    psi = initial if initial is not None else bloch_state(config, BlochIndex(0, 0.0))
    if phase_offset:
        psi = gauge_shift(psi, phase_offset)
    h = config.physical.seconds_to_internal(beamsplitter.dt_ns * 1e-9)
    ev = _Evolver(psi, config, accel_g)
    stages = {}

    def mark(name):
        if record_stages:
            stages[name] = ev.state()

    def hold(value):
        if timing.propagation_us > 0:
            n = int(round(timing.propagation_us * 1e3 / beamsplitter.dt_ns))
            ev.run(np.full(n, value), h, substeps)

    mark("initial")
    ev.run(beamsplitter.samples + phase_offset, h, substeps)
    mark("after_beamsplitter")
    hold(beamsplitter.samples[-1] + phase_offset)
    mark("before_mirror")
    ev.run(mirror.samples + phase_offset, h, substeps)
    mark("after_mirror")
    hold(mirror.samples[-1] + phase_offset)
    ev.run(beamsplitter.samples[::-1] + phase_offset, h, substeps)
    final = ev.state()
    stages = {k: momentum_populations(v).probabilities for k, v in stages.items()}
    return MichelsonResult(momentum_populations(final).probabilities, final, stages)


def simulate_michelson_2d(config, components_x, components_z, accel, timing, **kwargs):
    """Separable 2D sequence: outer product of the per-axis 1D port vectors.

    ``components_x`` and ``components_z`` are (beamsplitter, mirror) pairs.
    """
    px = simulate_michelson_1d(config, *components_x, accel.a_x, timing, **kwargs).populations
    pz = simulate_michelson_1d(config, *components_z, accel.a_z, timing, **kwargs).populations
    return MomentumGrid.from_marginals(px, pz)
