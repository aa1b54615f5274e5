"""Shaking-waveform construction and gradient-based optimal control.

At fixed quasimomentum the shaken Hamiltonian is a gauge transform of the
static one, H(phi) = D(phi) H(0) D(phi)^+ with D = diag(exp(i j phi)), so
one static propagator serves every sample and dU/dphi = i [J, U] exactly.
The adjoint gradient below uses that identity.
"""

from dataclasses import dataclass, field
import csv
import logging

import numpy as np
from scipy import linalg, optimize

from .dynamics import DEFAULT_DT_NS, ControlWaveform
from .lattice import (
    BlochIndex,
    MomentumWavefunction,
    bloch_state,
    momentum_reversal,
    tridiagonal,
)

log = logging.getLogger(__name__)

STEP_RULES = ("fixed", "backtracking", "lbfgs")
BASES = ("samples", "fourier")


@dataclass
class ComponentSpec:
    """A state map to realize with a shaking waveform.

    ``initial`` and ``target`` are BlochIndex or MomentumWavefunction, or
    equal-length tuples of them; tuples are optimized as a phase-coherent
    map on the span of the initial states.
    """

    initial: object
    target: object
    duration_us: float
    depth: float = 10.0

    def __post_init__(self):
        if not self.duration_us > 0:
            raise ValueError("duration_us must be > 0")

    def pairs(self):
        inits = self.initial if isinstance(self.initial, (tuple, list)) else (self.initial,)
        targets = self.target if isinstance(self.target, (tuple, list)) else (self.target,)
        if len(inits) != len(targets):
            raise ValueError("initial and target lists differ in length")
        return list(zip(inits, targets))


@dataclass
class OptimizerConfig:
    max_iterations: int = 300
    fidelity_goal: float = 0.99
    step_rule: str = "backtracking"
    step_size: float = 1.0
    seed: int = 0
    basis: str = "samples"
    fourier_modes: int = 0
    max_restarts: int = 3
    stall_tolerance: float = 1e-7
    dt_ns: float = DEFAULT_DT_NS

    def __post_init__(self):
        if not 0 < self.fidelity_goal <= 1:
            raise ValueError("fidelity_goal must lie in (0, 1]")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}")
        if self.basis not in BASES:
            raise ValueError(f"basis must be one of {BASES}")
        if self.basis == "fourier" and self.fourier_modes < 1:
            raise ValueError("fourier basis needs fourier_modes >= 1")


@dataclass
class OptimizationResult:
    waveform: ControlWaveform
    fidelity: float
    converged: bool
    trace: list = field(default_factory=list)  # (iteration, fidelity, gradient norm)
    restarts: int = 0


def fidelity(psi, target):
    """|<target|psi>|^2."""
    if psi.amplitudes.shape != target.amplitudes.shape:
        raise ValueError("basis dimensions differ")
    if abs(psi.quasimomentum - target.quasimomentum) > 1e-12:
        raise ValueError("states have different quasimomenta")
    return float(min(abs(np.vdot(target.amplitudes, psi.amplitudes)) ** 2, 1.0))


def time_reversed(waveform):
    return waveform.reversed()


def stitch(components, gaps_us=()):
    """Concatenate waveforms, holding the last phase through each gap."""
    if not components:
        raise ValueError("nothing to stitch")
    dt = components[0].dt_ns
    if any(c.dt_ns != dt for c in components):
        raise ValueError("components have different sample intervals")
    gaps_us = list(gaps_us) or [0.0] * (len(components) - 1)
    if len(gaps_us) != len(components) - 1:
        raise ValueError("need one gap per junction")
    parts = [components[0].samples]
    for gap, comp in zip(gaps_us, components[1:]):
        n = int(round(gap * 1e3 / dt))
        if n:
            parts.append(np.full(n, parts[-1][-1] if parts[-1].size else 0.0))
        parts.append(comp.samples)
    return ControlWaveform(np.concatenate(parts), dt, components[0].axis)


def _resolve(state, lattice):
    if isinstance(state, BlochIndex):
        return bloch_state(lattice, state)
    return state


class GateObjective:
    """Phase-coherent map fidelity |1/K sum_k <t_k|U(phi)|i_k>|^2 and its adjoint gradient."""

    def __init__(self, lattice, pairs, dt_ns=DEFAULT_DT_NS):
        states = [(_resolve(a, lattice), _resolve(b, lattice)) for a, b in pairs]
        qs = {round(s.quasimomentum, 12) for pair in states for s in pair}
        if len(qs) != 1:
            raise ValueError("all states must share one quasimomentum")
        self.q = qs.pop()
        self.lattice = lattice
        self.inits = np.stack([a.amplitudes for a, _ in states], axis=1)
        self.targets = np.stack([b.amplitudes for _, b in states], axis=1)
        self.K = self.inits.shape[1]
        self.j = lattice.ladder.astype(float)
        self.h = lattice.physical.seconds_to_internal(dt_ns * 1e-9)
        diag, off = tridiagonal(self.q, lattice.depth, lattice.truncation)
        w, v = linalg.eigh_tridiagonal(diag, off)
        self.u0 = (v * np.exp(-1j * w * self.h)) @ v.T
        self.energies = w

    def _forward(self, phases):
        d = np.exp(1j * np.outer(phases, self.j))  # (N, D)
        states = np.empty((phases.size + 1,) + self.inits.shape, complex)
        psi = self.inits.copy()
        states[0] = psi
        u0 = self.u0
        for n in range(phases.size):
            dn = d[n][:, None]
            psi = dn * (u0 @ (np.conj(dn) * psi))
            states[n + 1] = psi
        return states, d

    def overlap(self, phases):
        states, _ = self._forward(np.asarray(phases, float))
        return np.sum(np.conj(self.targets) * states[-1]) / self.K

    def fidelity(self, phases):
        return float(abs(self.overlap(phases)) ** 2)

    def fidelity_and_gradient(self, phases):
        phases = np.asarray(phases, float)
        states, d = self._forward(phases)
        o = np.sum(np.conj(self.targets) * states[-1]) / self.K
        u0h = self.u0.conj().T
        jcol = self.j[:, None]
        chi = self.targets.copy()
        n_steps = phases.size
        g = np.empty(n_steps + 1, complex)  # g_n = sum_k <chi_n| J |psi_n>
        g[n_steps] = np.sum(np.conj(chi) * jcol * states[n_steps])
        for n in range(n_steps - 1, -1, -1):
            dn = d[n][:, None]
            chi = dn * (u0h @ (np.conj(dn) * chi))
            g[n] = np.sum(np.conj(chi) * jcol * states[n])
        do = 1j * (g[1:] - g[:-1]) / self.K
        return float(abs(o) ** 2), 2 * np.real(np.conj(o) * do)

    def resonances(self, n_bands=6):
        e = self.energies[:n_bands]
        gaps = {round(abs(a - b), 6) for i, a in enumerate(e) for b in e[i + 1:]}
        return sorted(g for g in gaps if g > 0.5)


def finite_difference_gradient(objective, phases, eps=1e-6, indices=None):
    """Central differences of ``objective.fidelity`` for verification."""
    phases = np.asarray(phases, float)
    indices = range(phases.size) if indices is None else indices
    out = []
    for i in indices:
        p, m = phases.copy(), phases.copy()
        p[i] += eps
        m[i] -= eps
        out.append((objective.fidelity(p) - objective.fidelity(m)) / (2 * eps))
    return np.array(out)


def _fourier_basis(n_samples, modes):
    t = (np.arange(n_samples) + 0.5) / n_samples
    cols = [np.ones(n_samples)]
    for k in range(1, modes + 1):
        cols += [np.cos(2 * np.pi * k * t), np.sin(2 * np.pi * k * t)]
    return np.stack(cols, axis=1)


def _candidate_guesses(objective, n_samples, rng):
    t = (np.arange(n_samples) + 0.5) * objective.h
    guesses = []
    for omega in objective.resonances():
        amp = rng.uniform(0.4, 0.8)
        theta = rng.uniform(0, 2 * np.pi)
        guesses.append(amp * np.sin(omega * t + theta))
    return guesses


def _ascend(objective, x0, basis, cfg, iter_budget, trace, it0):
    """Gradient ascent in basis coordinates. Returns (x, F, iterations used, stalled)."""
    to_samples = (lambda x: x) if basis is None else (lambda x: basis @ x)
    pull_back = (lambda g: g) if basis is None else (lambda g: basis.T @ g)

    def fg(x):
        f, g = objective.fidelity_and_gradient(to_samples(x))
        return f, pull_back(g)

    if cfg.step_rule == "lbfgs":
        state = {"it": 0}

        def neg(x):
            f, g = fg(x)
            state["last"] = (f, float(np.linalg.norm(g)))
            return -f, -g

        def callback(xk):
            state["it"] += 1
            f, gn = state["last"]
            trace.append((it0 + state["it"], f, gn))
            if f >= cfg.fidelity_goal:
                raise StopIteration

        res = optimize.minimize(neg, x0, jac=True, method="L-BFGS-B", callback=callback,
                                options={"maxiter": iter_budget, "gtol": cfg.stall_tolerance})
        f, g = fg(res.x)
        return res.x, f, state["it"], float(np.linalg.norm(g)) < cfg.stall_tolerance

    x = x0.copy()
    f, g = fg(x)
    step = cfg.step_size
    for k in range(iter_budget):
        gn = float(np.linalg.norm(g))
        if f >= cfg.fidelity_goal:
            return x, f, k, False
        if gn < cfg.stall_tolerance:
            return x, f, k, True
        if cfg.step_rule == "fixed":
            x = x + step * g
            f, g = fg(x)
        else:
            while True:
                x_new = x + step * g
                f_new, g_new = fg(x_new)
                if f_new > f:
                    break
                step *= 0.5
                if step < 1e-12:
                    return x, f, k, True
            x, f, g = x_new, f_new, g_new
            step *= 1.5
        trace.append((it0 + k + 1, f, float(np.linalg.norm(g))))
    return x, f, iter_budget, False


def optimize_component(spec, config, lattice):
    """Search for a shaking waveform realizing ``spec`` at zero acceleration.

    Starts from the zero waveform, then from seeded resonant sinusoids,
    restarting from the next candidate whenever the gradient stalls. The
    best waveform found is returned; ``converged`` tells whether the
    fidelity goal was met.
    """
    lattice = lattice.with_depth(spec.depth)
    objective = GateObjective(lattice, spec.pairs(), config.dt_ns)
    n = int(round(spec.duration_us * 1e3 / config.dt_ns))
    if abs(n * config.dt_ns - spec.duration_us * 1e3) > 1e-6:
        raise ValueError("duration is not a whole number of samples")
    zero = np.zeros(n)
    f0 = objective.fidelity(zero)
    if f0 >= config.fidelity_goal:
        return OptimizationResult(ControlWaveform(zero, config.dt_ns), f0, True, [], 0)

    rng = np.random.default_rng(config.seed)
    guesses = _candidate_guesses(objective, n, rng)
    guesses.sort(key=objective.fidelity, reverse=True)
    basis = _fourier_basis(n, config.fourier_modes) if config.basis == "fourier" else None

    trace = []
    best_x, best_f = zero, f0
    used = 0
    restarts = 0
    for guess in guesses[:config.max_restarts + 1]:
        x0 = guess if basis is None else np.linalg.lstsq(basis, guess, rcond=None)[0]
        x, f, its, stalled = _ascend(objective, x0, basis, config,
                                     config.max_iterations - used, trace, used)
        used += its
        samples = x if basis is None else basis @ x
        if f > best_f:
            best_x, best_f = samples, f
        if best_f >= config.fidelity_goal or used >= config.max_iterations:
            break
        restarts += 1
        log.info("restart %d after fidelity %.4f (stalled=%s)", restarts, f, stalled)
    converged = best_f >= config.fidelity_goal
    if not converged:
        log.warning("fidelity goal %.4f not reached; best %.4f", config.fidelity_goal, best_f)
    return OptimizationResult(ControlWaveform(best_x, config.dt_ns), best_f, converged,
                              trace, restarts)


def beamsplitter_spec(depth=10.0, duration_us=118.0):
    """|n=0, q=0> -> |n=3, q=0>, the equal +-4 hbar k superposition."""
    return ComponentSpec(BlochIndex(0, 0.0), BlochIndex(3, 0.0), duration_us, depth)


def mirror_spec(lattice, duration_us=236.0):
    """Momentum reversal c_j -> c_-j on the span of |3, 0> and |4, 0>.

    Both states are close to +-4 hbar k superpositions, so this map exchanges
    the two interferometer arms while keeping their relative phase.
    """
    s3 = bloch_state(lattice, BlochIndex(3, 0.0))
    s4 = bloch_state(lattice, BlochIndex(4, 0.0))
    return ComponentSpec((s3, s4), (momentum_reversal(s3), momentum_reversal(s4)),
                         duration_us, lattice.depth)


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "fidelity", "gradient_norm"])
        for it, f, gn in trace:
            w.writerow([it, repr(float(f)), repr(float(gn))])


def propagate_component(lattice, waveform, initial):
    """State after ``waveform`` at zero acceleration, using the gauge identity."""
    objective = GateObjective(lattice, [(initial, initial)], waveform.dt_ns)
    states, _ = objective._forward(waveform.samples)
    return MomentumWavefunction(objective.q, states[-1][:, 0])
