"""End-to-end studies: component design, closed-loop calibration and estimation runs."""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import logging
import math

import numpy as np

from . import estimation as est
from .control import OptimizerConfig, beamsplitter_spec, mirror_spec, optimize_component
from .dynamics import (
    AccelerationVector,
    ControlWaveform,
    MomentumGrid,
    SequenceTiming,
    simulate_bloch_oscillations,
    simulate_michelson_1d,
)
from .imaging import DetectionModel, sample_shot, shot_seed
from .lattice import N_PORTS, BlochIndex, LatticeConfig, bloch_state, momentum_populations

log = logging.getLogger(__name__)


def _michelson_point(args):
    lattice, bs, mirror, timing, substeps, a = args
    return simulate_michelson_1d(lattice, bs, mirror, a, timing, substeps=substeps).populations


@dataclass
class Interferometer:
    """Michelson sequence per axis with a cache of 1D port responses p(a)."""

    lattice: LatticeConfig
    components_x: tuple  # (beamsplitter, mirror)
    components_z: tuple = None
    timing: SequenceTiming = field(default_factory=SequenceTiming)
    substeps: int = 1
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.components_z is None:
            self.components_z = self.components_x

    def _components(self, axis):
        return self.components_x if axis == "x" else self.components_z

    def _key(self, axis):
        # both axes share one cache when they run the same waveforms
        return "x" if self.components_z is self.components_x else axis

    def precompute(self, axis, values, threads=1):
        """Fill the response cache for ``values``; ``threads`` > 1 uses a process pool."""
        axis = self._key(axis)
        todo = sorted({float(a) for a in values} - {k[1] for k in self._cache if k[0] == axis})
        if not todo:
            return
        bs, mirror = self._components(axis)
        jobs = [(self.lattice, bs, mirror, self.timing, self.substeps, a) for a in todo]
        if threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(threads) as pool:
                results = list(pool.map(_michelson_point, jobs))
        else:
            results = [_michelson_point(j) for j in jobs]
        for a, p in zip(todo, results):
            self._cache[(axis, a)] = p

    def response(self, a, axis="x"):
        key = (self._key(axis), float(a))
        if key not in self._cache:
            self.precompute(axis, [a])
        return self._cache[key]

    def grid(self, accel):
        return MomentumGrid.from_marginals(self.response(accel.a_x, "x"),
                                           self.response(accel.a_z, "z"))

    def negated(self):
        """Same sequence with every lattice phase negated (mirror-image response)."""
        def neg(pair):
            return tuple(ControlWaveform(-w.samples, w.dt_ns, w.axis) for w in pair)
        x = neg(self.components_x)
        z = x if self.components_z is self.components_x else neg(self.components_z)
        return Interferometer(self.lattice, x, z, self.timing, self.substeps)


def initial_grid(lattice):
    """Port grid of the ground Bloch state on both axes, where a closed sequence should return."""
    p = momentum_populations(bloch_state(lattice, BlochIndex(0, 0.0))).probabilities
    return MomentumGrid.from_marginals(p, p)


def orient(interf, probe=-0.2):
    """Fix the handedness so a negative acceleration pushes atoms into negative ports.

    Negating all phases maps the response p_j(a) to p_{-j}(-a), so exactly
    one of the two programs has the conventional orientation.
    """
    p = interf.response(probe, "x")
    h = N_PORTS // 2
    if p[:h].sum() >= p[h + 1:].sum():
        return interf
    log.info("negating waveforms to orient the response")
    return interf.negated()


def design_components(lattice, timing=None, optimizer=None, mirror_optimizer=None):
    """Optimize beamsplitter and mirror, then orient the interferometer.

    Returns (Interferometer, beamsplitter result, mirror result).
    """
    timing = timing or SequenceTiming()
    optimizer = optimizer or OptimizerConfig(step_rule="lbfgs", fidelity_goal=0.999)
    mirror_optimizer = mirror_optimizer or OptimizerConfig(step_rule="lbfgs", fidelity_goal=0.995,
                                                           seed=optimizer.seed)
    bs = optimize_component(beamsplitter_spec(lattice.depth, timing.beamsplitter_us),
                            optimizer, lattice)
    mirror = optimize_component(mirror_spec(lattice, timing.mirror_us), mirror_optimizer, lattice)
    bs.waveform.axis = mirror.waveform.axis = "x"
    interf = Interferometer(lattice, (bs.waveform, mirror.waveform), timing=timing)
    return orient(interf), bs, mirror


def amplitude_scan(n_points=41, lo=-0.2, hi=0.2):
    """Equal x and z accelerations stepped uniformly from ``lo`` to ``hi`` (g)."""
    return [AccelerationVector(float(a), float(a)) for a in np.round(np.linspace(lo, hi, n_points), 12)]


def polar_scan(magnitude=0.1, step=math.pi / 20):
    """Fixed magnitude, orientation stepped over [0, 2 pi)."""
    n = int(round(2 * math.pi / step))
    return [est.polar_acceleration(magnitude, k * step) for k in range(n)]


def _precompute(interf, accels, threads):
    interf.precompute("x", [a.a_x for a in accels], threads)
    interf.precompute("z", [a.a_z for a in accels], threads)


def simulate_shots(interf, accel, n_shots, detection, seed, first=0):
    grid = interf.grid(accel)
    return [sample_shot(grid, detection, shot_seed(seed, first + i), (accel.a_x, accel.a_z))
            for i in range(n_shots)]


def calibration_set(interf, accels, n_shots, detection, seed, threads=1):
    """Noisy shots at each acceleration; shot seeds come from one running counter."""
    _precompute(interf, accels, threads)
    entries = []
    for i, accel in enumerate(accels):
        entries.append((accel, simulate_shots(interf, accel, n_shots, detection, seed,
                                              first=i * n_shots)))
    return est.CalibrationSet(entries)


def build_models(cal, knot_spacing=est.DEFAULT_KNOT_SPACING, epsilon=est.DEFAULT_EPSILON):
    return tuple(est.build_empirical_model(cal, axis, knot_spacing, epsilon=epsilon)
                 for axis in est.AXES)


def zoom_posterior(models, center, half_width=0.02, n=801):
    """Uniform prior on a square window around ``center``, clipped to the model ranges."""
    mx, mz = models
    xr = (max(center.a_x - half_width, mx.a_min), min(center.a_x + half_width, mx.a_max))
    zr = (max(center.a_z - half_width, mz.a_min), min(center.a_z + half_width, mz.a_max))
    return est.Posterior.uniform(xr, zr, n, n)


def batch_posterior(post, shots, models, n_trial):
    """Equivalent to sequential ``bayes_update`` over ``shots``, summed per axis first."""
    mx, mz = models
    # the log-likelihood is linear in the counts, so shots can be pooled first
    counts = sum(est.rounded_counts(shot.weights, n_trial) for shot in shots)
    lx = est.axis_log_likelihood(mx, counts.sum(axis=0), post.ax)
    lz = est.axis_log_likelihood(mz, counts.sum(axis=1), post.az)
    return est.Posterior(post.ax, post.az, post.log_prob + lx[:, None] + lz[None, :])


def pooled_ls(shots, models):
    """Least-squares estimate from the shot-averaged marginals."""
    w = np.mean([s.weights for s in shots], axis=0)
    return est.least_squares_estimate(est.marginalize(w), models)[0]


def posterior_estimate(shots, models, n_trial, half_width=0.02, n=801):
    center = pooled_ls(shots, models)
    post = batch_posterior(zoom_posterior(models, center, half_width, n), shots, models, n_trial)
    return post


@dataclass
class ContractionRow:
    k: int
    mean: AccelerationVector
    std: tuple
    crb: tuple  # Cramer-Rao bound at the posterior mean
    crb_truth: tuple = None  # same bound evaluated at the true acceleration


def contraction_study(shots, models, n_trial, truth=None, ks=(10, 20, 50, 100, 200),
                      half_width=0.02, n=801):
    """Posterior mean and width after the first k shots, with the matching CRB."""
    post = zoom_posterior(models, pooled_ls(shots[:ks[0]], models), half_width, n)
    truth_bound = est.fisher_bound(models, truth, n_trial) if truth is not None else None
    rows = []
    done = 0
    for k in ks:
        post = batch_posterior(post, shots[done:k], models, n_trial)
        done = k
        mean, std = est.posterior_stats(post)
        bound = est.fisher_bound(models, mean, n_trial)
        rows.append(ContractionRow(k, mean, std, bound.crb(n_trial * k),
                                   truth_bound.crb(n_trial * k) if truth_bound else None))
    return rows


def subset_spread(shots, models, n_trial, k, n_subsets, half_width=0.02, n=801):
    """Spread of posterior means over disjoint k-shot subsets and the mean posterior width."""
    if k * n_subsets > len(shots):
        raise ValueError("not enough shots for disjoint subsets")
    means, widths = [], []
    for i in range(n_subsets):
        sub = shots[i * k:(i + 1) * k]
        m, s = est.posterior_stats(posterior_estimate(sub, models, n_trial, half_width, n))
        means.append(m.as_array())
        widths.append(s)
    means = np.array(means)
    return np.std(means, axis=0, ddof=1), np.mean(widths, axis=0)


@dataclass
class ScanRow:
    applied: AccelerationVector
    mean_estimate: AccelerationVector
    spread: tuple  # per-shot standard deviation of the estimates (delta a)
    failures: int = 0

    @property
    def residual(self):
        return (self.mean_estimate.a_x - self.applied.a_x, self.mean_estimate.a_z - self.applied.a_z)

    @property
    def unbiased(self):
        return all(abs(r) <= 2 * s for r, s in zip(self.residual, self.spread))


def closed_loop_scan(interf, models, accels, n_shots, detection, seed, threads=1):
    """Per-shot least-squares estimates at each applied acceleration."""
    _precompute(interf, accels, threads)
    rows = []
    for i, accel in enumerate(accels):
        shots = simulate_shots(interf, accel, n_shots, detection, seed, first=i * n_shots)
        ests = []
        for shot in shots:
            e, _ = est.least_squares_estimate(est.marginalize(shot), models)
            ests.append(e.as_array())
        ests = np.array(ests)
        mean = ests.mean(axis=0)
        rows.append(ScanRow(accel, AccelerationVector(*mean), tuple(ests.std(axis=0, ddof=1))))
    return rows


@dataclass
class BlochStudy:
    hold_times_ms: np.ndarray
    series: dict  # axis -> (repeats, n_times, 7) noisy populations
    fits: dict  # axis -> BlochFit or error string


def bloch_study(lattice, accel, hold_times_ms, detection, repeats=5, seed=0, min_periods=2.0):
    """Noisy 2D Bloch-oscillation series and per-axis period fits."""
    by_accel = {}
    for a in (accel.a_x, accel.a_z):
        if a not in by_accel:
            by_accel[a] = simulate_bloch_oscillations(lattice, a, hold_times_ms).populations
    px, pz = by_accel[accel.a_x], by_accel[accel.a_z]
    noisy_x = np.empty((repeats,) + px.shape)
    noisy_z = np.empty_like(noisy_x)
    counter = 0
    for t in range(len(hold_times_ms)):
        grid = MomentumGrid.from_marginals(px[t], pz[t])
        for r in range(repeats):
            shot = sample_shot(grid, detection, shot_seed(seed, counter))
            counter += 1
            noisy_x[r, t], noisy_z[r, t] = est.marginalize(shot)
    series = {"x": noisy_x, "z": noisy_z}
    fits = {}
    for axis in est.AXES:
        try:
            fits[axis] = est.fit_bloch_period(hold_times_ms, series[axis], lattice.physical,
                                              min_periods=min_periods)
        except est.EstimationError as exc:
            fits[axis] = str(exc)
    return BlochStudy(np.asarray(hold_times_ms), series, fits)


def default_detection(n_trial=532.0, seed=0):
    return DetectionModel(n_trial=n_trial, seed=seed)
