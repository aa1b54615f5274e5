"""Calibration and inference for the vector accelerometer.

The forward model is data driven: per axis, seven B-spline channel
functions p_m(a) fitted to shot-averaged marginals from a calibration scan.
Estimates come either from least squares on the marginals or from a
posterior grid updated shot by shot with a multinomial likelihood.
"""

from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import interpolate, optimize, stats
from scipy.special import logsumexp

from .dynamics import AccelerationVector, MomentumGrid
from .errors import EstimationError
from .imaging import ShotRecord, read_shot, write_shot
from .lattice import N_PORTS

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-4
DEFAULT_KNOT_SPACING = 0.02
AXES = ("x", "z")
ROUNDOFF = 1e-12  # spline values and slopes below this are numerical noise


def _weights(obj):
    if isinstance(obj, (MomentumGrid,)):
        return obj.probabilities
    if isinstance(obj, ShotRecord):
        return obj.weights
    return np.asarray(obj, dtype=float)


def marginalize(grid):
    """(marginal_x, marginal_z) of a 7x7 grid whose rows are z and columns x."""
    w = _weights(grid)
    return w.sum(axis=0), w.sum(axis=1)


# ---------------------------------------------------------------- calibration

@dataclass
class CalibrationSet:
    entries: list  # [(AccelerationVector, [ShotRecord, ...]), ...]

    def __post_init__(self):
        if any(len(shots) < 1 for _, shots in self.entries):
            raise ValueError("every calibration entry needs at least one shot")

    def axis_data(self, axis):
        """Sorted distinct accelerations and the shot-averaged marginals for one axis."""
        k = AXES.index(axis)
        groups = {}
        for accel, shots in self.entries:
            a = float(accel.as_array()[k])
            margs = [marginalize(s)[k] for s in shots]
            groups.setdefault(a, []).extend(margs)
        a = np.array(sorted(groups))
        mean = np.array([np.mean(groups[x], axis=0) for x in a])
        sem = np.array([np.std(groups[x], axis=0, ddof=1) / math.sqrt(len(groups[x]))
                        if len(groups[x]) > 1 else np.zeros(N_PORTS) for x in a])
        return a, mean, sem


def write_calibration(directory, cal):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, (accel, shots) in enumerate(cal.entries):
        names = []
        for k, shot in enumerate(shots):
            name = f"shot_{i:03d}_{k:03d}.json"
            write_shot(directory / name, shot)
            names.append(name)
        manifest.append({"a_x": accel.a_x, "a_z": accel.a_z, "shots": names})
    (directory / "manifest.json").write_text(json.dumps({"entries": manifest}, indent=1) + "\n")


def read_calibration(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    entries = [(AccelerationVector(e["a_x"], e["a_z"]),
                [read_shot(directory / name) for name in e["shots"]])
               for e in manifest["entries"]]
    return CalibrationSet(entries)


def project_floor(s, ds=None, epsilon=DEFAULT_EPSILON):
    """Floor channel values at epsilon and renormalize the rest so each row sums to 1.

    Floored channels sit exactly at epsilon; the remaining channels are
    scaled by a common factor. Returns (p, dp) where dp is the derivative of
    p given the derivative ``ds`` of the raw values.
    """
    s = np.atleast_2d(np.asarray(s, dtype=float))
    ds = None if ds is None else np.atleast_2d(np.asarray(ds, dtype=float))
    fixed = s < epsilon
    for _ in range(s.shape[1]):
        free_sum = np.where(fixed, 0.0, s).sum(axis=1, keepdims=True)
        room = 1 - epsilon * fixed.sum(axis=1, keepdims=True)
        scale = room / np.where(free_sum > 0, free_sum, np.nan)
        p = np.where(fixed, epsilon, s * scale)
        newly = (~fixed) & (p < epsilon)
        if not newly.any():
            break
        fixed |= newly
    bad = ~np.isfinite(p).all(axis=1)
    p[bad] = 1.0 / s.shape[1]
    if ds is None:
        return p, None
    dfree = np.where(fixed, 0.0, ds).sum(axis=1, keepdims=True)
    dscale = -room * dfree / free_sum**2
    dp = np.where(fixed, 0.0, ds * scale + s * dscale)
    dp[bad] = 0.0
    return p, dp


@dataclass
class EmpiricalModel:
    """Per-axis map a -> 7 channel probabilities, cubic B-spline with a probability floor."""

    axis: str
    knots: np.ndarray
    coefficients: np.ndarray  # (n_coef, 7)
    a_min: float
    a_max: float
    epsilon: float = DEFAULT_EPSILON
    degree: int = 3
    residual_rms: float = float("nan")
    _spline: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        self._spline = interpolate.BSpline(self.knots, self.coefficients, self.degree,
                                           extrapolate=False)
        self._dspline = self._spline.derivative()

    def _check(self, a):
        a = np.asarray(a, dtype=float)
        tol = 1e-9 * max(1.0, self.a_max - self.a_min)
        if np.any(a < self.a_min - tol) or np.any(a > self.a_max + tol):
            raise ValueError(f"acceleration outside model range [{self.a_min}, {self.a_max}]")
        return np.clip(a, self.a_min, self.a_max)

    def raw(self, a):
        return self._spline(self._check(a))

    def probabilities(self, a):
        """Floored, renormalized channel probabilities, shape (..., 7)."""
        a = self._check(a)
        p, _ = project_floor(self._spline(np.ravel(a)), epsilon=self.epsilon)
        return p.reshape(np.shape(a) + (N_PORTS,))

    __call__ = probabilities

    def derivative(self, a):
        a = self._check(a)
        flat = np.ravel(a)
        _, dp = project_floor(self._spline(flat), self._dspline(flat), self.epsilon)
        return dp.reshape(np.shape(a) + (N_PORTS,))

    def pinned_fraction(self, n=401):
        """Fraction of the range over which each channel sits at the floor."""
        grid = np.linspace(self.a_min, self.a_max, n)
        p = self.probabilities(grid)
        return np.mean(p <= self.epsilon * (1 + 1e-9), axis=0)

    def to_json(self):
        return {
            "axis": self.axis,
            "degree": self.degree,
            "knots": [float(t) for t in self.knots],
            "coefficients": [[float(c) for c in self.coefficients[:, m]] for m in range(N_PORTS)],
            "range": [self.a_min, self.a_max],
            "epsilon": self.epsilon,
            "residual_rms": self.residual_rms,
        }

    @classmethod
    def from_json(cls, data):
        coef = np.array(data["coefficients"], dtype=float).T
        a_min, a_max = data["range"]
        return cls(data["axis"], np.array(data["knots"]), coef, a_min, a_max,
                   data["epsilon"], data.get("degree", 3), data.get("residual_rms", float("nan")))


def write_model(path, model):
    Path(path).write_text(json.dumps(model.to_json(), indent=1, sort_keys=True) + "\n")


def read_model(path):
    return EmpiricalModel.from_json(json.loads(Path(path).read_text()))


def build_empirical_model(cal, axis, knot_spacing=DEFAULT_KNOT_SPACING, degree=3,
                          epsilon=DEFAULT_EPSILON):
    """Least-squares cubic B-spline per channel through the shot-averaged marginals.

    Interior knots are placed every ``knot_spacing`` (in g) across the
    calibrated range. The fitted channels are floored at ``epsilon`` and
    renormalized pointwise.
    """
    a, mean, _ = cal.axis_data(axis)
    if a.size < 2:
        raise EstimationError(f"axis {axis}: need at least 2 distinct accelerations")
    a_min, a_max = float(a[0]), float(a[-1])
    n_inner = max(int(round((a_max - a_min) / knot_spacing)) - 1, 0)
    inner = np.linspace(a_min, a_max, n_inner + 2)[1:-1]
    knots = np.concatenate([[a_min] * (degree + 1), inner, [a_max] * (degree + 1)])
    n_coef = knots.size - degree - 1
    if a.size < n_coef:
        raise EstimationError(
            f"axis {axis}: {a.size} calibration points for {n_coef} spline degrees of freedom")
    try:
        spline = interpolate.make_lsq_spline(a, mean, knots, k=degree)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise EstimationError(f"axis {axis}: spline fit failed: {exc}") from exc
    model = EmpiricalModel(axis, knots, spline.c, a_min, a_max, epsilon, degree)
    model.residual_rms = float(np.sqrt(np.mean((model.probabilities(a) - mean) ** 2)))
    return model


# -------------------------------------------------------------- least squares

def _scan_axis(marginal, model, n_grid):
    grid = np.linspace(model.a_min, model.a_max, n_grid)
    cost = np.sum((model.probabilities(grid) - marginal) ** 2, axis=1)
    best = cost.min()
    # fitted channels carry ~1e-16 round-off, so costs that close count as ties
    ties = np.flatnonzero(cost <= best + max(1e-12 * best, ROUNDOFF**2))
    k = int(ties[np.argmin(np.abs(grid[ties]))])
    a_hat = grid[k]
    if ties.size == 1 and 0 < k < n_grid - 1:
        y0, y1, y2 = cost[k - 1:k + 2]
        denom = y0 - 2 * y1 + y2
        if denom > 0:
            a_ref = a_hat + 0.5 * (grid[1] - grid[0]) * (y0 - y2) / denom
            c_ref = float(np.sum((model.probabilities(a_ref) - marginal) ** 2))
            if c_ref <= cost[k]:
                return float(a_ref), c_ref
    return float(a_hat), float(cost[k])


def least_squares_estimate(marginals, models, n_grid=2001):
    """Per-axis argmin_a sum_m (p_obs - p_model(a))^2; returns (AccelerationVector, residual)."""
    out = []
    residual = 0.0
    for marginal, model in zip(marginals, models):
        marginal = np.asarray(marginal, dtype=float)
        if abs(marginal.sum() - 1) > 1e-6 or np.any(marginal < 0):
            raise ValueError("marginals must be non-negative and sum to 1")
        a_hat, cost = _scan_axis(marginal, model, n_grid)
        out.append(a_hat)
        residual += cost
    return AccelerationVector(*out), residual


# ---------------------------------------------------------------------- Bayes

@dataclass
class Posterior:
    """Discretized log-density over (a_x, a_z); ``log_prob[i, k]`` is at (ax[i], az[k])."""

    ax: np.ndarray
    az: np.ndarray
    log_prob: np.ndarray

    def __post_init__(self):
        self.ax = np.asarray(self.ax, dtype=float)
        self.az = np.asarray(self.az, dtype=float)
        lp = np.asarray(self.log_prob, dtype=float)
        if lp.shape != (self.ax.size, self.az.size):
            raise ValueError("log_prob shape does not match the grid")
        self.log_prob = lp - logsumexp(lp)

    @property
    def prob(self):
        return np.exp(self.log_prob)

    @classmethod
    def uniform(cls, x_range, z_range, n_x=201, n_z=201):
        ax = np.linspace(*x_range, n_x)
        az = np.linspace(*z_range, n_z)
        return cls(ax, az, np.zeros((n_x, n_z)))

    @classmethod
    def from_models(cls, models, n=201):
        mx, mz = models
        return cls.uniform((mx.a_min, mx.a_max), (mz.a_min, mz.a_max), n, n)

    def marginals(self):
        p = self.prob
        return p.sum(axis=1), p.sum(axis=0)


def rounded_counts(weights, n_trial):
    """Integer counts proportional to ``weights`` summing to round(n_trial) (largest remainder)."""
    w = np.asarray(weights, dtype=float)
    total = int(round(n_trial))
    raw = w.ravel() * total / w.sum()
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts.reshape(w.shape)


def axis_log_likelihood(model, axis_counts, grid):
    """sum_m n_m log p_m(a) over ``grid`` (multinomial coefficient dropped)."""
    logp = np.log(model.probabilities(grid))
    return logp @ np.asarray(axis_counts, dtype=float)


def _support_check(model, axis_counts, grid, axis):
    p = model.probabilities(grid)
    dead = np.all(p <= model.epsilon * (1 + 1e-9), axis=0) & (np.asarray(axis_counts) > 0)
    if dead.any():
        ports = [int(m) - N_PORTS // 2 for m in np.flatnonzero(dead)]
        raise EstimationError(
            f"shot populates {axis}-ports {ports} where the model has no support")


def bayes_update(post, shot, models, n_trial):
    """Multiply the posterior by the multinomial likelihood of one shot.

    The forward model is separable: P(m_x, m_z | a) = p_{m_x}(a_x) p_{m_z}(a_z),
    so the log-likelihood is a sum of one term per axis.
    """
    w = _weights(shot)
    if abs(w.sum() - 1) > 1e-9:
        raise ValueError("shot weights must sum to 1")
    counts = rounded_counts(w, n_trial)
    cx, cz = counts.sum(axis=0), counts.sum(axis=1)
    mx, mz = models
    _support_check(mx, cx, post.ax, "x")
    _support_check(mz, cz, post.az, "z")
    lx = axis_log_likelihood(mx, cx, post.ax)
    lz = axis_log_likelihood(mz, cz, post.az)
    return Posterior(post.ax, post.az, post.log_prob + lx[:, None] + lz[None, :])


def posterior_stats(post):
    """Grid-weighted mean and standard deviation per axis."""
    px, pz = post.marginals()
    stats = []
    for a, p in ((post.ax, px), (post.az, pz)):
        mean = math.fsum(a * p)
        var = math.fsum((a - mean) ** 2 * p)
        stats.append((mean, math.sqrt(max(var, 0.0))))
    (mx, sx), (mz, sz) = stats
    return AccelerationVector(mx, mz), (sx, sz)


def write_posterior_csv(path, post, header=()):
    p = post.prob
    with open(path, "w") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        fh.write("a_x,a_z,probability\n")
        for i, ax in enumerate(post.ax):
            for k, az in enumerate(post.az):
                fh.write(f"{ax!r},{az!r},{p[i, k]!r}\n")


# ------------------------------------------------------------------- N_trial

@dataclass
class NTrialEstimate:
    n_trial: float
    capped: bool
    trace: list  # [(n_shots, estimate), ...]


def _fit_n_trial(weights, cap):
    s = weights.shape[0]
    p_hat = weights.mean(axis=0)
    v_hat = weights.var(axis=0, ddof=1)
    x = p_hat * (1 - p_hat)
    use = x > 1e-12
    x, v = x[use], v_hat[use]
    if x.size == 0 or np.all(v <= 0):
        return cap, True
    c = v.sum() / x.sum()
    for _ in range(20):
        if c <= 0:
            return cap, True
        n = 1 / c
        mu4 = x * (1 + 3 * (n - 2) * x) / n**3
        var_v = mu4 / s - (x / n) ** 2 * (s - 3) / (s * (s - 1))
        var_v = np.maximum(var_v, 1e-30)
        w = 1 / var_v
        c_new = np.sum(w * x * v) / np.sum(w * x * x)
        if abs(c_new - c) <= 1e-10 * abs(c):
            c = c_new
            break
        c = c_new
    if c <= 0 or 1 / c > cap:
        return cap, True
    return 1 / c, False


def estimate_n_trial(shots, cap=1e7):
    """Effective trial number from the shot-to-shot bin variance v = p(1-p)/N.

    N is fitted by weighted least squares over bins, each weighted by the
    inverse sampling variance of its variance estimate. The trace gives the
    estimate using the first 3, 4, ... shots.
    """
    if len(shots) < 3:
        raise ValueError("need at least 3 shots")
    w = np.array([_weights(s).ravel() for s in shots])
    trace = []
    for k in range(3, len(shots) + 1):
        n, _ = _fit_n_trial(w[:k], cap)
        trace.append((k, n))
    n, capped = _fit_n_trial(w, cap)
    if capped:
        log.warning("shots show no multinomial scatter; N_trial capped at %g", cap)
    return NTrialEstimate(n, capped, trace)


# -------------------------------------------------------------------- Fisher

def fisher_information(model, a):
    """Classical Fisher information per trial, sum_m (dp_m/da)^2 / p_m."""
    p = model.probabilities(a)
    dp = model.derivative(a)
    dp = np.where(np.abs(dp) > ROUNDOFF, dp, 0.0)
    live = p > 0
    return float(np.sum(dp[live] ** 2 / p[live]))


@dataclass
class FisherBound:
    information: tuple  # per trial, (I_x, I_z), 1/g^2
    n_atoms: float

    @property
    def sigma_single(self):
        return tuple(1 / math.sqrt(i) if i > 0 else math.inf for i in self.information)

    @property
    def sigma_n(self):
        return self.crb(self.n_atoms)

    def crb(self, n_trials):
        """Cramer-Rao bound after ``n_trials`` independent trials."""
        return tuple(s / math.sqrt(n_trials) for s in self.sigma_single)


def fisher_bound(models, a, n_atoms=4e4):
    out = []
    for model, value in zip(models, (a.a_x, a.a_z)):
        if not model.a_min < value < model.a_max:
            raise ValueError(f"{value} g is not interior to the {model.axis} model range")
        out.append(fisher_information(model, value))
    return FisherBound(tuple(out), n_atoms)


def scaling_projection(delta_a, baseline_us, times_ms):
    """delta_a * (T0/T)^2 for each propagation time T."""
    t0 = baseline_us * 1e-3
    return [(float(t), delta_a * (t0 / t) ** 2) for t in times_ms]


# ------------------------------------------------------------- Bloch fitting

@dataclass
class BlochFit:
    accel_g: float
    sigma_g: float
    period_ms: float
    period_sigma_ms: float


def _design(t, omega, harmonics):
    cols = [np.ones_like(t)]
    for h in range(1, harmonics + 1):
        cols += [np.cos(h * omega * t), np.sin(h * omega * t)]
    return np.stack(cols, axis=1)


def fit_bloch_period(hold_times_ms, populations, physical, ports=(-1, 0, 1), harmonics=2,
                     min_periods=2.0, significance=1e-3):
    """Fit periodic port populations with a shared frequency and convert the period to g.

    ``populations`` is (n_times, 7) or (n_repeats, n_times, 7). Each selected
    port is modelled as a truncated Fourier series in t with a common
    fundamental; the period follows from a frequency scan refined by
    nonlinear least squares, and its error from the fit covariance.
    """
    t = np.asarray(hold_times_ms, dtype=float)
    pops = np.asarray(populations, dtype=float)
    if pops.ndim == 2:
        pops = pops[None]
    idx = [m + N_PORTS // 2 for m in ports]
    tt = np.tile(t, pops.shape[0])
    y = np.concatenate([pops[r][:, idx] for r in range(pops.shape[0])])  # (n, ports)
    if np.max(np.ptp(y, axis=0)) < 1e-6:
        raise EstimationError("no oscillation detected: populations are flat")
    span = t.max() - t.min()
    dt = np.min(np.diff(np.unique(t)))
    omegas = 2 * np.pi * np.linspace(0.5 / span, 0.5 / dt, 4000)

    def rss(omega):
        a = _design(tt, omega, harmonics)
        coef, *_ = np.linalg.lstsq(a, y, rcond=None)
        return float(np.sum((y - a @ coef) ** 2)), coef

    scan = np.array([rss(w)[0] for w in omegas])
    k = int(np.argmin(scan))
    lo, hi = omegas[max(k - 1, 0)], omegas[min(k + 1, omegas.size - 1)]
    omega0 = optimize.minimize_scalar(lambda w: rss(w)[0], bounds=(lo, hi), method="bounded").x
    _, coef0 = rss(omega0)

    n_coef = coef0.shape[0]
    n_ports = y.shape[1]
    n = tt.size
    # per-port noise scale from the best linear fit; ports differ in shot-noise variance
    scale = np.sqrt(np.sum((y - _design(tt, omega0, harmonics) @ coef0) ** 2, axis=0)
                    / max(n - n_coef - 1, 1))
    scale = np.where(scale > 0, scale, 1.0)

    def resid(theta):
        a = _design(tt, theta[0], harmonics)
        return ((y - a @ theta[1:].reshape(n_coef, n_ports)) / scale).ravel()

    res = optimize.least_squares(resid, np.concatenate([[omega0], coef0.ravel()]), x_scale="jac")
    omega = res.x[0]
    r = res.fun.reshape(n, n_ports) * scale
    # per-port F-test against a constant, Bonferroni-corrected over ports and scanned frequencies
    dof = max(n - n_coef - 1, 1)
    rss1 = np.sum(r**2, axis=0)
    rss0 = np.sum((y - y.mean(axis=0)) ** 2, axis=0)
    f_stat = ((rss0 - rss1) / (n_coef - 1)) / np.maximum(rss1 / dof, 1e-300)
    n_freq = max(int(span / (2 * dt)), 1)
    if np.min(stats.f.sf(f_stat, n_coef - 1, dof)) * n_freq * n_ports > significance:
        raise EstimationError("no oscillation detected above noise")
    s2 = float(res.fun @ res.fun) / max(res.fun.size - res.x.size, 1)
    period = 2 * np.pi / omega
    if span / period < min_periods:
        raise EstimationError(f"only {span / period:.2f} periods sampled; need {min_periods}")
    jac = res.jac
    try:
        cov = np.linalg.inv(jac.T @ jac) * s2
        sigma_omega = math.sqrt(max(cov[0, 0], 0.0))
    except np.linalg.LinAlgError:
        sigma_omega = math.inf
    sigma_period = period * sigma_omega / omega
    accel = physical.accel_from_period(period * 1e-3)
    return BlochFit(accel, accel * sigma_period / period, float(period), float(sigma_period))


# ------------------------------------------------------------------- polar

class MagnitudeAngle(NamedTuple):
    magnitude: float
    angle: float
    zero: bool


def magnitude_angle(a):
    mag = math.hypot(a.a_x, a.a_z)
    if mag == 0:
        return MagnitudeAngle(0.0, 0.0, True)
    return MagnitudeAngle(mag, math.atan2(a.a_z, a.a_x), False)


def polar_acceleration(magnitude, theta):
    return AccelerationVector(magnitude * math.cos(theta), magnitude * math.sin(theta))
