import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latticeaccel import estimation as est
from latticeaccel.dynamics import AccelerationVector, MomentumGrid
from latticeaccel.errors import EstimationError
from latticeaccel.imaging import DetectionModel, ShotRecord, sample_shots
from latticeaccel.units import PhysicalConfig

PORTS = np.arange(-3, 4)


def smooth_channels(a):
    """Seven smooth, strictly positive channel probabilities that move with a."""
    logits = -0.5 * (PORTS - 6.0 * a) ** 2 / 1.5
    p = np.exp(logits)
    return p / p.sum()


def two_channel(a):
    p = np.zeros(7)
    p[2], p[4] = (1 + a) / 2, (1 - a) / 2
    return p


def constant(a):
    return np.full(7, 1 / 7)


def calibration(fx, fz=None, a=np.linspace(-0.5, 0.5, 101)):
    fz = fz or fx
    entries = []
    for x in a:
        w = np.outer(fz(x), fx(x))
        entries.append((AccelerationVector(x, x), [ShotRecord(w / w.sum())]))
    return est.CalibrationSet(entries)


@pytest.fixture(scope="module")
def smooth_models():
    cal = calibration(smooth_channels)
    return (est.build_empirical_model(cal, "x", knot_spacing=0.05),
            est.build_empirical_model(cal, "z", knot_spacing=0.05))


def model_grid(models, a):
    px, pz = models[0](a.a_x), models[1](a.a_z)
    return MomentumGrid(np.outer(pz, px))


def test_marginalize():
    g = MomentumGrid.delta(j_x=2, j_z=-1)
    mx, mz = est.marginalize(g)
    assert mx[5] == 1 and mz[2] == 1
    w = np.random.default_rng(0).dirichlet(np.ones(49)).reshape(7, 7)
    mx, mz = est.marginalize(ShotRecord(w))
    assert mx.sum() == pytest.approx(1) and mz.sum() == pytest.approx(1)
    np.testing.assert_allclose(est.marginalize(w)[0], w.sum(axis=0))


def test_cubic_channels_are_reproduced_exactly():
    model = est.build_empirical_model(calibration(two_channel), "x", epsilon=0.0)
    a = np.linspace(-0.5, 0.5, 17)
    np.testing.assert_allclose(model(a), [two_channel(x) for x in a], atol=1e-12)
    np.testing.assert_allclose(model.derivative(a)[:, 2], 0.5, atol=1e-10)


def test_constant_calibration_gives_constant_model():
    model = est.build_empirical_model(calibration(constant), "z")
    np.testing.assert_allclose(model(np.linspace(-0.5, 0.5, 9)), 1 / 7, atol=1e-12)
    np.testing.assert_allclose(model.derivative(0.1), 0.0, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-0.5, 0.5), min_size=1, max_size=20))
def test_model_probabilities_are_floored_and_normalized(a):
    model = est.build_empirical_model(calibration(two_channel), "x")
    p = model(np.array(a))
    assert np.all(p >= model.epsilon * (1 - 1e-12))
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_model_range_is_enforced():
    model = est.build_empirical_model(calibration(two_channel), "x")
    with pytest.raises(ValueError, match="outside model range"):
        model(0.6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_project_floor_derivative_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    s = rng.dirichlet(np.ones(7)) + rng.normal(0, 0.01, 7)
    s[rng.integers(7)] = -0.02  # at least one floored channel
    s[np.abs(s - 1e-3) < 2e-4] = 0.05  # stay away from the floor boundary
    ds = rng.normal(size=7)
    h = 1e-7
    p, dp = est.project_floor(s, ds, 1e-3)
    plus, _ = est.project_floor(s + h * ds, epsilon=1e-3)
    minus, _ = est.project_floor(s - h * ds, epsilon=1e-3)
    np.testing.assert_allclose(dp, (plus - minus) / (2 * h), atol=1e-5)
    assert p.min() >= 1e-3 - 1e-15 and p.sum() == pytest.approx(1)


def test_least_squares_recovers_truth(smooth_models):
    truth = AccelerationVector(0.123, -0.321)
    a, resid = est.least_squares_estimate(est.marginalize(model_grid(smooth_models, truth)),
                                          smooth_models)
    assert a.a_x == pytest.approx(0.123, abs=1e-5)
    assert a.a_z == pytest.approx(-0.321, abs=1e-5)
    assert resid < 1e-12


def test_least_squares_tie_breaks_toward_zero():
    cal = calibration(constant)
    models = (est.build_empirical_model(cal, "x"), est.build_empirical_model(cal, "z"))
    a, _ = est.least_squares_estimate((constant(0), constant(0)), models)
    assert a.a_x == 0 and a.a_z == 0


def test_least_squares_rejects_unnormalized(smooth_models):
    with pytest.raises(ValueError):
        est.least_squares_estimate((np.ones(7), np.ones(7)), smooth_models)


def test_rounded_counts():
    c = est.rounded_counts([0.5, 0.25, 0.25], 7)
    assert c.sum() == 7 and list(c) == [3, 2, 2]
    w = np.random.default_rng(1).dirichlet(np.ones(49)).reshape(7, 7)
    assert est.rounded_counts(w, 532.4).sum() == 532


def test_flat_likelihood_leaves_prior_unchanged():
    cal = calibration(constant)
    models = (est.build_empirical_model(cal, "x"), est.build_empirical_model(cal, "z"))
    prior = est.Posterior.from_models(models, 51)
    shot = ShotRecord(np.full((7, 7), 1 / 49))
    post = est.bayes_update(prior, shot, models, 532)
    np.testing.assert_allclose(post.prob, prior.prob, atol=1e-15)


def test_posterior_concentrates_on_truth(smooth_models):
    truth = AccelerationVector(0.1, -0.2)
    shots = sample_shots(model_grid(smooth_models, truth), DetectionModel(532, seed=2), 30)
    post = est.Posterior.from_models(smooth_models, 401)
    widths = []
    for shot in shots:
        post = est.bayes_update(post, shot, smooth_models, 532)
        widths.append(est.posterior_stats(post)[1])
    mean, (sx, sz) = est.posterior_stats(post)
    assert abs(mean.a_x - 0.1) < 4 * sx and abs(mean.a_z + 0.2) < 4 * sz
    assert widths[-1][0] < widths[0][0] / 3 and widths[-1][1] < widths[0][1] / 3


def test_noiseless_updates_never_widen(smooth_models):
    truth = AccelerationVector(0.05, 0.3)
    shot = ShotRecord(model_grid(smooth_models, truth).probabilities)
    post = est.Posterior.from_models(smooth_models, 401)
    last = (math.inf, math.inf)
    for _ in range(10):
        post = est.bayes_update(post, shot, smooth_models, 200)
        s = est.posterior_stats(post)[1]
        assert s[0] <= last[0] + 1e-15 and s[1] <= last[1] + 1e-15
        last = s


def test_support_error_names_ports():
    models = [est.build_empirical_model(calibration(two_channel), ax) for ax in "xz"]
    w = np.zeros((7, 7))
    w[3, 6] = 1.0  # x port +3, z port 0
    with pytest.raises(EstimationError, match=r"x-ports \[3\]"):
        est.bayes_update(est.Posterior.from_models(models, 11), ShotRecord(w), models, 100)


def test_posterior_stats_delta_uniform_gaussian():
    ax = np.linspace(-1, 1, 101)
    lp = np.full((101, 101), -np.inf)
    lp[30, 70] = 0.0
    mean, std = est.posterior_stats(est.Posterior(ax, ax, lp))
    assert (mean.a_x, mean.a_z) == (ax[30], ax[70]) and std == (0.0, 0.0)

    mean, std = est.posterior_stats(est.Posterior.uniform((-1, 1), (-1, 1), 101, 101))
    h = 0.02
    assert mean.a_x == pytest.approx(0, abs=1e-15)
    assert std[0] == pytest.approx(h * math.sqrt((101**2 - 1) / 12), rel=1e-12)

    ax = np.linspace(-1, 1, 2001)
    g = -0.5 * ((ax - 0.1) / 0.05) ** 2
    mean, std = est.posterior_stats(est.Posterior(ax, ax, g[:, None] + g[None, :]))
    assert mean.a_x == pytest.approx(0.1, abs=1e-12) and std[1] == pytest.approx(0.05, rel=1e-6)


def test_posterior_shape_check():
    with pytest.raises(ValueError):
        est.Posterior(np.zeros(3), np.zeros(4), np.zeros((4, 3)))


@pytest.mark.parametrize("n_trial", [532.0, 100.0])
def test_n_trial_recovery(n_trial):
    grid = MomentumGrid(np.random.default_rng(3).dirichlet(np.ones(49)).reshape(7, 7))
    shots = sample_shots(grid, DetectionModel(n_trial, seed=7), 200)
    res = est.estimate_n_trial(shots)
    assert res.n_trial == pytest.approx(n_trial, rel=0.10)
    assert not res.capped and len(res.trace) == 198


def test_n_trial_capped_without_scatter(caplog):
    shots = [ShotRecord(np.full((7, 7), 1 / 49))] * 5
    res = est.estimate_n_trial(shots)
    assert res.capped and res.n_trial == 1e7
    with pytest.raises(ValueError):
        est.estimate_n_trial(shots[:2])


@pytest.mark.parametrize("a", [-0.4, 0.0, 0.25])
def test_fisher_information_two_channel_oracle(a):
    model = est.build_empirical_model(calibration(two_channel), "x", epsilon=0.0)
    assert est.fisher_information(model, a) == pytest.approx(1 / (1 - a * a), rel=1e-8)


def test_fisher_bound_sql_factor():
    cal = calibration(two_channel)
    models = [est.build_empirical_model(cal, ax, epsilon=0.0) for ax in "xz"]
    bound = est.fisher_bound(models, AccelerationVector(0.0, 0.0), 4e4)
    assert bound.sigma_single == pytest.approx((1.0, 1.0))
    assert all(s1 / sn == pytest.approx(200, rel=1e-12)
               for s1, sn in zip(bound.sigma_single, bound.sigma_n))
    with pytest.raises(ValueError, match="not interior"):
        est.fisher_bound(models, AccelerationVector(0.5, 0.0))


def test_constant_model_has_infinite_bound():
    cal = calibration(constant)
    models = [est.build_empirical_model(cal, ax) for ax in "xz"]
    bound = est.fisher_bound(models, AccelerationVector(0.0, 0.1))
    assert all(math.isinf(s) for s in bound.sigma_single + bound.crb(532))


def test_scaling_projection_is_quadratic():
    table = est.scaling_projection(1e-3, 460.0, [0.46, 0.92, 4.6])
    assert table[0] == (0.46, pytest.approx(1e-3))
    assert table[1][1] == pytest.approx(2.5e-4) and table[2][1] == pytest.approx(1e-5)


def bloch_series(period_ms, t):
    w = 2 * np.pi / period_ms
    pops = np.zeros((t.size, 7))
    pops[:, 3] = 0.6 + 0.3 * np.cos(w * t)
    pops[:, 2] = 0.2 - 0.15 * np.cos(w * t) + 0.05 * np.sin(2 * w * t)
    pops[:, 4] = 1 - pops[:, 3] - pops[:, 2]
    return pops


def test_bloch_fit_exact_on_clean_series():
    phys = PhysicalConfig()
    t = np.linspace(0, 2.0, 101)
    fit = est.fit_bloch_period(t, bloch_series(0.44, t), phys)
    assert fit.period_ms == pytest.approx(0.44, rel=1e-8)
    assert fit.accel_g == pytest.approx(phys.accel_from_period(0.44e-3), rel=1e-8)


def test_bloch_fit_rejects_flat_and_short_series():
    phys = PhysicalConfig()
    t = np.linspace(0, 2.0, 101)
    with pytest.raises(EstimationError, match="flat"):
        est.fit_bloch_period(t, np.tile(np.eye(7)[3], (101, 1)), phys)
    noise = np.random.default_rng(0).normal(0, 0.01, (101, 7))
    with pytest.raises(EstimationError, match="noise"):
        est.fit_bloch_period(t, np.eye(7)[3] + noise, phys)
    with pytest.raises(EstimationError, match="periods"):
        est.fit_bloch_period(t, bloch_series(1.5, t), phys)


def test_magnitude_angle():
    assert est.magnitude_angle(AccelerationVector(0.0, 0.0)).zero
    m = est.magnitude_angle(AccelerationVector(-0.1, -0.1))
    assert m.magnitude == pytest.approx(math.sqrt(0.02)) and m.angle == pytest.approx(-3 * math.pi / 4)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(-math.pi + 1e-6, math.pi))
def test_polar_round_trip(mag, theta):
    m = est.magnitude_angle(est.polar_acceleration(mag, theta))
    assert m.magnitude == pytest.approx(mag, rel=1e-12)
    assert m.angle == pytest.approx(theta, abs=1e-9)


def test_model_and_calibration_round_trip(tmp_path, smooth_models):
    est.write_model(tmp_path / "m.json", smooth_models[0])
    back = est.read_model(tmp_path / "m.json")
    a = np.linspace(-0.5, 0.5, 21)
    np.testing.assert_array_equal(back(a), smooth_models[0](a))
    cal = calibration(two_channel, a=np.linspace(-0.1, 0.1, 5))
    est.write_calibration(tmp_path / "cal", cal)
    again = est.read_calibration(tmp_path / "cal")
    for (a1, s1), (a2, s2) in zip(cal.entries, again.entries):
        assert a1 == a2
        np.testing.assert_array_equal(s1[0].weights, s2[0].weights)


def test_too_few_calibration_points():
    with pytest.raises(EstimationError, match="degrees of freedom"):
        est.build_empirical_model(calibration(two_channel, a=np.linspace(-0.5, 0.5, 5)), "x")
    with pytest.raises(EstimationError, match="at least 2"):
        est.build_empirical_model(calibration(two_channel, a=[0.0]), "x")


def test_posterior_grid_converges_under_doubling(smooth_models):
    truth = AccelerationVector(-0.15, 0.2)
    shots = sample_shots(model_grid(smooth_models, truth), DetectionModel(532, seed=6), 20)
    stats = []
    for n in (201, 401):
        # a window of +-0.01 g puts ~20 grid steps inside one posterior width
        post = est.Posterior.uniform((-0.16, -0.14), (0.19, 0.21), n, n)
        for shot in shots:
            post = est.bayes_update(post, shot, smooth_models, 532)
        stats.append(est.posterior_stats(post))
    (m1, s1), (m2, s2) = stats
    assert abs(m1.a_x - m2.a_x) < 0.01 * s2[0] and abs(m1.a_z - m2.a_z) < 0.01 * s2[1]
    assert s1 == pytest.approx(s2, rel=0.01)
