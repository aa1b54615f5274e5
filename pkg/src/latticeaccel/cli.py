"""Command-line runner: one verb per study, INI configuration, deterministic outputs."""

import argparse
import configparser
import csv
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from scipy import special

from . import __version__
from . import estimation as est
from . import pipelines
from .control import OptimizerConfig, write_trace
from .dynamics import (
    REPORTED_TOTAL_US,
    AccelerationVector,
    SequenceTiming,
    read_waveform,
    simulate_kapitza_dirac,
    simulate_michelson_1d,
    write_waveform,
)
from .errors import ConvergenceError, EstimationError
from .imaging import DetectionModel, ShotRecord, read_shot
from .lattice import N_PORTS, LatticeConfig, solve_bands
from .units import PhysicalConfig

log = logging.getLogger("latticeaccel")

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_ESTIMATION = 0, 2, 3, 4
PORTS = list(range(-(N_PORTS // 2), N_PORTS // 2 + 1))


class ConfigError(ValueError):
    pass


def _floats(text):
    return [float(x) for x in text.replace(",", " ").split()]


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default)
SCHEMA = {
    "lattice": {
        "depth": (float, 10.0),
        "truncation": (int, 8),
        "wavelength_nm": (float, 1064.0),
    },
    "timing": {
        "beamsplitter_us": (float, 118.0),
        "mirror_us": (float, 236.0),
        "propagation_us": (float, 0.0),
        "dt_ns": (float, 50.0),
    },
    "waveforms": {
        "beamsplitter": (str, ""),
        "mirror": (str, ""),
    },
    "optimizer": {
        "max_iterations": (int, 300),
        "fidelity_goal": (float, 0.999),
        "mirror_fidelity_goal": (float, 0.995),
        "min_fidelity": (float, 0.90),
        "step_rule": (str, "lbfgs"),
        "step_size": (float, 1.0),
        "basis": (str, "samples"),
        "fourier_modes": (int, 0),
        "max_restarts": (int, 3),
    },
    "acceleration": {
        "mode": (str, "single"),
        "a_x": (float, 0.0),
        "a_z": (float, 0.0),
        "lo": (float, -0.2),
        "hi": (float, 0.2),
        "n_points": (int, 41),
        "magnitude": (float, 0.1),
        "step_rad": (float, math.pi / 20),
    },
    "detection": {
        "n_trial": (float, 532.0),
        "gain_sigma": (float, 0.0),
        "shots": (int, 10),
        "noiseless": (_bool, False),
    },
    "bands": {
        "q_points": (int, 101),
        "n_bands": (int, 5),
    },
    "bloch": {
        "hold_max_ms": (float, 1.5),
        "hold_step_ms": (float, 0.02),
        "repeats": (int, 5),
    },
    "kapitza": {
        "pulse_us": (_floats, [1.0, 2.0, 5.0, 10.0, 20.0]),
    },
    "estimation": {
        "model_dir": (str, ""),
        "shots_dir": (str, ""),
        "knot_spacing": (float, est.DEFAULT_KNOT_SPACING),
        "epsilon": (float, est.DEFAULT_EPSILON),
        "grid_points": (int, 801),
        "window_g": (float, 0.02),
        "write_posterior": (_bool, False),
    },
    "sensitivity": {
        "n_atoms": (float, 4e4),
        "baseline_us": (float, REPORTED_TOTAL_US),
        "baseline_delta_a": (float, 0.0),
        "times_ms": (_floats, [0.46, 1.0, 10.0, 25.0, 50.0, 100.0]),
    },
}


def load_config(path=None):
    """Parse an INI file against SCHEMA; unknown sections or keys are errors."""
    values = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}
    if path is None:
        return values
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            conv = SCHEMA[section][key][0]
            try:
                values[section][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from exc
    return values


def _canonical(values):
    return json.dumps(values, sort_keys=True, default=str)


class Run:
    """Validated configuration plus output helpers shared by all verbs."""

    def __init__(self, values, seed, out, threads):
        self.values = values
        self.seed = seed
        self.out = Path(out)
        self.threads = threads
        self.config_hash = hashlib.sha256(_canonical(values).encode()).hexdigest()
        v = values
        try:
            self.physical = PhysicalConfig(wavelength=v["lattice"]["wavelength_nm"] * 1e-9)
            self.lattice = LatticeConfig(v["lattice"]["depth"], v["lattice"]["truncation"],
                                         self.physical)
            t = v["timing"]
            self.timing = SequenceTiming(t["beamsplitter_us"], t["mirror_us"], t["propagation_us"])
            o = v["optimizer"]
            common = dict(max_iterations=o["max_iterations"], step_rule=o["step_rule"],
                          step_size=o["step_size"], seed=seed, basis=o["basis"],
                          fourier_modes=o["fourier_modes"], max_restarts=o["max_restarts"],
                          dt_ns=t["dt_ns"])
            self.optimizer = OptimizerConfig(fidelity_goal=o["fidelity_goal"], **common)
            self.mirror_optimizer = OptimizerConfig(fidelity_goal=o["mirror_fidelity_goal"], **common)
            d = v["detection"]
            self.detection = DetectionModel(d["n_trial"], d["gain_sigma"], seed)
            if d["shots"] < 1:
                raise ValueError("detection.shots must be >= 1")
            self.accels = self._accelerations(v["acceleration"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @staticmethod
    def _accelerations(a):
        mode = a["mode"]
        if mode == "single":
            return [AccelerationVector(a["a_x"], a["a_z"])]
        if mode == "amplitude":
            if a["n_points"] < 1 or not a["hi"] >= a["lo"]:
                raise ValueError("acceleration scan needs n_points >= 1 and hi >= lo")
            return pipelines.amplitude_scan(a["n_points"], a["lo"], a["hi"])
        if mode == "polar":
            if not a["step_rad"] > 0:
                raise ValueError("acceleration.step_rad must be > 0")
            return pipelines.polar_scan(a["magnitude"], a["step_rad"])
        raise ValueError(f"acceleration.mode must be single, amplitude or polar, got {mode!r}")

    @property
    def meta(self):
        return {"tool": "latticeaccel", "version": __version__,
                "config_sha256": self.config_hash, "seed": self.seed}

    def header_lines(self):
        return [f"{k}={v}" for k, v in self.meta.items()]

    def path(self, name):
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def write_json(self, name, data):
        doc = dict(data)
        doc["meta"] = self.meta
        self.path(name).write_text(json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n")

    def write_csv(self, name, columns, rows):
        with open(self.path(name), "w", newline="") as fh:
            for line in self.header_lines():
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_fmt(x) for x in row])

    def interferometer(self):
        """Waveforms from the configured files, or freshly optimized and oriented."""
        wf = self.values["waveforms"]
        if wf["beamsplitter"] and wf["mirror"]:
            bs, mirror = read_waveform(wf["beamsplitter"]), read_waveform(wf["mirror"])
            return pipelines.Interferometer(self.lattice, (bs, mirror), timing=self.timing)
        if wf["beamsplitter"] or wf["mirror"]:
            raise ConfigError("waveforms.beamsplitter and waveforms.mirror must be given together")
        interf, _, _ = pipelines.design_components(self.lattice, self.timing, self.optimizer,
                                                   self.mirror_optimizer)
        return interf

    def models(self):
        directory = Path(self.values["estimation"]["model_dir"] or self.out)
        try:
            return tuple(est.read_model(directory / f"model_{axis}.json") for axis in est.AXES)
        except FileNotFoundError as exc:
            raise ConfigError(f"model file missing: {exc.filename}") from exc


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, AccelerationVector):
        return {"a_x": _jsonable(obj.a_x), "a_z": _jsonable(obj.a_z)}
    return obj


# ----------------------------------------------------------------------- verbs

def cmd_bands(run):
    b = run.values["bands"]
    q = np.linspace(-1, 1, b["q_points"])
    bands = solve_bands(run.lattice, q, b["n_bands"])
    run.write_csv("bands.csv", ["q"] + [f"E{n}" for n in range(bands.n_bands)],
                  ([qi] + list(e) for qi, e in zip(bands.q_grid, bands.energies)))
    for msg in bands.diagnostics:
        log.warning(msg)
    return EXIT_OK


def cmd_bloch(run):
    b = run.values["bloch"]
    if not (b["hold_step_ms"] > 0 and b["hold_max_ms"] > 0 and b["repeats"] >= 1):
        raise ConfigError("bloch.hold_step_ms, bloch.hold_max_ms must be > 0 and repeats >= 1")
    times = np.round(np.arange(0, b["hold_max_ms"] + 1e-9, b["hold_step_ms"]), 9)
    study = pipelines.bloch_study(run.lattice, run.accels[0], times, run.detection,
                                  b["repeats"], run.seed)
    rows = []
    for axis in est.AXES:
        series = study.series[axis]
        for r in range(series.shape[0]):
            for t, p in zip(times, series[r]):
                rows.append([axis, r, t] + list(p))
    run.write_csv("bloch_series.csv", ["axis", "repeat", "hold_ms"] + [f"p{j}" for j in PORTS], rows)
    fits = {}
    failed = False
    for axis, fit in study.fits.items():
        if isinstance(fit, str):
            fits[axis] = {"error": fit}
            failed = True
        else:
            fits[axis] = {"accel_g": fit.accel_g, "sigma_g": fit.sigma_g,
                          "period_ms": fit.period_ms, "period_sigma_ms": fit.period_sigma_ms}
    run.write_json("bloch_fit.json", {"applied": run.accels[0], "fits": fits})
    return EXIT_ESTIMATION if failed else EXIT_OK


def cmd_kapitza(run):
    rows = []
    for tau in run.values["kapitza"]["pulse_us"]:
        p = simulate_kapitza_dirac(run.lattice, tau)
        arg = run.lattice.depth * run.physical.seconds_to_internal(tau * 1e-6) / 2
        bessel = special.jv(PORTS, arg) ** 2
        rows.append([tau] + list(p) + list(bessel))
    run.write_csv("kapitza.csv", ["pulse_us"] + [f"p{j}" for j in PORTS]
                  + [f"raman_nath{j}" for j in PORTS], rows)
    return EXIT_OK


def cmd_qoc(run):
    interf, bs, mirror = pipelines.design_components(run.lattice, run.timing, run.optimizer,
                                                     run.mirror_optimizer)
    bs_wf, mirror_wf = interf.components_x
    header = run.header_lines()
    write_waveform(run.path("beamsplitter.wf"), bs_wf, header)
    write_waveform(run.path("mirror.wf"), mirror_wf, header)
    write_trace(run.path("beamsplitter_trace.csv"), bs.trace)
    write_trace(run.path("mirror_trace.csv"), mirror.trace)
    summary = {name: {"fidelity": r.fidelity, "converged": r.converged, "restarts": r.restarts,
                      "iterations": len(r.trace)}
               for name, r in (("beamsplitter", bs), ("mirror", mirror))}
    run.write_json("qoc.json", summary)
    floor = run.values["optimizer"]["min_fidelity"]
    if min(bs.fidelity, mirror.fidelity) < floor:
        raise ConvergenceError(f"component fidelity below {floor}")
    return EXIT_OK


def cmd_michelson(run):
    interf = run.interferometer()
    results = []
    for accel in run.accels:
        stages = {}
        for axis, a in (("x", accel.a_x), ("z", accel.a_z)):
            bs, mirror = interf._components(axis)
            res = simulate_michelson_1d(run.lattice, bs, mirror, a, run.timing, record_stages=True)
            stages[axis] = {k: list(v) for k, v in res.stages.items()}
            stages[axis]["final"] = list(res.populations)
        grid = interf.grid(accel)
        results.append({
            "applied": accel,
            "grid": grid.probabilities,
            "quadrants": {q: grid.quadrant_mass(q) for q in
                          ("lower_left", "lower_right", "upper_left", "upper_right")},
            "stages": stages,
        })
    run.write_json("michelson.json", {"timing_total_us": run.timing.total_us, "results": results})
    return EXIT_OK


def _shot_json(run, shot):
    doc = shot.to_json()
    doc["meta"] = run.meta
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def cmd_calibrate(run):
    e = run.values["estimation"]
    interf = run.interferometer()
    cal = pipelines.calibration_set(interf, run.accels, run.values["detection"]["shots"],
                                    run.detection, run.seed, run.threads)
    cal_dir = run.path("calibration")
    cal_dir.mkdir(exist_ok=True)
    manifest = []
    for i, (accel, shots) in enumerate(cal.entries):
        names = []
        for k, shot in enumerate(shots):
            name = f"shot_{i:03d}_{k:03d}.json"
            (cal_dir / name).write_text(_shot_json(run, shot))
            names.append(name)
        manifest.append({"a_x": accel.a_x, "a_z": accel.a_z, "shots": names})
    (cal_dir / "manifest.json").write_text(
        json.dumps({"entries": manifest, "meta": run.meta}, indent=1, sort_keys=True) + "\n")
    report = {}
    for axis in est.AXES:
        model = est.build_empirical_model(cal, axis, e["knot_spacing"], epsilon=e["epsilon"])
        run.write_json(f"model_{axis}.json", model.to_json())
        pinned = model.pinned_fraction()
        report[axis] = {"residual_rms": model.residual_rms, "pinned_fraction": pinned,
                        "well_conditioned": bool(np.all(pinned <= 0.5))}
    run.write_json("calibration_report.json", report)
    return EXIT_OK


def _load_shots(directory):
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if manifest.exists():
        cal = est.read_calibration(directory)
        return [shot for _, shots in cal.entries for shot in shots]
    return [read_shot(p) for p in sorted(directory.glob("*.json"))]


def cmd_estimate(run):
    e = run.values["estimation"]
    d = run.values["detection"]
    models = run.models()
    if e["shots_dir"]:
        groups = [(None, _load_shots(e["shots_dir"]))]
    else:
        interf = run.interferometer()
        groups = []
        for i, accel in enumerate(run.accels):
            if d["noiseless"]:
                grid = interf.grid(accel)
                shots = [ShotRecord(grid.probabilities, (accel.a_x, accel.a_z))] * d["shots"]
            else:
                shots = pipelines.simulate_shots(interf, accel, d["shots"], run.detection,
                                                 run.seed, first=i * d["shots"])
            groups.append((accel, shots))
    rows, summaries = [], []
    any_error = False
    for g, (accel, shots) in enumerate(groups):
        good = []
        for k, shot in enumerate(shots):
            applied = accel or (AccelerationVector(*shot.a_applied) if shot.a_applied else None)
            ax, az = (applied.a_x, applied.a_z) if applied else ("", "")
            try:
                ls, resid = est.least_squares_estimate(est.marginalize(shot), models)
                post = est.Posterior.uniform((models[0].a_min, models[0].a_max),
                                             (models[1].a_min, models[1].a_max), 201, 201)
                est.bayes_update(post, shot, models, d["n_trial"])  # support check
            except (EstimationError, ValueError) as exc:
                rows.append([g, k, ax, az, "", "", "", str(exc)])
                any_error = True
                continue
            good.append(shot)
            rows.append([g, k, ax, az, ls.a_x, ls.a_z, resid, ""])
        if not good:
            summaries.append({"group": g, "applied": accel, "error": "no usable shots"})
            continue
        post = pipelines.posterior_estimate(good, models, d["n_trial"], e["window_g"],
                                            e["grid_points"])
        mean, std = est.posterior_stats(post)
        summary = {"group": g, "applied": accel, "n_shots": len(good),
                   "posterior_mean": mean, "posterior_std": std,
                   "least_squares_pooled": pipelines.pooled_ls(good, models)}
        try:
            bound = est.fisher_bound(models, mean, d["n_trial"])
            summary["crb"] = bound.crb(d["n_trial"] * len(good))
        except ValueError as exc:
            summary["crb"] = str(exc)
        summaries.append(summary)
        if e["write_posterior"]:
            est.write_posterior_csv(run.path(f"posterior_{g:03d}.csv"), post, run.header_lines())
    run.write_csv("estimates.csv", ["group", "shot", "applied_x", "applied_z", "ls_x", "ls_z",
                                    "ls_residual", "error"], rows)
    run.write_json("estimate_summary.json", {"groups": summaries, "shot_errors": any_error})
    return EXIT_OK


def cmd_sensitivity(run):
    s = run.values["sensitivity"]
    d = run.values["detection"]
    models = run.models()
    accel = run.accels[0]
    try:
        bound = est.fisher_bound(models, accel, s["n_atoms"])
    except ValueError as exc:
        raise EstimationError(str(exc)) from exc
    per_shot = bound.crb(d["n_trial"])
    doc = {
        "applied": accel,
        "information_per_trial": bound.information,
        "sigma_one_atom": bound.sigma_single,
        "sigma_n_trial": per_shot,
        "sigma_n_atoms": bound.sigma_n,
        "n_trial": d["n_trial"],
        "n_atoms": s["n_atoms"],
        "sqrt_n_ratio": math.sqrt(s["n_atoms"]),
    }
    baseline = s["baseline_delta_a"] or max(per_shot)
    table = est.scaling_projection(baseline, s["baseline_us"], s["times_ms"])
    doc["scaling"] = {"baseline_us": s["baseline_us"], "baseline_delta_a": baseline}
    run.write_json("sensitivity.json", doc)
    run.write_csv("scaling.csv", ["propagation_ms", "delta_a_g"], table)
    return EXIT_OK


COMMANDS = {
    "bands": cmd_bands,
    "bloch": cmd_bloch,
    "kapitza": cmd_kapitza,
    "qoc": cmd_qoc,
    "michelson": cmd_michelson,
    "calibrate": cmd_calibrate,
    "estimate": cmd_estimate,
    "sensitivity": cmd_sensitivity,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, default=0, help="master seed (u64)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker processes for scans")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="latticeaccel", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__name__.replace("cmd_", ""))
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        run = Run(load_config(args.config), args.seed, args.out, args.threads)
        return COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"convergence error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
