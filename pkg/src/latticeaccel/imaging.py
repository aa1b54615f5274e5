"""Synthetic detection: multinomial shots, absorption-image rasters and ROI read-out."""

from dataclasses import dataclass, field
import json
import logging
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .dynamics import MomentumGrid
from .lattice import N_PORTS
from .units import PhysicalConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectionModel:
    """``n_trial`` effective independent draws per image; ``gain_sigma`` per-bin gain noise."""

    n_trial: float = 532.0
    gain_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.n_trial > 0:
            raise ValueError("n_trial must be > 0")
        if not self.gain_sigma >= 0:
            raise ValueError("gain_sigma must be >= 0")


@dataclass
class ShotRecord:
    weights: np.ndarray  # (7, 7) rows z, columns x, sums to 1
    a_applied: tuple = None
    seed: int = None
    counts: np.ndarray = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(N_PORTS, N_PORTS)
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
            raise ValueError("shot weights must be >= 0 and sum to 1")
        self.weights = w

    def to_json(self):
        return {
            "weights": [float(x) for x in self.weights.ravel()],
            "a_applied": None if self.a_applied is None else [float(a) for a in self.a_applied],
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data):
        if len(data["weights"]) != N_PORTS * N_PORTS:
            raise ValueError(f"weights must have {N_PORTS * N_PORTS} entries")
        a = data.get("a_applied")
        return cls(np.array(data["weights"], float), None if a is None else tuple(a),
                   data.get("seed"))


def write_shot(path, shot):
    Path(path).write_text(json.dumps(shot.to_json(), indent=1) + "\n")


def read_shot(path):
    return ShotRecord.from_json(json.loads(Path(path).read_text()))


def shot_seed(master, counter):
    """Per-shot seed derived from a master seed and the shot counter."""
    return int(np.random.SeedSequence([int(master), int(counter)]).generate_state(1, np.uint64)[0])


def sample_shot(grid, model, seed=None, a_applied=None):
    """One noisy image: multinomial counts over the 49 bins, then per-bin gain noise."""
    seed = model.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    p = grid.probabilities.ravel()
    n = max(int(round(model.n_trial)), 1)
    counts = rng.multinomial(n, p / p.sum())
    w = counts / n
    if model.gain_sigma > 0:
        w = w * np.clip(1 + rng.normal(0, model.gain_sigma, w.size), 0, None)
        if w.sum() <= 0:
            w = counts / n
    w = w / w.sum()
    return ShotRecord(w.reshape(N_PORTS, N_PORTS), a_applied, seed,
                      counts.reshape(N_PORTS, N_PORTS))


def sample_shots(grid, model, n_shots, first=0, a_applied=None):
    return [sample_shot(grid, model, shot_seed(model.seed, first + i), a_applied)
            for i in range(n_shots)]


@dataclass
class AbsorptionImage:
    optical_density: np.ndarray  # rows run from +z (top) to -z (bottom)
    pixel_size_um: float
    tof_ms: float
    port_spacing_px: float
    center_px: tuple = None
    cloud_sigma_um: float = None
    overlapping: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.optical_density = np.asarray(self.optical_density, dtype=float)
        if self.center_px is None:
            rows, cols = self.optical_density.shape
            self.center_px = ((rows - 1) / 2, (cols - 1) / 2)


def port_spacing_um(tof_ms, physical=None):
    """Separation of neighbouring diffraction orders after time of flight: 2 hbar k t / m."""
    physical = physical or PhysicalConfig()
    return 2 * physical.recoil_velocity * tof_ms * 1e-3 * 1e6


def _pixel_weights(n_pixels, center, positions, sigma_px):
    """Integral of unit Gaussians centred at ``positions`` over each pixel, shape (n_pixels, n_pos)."""
    edges = np.arange(n_pixels + 1) - 0.5 - center
    cdf = ndtr((edges[:, None] - positions[None, :]) / sigma_px)
    return np.diff(cdf, axis=0)


def render_image(grid, tof_ms=12.0, cloud_sigma_um=15.0, pixel_size_um=5.0,
                 physical=None, margin_sigma=6.0):
    """Gaussian blob per port at (j_x, j_z) * 2 hbar k t / m; pixel values sum to 1."""
    if not 5.0 <= tof_ms <= 30.0:
        raise ValueError(f"tof_ms={tof_ms} outside the supported 5-30 ms window")
    spacing = port_spacing_um(tof_ms, physical) / pixel_size_um
    sigma = cloud_sigma_um / pixel_size_um
    overlapping = spacing < 3 * sigma
    if overlapping:
        log.warning("port spacing %.1f px < 3 sigma (%.1f px): orders not discriminated",
                    spacing, 3 * sigma)
    half = N_PORTS // 2
    size = int(np.ceil(2 * (half * spacing + margin_sigma * sigma))) + 1
    center = (size - 1) / 2
    ports = np.arange(-half, half + 1) * spacing
    wx = _pixel_weights(size, center, ports, sigma)
    # row index grows downward, so +z ports sit above the centre
    wz = _pixel_weights(size, center, -ports, sigma)
    od = wz @ grid.probabilities @ wx.T
    return AbsorptionImage(od, pixel_size_um, tof_ms, spacing, (center, center),
                           cloud_sigma_um, overlapping)


def _roi_bounds(center, spacing, n_pixels, half_width):
    """Inclusive-exclusive pixel ranges of the ROIs of ports -3..3 along one axis."""
    bounds = []
    for j in range(-(N_PORTS // 2), N_PORTS // 2 + 1):
        c = center + j * spacing
        # pixel centres i with c - hw <= i < c + hw
        lo = int(np.ceil(c - half_width - 1e-9))
        hi = int(np.ceil(c + half_width - 1e-9))
        bounds.append((max(lo, 0), min(hi, n_pixels)))
    return bounds


def _crosstalk(bounds, center, positions, sigma_px):
    lo = np.array([b[0] for b in bounds]) - 0.5 - center
    hi = np.array([b[1] for b in bounds]) - 0.5 - center
    return (ndtr((hi[:, None] - positions[None, :]) / sigma_px)
            - ndtr((lo[:, None] - positions[None, :]) / sigma_px))


def extract_grid(image, roi_half_width_px=None, deconvolve=True, diagnostics=None):
    """Integrate OD over square ROIs on the 7x7 port lattice and normalize.

    With a known cloud width the leakage of each blob into neighbouring ROIs
    is undone by inverting the separable ROI-response matrix.
    """
    od = image.optical_density
    spacing = image.port_spacing_px
    hw = spacing / 2 if roi_half_width_px is None else roi_half_width_px
    if 2 * hw > spacing + 1e-9:
        raise ValueError("ROIs overlap: half width exceeds half the port spacing")
    negative = od < 0
    clipped = float(-od[negative].sum())
    od = np.where(negative, 0.0, od)
    if clipped > 0:
        log.info("clipped %.3g negative OD", clipped)
    cz, cx = image.center_px
    rows = _roi_bounds(cz, spacing, od.shape[0], hw)[::-1]  # -z ports are at the bottom
    cols = _roi_bounds(cx, spacing, od.shape[1], hw)
    sums = np.array([[od[r0:r1, c0:c1].sum() for c0, c1 in cols] for r0, r1 in rows])
    if sums.sum() <= 0:
        raise ValueError("image has zero optical density in the port ROIs")
    if deconvolve and image.cloud_sigma_um:
        sigma = image.cloud_sigma_um / image.pixel_size_um
        ports = np.arange(-(N_PORTS // 2), N_PORTS // 2 + 1) * spacing
        kx = _crosstalk(cols, cx, ports, sigma)
        kz = _crosstalk(rows, cz, -ports, sigma)
        sums = np.linalg.solve(kz, np.linalg.solve(kx, sums.T).T)
        sums = np.clip(sums, 0, None)
    if diagnostics is not None:
        diagnostics["clipped_mass"] = clipped
    return MomentumGrid(sums / sums.sum())


def write_pgm(path, image):
    """16-bit binary PGM plus a JSON sidecar carrying the scale and geometry."""
    path = Path(path)
    od = np.clip(image.optical_density, 0, None)
    scale = float(od.max()) if od.max() > 0 else 1.0
    raster = np.round(od / scale * 65535).astype(">u2")
    rows, cols = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(raster.tobytes())
    sidecar = {
        "pixel_size_um": image.pixel_size_um,
        "tof_ms": image.tof_ms,
        "cloud_sigma_um": image.cloud_sigma_um,
        "od_scale": scale,
        "port_spacing_px": image.port_spacing_px,
        "center_px": list(image.center_px),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1) + "\n")


def read_pgm(path):
    path = Path(path)
    data = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    raster = np.frombuffer(data[pos:], dtype=dtype, count=rows * cols).reshape(rows, cols)
    meta = json.loads(path.with_suffix(".json").read_text())
    od = raster.astype(float) / maxval * meta.get("od_scale", 1.0)
    spacing = meta.get("port_spacing_px") or port_spacing_um(meta["tof_ms"]) / meta["pixel_size_um"]
    center = meta.get("center_px")
    return AbsorptionImage(od, meta["pixel_size_um"], meta["tof_ms"], spacing,
                           tuple(center) if center else None, meta.get("cloud_sigma_um"))
