"""Static 1D optical-lattice physics in the plane-wave (momentum ladder) basis.

A state with quasimomentum q is expanded on |q + 2j> for j = -J..J, with
momenta in units of hbar*k and energies in recoil units. The lattice
V0/2 cos(2kx + phi) couples neighbouring ladder rungs with V0/4.
"""

from dataclasses import dataclass, field
import logging
import math

import numpy as np
from scipy import linalg

from .units import PhysicalConfig

log = logging.getLogger(__name__)

N_PORTS = 7
DEGENERACY_TOL = 1e-9
LEAKAGE_FLAG = 0.05


@dataclass(frozen=True)
class LatticeConfig:
    depth: float = 10.0
    truncation: int = 8
    physical: PhysicalConfig = field(default_factory=PhysicalConfig)

    def __post_init__(self):
        if not (math.isfinite(self.depth) and self.depth >= 0):
            raise ValueError(f"depth must be finite and >= 0, got {self.depth!r}")
        if int(self.truncation) != self.truncation or self.truncation < 5:
            raise ValueError(f"truncation must be an integer >= 5, got {self.truncation!r}")

    @property
    def dim(self):
        return 2 * self.truncation + 1

    @property
    def ladder(self):
        return np.arange(-self.truncation, self.truncation + 1)

    def with_depth(self, depth):
        return LatticeConfig(depth, self.truncation, self.physical)

    def with_truncation(self, truncation):
        return LatticeConfig(self.depth, truncation, self.physical)


@dataclass(frozen=True)
class BlochIndex:
    band: int
    quasimomentum: float = 0.0

    def __post_init__(self):
        if int(self.band) != self.band or self.band < 0:
            raise ValueError(f"band must be a non-negative integer, got {self.band!r}")
        if not abs(self.quasimomentum) <= 1:
            raise ValueError(f"quasimomentum must lie in [-1, 1], got {self.quasimomentum!r}")


@dataclass
class MomentumWavefunction:
    """Amplitudes c_j on |q + 2j>, j = -J..J."""

    quasimomentum: float
    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
        if self.amplitudes.ndim != 1 or self.amplitudes.size % 2 != 1:
            raise ValueError("amplitudes must be a 1D vector of odd length 2J+1")
        if not np.all(np.isfinite(self.amplitudes)):
            raise ValueError("amplitudes must be finite")

    @property
    def truncation(self):
        return (self.amplitudes.size - 1) // 2

    @property
    def norm(self):
        return float(np.linalg.norm(self.amplitudes))

    def check_normalized(self, tol=1e-10):
        if abs(self.norm**2 - 1) > tol:
            raise ValueError(f"wavefunction not normalized: |psi|^2 = {self.norm**2!r}")
        return self

    def copy(self):
        return MomentumWavefunction(self.quasimomentum, self.amplitudes.copy())

    @classmethod
    def plane_wave(cls, truncation, j=0, quasimomentum=0.0):
        c = np.zeros(2 * truncation + 1, complex)
        c[j + truncation] = 1
        return cls(quasimomentum, c)


@dataclass
class BandStructure:
    q_grid: np.ndarray
    energies: np.ndarray  # shape (len(q_grid), n_bands), E_r
    diagnostics: list = field(default_factory=list)

    @property
    def n_bands(self):
        return self.energies.shape[1]


@dataclass
class PortPopulations:
    probabilities: np.ndarray
    leakage: float

    @property
    def flagged(self):
        return self.leakage > LEAKAGE_FLAG


def _check_finite(**values):
    for name, v in values.items():
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v!r}")


def tridiagonal(q, depth, truncation):
    """Diagonal and off-diagonal of the real (phase=0) Hamiltonian."""
    j = np.arange(-truncation, truncation + 1)
    return (q + 2.0 * j) ** 2, np.full(2 * truncation, depth / 4.0)


def build_hamiltonian(config, q, phase=0.0):
    """Hermitian lattice Hamiltonian at quasimomentum ``q`` (hbar k) and lattice phase (rad)."""
    _check_finite(q=q, phase=phase)
    if abs(q) > 1:
        raise ValueError(f"|q| must be <= 1, got {q!r}")
    diag, off = tridiagonal(q, config.depth, config.truncation)
    h = np.diag(diag).astype(complex)
    coupling = off * np.exp(-1j * phase)
    idx = np.arange(off.size)
    h[idx, idx + 1] = coupling
    h[idx + 1, idx] = np.conj(coupling)
    return h


def _eigh(q, depth, truncation):
    diag, off = tridiagonal(q, depth, truncation)
    if depth == 0:
        order = np.argsort(diag, kind="stable")
        vecs = np.eye(diag.size)[:, order]
        return diag[order], vecs
    return linalg.eigh_tridiagonal(diag, off)


def solve_bands(config, q_grid, n_bands=None, check_convergence=True):
    """Band energies E_n(q) in E_r, sorted ascending for each q."""
    q_grid = np.sort(np.asarray(q_grid, dtype=float))
    if np.any(np.abs(q_grid) > 1):
        raise ValueError("q_grid values must lie in [-1, 1]")
    n_bands = config.dim if n_bands is None else min(n_bands, config.dim)
    energies = np.array(
        [_eigh(q, config.depth, config.truncation)[0][:n_bands] for q in q_grid]
    )
    bands = BandStructure(q_grid, energies)
    if check_convergence and config.depth > 0:
        n_check = min(5, n_bands)
        doubled = config.truncation * 2
        ref = np.array([_eigh(q, config.depth, doubled)[0][:n_check] for q in q_grid])
        err = float(np.max(np.abs(ref - energies[:, :n_check]))) if q_grid.size else 0.0
        if err > 1e-8:
            msg = (f"truncation J={config.truncation} not converged at depth "
                   f"{config.depth}: lowest bands move {err:.3g} E_r when J doubles")
            bands.diagnostics.append(msg)
            log.warning(msg)
    return bands


def _parity_partner(j, q):
    # momentum q+2j -> -(q+2j) = q + 2(-j-q), valid for integer q
    return -j - int(round(q))


def _resolve_parity(vals, vecs, q, truncation, n):
    """Replace a degenerate eigenvector pair with parity eigenstates (even first)."""
    group = np.flatnonzero(np.abs(vals - vals[n]) < DEGENERACY_TOL)
    if group.size == 1:
        return vecs[:, n]
    if group.size != 2 or abs(q - round(q)) > 1e-12:
        raise ValueError(f"cannot resolve {group.size}-fold degeneracy at q={q}")
    log.info("band %d at q=%g degenerate; resolved by parity", n, q)
    sub = vecs[:, group]
    j = np.arange(-truncation, truncation + 1)
    partner = _parity_partner(j, q) + truncation
    valid = (partner >= 0) & (partner < j.size)
    parity = np.zeros((j.size, j.size))
    parity[partner[valid], np.flatnonzero(valid)] = 1
    p_sub = sub.conj().T @ parity @ sub
    p_vals, p_vecs = np.linalg.eigh((p_sub + p_sub.conj().T) / 2)
    resolved = sub @ p_vecs[:, ::-1]  # even (+1) first
    return resolved[:, list(group).index(n)]


def fix_global_phase(c):
    """Rotate so the largest-magnitude amplitude (lowest index on ties) is real positive."""
    mag = np.abs(c)
    k = np.flatnonzero(mag >= mag.max() * (1 - 1e-9))[0]
    return c * np.exp(-1j * np.angle(c[k]))


def bloch_state(config, index):
    """Normalized Bloch eigenstate |n, q> at lattice phase 0."""
    if index.band >= config.dim:
        raise ValueError(f"band {index.band} exceeds basis dimension {config.dim}")
    q = index.quasimomentum
    vals, vecs = _eigh(q, config.depth, config.truncation)
    c = _resolve_parity(vals, vecs, q, config.truncation, index.band)
    c = np.asarray(c, complex)
    c /= np.linalg.norm(c)
    return MomentumWavefunction(q, fix_global_phase(c))


def momentum_populations(psi, ports=N_PORTS):
    """Populations of the ports j = -(ports//2)..ports//2, renormalized, plus leakage.

    Leakage is the raw mass outside the port window; above 5% the window is
    too small for the state and the result is flagged.
    """
    half = ports // 2
    J = psi.truncation
    if half > J:
        raise ValueError(f"{ports} ports need truncation >= {half}")
    p = np.abs(psi.amplitudes) ** 2
    window = p[J - half:J + half + 1]
    inside = window.sum()
    leakage = float(max(p.sum() - inside, 0.0))
    if inside <= 0:
        raise ValueError("no population inside the port window")
    result = PortPopulations(window / inside, leakage)
    if result.flagged:
        log.warning("port window leakage %.3g exceeds %.2g", leakage, LEAKAGE_FLAG)
    return result


def momentum_reversal(psi):
    """c_j -> c_{-j}: exchanges positive and negative momenta (q -> -q)."""
    return MomentumWavefunction(-psi.quasimomentum, psi.amplitudes[::-1].copy())
