"""Physical constants and the conversions between SI and lattice units.

Internally hbar = 1, energies are in recoil energies E_r, momenta in hbar*k
and time in hbar/E_r. SI only appears at the acceleration/time boundary.
"""

from dataclasses import dataclass
import math

from scipy import constants as const

RB87_MASS = 86.909180527 * const.atomic_mass
STANDARD_G = const.g


@dataclass(frozen=True)
class PhysicalConfig:
    """Laser wavelength (m), atomic mass (kg) and the reference acceleration g (m/s^2)."""

    wavelength: float = 1064e-9
    atom_mass: float = RB87_MASS
    gravity_g: float = STANDARD_G

    def __post_init__(self):
        for name in ("wavelength", "atom_mass", "gravity_g"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value!r}")

    @property
    def k(self):
        return 2 * math.pi / self.wavelength

    @property
    def recoil_energy(self):
        """E_r = hbar^2 k^2 / 2m in joules."""
        return const.hbar**2 * self.k**2 / (2 * self.atom_mass)

    @property
    def time_unit(self):
        """hbar / E_r in seconds."""
        return const.hbar / self.recoil_energy

    @property
    def recoil_velocity(self):
        """hbar k / m in m/s."""
        return const.hbar * self.k / self.atom_mass

    def seconds_to_internal(self, t):
        return t / self.time_unit

    def internal_to_seconds(self, t):
        return t * self.time_unit

    def drift_rate(self, accel_g):
        """dq/dt in hbar*k per internal time unit for an acceleration given in g."""
        return self.atom_mass * accel_g * self.gravity_g * self.time_unit / (const.hbar * self.k)

    def bloch_period(self, accel_g):
        """tau_b = 2 hbar k / (m a) in seconds."""
        if accel_g == 0:
            return math.inf
        return 2 * const.hbar * self.k / (self.atom_mass * abs(accel_g) * self.gravity_g)

    def accel_from_period(self, period_s):
        """Inverse of :meth:`bloch_period`, result in g."""
        return 2 * const.hbar * self.k / (self.atom_mass * period_s * self.gravity_g)
