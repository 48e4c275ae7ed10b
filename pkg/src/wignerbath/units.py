"""Physical constants of the Xe + I2 system and MD reduced units.

Reduced units are built from the solvent (Xe) parameters: lengths in
sigma_XeXe, energies in eps_XeXe, masses in m_Xe, time in 1/eta with
eta = sqrt(eps / (m sigma^2)).

Physical units used at the boundary, per quantity kind:

    length       angstrom
    time         s
    frequency    s^-1 (angular)
    density      g/cm^3 (mass density of a Xe-mass fluid)
    temperature  K
    energy       cm^-1
    mass         g
    action       J s
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

from scipy import constants as _c

KB = _c.k
H = _c.h
HBAR = _c.hbar
C_LIGHT = _c.c

_CM1_TO_J = 100.0 * H * C_LIGHT
_ANGSTROM = 1e-10


@dataclass(frozen=True)
class PhysicalConstants:
    """Parameters of the Xe + I2 model in physical units."""

    eps_xexe_K: float = 221.7
    eps_xexe_cm: float = 154.00
    sigma_xexe: float = 3.930  # angstrom
    eps_i2i2_K: float = 550.0
    eps_i2i2_cm: float = 382.27
    sigma_i2i2: float = 4.982  # angstrom
    m_xe: float = 2.18e-22  # g
    m_i2: float = 4.22e-22  # g
    morse_D: float = 1.2547e4  # cm^-1
    morse_beta: float = 1.8576  # 1/angstrom
    hbar: float = HBAR  # J s

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")

    @property
    def eps_xexe_J(self) -> float:
        return self.eps_xexe_K * KB

    @property
    def eps_i2xe_K(self) -> float:
        return math.sqrt(self.eps_xexe_K * self.eps_i2i2_K)

    @property
    def sigma0_i2xe(self) -> float:
        return 0.5 * (self.sigma_xexe + self.sigma_i2i2)


@dataclass(frozen=True)
class ReducedConstants:
    m_i2_star: float
    mu_i2_star: float
    sigma_i2_star: float
    eps_i2_star: float
    D_star: float
    beta_star: float
    hbar_star: float
    eta: float  # s^-1

    @property
    def eps_i2xe_star(self) -> float:
        return math.sqrt(self.eps_i2_star)

    @property
    def sigma0_i2xe_star(self) -> float:
        return 0.5 * (1.0 + self.sigma_i2_star)

    @property
    def omega_star(self) -> float:
        """Harmonic frequency of the I2 vibration."""
        return math.sqrt(2.0 * self.beta_star**2 * self.D_star / self.mu_i2_star)


KINDS = ("length", "time", "frequency", "density", "temperature", "energy", "mass", "action")


class UnitSystem:
    """Conversions between physical units and the solvent-based reduced units."""

    def __init__(self, constants: PhysicalConstants | None = None):
        self.constants = constants or PhysicalConstants()

    @cached_property
    def eta(self) -> float:
        k = self.constants
        m = k.m_xe * 1e-3
        sigma = k.sigma_xexe * _ANGSTROM
        return math.sqrt(k.eps_xexe_J / (m * sigma**2))

    @cached_property
    def _scale(self) -> dict[str, float]:
        # reduced = physical / scale
        k = self.constants
        sigma_cm = k.sigma_xexe * 1e-8
        m_kg = k.m_xe * 1e-3
        sigma_m = k.sigma_xexe * _ANGSTROM
        return {
            "length": k.sigma_xexe,
            "time": 1.0 / self.eta,
            "frequency": self.eta,
            "density": k.m_xe / sigma_cm**3,
            "temperature": k.eps_xexe_K,
            "energy": k.eps_xexe_J / _CM1_TO_J,
            "mass": k.m_xe,
            "action": math.sqrt(m_kg * sigma_m**2 * k.eps_xexe_J),
        }

    def _check(self, kind: str) -> float:
        try:
            return self._scale[kind]
        except KeyError:
            raise ValueError(f"unknown quantity kind {kind!r}; expected one of {KINDS}") from None

    def reduce(self, value: float, kind: str) -> float:
        scale = self._check(kind)
        if not math.isfinite(value):
            raise ValueError(f"non-finite {kind} value: {value}")
        return value / scale

    def expand(self, value: float, kind: str) -> float:
        scale = self._check(kind)
        if not math.isfinite(value):
            raise ValueError(f"non-finite {kind} value: {value}")
        return value * scale

    @cached_property
    def reduced(self) -> ReducedConstants:
        k = self.constants
        m_i2 = self.reduce(k.m_i2, "mass")
        return ReducedConstants(
            m_i2_star=m_i2,
            mu_i2_star=m_i2 / 4.0,
            sigma_i2_star=self.reduce(k.sigma_i2i2, "length"),
            eps_i2_star=k.eps_i2i2_K / k.eps_xexe_K,
            D_star=self.reduce(k.morse_D, "energy"),
            beta_star=k.morse_beta * k.sigma_xexe,
            hbar_star=self.reduce(k.hbar, "action"),
            eta=self.eta,
        )

    def time_ps(self, t_star: float) -> float:
        return self.expand(t_star, "time") * 1e12


DEFAULT_UNITS = UnitSystem()


def reduce(value: float, kind: str) -> float:
    return DEFAULT_UNITS.reduce(value, kind)


def expand(value: float, kind: str) -> float:
    return DEFAULT_UNITS.expand(value, kind)


def reduced_constants() -> ReducedConstants:
    return DEFAULT_UNITS.reduced
