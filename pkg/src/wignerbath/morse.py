"""Morse oscillator for the I2 vibrational coordinate.

Bound states use the closed Laguerre form with

    xi = 2 lam exp(-beta (q - q0)),   lam = sqrt(2 mu D) / (beta hbar),
    psi_n = N_n xi^(lam - n - 1/2) exp(-xi/2) L_n^(2 lam - 2 n - 1)(xi),

evaluated in log space since lam is ~117 for I2 and Gamma(2 lam - n)
overflows a double.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

from .units import ReducedConstants, reduced_constants


class MorseDomainError(ValueError):
    """Quantum number outside the bound spectrum, or no bound states at all."""


class GridCoverageError(ValueError):
    """Grid does not hold the wavefunction; ``deficit`` is the missing norm."""

    def __init__(self, message, deficit):
        super().__init__(message)
        self.deficit = deficit


@dataclass(frozen=True)
class MorseSpec:
    D: float
    beta: float
    q0: float = 0.0
    mu: float = 1.0
    hbar: float = 1.0

    def __post_init__(self):
        for name in ("D", "beta", "mu", "hbar"):
            if not getattr(self, name) > 0:
                raise ValueError(f"Morse parameter {name} must be positive")

    @classmethod
    def i2(cls, constants: ReducedConstants | None = None) -> "MorseSpec":
        k = constants or reduced_constants()
        return cls(D=k.D_star, beta=k.beta_star, q0=0.0, mu=k.mu_i2_star, hbar=k.hbar_star)

    @property
    def omega(self) -> float:
        return math.sqrt(2.0 * self.beta**2 * self.D / self.mu)

    @property
    def lam(self) -> float:
        return math.sqrt(2.0 * self.mu * self.D) / (self.beta * self.hbar)

    @property
    def period(self) -> float:
        return 2.0 * math.pi / self.omega


def potential(spec: MorseSpec, q):
    x = 1.0 - np.exp(-spec.beta * (np.asarray(q, dtype=float) - spec.q0))
    return spec.D * x * x


def force(spec: MorseSpec, q):
    e = np.exp(-spec.beta * (np.asarray(q, dtype=float) - spec.q0))
    return -2.0 * spec.D * spec.beta * e * (1.0 - e)


def bound_count(spec: MorseSpec) -> int:
    """Number of bound states, floor(lam - 1/2).

    The marginal top level with 0 < lam - n - 1/2 < 1 is not counted.
    """
    count = math.floor(spec.lam - 0.5)
    if count < 1:
        raise MorseDomainError(f"lam = {spec.lam:.4g} supports no bound state")
    return count


def _check_n(spec, n):
    if not 0 <= n < bound_count(spec):
        raise MorseDomainError(f"n = {n} outside bound range [0, {bound_count(spec)})")


def eigenenergy(spec: MorseSpec, n: int) -> float:
    _check_n(spec, n)
    x = spec.hbar * spec.omega * (n + 0.5)
    return x - x * x / (4.0 * spec.D)


def default_grid(spec: MorseSpec, npoints: int = 2048) -> np.ndarray:
    return np.linspace(spec.q0 - 1.5 / spec.beta, spec.q0 + 6.0 / spec.beta, npoints)


def eigenfunction_values(spec: MorseSpec, n: int, q) -> np.ndarray:
    """Analytic psi_n at arbitrary points, no grid checks."""
    _check_n(spec, n)
    lam = spec.lam
    s = lam - n - 0.5
    alpha = 2.0 * s
    xi = 2.0 * lam * np.exp(-spec.beta * (np.asarray(q, dtype=float) - spec.q0))
    log_norm = 0.5 * (
        math.log(spec.beta) + math.log(alpha) + special.gammaln(n + 1) - special.gammaln(2.0 * lam - n)
    )
    with np.errstate(divide="ignore", under="ignore"):
        log_env = log_norm + s * np.log(xi) - 0.5 * xi
    return np.exp(log_env) * special.eval_genlaguerre(n, alpha, xi)


def eigenfunction(spec: MorseSpec, n: int, q_grid, tol: float = 1e-4) -> np.ndarray:
    """psi_n on ``q_grid``; raises GridCoverageError if the grid misses norm > tol."""
    q_grid = np.asarray(q_grid, dtype=float)
    if q_grid.ndim != 1 or q_grid.size < 3 or np.any(np.diff(q_grid) <= 0):
        raise ValueError("q_grid must be a strictly increasing 1-D array")
    psi = eigenfunction_values(spec, n, q_grid)
    deficit = abs(1.0 - np.trapezoid(psi * psi, q_grid))
    if deficit > tol:
        raise GridCoverageError(
            f"grid [{q_grid[0]:.4g}, {q_grid[-1]:.4g}] misses norm {deficit:.3g} of state n={n}", deficit
        )
    return psi


def sinc_dvr_hamiltonian(spec: MorseSpec, q_grid) -> np.ndarray:
    """Colbert-Miller sinc-DVR Hamiltonian on a uniform grid."""
    q_grid = np.asarray(q_grid, dtype=float)
    dq = q_grid[1] - q_grid[0]
    idx = np.arange(q_grid.size)
    diff = idx[:, None] - idx[None, :]
    with np.errstate(divide="ignore"):
        kin = 2.0 * (-1.0) ** diff / diff.astype(float) ** 2
    kin[idx, idx] = math.pi**2 / 3.0
    kin *= spec.hbar**2 / (2.0 * spec.mu * dq**2)
    return kin + np.diag(potential(spec, q_grid))


def grid_eigenvalues(spec: MorseSpec, nlevels: int, q_grid=None) -> np.ndarray:
    """Lowest ``nlevels`` energies by dense diagonalization (reference values)."""
    if q_grid is None:
        q_grid = default_grid(spec)
    h = sinc_dvr_hamiltonian(spec, q_grid)
    return linalg.eigh(h, eigvals_only=True, subset_by_index=[0, nlevels - 1])


def expectation_energy(spec: MorseSpec, psi, q_grid) -> float:
    """<psi|H|psi> by quadrature on a uniform grid, kinetic term spectrally."""
    q_grid = np.asarray(q_grid, dtype=float)
    dq = q_grid[1] - q_grid[0]
    k = 2.0 * math.pi * np.fft.fftfreq(q_grid.size, d=dq)
    psi_k = np.fft.fft(psi)
    kin = spec.hbar**2 / (2.0 * spec.mu) * dq * np.sum(k * k * np.abs(psi_k) ** 2) / q_grid.size
    return kin + dq * np.sum(np.abs(psi) ** 2 * potential(spec, q_grid))
