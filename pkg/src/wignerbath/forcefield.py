"""Lennard-Jones bath, breathing-sphere solute coupling and Morse vibration.

Particle 0 is the I2 center of mass, particles 1..N-1 are Xe atoms. All
quantities are in reduced units. The compiled kernels take a flat parameter
vector (see ``ForceField.params``) so they can be called from other kernels.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .morse import MorseSpec
from .units import ReducedConstants, reduced_constants

# layout of the parameter vector
P_BOX, P_EPS_XX, P_SIG_XX, P_RC_XX, P_SHIFT_XX = 0, 1, 2, 3, 4
P_EPS_IX, P_SIG0_IX, P_ALPHA, P_RC_IX = 5, 6, 7, 8
P_D, P_BETA, P_Q0, P_LIQUID, P_COUPLED = 9, 10, 11, 12, 13
N_PARAMS = 14

OVERLAP_DISTANCE = 0.3


class BathMode(str, enum.Enum):
    LIQUID = "liquid"
    IDEAL_GAS = "ideal_gas"


class UnphysicalCompression(ValueError):
    """Breathing-sphere radius sigma0 + alpha q / 2 is not positive."""


@njit(cache=True, inline="always")
def _lj_terms(r2, eps, sig):
    # returns (4 eps (s12 - s6), 24 eps (2 s12 - s6)), second term = r * (-dphi/dr) = sigma * dphi/dsigma
    s2 = sig * sig / r2
    s6 = s2 * s2 * s2
    s12 = s6 * s6
    return 4.0 * eps * (s12 - s6), 24.0 * eps * (2.0 * s12 - s6)


@dataclass(frozen=True)
class PairLJ:
    epsilon: float = 1.0
    sigma: float = 1.0
    cutoff: float = 2.5

    def __post_init__(self):
        if not (self.epsilon > 0 and self.sigma > 0 and self.cutoff > 0):
            raise ValueError("epsilon, sigma and cutoff must be positive")

    @property
    def shift(self) -> float:
        return float(_lj_terms(self.cutoff**2, self.epsilon, self.sigma)[0])


@dataclass(frozen=True)
class BreathingSphere:
    epsilon: float
    sigma0: float
    alpha: float = 1.0
    cutoff: float = 2.5

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not (self.sigma0 > 0 and self.epsilon >= 0 and self.cutoff > 0):
            raise ValueError("sigma0 and cutoff must be positive, epsilon non-negative")

    @classmethod
    def i2_xe(cls, alpha=1.0, cutoff=2.5, constants: ReducedConstants | None = None):
        k = constants or reduced_constants()
        return cls(epsilon=k.eps_i2xe_star, sigma0=k.sigma0_i2xe_star, alpha=alpha, cutoff=cutoff)

    def sigma(self, q: float) -> float:
        return self.sigma0 + 0.5 * self.alpha * q


@njit(cache=True)
def _pair_lj(r2, eps, sig, rc, shift):
    """(shifted energy, F/r) for one LJ pair; zero beyond the cutoff."""
    if r2 >= rc * rc:
        return 0.0, 0.0
    e, w = _lj_terms(r2, eps, sig)
    return e - shift, w / r2


@njit(cache=True)
def _pair_breathing(r2, eps, sig0, alpha, rc, q):
    """(shifted energy, F/r, generalized force on q) for one I2-Xe pair.

    The cutoff shift depends on q through sigma(q); its derivative is kept in
    the q force so energy and forces stay exact partners.
    """
    if r2 >= rc * rc:
        return 0.0, 0.0, 0.0
    sig = sig0 + 0.5 * alpha * q
    e, w = _lj_terms(r2, eps, sig)
    ec, wc = _lj_terms(rc * rc, eps, sig)
    # dphi/dsigma = w / sigma
    fq = -0.5 * alpha * (w - wc) / sig
    return e - ec, w / r2, fq


# no nnan/ninf: the integrator must still see non-finite values
FAST = {"nsz", "arcp", "contract", "afn", "reassoc"}


@njit(cache=True)
def build_neighbors(x, y, z, box, rlist, start, nbrs):
    """Full Verlet list over Xe pairs (both directions) in CSR form.

    Returns the number of stored entries, or -1 if ``nbrs`` is too small.
    """
    n = x.size
    r2max = rlist * rlist
    count = 0
    for i in range(1, n):
        start[i] = count
        for j in range(1, n):
            if j == i:
                continue
            dx = x[j] - x[i]
            dy = y[j] - y[i]
            dz = z[j] - z[i]
            dx -= box * np.rint(dx / box)
            dy -= box * np.rint(dy / box)
            dz -= box * np.rint(dz / box)
            if dx * dx + dy * dy + dz * dz < r2max:
                if count >= nbrs.size:
                    return -1
                nbrs[count] = j
                count += 1
    start[0] = 0
    start[n] = count
    return count


@njit(cache=True, fastmath=FAST, error_model="numpy")
def _row_all(x, y, z, i, box, ibox, eps, sig2, rc2, shift):
    """LJ force on Xe ``i`` from every other Xe, and its pair energy sum."""
    xi = x[i]
    yi = y[i]
    zi = z[i]
    ax = 0.0
    ay = 0.0
    az = 0.0
    ui = 0.0
    for j in range(1, x.size):
        dx = x[j] - xi
        dy = y[j] - yi
        dz = z[j] - zi
        dx -= box * np.rint(dx * ibox)
        dy -= box * np.rint(dy * ibox)
        dz -= box * np.rint(dz * ibox)
        r2 = dx * dx + dy * dy + dz * dz
        inside = (r2 < rc2) & (r2 > 0.0)
        r2s = r2 if inside else 1.0
        ir2 = 1.0 / r2s
        s6 = sig2 * ir2
        s6 = s6 * s6 * s6
        en = 4.0 * eps * (s6 * s6 - s6) - shift
        fr = 24.0 * eps * (2.0 * s6 * s6 - s6) * ir2
        # separate selects keep the loop branch free
        en = en if inside else 0.0
        fr = fr if inside else 0.0
        ui += en
        ax -= fr * dx
        ay -= fr * dy
        az -= fr * dz
    return ax, ay, az, ui


@njit(cache=True, fastmath=FAST, error_model="numpy")
def _row_listed(x, y, z, i, partners, box, ibox, eps, sig2, rc2, shift):
    """As ``_row_all`` restricted to the Verlet partners of ``i``."""
    xi = x[i]
    yi = y[i]
    zi = z[i]
    ax = 0.0
    ay = 0.0
    az = 0.0
    ui = 0.0
    for k in range(partners.size):
        j = partners[k]
        dx = x[j] - xi
        dy = y[j] - yi
        dz = z[j] - zi
        dx -= box * np.rint(dx * ibox)
        dy -= box * np.rint(dy * ibox)
        dz -= box * np.rint(dz * ibox)
        r2 = dx * dx + dy * dy + dz * dz
        inside = r2 < rc2
        r2s = r2 if inside else 1.0
        ir2 = 1.0 / r2s
        s6 = sig2 * ir2
        s6 = s6 * s6 * s6
        en = 4.0 * eps * (s6 * s6 - s6) - shift
        fr = 24.0 * eps * (2.0 * s6 * s6 - s6) * ir2
        # separate selects keep the loop branch free
        en = en if inside else 0.0
        fr = fr if inside else 0.0
        ui += en
        ax -= fr * dx
        ay -= fr * dy
        az -= fr * dz
    return ax, ay, az, ui


@njit(cache=True, fastmath=FAST, error_model="numpy")
def compute_forces(x, y, z, q, params, use_list, start, nbrs, fx, fy, fz):
    """Forces on all particles (written to fx, fy, fz) and on q.

    Coordinates are structure-of-arrays; each Xe row sums over all its
    partners so the loops vectorize. Every pair term is evaluated from both
    ends with exactly negated separations, so f_ij = -f_ji bit for bit.
    Returns (u_bath, u_coupling, u_morse, f_q).
    """
    n = x.size
    box = params[P_BOX]
    ibox = 1.0 / box

    e = math.exp(-params[P_BETA] * (q - params[P_Q0]))
    u_morse = params[P_D] * (1.0 - e) * (1.0 - e)
    fq = -2.0 * params[P_D] * params[P_BETA] * e * (1.0 - e)

    # I2 - Xe breathing sphere, shift and its q derivative taken at the cutoff
    u_coup = 0.0
    ax = 0.0
    ay = 0.0
    az = 0.0
    if params[P_COUPLED] != 0.0:
        eps = params[P_EPS_IX]
        alpha = params[P_ALPHA]
        rc2 = params[P_RC_IX] ** 2
        sig = params[P_SIG0_IX] + 0.5 * alpha * q
        sc2 = sig * sig / rc2
        sc6 = sc2 * sc2 * sc2
        shift = 4.0 * eps * (sc6 * sc6 - sc6)
        wc = 24.0 * eps * (2.0 * sc6 * sc6 - sc6)
        sig2 = sig * sig
        dq_scale = -0.5 * alpha / sig
        x0 = x[0]
        y0 = y[0]
        z0 = z[0]
        for j in range(1, n):
            dx = x[j] - x0
            dy = y[j] - y0
            dz = z[j] - z0
            dx -= box * np.rint(dx * ibox)
            dy -= box * np.rint(dy * ibox)
            dz -= box * np.rint(dz * ibox)
            r2 = dx * dx + dy * dy + dz * dz
            inside = r2 < rc2
            r2s = r2 if inside else 1.0
            ir2 = 1.0 / r2s
            s6 = sig2 * ir2
            s6 = s6 * s6 * s6
            w = 24.0 * eps * (2.0 * s6 * s6 - s6)
            en = 4.0 * eps * (s6 * s6 - s6) - shift
            gq = dq_scale * (w - wc)
            fr = w * ir2
            en = en if inside else 0.0
            gq = gq if inside else 0.0
            fr = fr if inside else 0.0
            u_coup += en
            fq += gq
            fx[j] = fr * dx
            fy[j] = fr * dy
            fz[j] = fr * dz
            ax -= fr * dx
            ay -= fr * dy
            az -= fr * dz
    else:
        for j in range(1, n):
            fx[j] = 0.0
            fy[j] = 0.0
            fz[j] = 0.0
    fx[0] = ax
    fy[0] = ay
    fz[0] = az

    # Xe - Xe
    u_bath = 0.0
    if params[P_LIQUID] != 0.0:
        eps = params[P_EPS_XX]
        sig2 = params[P_SIG_XX] ** 2
        rc2 = params[P_RC_XX] ** 2
        shift = params[P_SHIFT_XX]
        for i in range(1, n):
            if use_list:
                ax, ay, az, ui = _row_listed(x, y, z, i, nbrs[start[i]:start[i + 1]], box, ibox, eps, sig2, rc2, shift)
            else:
                ax, ay, az, ui = _row_all(x, y, z, i, box, ibox, eps, sig2, rc2, shift)
            fx[i] += ax
            fy[i] += ay
            fz[i] += az
            u_bath += 0.5 * ui
    return u_bath, u_coup, u_morse, fq


@dataclass(frozen=True)
class ForceField:
    """Complete interaction model: bath pairs, solute coupling, Morse vibration."""

    morse: MorseSpec = field(default_factory=MorseSpec.i2)
    bath: PairLJ = field(default_factory=PairLJ)
    coupling: BreathingSphere = field(default_factory=BreathingSphere.i2_xe)
    mode: BathMode = BathMode.LIQUID
    coupled: bool = True
    skin: float = 0.3

    def params(self, box: float) -> np.ndarray:
        rc = max(self.bath.cutoff, self.coupling.cutoff)
        if rc > 0.5 * box:
            raise ValueError(f"cutoff {rc} exceeds half the box length {box:.4g}")
        p = np.zeros(N_PARAMS)
        p[P_BOX] = box
        p[P_EPS_XX] = self.bath.epsilon
        p[P_SIG_XX] = self.bath.sigma
        p[P_RC_XX] = self.bath.cutoff
        p[P_SHIFT_XX] = self.bath.shift
        p[P_EPS_IX] = self.coupling.epsilon
        p[P_SIG0_IX] = self.coupling.sigma0
        p[P_ALPHA] = self.coupling.alpha
        p[P_RC_IX] = self.coupling.cutoff
        p[P_D] = self.morse.D
        p[P_BETA] = self.morse.beta
        p[P_Q0] = self.morse.q0
        p[P_LIQUID] = 1.0 if BathMode(self.mode) is BathMode.LIQUID else 0.0
        p[P_COUPLED] = 1.0 if self.coupled else 0.0
        return p

    @property
    def rlist(self) -> float:
        return self.bath.cutoff + self.skin

    def with_mode(self, mode) -> "ForceField":
        return ForceField(self.morse, self.bath, self.coupling, BathMode(mode), self.coupled, self.skin)

    def use_neighbor_list(self, box: float) -> bool:
        """Verlet list only pays off when its sphere is a small part of the box."""
        return 4.0 / 3.0 * math.pi * self.rlist**3 < 0.4 * box**3

    def neighbor_arrays(self, n: int):
        return np.zeros(n + 1, dtype=np.int64), np.zeros(max(n * (n - 1), 1), dtype=np.int64)


def lj_energy_force(pair: PairLJ, r: float) -> tuple[float, float]:
    """Shifted-truncated LJ energy and radial force -dphi/dr at distance r."""
    if not r > 0:
        raise ValueError(f"distance must be positive, got {r}")
    e, fr = _pair_lj(r * r, pair.epsilon, pair.sigma, pair.cutoff, pair.shift)
    return float(e), float(fr * r)


def breathing_energy_forces(bs: BreathingSphere, r: float, q: float) -> tuple[float, float, float]:
    """Energy, radial force on the pair separation, generalized force on q."""
    if not r > 0:
        raise ValueError(f"distance must be positive, got {r}")
    if bs.sigma(q) <= 0:
        raise UnphysicalCompression(f"sigma(q={q}) = {bs.sigma(q):.4g} <= 0")
    e, fr, fq = _pair_breathing(r * r, bs.epsilon, bs.sigma0, bs.alpha, bs.cutoff, q)
    return float(e), float(fr * r), float(fq)


@dataclass
class ForceResult:
    potential: float
    forces: np.ndarray
    force_q: float
    u_bath: float
    u_coupling: float
    u_morse: float


def closest_approach2(positions, box: float, ff: ForceField) -> float:
    """Smallest squared minimum-image distance among interacting pairs."""
    pos = np.asarray(positions, dtype=float)
    d = pos[:, None, :] - pos[None, :, :]
    d -= box * np.rint(d / box)
    r2 = np.einsum("ijk,ijk->ij", d, d)
    mask = np.triu(np.ones(r2.shape, dtype=bool), 1)
    if BathMode(ff.mode) is not BathMode.LIQUID:
        mask[1:, :] = False
    if not ff.coupled:
        mask[0, :] = False
    return float(r2[mask].min()) if mask.any() else np.inf


def total_forces(positions, q: float, ff: ForceField, box: float) -> ForceResult:
    """Potential energy, forces on all particles and on q for one configuration."""
    pos = np.asarray(positions, dtype=float)
    n = pos.shape[0]
    if ff.coupling.sigma(q) <= 0:
        raise UnphysicalCompression(f"sigma(q={q}) <= 0")
    x, y, z = (np.ascontiguousarray(c) for c in (pos - box * np.floor(pos / box)).T)
    start, nbrs = ff.neighbor_arrays(n)
    out = np.zeros((3, n))
    u_bath, u_coup, u_morse, fq = compute_forces(
        x, y, z, float(q), ff.params(box), False, start, nbrs, out[0], out[1], out[2])
    r2_min = closest_approach2(pos, box, ff)
    if r2_min < OVERLAP_DISTANCE**2:
        warnings.warn(f"particles overlap: closest distance {math.sqrt(r2_min):.3g}", RuntimeWarning)
    return ForceResult(u_bath + u_coup + u_morse, out.T.copy(), fq, u_bath, u_coup, u_morse)
