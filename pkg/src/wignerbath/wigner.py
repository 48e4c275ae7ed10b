"""Wigner function of Morse superpositions and signed phase-space sampling."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import morse
from .morse import GridCoverageError, MorseSpec


@dataclass(frozen=True)
class Superposition:
    """Finite superposition sum_n c_n |n> of Morse bound states."""

    terms: tuple[tuple[int, complex], ...]

    def __post_init__(self):
        ns = [n for n, _ in self.terms]
        if not ns:
            raise ValueError("empty superposition")
        if len(set(ns)) != len(ns):
            raise ValueError(f"repeated quantum numbers in {ns}")
        if any(n < 0 for n in ns):
            raise ValueError("quantum numbers must be non-negative")
        if sum(abs(c) ** 2 for _, c in self.terms) == 0:
            raise ValueError("all coefficients vanish")

    @classmethod
    def of(cls, *levels: int) -> "Superposition":
        """Equal-weight superposition of ``levels``."""
        return cls(tuple((int(n), 1.0 + 0j) for n in levels)).normalized()

    @classmethod
    def parse(cls, text: str) -> "Superposition":
        """Parse ``"0+2"`` or ``"5(0.6)+8(0.8j)"``; coefficients are renormalized."""
        parts, depth, cur = [], 0, ""
        for ch in text.replace(" ", ""):
            if ch == "(":
                depth += 1
            elif ch == ")":
                depth -= 1
            if ch == "+" and depth == 0:
                parts.append(cur)
                cur = ""
            else:
                cur += ch
        parts.append(cur)
        terms = []
        for part in parts:
            m = re.fullmatch(r"(\d+)(?:\(([^()]+)\))?", part)
            if m is None:
                raise ValueError(f"cannot parse superposition term {part!r} in {text!r}")
            try:
                coef = complex(m.group(2)) if m.group(2) else 1.0 + 0j
            except ValueError:
                raise ValueError(f"bad coefficient {m.group(2)!r} in {text!r}") from None
            terms.append((int(m.group(1)), coef))
        return cls(tuple(terms)).normalized()

    def normalized(self) -> "Superposition":
        norm = math.sqrt(sum(abs(c) ** 2 for _, c in self.terms))
        return Superposition(tuple((n, complex(c) / norm) for n, c in self.terms))

    @property
    def levels(self) -> list[int]:
        return [n for n, _ in self.terms]

    @property
    def is_real(self) -> bool:
        return all(c.imag == 0 for _, c in self.terms)

    def label(self) -> str:
        return "+".join(str(n) for n in self.levels)

    def wavefunction(self, spec: MorseSpec, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        psi = np.zeros(q.shape, dtype=complex)
        for n, c in self.terms:
            psi += c * morse.eigenfunction_values(spec, n, q)
        return psi

    def mean_energy(self, spec: MorseSpec) -> float:
        return sum(abs(c) ** 2 * morse.eigenenergy(spec, n) for n, c in self.terms)


def momentum_density(spec: MorseSpec, state: Superposition, p, q_grid=None) -> np.ndarray:
    """|psi(p)|^2 by direct quadrature of the Fourier integral."""
    if q_grid is None:
        q_grid = morse.default_grid(spec, 4096)
    psi = state.wavefunction(spec, q_grid)
    dq = q_grid[1] - q_grid[0]
    phase = np.exp(-1j * np.outer(np.asarray(p, dtype=float), q_grid) / spec.hbar)
    amp = phase @ psi * dq / math.sqrt(2.0 * math.pi * spec.hbar)
    return np.abs(amp) ** 2


def state_support(spec: MorseSpec, state: Superposition, tol: float = 1e-10, pad: float = 0.15):
    """Position and momentum windows holding all but ``tol`` of the state."""
    q = morse.default_grid(spec, 8192)
    rho = np.abs(state.wavefunction(spec, q)) ** 2
    cdf = np.cumsum(rho)
    cdf /= cdf[-1]
    qlo = q[np.searchsorted(cdf, tol)]
    qhi = q[min(np.searchsorted(cdf, 1.0 - tol), q.size - 1)]
    width = qhi - qlo
    dq = q[1] - q[0]
    k = np.fft.fftshift(np.fft.fftfreq(4 * q.size, d=dq)) * 2.0 * math.pi
    psi_k = np.fft.fftshift(np.fft.fft(state.wavefunction(spec, q), n=4 * q.size))
    rho_p = np.abs(psi_k) ** 2
    pcdf = np.cumsum(rho_p)
    pcdf /= pcdf[-1]
    p_lo = spec.hbar * k[np.searchsorted(pcdf, tol)]
    p_hi = spec.hbar * k[min(np.searchsorted(pcdf, 1.0 - tol), k.size - 1)]
    pmax = max(abs(p_lo), abs(p_hi)) * (1.0 + 2.0 * pad)
    return (qlo - pad * width, qhi + pad * width), (-pmax, pmax)


@dataclass(frozen=True)
class SignedSamples:
    """Phase points drawn from |W| with the sign of W at each point.

    ``norm`` is the L1 norm of W, so ``norm * mean(sign * f)`` estimates the
    integral of f W.
    """

    q: np.ndarray
    p: np.ndarray
    sign: np.ndarray
    norm: float

    def __len__(self):
        return self.q.size

    def signed_mean(self, values) -> tuple[float, float]:
        """Estimate of the integral of f W and its standard error."""
        w = self.norm * self.sign * np.asarray(values, dtype=float)
        return float(w.mean()), float(w.std(ddof=1) / math.sqrt(w.size))


@dataclass(frozen=True)
class WignerGrid:
    q: np.ndarray
    p: np.ndarray
    values: np.ndarray  # shape (q.size, p.size)
    hbar: float

    @property
    def dq(self) -> float:
        return float(self.q[1] - self.q[0])

    @property
    def dp(self) -> float:
        return float(self.p[1] - self.p[0])

    @property
    def cell_area(self) -> float:
        return self.dq * self.dp

    @property
    def q_range(self) -> tuple[float, float]:
        return float(self.q[0] - 0.5 * self.dq), float(self.q[-1] + 0.5 * self.dq)

    @property
    def p_range(self) -> tuple[float, float]:
        return float(self.p[0] - 0.5 * self.dp), float(self.p[-1] + 0.5 * self.dp)

    def normalization(self) -> float:
        return float(self.values.sum() * self.cell_area)

    def purity(self) -> float:
        return float(2.0 * math.pi * self.hbar * np.sum(self.values**2) * self.cell_area)

    def marginal_q(self) -> np.ndarray:
        return self.values.sum(axis=1) * self.dp

    def marginal_p(self) -> np.ndarray:
        return self.values.sum(axis=0) * self.dq

    @cached_property
    def l1_norm(self) -> float:
        return float(np.abs(self.values).sum() * self.cell_area)

    def negative_fraction(self) -> float:
        """Share of |W| carried by negative cells."""
        neg = -self.values[self.values < 0].sum() * self.cell_area
        return float(neg / self.l1_norm)

    @cached_property
    def _cdf(self) -> np.ndarray:
        cdf = np.cumsum(np.abs(self.values).ravel())
        if cdf[-1] <= 0:
            raise ValueError("Wigner grid is identically zero")
        return cdf

    def sample(self, count: int, rng: np.random.Generator) -> SignedSamples:
        return sample(self, count, rng)

    def to_csv(self, path) -> None:
        """Long-format dump: header comments, then ``q,p,W`` rows with p fastest."""
        qq, pp = np.meshgrid(self.q, self.p, indexing="ij")
        table = np.column_stack([qq.ravel(), pp.ravel(), self.values.ravel()])
        header = (
            f"wignerbath wigner grid v1\nnq={self.q.size} np={self.p.size} hbar={self.hbar!r}\n"
            "rows are row-major over (q, p), p varying fastest\nq,p,W"
        )
        np.savetxt(path, table, delimiter=",", header=header, fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "WignerGrid":
        with open(path) as fh:
            fh.readline()
            meta = dict(item.split("=") for item in fh.readline().lstrip("# ").split())
        nq, npts = int(meta["nq"]), int(meta["np"])
        table = np.loadtxt(path, delimiter=",", comments="#")
        values = table[:, 2].reshape(nq, npts)
        return cls(table[::npts, 0].copy(), table[:npts, 1].copy(), values, float(meta["hbar"]))


def build_wigner(
    spec: MorseSpec,
    state: Superposition,
    nq: int = 512,
    np_: int = 512,
    ny: int = 1024,
    q_range: tuple[float, float] | None = None,
    p_range: tuple[float, float] | None = None,
    tol: float = 1e-4,
) -> WignerGrid:
    """Tabulate W(q,p) = (1/pi hbar) int psi*(q+y) psi(q-y) exp(2ipy/hbar) dy."""
    auto_q, auto_p = state_support(spec, state)
    qlo, qhi = q_range or auto_q
    plo, phi = p_range or auto_p
    q = np.linspace(qlo, qhi, nq)
    p = np.linspace(plo, phi, np_)

    fine = np.linspace(qlo, qhi, 8 * nq + 1)
    inside = np.trapezoid(np.abs(state.wavefunction(spec, fine)) ** 2, fine)
    deficit = abs(1.0 - inside)
    if deficit > tol:
        raise GridCoverageError(
            f"q window [{qlo:.4g}, {qhi:.4g}] misses norm {deficit:.3g} of state {state.label()}", deficit
        )

    half = 0.5 * (qhi - qlo)
    y_pos = np.linspace(0.0, half, ny // 2 + 1)[1:] - 0.5 * half / (ny // 2)
    y = np.concatenate([-y_pos[::-1], y_pos])
    dy = y_pos[1] - y_pos[0]
    w = np.full(y.size, dy)
    w[0] = w[-1] = 0.5 * dy

    left = state.wavefunction(spec, q[:, None] + y[None, :])
    right = state.wavefunction(spec, q[:, None] - y[None, :])
    kernel = np.conj(left) * right * w
    phase = np.exp(2j * np.outer(y, p) / spec.hbar)
    wig = kernel @ phase / (math.pi * spec.hbar)
    residue = np.abs(wig.imag).max() / max(np.abs(wig.real).max(), 1e-300)
    if residue > 1e-10:
        raise ArithmeticError(f"Wigner transform left imaginary residue {residue:.3g}")
    return WignerGrid(q, p, np.ascontiguousarray(wig.real), spec.hbar)


def sample(grid: WignerGrid, count: int, rng: np.random.Generator) -> SignedSamples:
    """Draw cells with probability |W| dA, jitter uniformly inside the cell."""
    if count < 1:
        raise ValueError("count must be >= 1")
    cdf = grid._cdf
    u = rng.random(count) * cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
    iq, ip = np.divmod(idx, grid.p.size)
    jitter = rng.random((2, count)) - 0.5
    q = grid.q[iq] + jitter[0] * grid.dq
    p = grid.p[ip] + jitter[1] * grid.dp
    sign = np.where(grid.values[iq, ip] < 0, -1, 1).astype(np.int8)
    return SignedSamples(q, p, sign, grid.l1_norm)
