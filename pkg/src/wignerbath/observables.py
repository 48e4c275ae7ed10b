"""Purity of the reduced vibrational density, bath divergence and monitors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .ensemble import EnsembleResult, SnapshotBatch
from .forcefield import ForceField, total_forces
from .md import IntegrationPlan, Propagator, SystemState, masses
from .wigner import WignerGrid

DEFAULT_BINS = 128
JACKKNIFE_BLOCKS = 20
MAX_OUTSIDE = 0.02

CSV_SCHEMA = "wignerbath observables v1"
CSV_COLUMNS = ("t_star", "t_ps", "chi", "chi_err", "chi_raw", "d_lyap", "ln_d_lyap", "E_total", "T_inst")


class RangeError(ValueError):
    """Too many samples fall outside the histogram range."""


class GeometryMismatch(ValueError):
    pass


@dataclass(frozen=True)
class BinGeometry:
    q_edges: np.ndarray
    p_edges: np.ndarray

    @classmethod
    def uniform(cls, q_range, p_range, bins=DEFAULT_BINS):
        nq, np_ = (bins, bins) if np.isscalar(bins) else bins
        return cls(np.linspace(*q_range, nq + 1), np.linspace(*p_range, np_ + 1))

    @classmethod
    def from_grid(cls, grid: WignerGrid, bins=DEFAULT_BINS, threshold=1e-3, pad=0.0):
        """Bins over the part of a Wigner grid where |W| exceeds ``threshold`` of its peak.

        The tabulated window is generous for the sake of the marginals; binning
        all of it would waste resolution on empty cells.
        """
        a = np.abs(grid.values)
        cut = threshold * a.max()
        iq = np.flatnonzero(a.max(axis=1) > cut)
        ip = np.flatnonzero(a.max(axis=0) > cut)
        ranges = []
        for c, idx, h in ((grid.q, iq, grid.dq), (grid.p, ip, grid.dp)):
            lo, hi = c[idx[0]] - 0.5 * h, c[idx[-1]] + 0.5 * h
            w = hi - lo
            ranges.append((lo - pad * w, hi + pad * w))
        return cls.uniform(*ranges, bins)

    @classmethod
    def enclosing(cls, q, p, bins=DEFAULT_BINS, coverage=0.999, pad=0.1):
        """Bins over the central ``coverage`` quantile range of the samples, padded."""
        q = np.asarray(q)[np.isfinite(q)]
        p = np.asarray(p)[np.isfinite(p)]
        if q.size == 0 or p.size == 0:
            raise RangeError("no finite samples to range over")
        tail = 0.5 * (1.0 - coverage)
        ranges = []
        for v in (q, p):
            lo, hi = np.quantile(v, [tail, 1.0 - tail])
            w = max(hi - lo, 1e-12)
            ranges.append((lo - pad * w, hi + pad * w))
        return cls.uniform(*ranges, bins)

    @property
    def shape(self):
        return self.q_edges.size - 1, self.p_edges.size - 1

    @property
    def cell_area(self) -> float:
        return float((self.q_edges[1] - self.q_edges[0]) * (self.p_edges[1] - self.p_edges[0]))

    def same_as(self, other: "BinGeometry") -> bool:
        return np.array_equal(self.q_edges, other.q_edges) and np.array_equal(self.p_edges, other.p_edges)

    def signed_counts(self, q, p, weights) -> tuple[np.ndarray, int]:
        """Sum of weights per bin and the number of samples outside the range."""
        h, _, _ = np.histogram2d(q, p, bins=(self.q_edges, self.p_edges), weights=weights)
        inside = ((q >= self.q_edges[0]) & (q <= self.q_edges[-1])
                  & (p >= self.p_edges[0]) & (p <= self.p_edges[-1]))
        return h, int(q.size - inside.sum())


@dataclass
class ReducedDensityHistogram:
    """Signed density estimate normalized so that sum(w) * cell_area is about 1."""

    geometry: BinGeometry
    signed_weights: np.ndarray
    counts: np.ndarray
    n_samples: int
    n_outside: int

    @property
    def total_weight(self) -> float:
        return float(self.signed_weights.sum() * self.geometry.cell_area)

    @property
    def outside_fraction(self) -> float:
        return self.n_outside / self.n_samples if self.n_samples else 0.0


def _half_mask(index, half):
    if half is None:
        return np.ones(index.size, dtype=bool)
    if half not in ("A", "B"):
        raise ValueError("half must be 'A', 'B' or None")
    return index % 2 == (0 if half == "A" else 1)


def reduce_and_bin(batch: SnapshotBatch, geometry: BinGeometry, half: str | None = None,
                   max_outside: float = MAX_OUTSIDE) -> ReducedDensityHistogram:
    """Histogram of the vibrational samples of one half-ensemble (even or odd index).

    Bath coordinates are marginalized simply by not looking at them.
    """
    m = _half_mask(batch.index, half)
    n = int(m.sum())
    if n == 0:
        raise ValueError("no samples in this half of the batch")
    q, p, s = batch.q[m], batch.p_q[m], batch.sign[m].astype(float)
    h, out = geometry.signed_counts(q, p, s)
    counts, _ = geometry.signed_counts(q, p, None)
    if out > max_outside * n:
        raise RangeError(f"{out} of {n} samples outside the histogram range")
    w = h * batch.norm / (n * geometry.cell_area)
    return ReducedDensityHistogram(geometry, w, counts, n, out)


def purity(hist_a: ReducedDensityHistogram, hist_b: ReducedDensityHistogram, hbar: float) -> tuple[float, float]:
    """(chi, chi_raw): split-halves cross product, with and without the 2 pi hbar factor."""
    if not hist_a.geometry.same_as(hist_b.geometry):
        raise GeometryMismatch("histograms have different bin geometry")
    raw = float(np.sum(hist_a.signed_weights * hist_b.signed_weights) * hist_a.geometry.cell_area)
    return 2.0 * math.pi * hbar * raw, raw


@dataclass
class PurityEstimate:
    chi: float
    chi_err: float
    chi_raw: float
    outside_fraction: float


def purity_estimate(q, p, sign, index, norm: float, geometry: BinGeometry, hbar: float,
                    blocks: int = JACKKNIFE_BLOCKS) -> PurityEstimate:
    """Split-halves purity with a delete-one-block jackknife error.

    Half A holds even trajectory indices, half B odd ones; block k holds the
    pairs (2j, 2j+1) with j = k mod ``blocks``.
    """
    index = np.asarray(index)
    sign = np.asarray(sign, dtype=float)
    half = index % 2
    block = (index // 2) % blocks
    nbins = geometry.shape[0] * geometry.shape[1]
    h = np.zeros((2, blocks, nbins))
    n = np.zeros((2, blocks))
    outside = 0
    for a in (0, 1):
        for k in range(blocks):
            m = (half == a) & (block == k)
            if m.any():
                hk, out = geometry.signed_counts(q[m], p[m], sign[m])
                h[a, k] = hk.ravel()
                n[a, k] = m.sum()
                outside += out
    if np.any(n.sum(axis=1) == 0):
        raise ValueError("both halves need samples")
    area = geometry.cell_area
    scale = norm * norm / area * 2.0 * math.pi * hbar
    tot = h.sum(axis=1)
    ntot = n.sum(axis=1)
    raw = float(tot[0] @ tot[1]) * norm * norm / (ntot[0] * ntot[1] * area)
    loo = np.empty(blocks)
    for k in range(blocks):
        a = tot[0] - h[0, k]
        b = tot[1] - h[1, k]
        na, nb = ntot[0] - n[0, k], ntot[1] - n[1, k]
        loo[k] = float(a @ b) * scale / (na * nb) if na and nb else np.nan
    loo = loo[np.isfinite(loo)]
    err = math.sqrt((loo.size - 1) / loo.size * np.sum((loo - loo.mean()) ** 2)) if loo.size > 1 else np.nan
    return PurityEstimate(2.0 * math.pi * hbar * raw, err, raw, outside / index.size)


@dataclass
class PuritySeries:
    times: np.ndarray
    chi: np.ndarray
    chi_err: np.ndarray
    chi_raw: np.ndarray
    geometry: BinGeometry
    auto_ranged: bool = False


def purity_series(result: EnsembleResult, hbar: float, geometry: BinGeometry,
                  blocks: int = JACKKNIFE_BLOCKS, max_outside: float = MAX_OUTSIDE) -> PuritySeries:
    """Purity at every record with one bin geometry for all times.

    If more than ``max_outside`` of the samples leave the range at any time,
    the geometry is widened once to enclose every record; a second overflow
    raises RangeError.
    """
    batches = list(result.batches())
    if not batches or len(batches[0]) == 0:
        raise ValueError("no unflagged trajectories")

    def run(geom):
        ests = [purity_estimate(b.q, b.p_q, b.sign, b.index, b.norm, geom, hbar, blocks) for b in batches]
        return ests, max(e.outside_fraction for e in ests)

    ests, worst = run(geometry)
    auto = False
    if worst > max_outside:
        geometry = BinGeometry.enclosing(np.concatenate([b.q for b in batches]),
                                         np.concatenate([b.p_q for b in batches]), geometry.shape)
        auto = True
        ests, worst = run(geometry)
        if worst > max_outside:
            raise RangeError(f"{worst:.1%} of samples outside the widened histogram range")
    return PuritySeries(result.times.copy(), np.array([e.chi for e in ests]),
                        np.array([e.chi_err for e in ests]), np.array([e.chi_raw for e in ests]), geometry, auto)


def _overlap(edges, centers, width):
    # length of [edges[i], edges[i+1]] inside the cell centered at centers[j]
    lo = np.maximum(edges[:-1, None], centers[None, :] - 0.5 * width)
    hi = np.minimum(edges[1:, None], centers[None, :] + 0.5 * width)
    return np.clip(hi - lo, 0.0, None)


def grid_bin_average(grid: WignerGrid, geometry: BinGeometry) -> np.ndarray:
    """Bin averages of the piecewise-constant Wigner grid (the sampler's density)."""
    mq = _overlap(geometry.q_edges, grid.q, grid.dq)
    mp = _overlap(geometry.p_edges, grid.p, grid.dp)
    return mq @ grid.values @ mp.T / geometry.cell_area


# -- divergence of nearby bath trajectories -------------------------------------

@dataclass
class LyapunovFit:
    rate: float
    intercept: float
    r_squared: float
    window: tuple[float, float]
    valid: bool


@dataclass
class LyapunovSeries:
    times: np.ndarray
    distance: np.ndarray
    log_distance: np.ndarray
    fit: LyapunovFit
    delta0: float
    replicas: int


def phase_distance(pos_a, mom_a, pos_b, mom_b, box: float, positions_only=False) -> np.ndarray:
    """Euclidean distance over Xe coordinates (particles 1..) for each record."""
    dx = pos_a[..., 1:, :] - pos_b[..., 1:, :]
    dx -= box * np.rint(dx / box)
    d2 = np.sum(dx * dx, axis=(-2, -1))
    if not positions_only:
        dp = mom_a[..., 1:, :] - mom_b[..., 1:, :]
        d2 = d2 + np.sum(dp * dp, axis=(-2, -1))
    return np.sqrt(d2)


def fit_growth(times, log_d, start=0.2, stop=None, saturation_log=np.inf) -> LyapunovFit:
    """Least-squares slope of ln d over [start, stop], cut where ln d saturates.

    If saturation comes before ``start`` the window start is pulled back.
    """
    times = np.asarray(times)
    log_d = np.asarray(log_d)
    stop = times[-1] if stop is None else stop
    finite = np.isfinite(log_d)
    sat = np.flatnonzero(finite & (log_d >= saturation_log))
    end = times[sat[0]] if sat.size else np.inf
    stop = min(stop, end)
    if stop <= start:
        start = 0.5 * stop
    m = (times >= start) & (times < stop if np.isfinite(end) else times <= stop) & finite
    if m.sum() < 3:
        return LyapunovFit(np.nan, np.nan, np.nan, (float(start), float(stop)), False)
    reg = stats.linregress(times[m], log_d[m])
    return LyapunovFit(float(reg.slope), float(reg.intercept), float(reg.rvalue**2),
                       (float(times[m][0]), float(times[m][-1])), True)


def lyapunov(reference, delta0: float, plan: IntegrationPlan, ff: ForceField, rng: np.random.Generator,
             positions_only=False, fit_start=0.2, fit_stop=None, saturation=0.1) -> LyapunovSeries:
    """Divergence of a bath configuration from a copy with Xe positions displaced by ``delta0``.

    ``reference`` may be one state or a sequence of states (replicas). The
    reported distance is the geometric mean over replicas; the growth rate is
    fitted on its logarithm before d reaches ``saturation`` times the box length.
    """
    refs = [reference] if isinstance(reference, SystemState) else list(reference)
    if not refs:
        raise ValueError("need at least one reference state")
    if delta0 < 0:
        raise ValueError("delta0 must be non-negative")
    box = refs[0].box_length
    prop = Propagator(ff, box, refs[0].n_particles)
    logs = []
    for ref in refs:
        direction = rng.normal(size=(ref.n_particles - 1, 3))
        direction *= delta0 / np.linalg.norm(direction)
        other = ref.copy()
        other.positions[1:] += direction
        _, ra = prop.run(ref, plan, full=True)
        _, rb = prop.run(other, plan, full=True)
        d = phase_distance(ra.positions, ra.momenta, rb.positions, rb.momenta, box, positions_only)
        with np.errstate(divide="ignore"):
            logs.append(np.log(d))
    log_d = np.mean(logs, axis=0)
    times = plan.times
    distance = np.exp(log_d)
    fit = fit_growth(times, log_d, fit_start, fit_stop, math.log(saturation * box))
    return LyapunovSeries(times, distance, log_d, fit, delta0, len(refs))


# -- thermodynamic monitors -------------------------------------------------------

@dataclass
class Monitors:
    temperature: float
    total_energy: float
    com_momentum: np.ndarray


def monitors(state: SystemState, ff: ForceField) -> Monitors:
    """Kinetic temperature of the translations, total energy and total momentum."""
    m = masses(state.n_particles)
    kin = 0.5 * float(np.sum(state.momenta**2 / m[:, None]))
    dof = 3 * state.n_particles - 3
    temp = 2.0 * kin / dof if dof > 0 else 0.0
    pot = total_forces(state.positions, state.q, ff, state.box_length).potential
    energy = kin + 0.5 * state.p_q**2 / ff.morse.mu + pot
    return Monitors(temp, energy, state.momenta.sum(axis=0))


def write_series_csv(path, times, ps_per_unit: float, chi, chi_err, chi_raw, d_lyap, energy, temperature):
    """One row per record with the fixed column order of CSV_COLUMNS."""
    times = np.asarray(times)
    n = times.size
    cols = [times, times * ps_per_unit, chi, chi_err, chi_raw, d_lyap, None, energy, temperature]
    cols = [np.full(n, np.nan) if c is None else np.broadcast_to(np.asarray(c, dtype=float), (n,)) for c in cols]
    with np.errstate(divide="ignore", invalid="ignore"):
        cols[6] = np.log(cols[5])
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# {CSV_SCHEMA}\n")
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in zip(*cols):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def read_series_csv(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        first = fh.readline().strip()
        if first != f"# {CSV_SCHEMA}":
            raise ValueError(f"{path}: unknown schema line {first!r}")
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
    return {name: data[:, i] for i, name in enumerate(header)}
