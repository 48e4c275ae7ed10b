"""Velocity-Verlet NVE propagation of the I2 vibration plus all translations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .forcefield import P_ALPHA, P_SIG0_IX, BathMode, ForceField, UnphysicalCompression, build_neighbors, compute_forces
from .units import reduced_constants

STATUS_OK = 0
STATUS_NONFINITE = 1
STATUS_NEIGHBOR_OVERFLOW = 2
STATUS_COMPRESSION = 3
STATUS_RUNAWAY = 4


class PropagationError(RuntimeError):
    pass


class EquilibrationError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class SystemState:
    """Phase point of the full system. Row 0 of the arrays is the I2 center of mass."""

    q: float
    p_q: float
    positions: np.ndarray
    momenta: np.ndarray
    box_length: float
    time: float = 0.0

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=float)
        self.momenta = np.ascontiguousarray(self.momenta, dtype=float)
        if self.positions.shape != self.momenta.shape or self.positions.shape[1:] != (3,):
            raise ValueError("positions and momenta must both have shape (N, 3)")
        bad = ~np.isfinite(np.concatenate([[self.q, self.p_q], self.positions.ravel(), self.momenta.ravel()]))
        if bad.any():
            raise ValueError(f"non-finite entry in state (flat index {int(np.argmax(bad))})")

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def r_com(self):
        return self.positions[0]

    @property
    def p_com(self):
        return self.momenta[0]

    @property
    def xe_positions(self):
        return self.positions[1:]

    @property
    def xe_momenta(self):
        return self.momenta[1:]

    def copy(self) -> "SystemState":
        return replace(self, positions=self.positions.copy(), momenta=self.momenta.copy())


@dataclass(frozen=True)
class IntegrationPlan:
    dt: float = 2e-4
    n_steps: int = 7500
    record_stride: int = 250

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        period = 2.0 * math.pi / reduced_constants().omega_star
        if self.dt > period / 40:
            raise ValueError(f"dt = {self.dt} exceeds a fortieth of the I2 period ({period / 40:.3g})")
        if self.n_steps < 0 or self.record_stride < 1:
            raise ValueError("n_steps must be >= 0 and record_stride >= 1")
        if self.n_steps % self.record_stride:
            raise ValueError("record_stride must divide n_steps")

    @classmethod
    def for_duration(cls, t_end: float, dt: float = 2e-4, record_every: float = 0.05) -> "IntegrationPlan":
        n_steps = int(round(t_end / dt))
        stride = max(1, int(round(record_every / dt)))
        n_steps = stride * int(round(n_steps / stride))
        return cls(dt, n_steps, stride)

    @property
    def n_records(self) -> int:
        return self.n_steps // self.record_stride + 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_records) * self.record_stride * self.dt


def masses(n_particles: int, m_i2: float | None = None) -> np.ndarray:
    m = np.ones(n_particles)
    m[0] = reduced_constants().m_i2_star if m_i2 is None else m_i2
    return m


@njit(cache=True)
def _kinetic(px, py, pz, inv_mass):
    ke = 0.0
    for i in range(px.size):
        ke += (px[i] * px[i] + py[i] * py[i] + pz[i] * pz[i]) * inv_mass[i]
    return 0.5 * ke


@njit(cache=True)
def _max_displacement2(x, y, z, ref, box):
    m = 0.0
    for i in range(x.size):
        dx = x[i] - ref[0, i]
        dy = y[i] - ref[1, i]
        dz = z[i] - ref[2, i]
        dx -= box * np.rint(dx / box)
        dy -= box * np.rint(dy / box)
        dz -= box * np.rint(dz / box)
        m = max(m, dx * dx + dy * dy + dz * dz)
    return m


@njit(cache=True)
def integrate(
    pos, mom, q, pq, inv_mass, mu, params, dt, n_steps, stride, clamp_q,
    use_list, rlist, skin, start, nbrs, forces, pos_ref,
    thermo_T, thermo_every,
    rec_q, rec_p, rec_e, rec_t, rec_pos, rec_mom,
):
    """Velocity-Verlet loop over (3, N) position/momentum arrays, updated in place.

    Returns (q, p_q, status, offending flat index). Records every ``stride``
    steps including step 0. ``thermo_T > 0`` rescales translational momenta
    every ``thermo_every`` steps. With ``clamp_q`` the vibration is frozen.
    """
    n = pos.shape[1]
    box = params[0]
    dof = 3.0 * n - 3.0
    full = rec_pos.shape[0] > 0
    x, y, z = pos[0], pos[1], pos[2]
    px, py, pz = mom[0], mom[1], mom[2]
    fx, fy, fz = forces[0], forces[1], forces[2]
    if use_list:
        if build_neighbors(x, y, z, box, rlist, start, nbrs) < 0:
            return q, pq, 2, -1
        pos_ref[:, :] = pos
    ub, uc, um, fq = compute_forces(x, y, z, q, params, use_list, start, nbrs, fx, fy, fz)
    if clamp_q:
        fq = 0.0
    k = 0
    ke = _kinetic(px, py, pz, inv_mass)
    rec_q[0] = q
    rec_p[0] = pq
    rec_e[0] = ke + 0.5 * pq * pq / mu + ub + uc + um
    rec_t[0] = 2.0 * ke / dof
    if full:
        rec_pos[0] = pos
        rec_mom[0] = mom
    half = 0.5 * dt
    max_move = 0.5 * box
    for s in range(1, n_steps + 1):
        for c in range(3):
            for i in range(n):
                mom[c, i] += half * forces[c, i]
                move = dt * mom[c, i] * inv_mass[i]
                if not abs(move) < max_move:
                    # wrapping would hide an exploded (possibly still finite) coordinate
                    return q, pq, 4, 2 + 3 * i + c
                v = pos[c, i] + move
                pos[c, i] = v - box * np.floor(v / box)
        if not clamp_q:
            pq += half * fq
            q += dt * pq / mu
            if params[P_SIG0_IX] + 0.5 * params[P_ALPHA] * q <= 0.0:
                return q, pq, 3, -1
        if use_list and _max_displacement2(x, y, z, pos_ref, box) > 0.25 * skin * skin:
            if build_neighbors(x, y, z, box, rlist, start, nbrs) < 0:
                return q, pq, 2, -1
            pos_ref[:, :] = pos
        ub, uc, um, fq = compute_forces(x, y, z, q, params, use_list, start, nbrs, fx, fy, fz)
        if clamp_q:
            fq = 0.0
        for c in range(3):
            for i in range(n):
                mom[c, i] += half * forces[c, i]
        pq += half * fq
        if not (math.isfinite(ub + uc + um) and math.isfinite(pq) and math.isfinite(q)):
            if not math.isfinite(q):
                return q, pq, 1, 0
            if not math.isfinite(pq):
                return q, pq, 1, 1
            for i in range(n):
                for c in range(3):
                    if not (math.isfinite(pos[c, i]) and math.isfinite(mom[c, i])):
                        return q, pq, 1, 2 + 3 * i + c
            return q, pq, 1, -1
        if thermo_T > 0.0 and s % thermo_every == 0:
            t_inst = 2.0 * _kinetic(px, py, pz, inv_mass) / dof
            if t_inst > 0.0:
                scale = math.sqrt(thermo_T / t_inst)
                for c in range(3):
                    for i in range(n):
                        mom[c, i] *= scale
        if s % stride == 0:
            k += 1
            ke = _kinetic(px, py, pz, inv_mass)
            rec_q[k] = q
            rec_p[k] = pq
            rec_e[k] = ke + 0.5 * pq * pq / mu + ub + uc + um
            rec_t[k] = 2.0 * ke / dof
            if full:
                rec_pos[k] = pos
                rec_mom[k] = mom
    return q, pq, 0, -1


_COORD_NAMES = ("q", "p_q")


def _describe(index, n):
    if index < 0:
        return "unknown coordinate"
    if index < 2:
        return _COORD_NAMES[index]
    i, c = divmod(index - 2, 3)
    return f"particle {i % n} component {'xyz'[c]}"


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    q: np.ndarray
    p_q: np.ndarray
    energy: np.ndarray
    temperature: np.ndarray
    positions: np.ndarray | None = None
    momenta: np.ndarray | None = None

    @property
    def energy_drift(self) -> float:
        """Largest |E(t) - E(0)| / |E(0)| over the records."""
        return float(np.max(np.abs(self.energy - self.energy[0])) / abs(self.energy[0]))


class Propagator:
    """Reusable integrator bound to one force field and box."""

    def __init__(self, ff: ForceField, box_length: float, n_particles: int, m_i2: float | None = None):
        self.ff = ff
        self.box = float(box_length)
        self.params = ff.params(self.box)
        self.n = n_particles
        self.inv_mass = 1.0 / masses(n_particles, m_i2)
        self.mu = ff.morse.mu
        self.use_list = ff.use_neighbor_list(self.box)
        self.start, self.nbrs = ff.neighbor_arrays(n_particles if self.use_list else 0)
        self.forces = np.zeros((3, n_particles))
        self.pos_ref = np.zeros((3, n_particles))

    def run(self, state: SystemState, plan: IntegrationPlan, clamp_q=False, thermostat_T=0.0,
            thermostat_every=20, full=False) -> tuple[SystemState, TrajectoryRecord]:
        """Propagate a copy of ``state``; returns the final state and the records."""
        if state.n_particles != self.n or state.box_length != self.box:
            raise ValueError("state does not match propagator geometry")
        if not clamp_q and self.ff.coupling.sigma(state.q) <= 0:
            raise UnphysicalCompression(f"sigma(q={state.q}) <= 0")
        pos = np.ascontiguousarray(state.positions.T)
        pos -= self.box * np.floor(pos / self.box)
        mom = np.ascontiguousarray(state.momenta.T)
        nrec = plan.n_records
        rec = [np.empty(nrec) for _ in range(4)]
        shape = (nrec, 3, self.n) if full else (0, 3, self.n)
        rec_pos, rec_mom = np.empty(shape), np.empty(shape)
        q, pq, status, where = integrate(
            pos, mom, float(state.q), float(state.p_q), self.inv_mass, self.mu, self.params,
            plan.dt, plan.n_steps, plan.record_stride, clamp_q, self.use_list, self.ff.rlist, self.ff.skin,
            self.start, self.nbrs, self.forces, self.pos_ref, float(thermostat_T), int(thermostat_every),
            rec[0], rec[1], rec[2], rec[3], rec_pos, rec_mom,
        )
        if status == STATUS_NONFINITE:
            raise PropagationError(f"non-finite value in {_describe(where, self.n)}")
        if status == STATUS_RUNAWAY:
            raise PropagationError(f"runaway displacement of {_describe(where, self.n)}")
        if status == STATUS_NEIGHBOR_OVERFLOW:
            raise PropagationError("neighbor list overflow")
        if status == STATUS_COMPRESSION:
            raise UnphysicalCompression(f"breathing radius collapsed at q = {q:.4g}")
        new = SystemState(q, pq, pos.T, mom.T, self.box, state.time + plan.n_steps * plan.dt)
        record = TrajectoryRecord(state.time + plan.times, *rec,
                                  rec_pos.transpose(0, 2, 1) if full else None,
                                  rec_mom.transpose(0, 2, 1) if full else None)
        return new, record


def step(state: SystemState, plan: IntegrationPlan, ff: ForceField) -> SystemState:
    """One velocity-Verlet step of size ``plan.dt``."""
    prop = Propagator(ff, state.box_length, state.n_particles)
    new, _ = prop.run(state, IntegrationPlan(plan.dt, 1, 1))
    return new


def run_trajectory(initial: SystemState, plan: IntegrationPlan, ff: ForceField, full=False) -> TrajectoryRecord:
    return Propagator(ff, initial.box_length, initial.n_particles).run(initial, plan, full=full)[1]


# -- initial configurations and equilibration ---------------------------------

def box_length(n_particles: int, density: float) -> float:
    return (n_particles / density) ** (1.0 / 3.0)


def fcc_lattice(n_particles: int, box: float) -> np.ndarray:
    cells = math.ceil((n_particles / 4) ** (1.0 / 3.0) - 1e-9)
    a = box / cells
    basis = np.array([[0, 0, 0], [0.5, 0.5, 0], [0.5, 0, 0.5], [0, 0.5, 0.5]])
    idx = np.array([(i, j, k) for i in range(cells) for j in range(cells) for k in range(cells)], dtype=float)
    sites = ((idx[:, None, :] + basis[None, :, :]).reshape(-1, 3) + 0.25) * a
    return sites[:n_particles].copy()


def random_placement(n_particles: int, box: float, rng: np.random.Generator, min_distance=0.8,
                     max_tries=100000) -> np.ndarray:
    pos = np.empty((n_particles, 3))
    placed = 0
    for _ in range(max_tries):
        trial = rng.random(3) * box
        d = pos[:placed] - trial
        d -= box * np.round(d / box)
        if placed == 0 or np.min(np.einsum("ij,ij->i", d, d)) >= min_distance**2:
            pos[placed] = trial
            placed += 1
            if placed == n_particles:
                return pos
    raise RuntimeError(f"could not place {n_particles} particles at min distance {min_distance}")


def maxwell_boltzmann(mass: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """Momenta with zero total momentum drawn at ``temperature``."""
    mom = rng.normal(size=(mass.size, 3)) * np.sqrt(mass * temperature)[:, None]
    mom -= mass[:, None] * (mom.sum(axis=0) / mass.sum())
    return mom


def initial_state(n_particles: int, density: float, mode, temperature: float, rng: np.random.Generator,
                  q0: float = 0.0) -> SystemState:
    box = box_length(n_particles, density)
    if BathMode(mode) is BathMode.LIQUID:
        pos = fcc_lattice(n_particles, box)
    else:
        pos = random_placement(n_particles, box, rng)
    mom = maxwell_boltzmann(masses(n_particles), temperature, rng)
    return SystemState(q0, 0.0, pos, mom, box)


@dataclass(frozen=True)
class EquilibrationProtocol:
    dt: float = 2e-3
    steps: int = 20000
    rescale_every: int = 20
    nve_steps: int = 2000
    melt_steps: int = 5000
    melt_temperature: float = 2.0
    tolerance: float = 0.03


def kinetic_temperature(state: SystemState) -> float:
    inv = 1.0 / masses(state.n_particles)
    return float(2.0 * 0.5 * np.sum(state.momenta**2 * inv[:, None]) / (3 * state.n_particles - 3))


def _clamped_plan(dt, n_steps, stride=1):
    # bypasses the I2-period check: the vibration is frozen while the bath alone moves
    plan = object.__new__(IntegrationPlan)
    object.__setattr__(plan, "dt", dt)
    object.__setattr__(plan, "n_steps", n_steps)
    object.__setattr__(plan, "record_stride", stride)
    return plan


def equilibrate(state: SystemState, temperature: float, ff: ForceField, rng: np.random.Generator,
                protocol: EquilibrationProtocol = EquilibrationProtocol()) -> tuple[SystemState, np.ndarray]:
    """Thermalize the bath at ``temperature`` with the vibration clamped at q0.

    Liquid starts are first melted at ``melt_temperature`` (if hotter than the
    target). Returns the equilibrated state and the kinetic temperature trace.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    st = state.copy()
    st.q, st.p_q = ff.morse.q0, 0.0
    m = masses(st.n_particles)
    st.momenta = maxwell_boltzmann(m, temperature, rng)
    prop = Propagator(ff, st.box_length, st.n_particles)
    p = protocol
    if BathMode(ff.mode) is BathMode.LIQUID and p.melt_temperature > temperature and p.melt_steps:
        st, _ = prop.run(st, _clamped_plan(p.dt, p.melt_steps, p.melt_steps), clamp_q=True,
                         thermostat_T=p.melt_temperature, thermostat_every=p.rescale_every)
    st, rec1 = prop.run(st, _clamped_plan(p.dt, p.steps), clamp_q=True, thermostat_T=temperature,
                        thermostat_every=p.rescale_every)
    trace = rec1.temperature[1:]
    # match the total energy to its thermostatted mean so the free NVE run sits at the target on average
    e_mean = rec1.energy[rec1.energy.size // 2:].mean()
    kin = 0.5 * np.sum(st.momenta**2 / m[:, None])
    target_kin = e_mean - (rec1.energy[-1] - kin)
    if target_kin > 0:
        st.momenta *= math.sqrt(target_kin / kin)
    if p.nve_steps:
        st, rec2 = prop.run(st, _clamped_plan(p.dt, p.nve_steps), clamp_q=True)
        trace = np.concatenate([trace, rec2.temperature[1:]])
    tail = trace[-max(1, trace.size // 4):]
    if abs(tail.mean() / temperature - 1.0) > p.tolerance:
        raise EquilibrationError(
            f"mean temperature {tail.mean():.4g} over last quarter misses target {temperature:.4g}", trace)
    st.time = 0.0
    return st, trace


@dataclass
class BathPool:
    """Equilibrated bath snapshots (vibration at rest at q0) for one temperature and mode."""

    positions: np.ndarray  # (P, N, 3)
    momenta: np.ndarray
    box_length: float
    temperature: float
    mode: str
    trace: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __len__(self):
        return self.positions.shape[0]

    def state(self, index: int, q: float = 0.0, p_q: float = 0.0) -> SystemState:
        return SystemState(q, p_q, self.positions[index].copy(), self.momenta[index].copy(), self.box_length)


def ideal_gas_snapshot(ff: ForceField, n_particles: int, box: float, temperature: float,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Exact canonical draw for the non-interacting bath around a resting vibration.

    Xe atoms only feel the solute, so each one independently follows
    exp(-u(r)/T) around the I2 position; momenta are Maxwell-Boltzmann.
    """
    bs = ff.coupling
    sig = bs.sigma(ff.morse.q0)
    rc2 = bs.cutoff**2
    e_cut = _lj_phi(rc2, bs.epsilon, sig)
    u_min = -bs.epsilon - e_cut
    pos = np.empty((n_particles, 3))
    pos[0] = rng.random(3) * box
    todo = np.arange(1, n_particles)
    while todo.size:
        trial = rng.random((todo.size, 3)) * box
        d = trial - pos[0]
        d -= box * np.rint(d / box)
        r2 = np.einsum("ij,ij->i", d, d)
        with np.errstate(divide="ignore", over="ignore"):
            u = np.where(r2 < rc2, _lj_phi(r2, bs.epsilon, sig) - e_cut, 0.0) if bs.epsilon > 0 else np.zeros(r2.size)
        ok = rng.random(todo.size) < np.exp(-(u - min(u_min, 0.0)) / temperature)
        pos[todo[ok]] = trial[ok]
        todo = todo[~ok]
    mom = maxwell_boltzmann(masses(n_particles), temperature, rng)
    return pos, mom


def _lj_phi(r2, eps, sig):
    s6 = (sig * sig / r2) ** 3
    return 4.0 * eps * (s6 * s6 - s6)


def build_pool(temperature: float, ff: ForceField, n_particles: int, density: float, pool_size: int,
               rng: np.random.Generator, protocol: EquilibrationProtocol = EquilibrationProtocol(),
               spacing: int = 500) -> BathPool:
    """Bath snapshots at ``temperature`` for the force field's mode.

    Liquid: equilibrate once, then take snapshots every ``spacing`` NVE steps.
    Ideal gas: independent exact draws, see ``ideal_gas_snapshot``.
    """
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if BathMode(ff.mode) is BathMode.IDEAL_GAS:
        box = box_length(n_particles, density)
        pos = np.empty((pool_size, n_particles, 3))
        mom = np.empty_like(pos)
        for k in range(pool_size):
            pos[k], mom[k] = ideal_gas_snapshot(ff, n_particles, box, temperature, rng)
        inv = 1.0 / masses(n_particles)
        trace = np.einsum("kij,kij,i->k", mom, mom, inv) / (3 * n_particles - 3)
        return BathPool(pos, mom, box, temperature, BathMode.IDEAL_GAS.value, trace)
    st = initial_state(n_particles, density, ff.mode, temperature, rng, ff.morse.q0)
    st, trace = equilibrate(st, temperature, ff, rng, protocol)
    prop = Propagator(ff, st.box_length, st.n_particles)
    pos = np.empty((pool_size, n_particles, 3))
    mom = np.empty_like(pos)
    for k in range(pool_size):
        st, _ = prop.run(st, _clamped_plan(protocol.dt, spacing, spacing), clamp_q=True)
        pos[k] = st.positions
        mom[k] = st.momenta
    return BathPool(pos, mom, st.box_length, temperature, BathMode(ff.mode).value, trace)


def propagate_isolated(q, p_q, spec, plan: IntegrationPlan) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Velocity Verlet for many uncoupled Morse oscillators at once.

    Same update as the full integrator with the bath removed. Returns
    (q, p_q, energy) records of shape (n_records, n_oscillators).
    """
    q = np.array(q, dtype=float)
    p = np.array(p_q, dtype=float)
    nrec = plan.n_records
    out = np.empty((3, nrec) + q.shape)

    def force(x):
        e = np.exp(-spec.beta * (x - spec.q0))
        return -2.0 * spec.D * spec.beta * e * (1.0 - e)

    def energy(x, y):
        return 0.5 * y * y / spec.mu + spec.D * (1.0 - np.exp(-spec.beta * (x - spec.q0))) ** 2

    f = force(q)
    out[:, 0] = q, p, energy(q, p)
    half = 0.5 * plan.dt
    for s in range(1, plan.n_steps + 1):
        p += half * f
        q += plan.dt * p / spec.mu
        f = force(q)
        p += half * f
        if s % plan.record_stride == 0:
            k = s // plan.record_stride
            out[:, k] = q, p, energy(q, p)
    if not np.all(np.isfinite(out)):
        raise PropagationError("non-finite value in isolated oscillator propagation")
    return out[0], out[1], out[2]
