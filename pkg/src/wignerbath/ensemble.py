"""Signed trajectory ensembles: initial conditions, propagation, aggregation.

Trajectory ``i`` owns the random substream seeded by ``(master_seed, i)``, and
work is cut into fixed chunks of trajectory indices. Results are therefore the
same for any number of workers or any scheduling order.
"""
from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .forcefield import BathMode, ForceField, UnphysicalCompression
from .md import BathPool, IntegrationPlan, PropagationError, Propagator, SystemState, propagate_isolated
from .morse import MorseSpec
from .wigner import Superposition, WignerGrid

CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    pass


class FlaggedFractionError(RuntimeError):
    """Too many trajectories were excluded for energy drift or integration failure."""


@dataclass(frozen=True)
class EnsembleSpec:
    n_trajectories: int
    master_seed: int
    superposition: Superposition
    temperature: float
    mode: BathMode = BathMode.LIQUID
    plan: IntegrationPlan = field(default_factory=IntegrationPlan)
    pool_size: int = 64
    chunk_size: int = 50
    drift_tolerance: float = 1e-3
    max_flagged_fraction: float = 0.01

    def __post_init__(self):
        if self.n_trajectories < 2:
            raise ConfigurationError("n_trajectories must be >= 2 for the split-halves estimator")
        if self.pool_size < 1:
            raise ConfigurationError("pool_size must be >= 1")
        if self.chunk_size < 1:
            raise ConfigurationError("chunk_size must be >= 1")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigurationError("master_seed must be a 64-bit unsigned integer")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")
        object.__setattr__(self, "mode", BathMode(self.mode))


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))


@dataclass
class InitialConditions:
    """Per-trajectory Wigner draw, its sign and the bath snapshot it sits in."""

    q: np.ndarray
    p_q: np.ndarray
    sign: np.ndarray
    pool_index: np.ndarray
    norm: float
    pool: BathPool | None

    def __len__(self):
        return self.q.size

    def state(self, i: int) -> SystemState:
        if self.pool is None:
            raise ConfigurationError("these initial conditions carry no bath")
        return self.pool.state(int(self.pool_index[i]), float(self.q[i]), float(self.p_q[i]))


def build_ensemble(spec: EnsembleSpec, grid: WignerGrid, pool: BathPool | None) -> InitialConditions:
    """Draw one Wigner point and one pool snapshot per trajectory from its own substream.

    The Wigner draw comes first, so ensembles sharing a seed and a state get
    the same (q, p_q, sign) whatever the bath.
    """
    if pool is not None and len(pool) == 0:
        raise ConfigurationError("bath pool is empty")
    n = spec.n_trajectories
    q = np.empty(n)
    p = np.empty(n)
    sign = np.empty(n, dtype=np.int8)
    idx = np.zeros(n, dtype=np.int64)
    for i in range(n):
        rng = trajectory_rng(spec.master_seed, i)
        s = grid.sample(1, rng)
        q[i], p[i], sign[i] = s.q[0], s.p[0], s.sign[0]
        if pool is not None:
            idx[i] = rng.integers(len(pool))
    return InitialConditions(q, p, sign, idx, grid.l1_norm, pool)


@dataclass
class SnapshotBatch:
    time_index: int
    time: float
    index: np.ndarray  # trajectory indices, parity selects the half
    q: np.ndarray
    p_q: np.ndarray
    sign: np.ndarray
    drift: np.ndarray
    norm: float

    def __post_init__(self):
        n = self.index.size
        if not all(a.size == n for a in (self.q, self.p_q, self.sign, self.drift)):
            raise ValueError("batch arrays differ in length")
        if n and not np.all(np.abs(self.sign) == 1):
            raise ValueError("signs must be +1 or -1")

    def __len__(self):
        return self.index.size


@dataclass
class EnsembleResult:
    """Records of every trajectory; flagged ones are kept but excluded from batches."""

    times: np.ndarray
    q: np.ndarray  # (n_trajectories, n_records)
    p_q: np.ndarray
    energy: np.ndarray
    temperature: np.ndarray
    sign: np.ndarray
    drift: np.ndarray
    norm: float
    drift_tolerance: float = 1e-3

    @property
    def flagged(self) -> np.ndarray:
        return ~(self.drift <= self.drift_tolerance)

    @property
    def n_flagged(self) -> int:
        return int(self.flagged.sum())

    def batch(self, k: int) -> SnapshotBatch:
        keep = np.flatnonzero(~self.flagged)
        return SnapshotBatch(k, float(self.times[k]), keep, self.q[keep, k], self.p_q[keep, k],
                             self.sign[keep], self.drift[keep], self.norm)

    def batches(self):
        for k in range(self.times.size):
            yield self.batch(k)

    def kept_mean(self, values: np.ndarray) -> np.ndarray:
        """Plain per-record mean over kept trajectories (a monitor, not signed)."""
        keep = ~self.flagged
        if not keep.any():
            return np.full(values.shape[1], np.nan)
        return values[keep].mean(axis=0)


# -- workers ------------------------------------------------------------------

_WORKER = {}


def _init_worker(ff: ForceField, pool: BathPool, initial: InitialConditions, plan: IntegrationPlan):
    _WORKER["prop"] = Propagator(ff, pool.box_length, pool.positions.shape[1])
    _WORKER["initial"] = initial
    _WORKER["plan"] = plan


def _run_chunk(lo: int, hi: int):
    prop, initial, plan = _WORKER["prop"], _WORKER["initial"], _WORKER["plan"]
    nrec = plan.n_records
    out = np.full((4, hi - lo, nrec), np.nan)
    for k, i in enumerate(range(lo, hi)):
        try:
            _, rec = prop.run(initial.state(i), plan)
        except (PropagationError, UnphysicalCompression):
            continue
        out[:, k] = rec.q, rec.p_q, rec.energy, rec.temperature
    return lo, out


def _chunks(n, size):
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def _fingerprint(spec: EnsembleSpec, ff: ForceField, pool: BathPool) -> str:
    h = hashlib.sha256()
    h.update(repr((spec, ff)).encode())
    h.update(np.ascontiguousarray(pool.positions).tobytes())
    h.update(np.ascontiguousarray(pool.momenta).tobytes())
    return h.hexdigest()


def _load_checkpoint(path, fingerprint, shape):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"checkpoint {path} has unsupported version {meta.get('version')}")
        if meta.get("fingerprint") != fingerprint:
            raise ConfigurationError(f"checkpoint {path} belongs to a different run")
        records = data["records"]
        if records.shape != shape:
            raise ConfigurationError(f"checkpoint {path} has the wrong shape")
        return records.copy(), meta["done"]


def _save_checkpoint(path, fingerprint, records, done):
    meta = json.dumps({"version": CHECKPOINT_VERSION, "fingerprint": fingerprint,
                       "completed": int(sum(hi - lo for lo, hi in done)), "done": sorted(done)})
    tmp = f"{path}.tmp.npz"
    np.savez(tmp, meta=np.array(meta), records=records)
    os.replace(tmp, path)


def propagate_all(spec: EnsembleSpec, initial: InitialConditions, ff: ForceField, workers: int = 1,
                  checkpoint: str | None = None, progress: bool = True,
                  checkpoint_interval: float = 60.0) -> EnsembleResult:
    """Propagate every trajectory under NVE and collect its records.

    Trajectories with relative energy drift above ``spec.drift_tolerance`` (or
    an integration failure) are flagged and left out of the batches. More than
    ``spec.max_flagged_fraction`` flagged raises FlaggedFractionError.
    """
    if initial.pool is None:
        raise ConfigurationError("bath propagation needs a pool")
    if BathMode(ff.mode) is not spec.mode:
        raise ConfigurationError("force field mode differs from the ensemble mode")
    plan = spec.plan
    n = len(initial)
    shape = (4, n, plan.n_records)
    chunks = _chunks(n, spec.chunk_size)
    fp = _fingerprint(spec, ff, initial.pool) if checkpoint else ""
    done = set()
    records = np.full(shape, np.nan)
    if checkpoint and os.path.exists(checkpoint):
        records, done_list = _load_checkpoint(checkpoint, fp, shape)
        done = {tuple(c) for c in done_list}
    todo = [c for c in chunks if c not in done]
    label = f"[{spec.mode.value} T*={spec.temperature:g} {spec.superposition.label()}]"
    t0 = last_save = time.time()
    finished = sum(hi - lo for lo, hi in done)

    def accept(lo, out):
        nonlocal finished, last_save
        hi = lo + out.shape[1]
        records[:, lo:hi] = out
        done.add((lo, hi))
        finished += hi - lo
        if progress:
            bad = int(np.isnan(out[2, :, -1]).sum())
            print(f"{label} {finished}/{n} trajectories, {bad} failed in last chunk, "
                  f"{time.time() - t0:.0f} s", file=sys.stderr, flush=True)
        if checkpoint and time.time() - last_save > checkpoint_interval:
            _save_checkpoint(checkpoint, fp, records, done)
            last_save = time.time()

    if workers <= 1 or len(todo) <= 1:
        _init_worker(ff, initial.pool, initial, plan)
        for lo, hi in todo:
            accept(*_run_chunk(lo, hi))
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker,
                                 initargs=(ff, initial.pool, initial, plan)) as ex:
            futures = [ex.submit(_run_chunk, lo, hi) for lo, hi in todo]
            for fut in futures:
                accept(*fut.result())
    if checkpoint:
        _save_checkpoint(checkpoint, fp, records, done)
    result = _assemble(spec, plan, records, initial)
    _check_flagged(spec, result)
    return result


def _assemble(spec, plan, records, initial) -> EnsembleResult:
    q, p, e, temp = records
    # |E0| alone is no scale once kinetic and potential energy nearly cancel (hot
    # liquid), so the drift is taken relative to max(|E0|, initial kinetic energy)
    n = initial.pool.positions.shape[1] if initial.pool is not None else 1
    scale = np.fmax(np.abs(e[:, 0]), 0.5 * (3 * n - 3) * temp[:, 0])
    with np.errstate(invalid="ignore", divide="ignore"):
        drift = np.max(np.abs(e - e[:, :1]), axis=1) / scale
    drift[~np.isfinite(drift)] = np.inf
    return EnsembleResult(plan.times, q, p, e, temp, initial.sign.copy(), drift, initial.norm,
                          spec.drift_tolerance)


def _check_flagged(spec, result):
    n_bad = result.n_flagged
    if n_bad > spec.max_flagged_fraction * result.drift.size:
        raise FlaggedFractionError(
            f"{n_bad} of {result.drift.size} trajectories flagged (energy drift > {spec.drift_tolerance:g} "
            f"or integration failure)")
    if n_bad and sys.stderr:
        print(f"excluded {n_bad} flagged trajectories", file=sys.stderr)


def propagate_control(spec: EnsembleSpec, initial: InitialConditions, morse: MorseSpec) -> EnsembleResult:
    """Isolated-oscillator control: the same Wigner draws with the bath removed."""
    q, p, e = propagate_isolated(initial.q, initial.p_q, morse, spec.plan)
    temp = np.full_like(q, np.nan)
    result = _assemble(spec, spec.plan, (q.T, p.T, e.T, temp.T), initial)
    _check_flagged(spec, result)
    return result
