import numpy as np
import pytest

from wignerbath import ensemble as ens
from wignerbath.ensemble import (ConfigurationError, EnsembleSpec, FlaggedFractionError, build_ensemble,
                                 propagate_all, propagate_control)
from wignerbath.forcefield import BathMode, BreathingSphere, ForceField, PairLJ
from wignerbath.md import BathPool, EquilibrationProtocol, IntegrationPlan, build_pool
from wignerbath.morse import eigenenergy
from wignerbath.wigner import Superposition

STATE = Superposition.parse("0+2")


def small_ff(mode=BathMode.LIQUID):
    return ForceField(bath=PairLJ(cutoff=1.6), coupling=BreathingSphere.i2_xe(cutoff=1.6), mode=mode)


@pytest.fixture(scope="module")
def small_pool():
    proto = EquilibrationProtocol(steps=4000, melt_steps=1000, nve_steps=1000)
    return build_pool(1.0, small_ff(), 32, 0.85, 8, np.random.default_rng(1), proto, spacing=200)


def spec(n=40, seed=7, steps=250, stride=50, **kw):
    return EnsembleSpec(n, seed, STATE, 1.0, BathMode.LIQUID, IntegrationPlan(2e-4, steps, stride), **kw)


def test_initial_conditions_are_reproducible(grids, small_pool):
    a = build_ensemble(spec(), grids["0+2"], small_pool)
    b = build_ensemble(spec(), grids["0+2"], small_pool)
    np.testing.assert_array_equal(a.q, b.q)
    np.testing.assert_array_equal(a.pool_index, b.pool_index)
    assert a.pool_index.max() < len(small_pool)


def test_prefix_does_not_depend_on_ensemble_size(grids, small_pool):
    a = build_ensemble(spec(n=10), grids["0+2"], small_pool)
    b = build_ensemble(spec(n=40), grids["0+2"], small_pool)
    np.testing.assert_array_equal(a.p_q, b.p_q[:10])


def test_signed_initial_energy(morse, grids):
    s = EnsembleSpec(100_000, 3, STATE, 1.0)
    ic = build_ensemble(s, grids["0+2"], None)
    e = 0.5 * ic.p_q**2 / morse.mu + morse.D * (1 - np.exp(-morse.beta * ic.q)) ** 2
    w = ic.norm * ic.sign * e
    exact = 0.5 * (eigenenergy(morse, 0) + eigenenergy(morse, 2))
    assert abs(w.mean() - exact) < 5 * w.std() / np.sqrt(w.size)


def test_seeds_differ_but_agree(grids):
    means = []
    for seed in (1, 2):
        ic = build_ensemble(EnsembleSpec(20_000, seed, STATE, 1.0), grids["0+2"], None)
        w = ic.norm * ic.sign * ic.q
        means.append((w.mean(), w.std() / np.sqrt(w.size)))
    (m1, s1), (m2, s2) = means
    assert m1 != m2
    assert abs(m1 - m2) < 5 * np.hypot(s1, s2)


def test_worker_count_does_not_change_results(grids, small_pool):
    s = spec(n=24, chunk_size=5)
    ic = build_ensemble(s, grids["0+2"], small_pool)
    one = propagate_all(s, ic, small_ff(), workers=1, progress=False)
    two = propagate_all(s, ic, small_ff(), workers=2, progress=False)
    for name in ("q", "p_q", "energy", "temperature", "drift"):
        np.testing.assert_array_equal(getattr(one, name), getattr(two, name))


def test_zero_length_plan(grids, small_pool):
    s = spec(n=6, steps=0, stride=1)
    res = propagate_all(s, build_ensemble(s, grids["0+2"], small_pool), small_ff(), progress=False)
    batches = list(res.batches())
    assert len(batches) == 1
    np.testing.assert_array_equal(batches[0].q, build_ensemble(s, grids["0+2"], small_pool).q)


def test_smoke_thousand_trajectories(grids, small_pool):
    s = spec(n=1000, steps=1000, stride=250, chunk_size=100)
    res = propagate_all(s, build_ensemble(s, grids["0+2"], small_pool), small_ff(), progress=False)
    assert res.n_flagged == 0
    assert res.drift.max() < 1e-3


def test_signs_never_change(grids, small_pool):
    s = spec(n=30)
    ic = build_ensemble(s, grids["0+2"], small_pool)
    res = propagate_all(s, ic, small_ff(), progress=False)
    total = int(ic.sign.sum())
    for b in res.batches():
        assert int(b.sign.sum()) == total
        assert len(b) == 30


def test_too_many_flagged(grids, small_pool):
    s = spec(n=10, drift_tolerance=1e-14)
    with pytest.raises(FlaggedFractionError):
        propagate_all(s, build_ensemble(s, grids["0+2"], small_pool), small_ff(), progress=False)


def test_flagged_are_excluded(grids, small_pool):
    s = spec(n=10)
    res = propagate_all(s, build_ensemble(s, grids["0+2"], small_pool), small_ff(), progress=False)
    res.drift[3] = 1.0
    assert res.n_flagged == 1
    assert 3 not in res.batch(0).index


def test_drift_scale_survives_near_zero_energy(grids, small_pool):
    # hot liquid: total energy near zero while the kinetic energy is large
    s = spec(n=2)
    ic = build_ensemble(s, grids["0+2"], small_pool)
    e = np.array([[0.5, 0.52, 0.49], [0.5, 0.9, 0.5]])
    temp = np.full((2, 3), 2.5)
    records = (np.zeros((2, 3)), np.zeros((2, 3)), e, temp)
    res = ens._assemble(s, s.plan, records, ic)
    kin = 0.5 * (3 * 32 - 3) * 2.5
    np.testing.assert_allclose(res.drift, [0.02 / kin, 0.4 / kin])
    # without a bath temperature the scale falls back to |E0|
    records = (np.zeros((2, 3)), np.zeros((2, 3)), e, np.full((2, 3), np.nan))
    np.testing.assert_allclose(ens._assemble(s, s.plan, records, ic).drift, [0.04, 0.8])


def test_empty_pool(grids):
    empty = BathPool(np.empty((0, 32, 3)), np.empty((0, 32, 3)), 3.3, 1.0, "liquid")
    with pytest.raises(ConfigurationError):
        build_ensemble(spec(), grids["0+2"], empty)


@pytest.mark.parametrize("kw", [dict(n_trajectories=1), dict(pool_size=0), dict(temperature=-1.0),
                                dict(master_seed=-3)])
def test_spec_validation(kw):
    base = dict(n_trajectories=10, master_seed=1, superposition=STATE, temperature=1.0)
    base.update(kw)
    with pytest.raises(ConfigurationError):
        EnsembleSpec(**base)


def test_mode_mismatch(grids, small_pool):
    s = spec(n=4)
    with pytest.raises(ConfigurationError):
        propagate_all(s, build_ensemble(s, grids["0+2"], small_pool), small_ff(BathMode.IDEAL_GAS))


def test_checkpoint_resume(tmp_path, grids, small_pool, monkeypatch):
    s = spec(n=20, chunk_size=5)
    ic = build_ensemble(s, grids["0+2"], small_pool)
    path = str(tmp_path / "ck.npz")
    first = propagate_all(s, ic, small_ff(), checkpoint=path, progress=False)

    def boom(lo, hi):
        raise AssertionError("completed chunks must not rerun")

    monkeypatch.setattr(ens, "_run_chunk", boom)
    again = propagate_all(s, ic, small_ff(), checkpoint=path, progress=False)
    np.testing.assert_array_equal(first.q, again.q)
    other = spec(n=20, seed=8, chunk_size=5)
    with pytest.raises(ConfigurationError):
        propagate_all(other, build_ensemble(other, grids["0+2"], small_pool), small_ff(), checkpoint=path)


def test_progress_goes_to_stderr(grids, small_pool, capsys):
    s = spec(n=4, chunk_size=2)
    propagate_all(s, build_ensemble(s, grids["0+2"], small_pool), small_ff())
    err = capsys.readouterr().err
    assert "4/4 trajectories" in err


def test_isolated_control(morse, grids):
    s = EnsembleSpec(500, 5, STATE, 1.0, plan=IntegrationPlan(2e-4, 1000, 100))
    res = propagate_control(s, build_ensemble(s, grids["0+2"], None), morse)
    assert res.q.shape == (500, 11)
    assert res.n_flagged == 0
    assert np.all(np.isnan(res.temperature))
