import math

import numpy as np
import pytest
from scipy import special, stats

from wignerbath.ensemble import EnsembleResult, SnapshotBatch
from wignerbath.forcefield import BathMode, ForceField
from wignerbath.md import IntegrationPlan, Propagator, SystemState, box_length, fcc_lattice, masses, maxwell_boltzmann
from wignerbath.observables import (CSV_COLUMNS, CSV_SCHEMA, BinGeometry, GeometryMismatch, RangeError,
                                    ReducedDensityHistogram, fit_growth, grid_bin_average, lyapunov, monitors,
                                    phase_distance, purity, purity_estimate, purity_series, read_series_csv,
                                    reduce_and_bin, write_series_csv)
from wignerbath.wigner import WignerGrid


def batch(q, p, sign, norm=1.0, index=None):
    q = np.asarray(q, dtype=float)
    index = np.arange(q.size) if index is None else index
    return SnapshotBatch(0, 0.0, index, q, np.asarray(p, dtype=float), np.asarray(sign, dtype=np.int8),
                         np.zeros(q.size), norm)


def test_point_mass_fills_one_bin():
    geom = BinGeometry.uniform((0, 1), (0, 1), 10)
    h = reduce_and_bin(batch(np.full(50, 0.55), np.full(50, 0.25), np.ones(50)), geom)
    assert np.count_nonzero(h.signed_weights) == 1
    assert h.signed_weights.max() == pytest.approx(1 / geom.cell_area)
    assert h.total_weight == pytest.approx(1.0)


def test_negative_subset_stays_negative(grids, rng):
    g = grids["0+2"]
    s = g.sample(20_000, rng)
    neg = s.sign < 0
    h = reduce_and_bin(batch(s.q[neg], s.p[neg], s.sign[neg], s.norm), BinGeometry.from_grid(g, 64))
    assert h.signed_weights.max() <= 0
    assert h.signed_weights.min() < 0


def test_initial_histogram_matches_grid(grids, rng):
    g = grids["0+2"]
    geom = BinGeometry.from_grid(g, 48)
    n = 100_000
    s = g.sample(n, rng)
    h = reduce_and_bin(batch(s.q, s.p, s.sign, s.norm), geom)
    mean = grid_bin_average(g, geom)
    # per-bin variance of norm * sign * indicator / (n A)
    absg = WignerGrid(g.q, g.p, np.abs(g.values), g.hbar)
    p_bin = grid_bin_average(absg, geom) * geom.cell_area / s.norm
    mu_bin = mean * geom.cell_area / s.norm
    var = s.norm**2 * (p_bin - mu_bin**2) / (n * geom.cell_area**2)
    use = p_bin * n > 20
    z = (h.signed_weights - mean)[use] / np.sqrt(var[use])
    assert np.abs(z).max() < 5
    chi2 = float(np.sum(z**2))
    assert chi2 < stats.chi2.ppf(0.99, use.sum())
    assert h.total_weight == pytest.approx(1.0, abs=3 * math.sqrt(var.sum()) * geom.cell_area + 1e-3)


def test_exact_grid_gives_unit_purity(grids):
    g = grids["5+8"]
    geom = BinGeometry.uniform((g.q[0] - g.dq / 2, g.q[-1] + g.dq / 2), (g.p[0] - g.dp / 2, g.p[-1] + g.dp / 2),
                               (g.q.size, g.p.size))
    h = ReducedDensityHistogram(geom, g.values, np.zeros_like(g.values), 1, 0)
    chi, raw = purity(h, h, g.hbar)
    assert chi == pytest.approx(1.0, abs=1e-3)
    assert raw == pytest.approx(chi / (2 * math.pi * g.hbar))


def test_uniform_ensemble_purity(rng):
    hbar = 0.0104
    area = 0.5 * 2.0
    geom = BinGeometry.uniform((0, 0.5), (-1, 1), 64)
    n = 200_000
    q, p = rng.random(n) * 0.5, rng.random(n) * 2 - 1
    est = purity_estimate(q, p, np.ones(n), np.arange(n), 1.0, geom, hbar)
    assert est.chi == pytest.approx(2 * math.pi * hbar / area, abs=4 * est.chi_err)


def test_mismatched_geometry():
    a = ReducedDensityHistogram(BinGeometry.uniform((0, 1), (0, 1), 4), np.ones((4, 4)), np.ones((4, 4)), 1, 0)
    b = ReducedDensityHistogram(BinGeometry.uniform((0, 2), (0, 1), 4), np.ones((4, 4)), np.ones((4, 4)), 1, 0)
    with pytest.raises(GeometryMismatch):
        purity(a, b, 1.0)


def test_split_halves_match_histogram_path(grids, rng):
    g = grids["0+2"]
    geom = BinGeometry.from_grid(g)
    s = g.sample(4000, rng)
    b = batch(s.q, s.p, s.sign, s.norm)
    chi, raw = purity(reduce_and_bin(b, geom, "A"), reduce_and_bin(b, geom, "B"), g.hbar)
    est = purity_estimate(s.q, s.p, s.sign, np.arange(4000), s.norm, geom, g.hbar)
    assert est.chi == pytest.approx(chi, rel=1e-12)
    assert est.chi_raw == pytest.approx(raw, rel=1e-12)


def _gaussian_binned_purity(geom):
    cq = np.diff(special.ndtr(geom.q_edges))
    cp = np.diff(special.ndtr(geom.p_edges))
    return float(np.sum(cq**2) * np.sum(cp**2) / geom.cell_area)


def test_estimator_converges_on_known_density():
    # coarse bins keep the bins/n^2 variance term small next to the 1/n one
    geom = BinGeometry.uniform((-5, 5), (-5, 5), 16)
    target = _gaussian_binned_purity(geom)
    assert target == pytest.approx(1 / (4 * math.pi), rel=0.1)
    errs = []
    for k, n in enumerate((5_000, 50_000, 500_000)):
        r = np.random.default_rng(100 + k)
        q, p = r.normal(size=(2, n))
        est = purity_estimate(q, p, np.ones(n), np.arange(n), 1.0, geom, 1 / (2 * math.pi))
        assert abs(est.chi - target) < 4 * est.chi_err
        errs.append(est.chi_err)
    # sqrt(10) per decade, with jackknife scatter
    assert 2.0 < errs[0] / errs[1] < 5.0
    assert 2.0 < errs[1] / errs[2] < 5.0


def _result(q, p, sign, times=None):
    q = np.asarray(q)
    n, k = q.shape
    times = np.arange(k) * 0.1 if times is None else times
    z = np.zeros((n, k))
    return EnsembleResult(times, q, np.asarray(p), z + 1.0, z, np.asarray(sign, dtype=np.int8), np.zeros(n), 1.0)


def test_auto_range_retry(rng):
    n = 4000
    q0, p0 = rng.normal(size=(2, n))
    q = np.stack([q0, q0 + 10], axis=1)
    res = _result(q, np.stack([p0, p0], axis=1), np.ones(n))
    ser = purity_series(res, 1 / (2 * math.pi), BinGeometry.uniform((-5, 5), (-5, 5), 32))
    assert ser.auto_ranged
    assert ser.geometry.q_edges[-1] > 10


def test_range_error_after_retry(rng):
    n = 4000
    q = rng.normal(size=(n, 1))
    q[: n // 10] = np.nan
    res = _result(q, rng.normal(size=(n, 1)), np.ones(n))
    with pytest.raises(RangeError):
        purity_series(res, 1.0, BinGeometry.uniform((-5, 5), (-5, 5), 32))


def test_reduce_and_bin_range_error():
    geom = BinGeometry.uniform((0, 1), (0, 1), 4)
    with pytest.raises(RangeError):
        reduce_and_bin(batch(np.full(10, 3.0), np.zeros(10), np.ones(10)), geom)


def test_fit_recovers_exponential():
    t = np.linspace(0, 3, 301)
    log_d = np.log(1e-6) + 2.5 * t
    fit = fit_growth(t, log_d, start=0.2, saturation_log=np.log(1e-3))
    assert fit.valid
    assert fit.rate == pytest.approx(2.5)
    assert fit.window[1] < np.log(1e3) / 2.5 + 1e-9
    assert fit.r_squared == pytest.approx(1.0)


def test_fit_window_shrinks_before_early_saturation():
    t = np.linspace(0, 1, 101)
    fit = fit_growth(t, np.log(1e-6) + 30 * t, start=0.5, saturation_log=np.log(1e-3))
    assert fit.valid and fit.window[1] < 0.5


def test_fit_without_points_is_invalid():
    fit = fit_growth(np.array([0.0, 0.1]), np.array([-np.inf, -np.inf]))
    assert not fit.valid


def _liquid(seed):
    rng = np.random.default_rng(seed)
    box = box_length(108, 0.85)
    pos = fcc_lattice(108, box) + rng.normal(scale=0.05, size=(108, 3))
    return SystemState(0.0, 0.0, pos, maxwell_boltzmann(masses(108), 1.0, rng), box)


def test_zero_perturbation_never_diverges():
    ly = lyapunov(_liquid(1), 0.0, IntegrationPlan(2e-4, 500, 50), ForceField(), np.random.default_rng(0))
    np.testing.assert_array_equal(ly.distance, 0.0)
    assert not ly.fit.valid


def test_initial_distance_is_delta0():
    ly = lyapunov(_liquid(2), 1e-6, IntegrationPlan(2e-4, 500, 50), ForceField(), np.random.default_rng(0),
                  positions_only=True)
    assert ly.distance[0] == pytest.approx(1e-6, rel=1e-6)
    assert np.all(ly.distance > 0)


def test_phase_distance_switch():
    a = np.zeros((3, 3))
    b = a.copy()
    b[1, 0] = 0.3
    pa, pb = np.zeros((3, 3)), np.zeros((3, 3))
    pb[2, 1] = 0.4
    assert phase_distance(a, pa, b, pb, 5.0) == pytest.approx(0.5)
    assert phase_distance(a, pa, b, pb, 5.0, positions_only=True) == pytest.approx(0.3)
    # the solute row does not count, and separations use the minimum image
    b[0, 0] = 1.0
    b[1, 0] = 4.9
    assert phase_distance(a, pa, b, pb, 5.0, positions_only=True) == pytest.approx(0.1)


def test_monitors():
    st = SystemState(0.0, 0.0, np.array([[1.0, 1.0, 1.0]]), np.zeros((1, 3)), 6.0)
    assert monitors(st, ForceField(mode=BathMode.IDEAL_GAS)).temperature == 0.0
    liq = _liquid(3)
    ff = ForceField()
    plan = IntegrationPlan(2e-4, 500, 500)
    new, rec = Propagator(ff, liq.box_length, 108).run(liq, plan)
    m0, m1 = monitors(liq, ff), monitors(new, ff)
    assert m0.total_energy == pytest.approx(rec.energy[0], rel=1e-12)
    assert m1.total_energy == pytest.approx(rec.energy[-1], rel=1e-12)
    assert abs(m1.total_energy - m0.total_energy) / abs(m0.total_energy) == pytest.approx(rec.energy_drift, rel=1e-6)
    np.testing.assert_allclose(m1.com_momentum, liq.momenta.sum(axis=0), atol=1e-10)


def test_csv_round_trip(tmp_path):
    path = tmp_path / "s.csv"
    t = np.array([0.0, 0.05, 0.1])
    write_series_csv(path, t, 3.3, [1.0, 0.9, 0.8], [0.01] * 3, [15.3, 13.8, 12.2], [1e-6, 2e-6, 0.0],
                     [-380.0] * 3, np.nan)
    text = path.read_text().splitlines()
    assert text[0] == f"# {CSV_SCHEMA}"
    assert text[1] == ",".join(CSV_COLUMNS)
    data = read_series_csv(path)
    np.testing.assert_array_equal(data["chi"], [1.0, 0.9, 0.8])
    assert data["ln_d_lyap"][1] == pytest.approx(math.log(2e-6))
    assert np.isneginf(data["ln_d_lyap"][2])
    assert np.all(np.isnan(data["T_inst"]))
    np.testing.assert_allclose(data["t_ps"], 3.3 * t)


def test_ordering_survives_bin_doubling():
    # a broad and a narrow ensemble keep their purity order at 64, 128 and 256 bins
    r = np.random.default_rng(11)
    n = 40_000
    narrow = r.normal(scale=(0.8, 0.8), size=(n, 2))
    broad = r.normal(scale=(1.0, 1.0), size=(n, 2))
    for bins in (64, 128, 256):
        geom = BinGeometry.uniform((-6, 6), (-6, 6), bins)
        a = purity_estimate(narrow[:, 0], narrow[:, 1], np.ones(n), np.arange(n), 1.0, geom, 1 / (2 * math.pi))
        b = purity_estimate(broad[:, 0], broad[:, 1], np.ones(n), np.arange(n), 1.0, geom, 1 / (2 * math.pi))
        assert a.chi - b.chi > 2 * math.hypot(a.chi_err, b.chi_err)
