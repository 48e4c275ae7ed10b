import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wignerbath.forcefield import (BathMode, BreathingSphere, ForceField, PairLJ, UnphysicalCompression,
                                   _pair_breathing, _pair_lj, breathing_energy_forces, compute_forces,
                                   lj_energy_force, total_forces)
from wignerbath.md import box_length, fcc_lattice


def _config(n, density, seed, jitter=0.08):
    """Randomized dense configuration: a jittered fcc lattice."""
    rng = np.random.default_rng(seed)
    box = box_length(n, density)
    return fcc_lattice(n, box) + rng.normal(scale=jitter, size=(n, 3)), box, rng


def _potential(pos, q, ff, box):
    return total_forces(pos, q, ff, box).potential


def _reference(pos, q, ff, box):
    """Pair-by-pair evaluation with the scalar kernels."""
    n = len(pos)
    f = np.zeros_like(pos)
    u = ff.morse.D * (1 - math.exp(-ff.morse.beta * q)) ** 2
    fq = -2 * ff.morse.D * ff.morse.beta * math.exp(-ff.morse.beta * q) * (1 - math.exp(-ff.morse.beta * q))
    bs, lj = ff.coupling, ff.bath
    for i in range(n):
        for j in range(i + 1, n):
            d = pos[j] - pos[i]
            d -= box * np.rint(d / box)
            r2 = d @ d
            if i == 0:
                if not ff.coupled:
                    continue
                e, fr, g = _pair_breathing(r2, bs.epsilon, bs.sigma0, bs.alpha, bs.cutoff, q)
                fq += g
            elif ff.mode is BathMode.LIQUID:
                e, fr = _pair_lj(r2, lj.epsilon, lj.sigma, lj.cutoff, lj.shift)
            else:
                continue
            u += e
            f[j] += fr * d
            f[i] -= fr * d
    return u, f, fq


@pytest.mark.parametrize("mode", list(BathMode))
def test_kernel_matches_pairwise_reference(mode):
    pos, box, _ = _config(108, 0.85, 1)
    ff = ForceField(mode=mode)
    res = total_forces(pos, 0.03, ff, box)
    u, f, fq = _reference(pos, 0.03, ff, box)
    assert res.potential == pytest.approx(u, rel=1e-12)
    np.testing.assert_allclose(res.forces, f, rtol=1e-10, atol=1e-10 * np.abs(f).max())
    assert res.force_q == pytest.approx(fq, rel=1e-10)


def test_neighbor_list_path_matches_all_pairs():
    pos, box, _ = _config(512, 0.85, 2)
    ff = ForceField()
    assert ff.use_neighbor_list(box)
    from wignerbath.forcefield import build_neighbors
    x, y, z = (np.ascontiguousarray(c) for c in pos.T)
    start, nbrs = ff.neighbor_arrays(512)
    assert build_neighbors(x, y, z, box, ff.rlist, start, nbrs) > 0
    a = np.zeros((3, 512))
    b = np.zeros((3, 512))
    ra = compute_forces(x, y, z, 0.01, ff.params(box), True, start, nbrs, a[0], a[1], a[2])
    rb = compute_forces(x, y, z, 0.01, ff.params(box), False, start, nbrs, b[0], b[1], b[2])
    np.testing.assert_allclose(ra, rb, rtol=1e-12)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("mode", list(BathMode))
def test_forces_sum_to_zero(mode):
    pos, box, _ = _config(108, 0.85, 3)
    res = total_forces(pos, -0.02, ForceField(mode=mode), box)
    assert np.abs(res.forces.sum(axis=0)).max() < 1e-10 * np.abs(res.forces).max()


def test_finite_difference_full_system():
    pos, box, rng = _config(108, 0.85, 4)
    ff = ForceField()
    q = 0.02
    res = total_forces(pos, q, ff, box)
    h = 1e-6
    picks = rng.choice(108, size=20, replace=False)
    for i in picks:
        for c in range(3):
            up, dn = pos.copy(), pos.copy()
            up[i, c] += h
            dn[i, c] -= h
            fd = -(_potential(up, q, ff, box) - _potential(dn, q, ff, box)) / (2 * h)
            assert res.forces[i, c] == pytest.approx(fd, rel=1e-6, abs=1e-6 * np.abs(res.forces).max())
    fd_q = -(_potential(pos, q + h, ff, box) - _potential(pos, q - h, ff, box)) / (2 * h)
    assert res.force_q == pytest.approx(fd_q, rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.85, 2.45))
def test_lj_force_is_minus_gradient(r):
    pair = PairLJ()
    h = 1e-7
    fd = -(lj_energy_force(pair, r + h)[0] - lj_energy_force(pair, r - h)[0]) / (2 * h)
    assert lj_energy_force(pair, r)[1] == pytest.approx(fd, rel=1e-6, abs=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.95, 2.45), st.floats(-0.1, 0.3), st.floats(0.2, 1.0))
def test_breathing_forces_are_minus_gradients(r, q, alpha):
    bs = BreathingSphere.i2_xe(alpha=alpha)
    h = 1e-7
    e, fr, fq = breathing_energy_forces(bs, r, q)
    fd_r = -(breathing_energy_forces(bs, r + h, q)[0] - breathing_energy_forces(bs, r - h, q)[0]) / (2 * h)
    fd_q = -(breathing_energy_forces(bs, r, q + h)[0] - breathing_energy_forces(bs, r, q - h)[0]) / (2 * h)
    assert fr == pytest.approx(fd_r, rel=1e-6, abs=1e-6)
    assert fq == pytest.approx(fd_q, rel=1e-6, abs=1e-6)


def test_lj_minimum_and_cutoff():
    pair = PairLJ()
    e, f = lj_energy_force(pair, 2 ** (1 / 6))
    assert f == pytest.approx(0.0, abs=1e-12)
    assert e == pytest.approx(-1.0 - pair.shift)
    assert lj_energy_force(pair, 2.5) == (0.0, 0.0)
    assert lj_energy_force(pair, 3.0) == (0.0, 0.0)


def test_breathing_radius_moves_with_q():
    bs = BreathingSphere.i2_xe()
    assert bs.sigma(0.0) == pytest.approx((1 + 1.2677) / 2, rel=1e-4)
    assert bs.sigma(0.2) == pytest.approx(bs.sigma0 + 0.1)
    # a stretched bond pushes the solvent shell out: repulsion on q is negative at contact
    _, _, fq = breathing_energy_forces(bs, 1.0, 0.0)
    assert fq < 0


def test_invalid_inputs():
    with pytest.raises(ValueError):
        lj_energy_force(PairLJ(), 0.0)
    with pytest.raises(ValueError):
        breathing_energy_forces(BreathingSphere.i2_xe(), -1.0, 0.0)
    with pytest.raises(UnphysicalCompression):
        breathing_energy_forces(BreathingSphere.i2_xe(alpha=1.0), 1.0, -3.0)
    with pytest.raises(ValueError):
        BreathingSphere(1.0, 1.0, alpha=1.5)
    with pytest.raises(ValueError):
        PairLJ(sigma=0.0)


def test_cutoff_beyond_half_box_rejected():
    with pytest.raises(ValueError):
        ForceField().params(4.0)


def test_overlap_warns():
    pos = np.array([[1.0, 1.0, 1.0], [1.1, 1.0, 1.0], [3.0, 3.0, 3.0]])
    with pytest.warns(RuntimeWarning):
        total_forces(pos, 0.0, ForceField(), 6.0)


def test_decoupled_solute_feels_only_morse():
    pos, box, _ = _config(108, 0.85, 5)
    ff = ForceField(coupled=False)
    res = total_forces(pos, 0.05, ff, box)
    assert res.u_coupling == 0.0
    np.testing.assert_array_equal(res.forces[0], 0.0)
    assert res.force_q == pytest.approx(float(-2 * ff.morse.D * ff.morse.beta * math.exp(-ff.morse.beta * 0.05)
                                              * (1 - math.exp(-ff.morse.beta * 0.05))))


def test_ideal_gas_has_no_bath_energy():
    pos, box, _ = _config(108, 0.85, 6)
    res = total_forces(pos, 0.0, ForceField(mode=BathMode.IDEAL_GAS), box)
    assert res.u_bath == 0.0
