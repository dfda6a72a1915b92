import itertools
import math

import numpy as np
import pytest
from scipy import stats

from helpers import analyze_scene, camera, scene, spot_at
from ndmag import field, nvframe
from ndmag import lorentz as lz
from ndmag import simulate as sim
from ndmag.errors import InvalidInputError, RankDeficientError
from ndmag.spots import OdmrSpectrum

D = nvframe.D


def symmetric_centers(splittings):
    s = np.asarray(splittings, float)
    return np.sort(np.concatenate([D - s / 2, D + s / 2]))


def test_pairing_recovers_constructed_splittings():
    s = [40e6, 60e6, 80e6, 100e6]
    p = field.pair_resonances(symmetric_centers(s))
    np.testing.assert_array_equal(np.sort(p.splittings), s)
    assert p.pairing_quality == 0 and not p.flagged
    for lo, hi in p.pairs:
        assert hi > lo


def test_pairing_each_center_used_once():
    c = symmetric_centers([40e6, 60e6, 80e6, 100e6])
    used = sorted(v for pair in field.pair_resonances(c).pairs for v in pair)
    np.testing.assert_array_equal(used, c)


def test_pairing_zero_field():
    p = field.pair_resonances([D] * 8)
    assert np.all(p.splittings == 0)


def test_pairing_flags_asymmetric_spot():
    c = symmetric_centers([40e6, 60e6, 80e6, 100e6]) + np.array([0, 0, 0, 0, 0, 0, 0, 12e6])
    p = field.pair_resonances(c)
    assert p.flagged and p.pairing_quality == pytest.approx(6e6)


def test_pairing_fewer_centers_degenerate():
    p = field.pair_resonances(symmetric_centers([50e6, 90e6]))
    assert len(p.pairs) == 4
    np.testing.assert_array_equal(p.splittings, [90e6, 50e6, 0, 0])


def test_pairing_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        field.pair_resonances([D] * 9)
    with pytest.raises(InvalidInputError):
        field.pair_resonances([D, math.nan])


def test_pairing_simulator_spot_matches_planted():
    rng = np.random.default_rng(1)
    b = rng.normal(size=3)
    b *= 3.2e-3 / np.linalg.norm(b)
    o = sim.sample_orientation(rng)
    m = nvframe.axes_matrix() @ o.to_crystal(b)
    p = field.pair_resonances(sim.spot_centers(o, b))
    np.testing.assert_allclose(np.sort(p.splittings), np.sort(2 * nvframe.GAMMA_E * np.abs(m)), rtol=1e-12)


@pytest.mark.parametrize("perm_seed", range(5))
def test_pairing_of_forward_construction_recovers_multiset(perm_seed):
    rng = np.random.default_rng(perm_seed)
    s = np.sort(rng.uniform(1e6, 200e6, 4))
    c = symmetric_centers(s)
    rng.shuffle(c)
    np.testing.assert_allclose(np.sort(field.pair_resonances(c).splittings), s, rtol=0, atol=1e-6)


def splittings_for(m):
    return nvframe.splitting_from_projection(np.abs(np.asarray(m, float)))


def pairs_from_splittings(s):
    return field.pair_resonances(symmetric_centers(s))


def test_equal_splittings_field_along_k():
    m = 1e-3
    est = field.estimate_field(pairs_from_splittings(splittings_for([m] * 4)))
    b = est.field.as_array()
    assert est.field.magnitude == pytest.approx(math.sqrt(3) * m, rel=1e-12)
    assert abs(b[0]) < 1e-12 and abs(b[1]) < 1e-12
    assert abs(b[2]) == pytest.approx(math.sqrt(3) * m, rel=1e-12)
    assert est.vector_valid


def test_zero_splittings_zero_field():
    est = field.estimate_field(pairs_from_splittings([0.0] * 4))
    assert est.field.magnitude == 0
    assert np.all(est.field.as_array() == 0)


def test_magnitude_matches_tight_frame_invariant():
    rng = np.random.default_rng(2)
    for _ in range(50):
        b = rng.normal(size=3) * 2e-3
        m = nvframe.project_field(b).as_array()
        est = field.estimate_field(pairs_from_splittings(splittings_for(m)))
        ref = nvframe.field_magnitude_from_projections(np.abs(est.projections.as_array()))
        assert est.field.magnitude == pytest.approx(ref, rel=1e-9)
        assert est.field.magnitude == pytest.approx(np.linalg.norm(b), rel=1e-9)
        assert est.field.B_k >= 0 or est.n_sign_classes == 1


def test_magnitude_invariant_under_splitting_permutation():
    s = splittings_for(nvframe.project_field([1e-3, -2e-3, 0.7e-3]).as_array())
    mags = set()
    for perm in itertools.permutations(range(4)):
        est = field.estimate_field(field.ResonancePairSet(((D, D),) * 4, s[list(perm)], 0.0))
        mags.add(round(est.field.magnitude / 1e-15))
    assert len(mags) == 1


def test_estimate_requires_four_splittings():
    with pytest.raises(InvalidInputError):
        field.estimate_field(field.ResonancePairSet(((D, D),) * 3, np.zeros(3), 0.0))


def test_non_closing_projections_flagged():
    # Magnitudes that no sign pattern sums to zero.
    s = splittings_for([3e-3, 0.1e-3, 0.1e-3, 0.1e-3])
    est = field.estimate_field(pairs_from_splittings(s))
    assert not est.vector_valid
    assert est.field.magnitude > 0


def test_position_in_micrometres():
    est = field.estimate_field(pairs_from_splittings([50e6] * 4), 7, (10.0, 20.0), 0.24)
    assert est.position_um == pytest.approx((2.4, 4.8))
    rows = field.field_map([est])
    assert rows == [{"spot_id": 7, "x_um": pytest.approx(2.4), "y_um": pytest.approx(4.8),
                     "b_mag_t": est.field.magnitude}]


def test_field_map_requires_estimates():
    with pytest.raises(InvalidInputError):
        field.field_map([])


def test_simulated_spot_at_bias_field_recovered():
    cam = camera(64, 64, frames_averaged=8)
    ok = 0
    for seed in range(5):
        rng = np.random.default_rng(50 + seed)
        s = spot_at(32.3, 31.8, cam, orientation=sim.sample_orientation(rng), peak=2500.0)
        b = rng.normal(size=3)
        b *= 3.2e-3 / np.linalg.norm(b)
        _, truth, _, matched = analyze_scene(scene([s], cam, bias=b, seed=50 + seed))
        t, r = matched[0]
        if not sim.is_resolvable(t, sweep=(2.76e9, 2.98e9)):
            continue
        ok += 1
        assert r.estimate.field.magnitude == pytest.approx(3.2e-3, rel=0.02)
    assert ok >= 2


def test_linear_response_noiseless():
    rng = np.random.default_rng(3)
    o = sim.sample_orientation(rng)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    sweep = np.linspace(2.55e9, 3.19e9, 641)
    planted = np.linspace(0.5e-3, 5e-3, 10)
    got = []
    for b in planted:
        y = sim.spot_spectrum(o, b * d, 0.04, 4e6, sweep)
        fit = lz.fit_spectrum(OdmrSpectrum(0, sweep, y, y))
        p = fit.params
        got.append(field.estimate_field(field.pair_resonances(p.centers[p.active])).field.magnitude)
    r = np.corrcoef(planted, got)[0, 1]
    assert r**2 > 0.999


def wire_scene(current, standoff, bias, ys_px, seed=0, noise=True, sweep=None):
    cam = camera(96, 256, frames_averaged=8)
    rng = np.random.default_rng(seed)
    spots = [spot_at(48.0 + (i % 2) * 20 - 10, y, cam, orientation=sim.sample_orientation(rng), peak=2500.0)
             for i, y in enumerate(ys_px)]
    wire = sim.WireGeometry((1.0, 0.0, 0.0), (0.0, 0.0), current, standoff)
    kw = {} if sweep is None else {"frequencies": sweep}
    return scene(spots, cam, bias=bias, seed=seed, noise=noise, wire=wire, **kw)


def test_field_map_grows_toward_wire():
    sweep = np.linspace(2.70e9, 3.04e9, 341)
    ys = [20, 60, 100, 140, 180, 220]
    sc = wire_scene(0.6, 20.0, (0.0, 0.0, 0.0), ys, seed=4, sweep=sweep)
    _, truth, result, matched = analyze_scene(sc)
    est = [r.estimate for _, r in matched]
    assert all(e is not None for e in est)
    rows = field.field_map(est)
    by_y = sorted(rows, key=lambda r: r["y_um"])
    mags = [r["b_mag_t"] for r in by_y]
    assert all(a > b for a, b in zip(mags, mags[1:]))
    for t, r in matched:
        assert r.estimate.field.magnitude == pytest.approx(t["b_mag_t"], rel=0.02)


def test_current_direction_orders_field_strength():
    # Near the wire's foot the wire field points along -y, so a -y bias adds to it for +I.
    ys = [60, 130, 200]
    mags = {}
    for current in (0.6, 0.0, -0.6):
        sc = wire_scene(current, 1700.0, (0.0, -3.2e-3, 0.0), ys, seed=5, noise=False)
        _, truth, _, matched = analyze_scene(sc)
        mags[current] = [r.estimate.field.magnitude for _, r in matched]
    for hi, mid, lo in zip(mags[0.6], mags[0.0], mags[-0.6]):
        assert hi > mid > lo


def test_gradient_exact_for_linear_data():
    y = np.array([10.0, 40.0, 70.0, 120.0])
    b = 3e-3 - 2e-7 * y
    g = field.gradient_from_points(np.column_stack([np.zeros(4), y]), b)
    assert g.slope == pytest.approx(-2e-7, rel=1e-9)
    assert g.intercept == pytest.approx(3e-3, rel=1e-12)
    assert np.all(g.confidence_band_95 >= 0)
    assert np.max(g.confidence_band_95) < 1e-15


def test_gradient_rank_deficient():
    pts = np.array([[0.0, 30.0], [10.0, 30.0], [20.0, 30.0]])
    with pytest.raises(RankDeficientError):
        field.gradient_from_points(pts, [1e-3, 2e-3, 3e-3])


def test_gradient_needs_three_points():
    with pytest.raises(InvalidInputError):
        field.gradient_from_points([[0, 0], [0, 60]], [1e-3, 2e-3])


def test_gradient_warns_on_short_span():
    with pytest.warns(RuntimeWarning):
        field.gradient_from_points([[0, 0], [0, 10], [0, 20]], [1e-3, 1.1e-3, 1.3e-3])


def test_gradient_band_matches_ols_formula():
    rng = np.random.default_rng(6)
    x = rng.uniform(0, 300, 25)
    y = 1e-3 + 1e-7 * x + rng.normal(0, 1e-5, 25)
    g = field.gradient_from_points(np.column_stack([np.zeros(25), x]), y)
    ref = np.polyfit(x, y, 1)
    assert g.slope == pytest.approx(ref[0], rel=1e-9)
    assert g.intercept == pytest.approx(ref[1], rel=1e-9)
    resid = y - np.polyval(ref, x)
    s = math.sqrt(resid @ resid / 23)
    band = stats.t.ppf(0.975, 23) * s * np.sqrt(1 / 25 + (x - x.mean()) ** 2 / np.sum((x - x.mean()) ** 2))
    np.testing.assert_allclose(g.confidence_band_95, band, rtol=1e-9)


def test_zero_current_slope_consistent_with_zero():
    ys = list(np.linspace(12, 244, 12))
    sc = wire_scene(0.0, 1700.0, (0.0016, -0.002, 0.002), ys, seed=7)
    _, truth, result, matched = analyze_scene(sc)
    est = [r.estimate for t, r in matched if r is not None and r.estimate is not None
           and sim.is_resolvable(t, sweep=(2.76e9, 2.98e9))]
    assert len(est) >= 3
    g = field.gradient_vs_distance(est, (0.0, 0.0), (1.0, 0.0), min_span_um=0)
    assert abs(g.slope) <= g.slope_ci95
