import io
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopisac.geometry import C0, ArrayConfig, WaveformConfig, path_truth, steering_vector_dc
from coopisac.params import (BoundaryOptimumWarning, LinkConfig, LinkMeasurement, combiner_factors,
                             doppler_objective, estimate_link_parameters, extract_aoas,
                             extract_dopplers, extract_ranges, grid_search, identify_los,
                             kronecker_split_combiner, match_paths, measurements_from_factors,
                             read_measurements_csv,
                             relative_delays, write_measurements_csv)
from coopisac.tensor import FactorEstimate
from coopisac.waveform import (NoiseConfig, cp_factors, delay_generator, design_region_beamformer,
                               doppler_vector, simulate_received_tensor)

from conftest import facing_pair, target

WF = WaveformConfig()


def run_link(sc, bf, noise=None, seed=0, cfg=LinkConfig()):
    T = simulate_received_tensor(sc, (0, 1), (bf, bf), noise or NoiseConfig(enabled=False), seed)
    m = estimate_link_parameters(T, sc.k_targets, 1000.0, combiner_factors(bf, sc.array), sc.waveform, cfg)
    return m, [p for p in T.paths if not p.is_los]


# -- delay ---------------------------------------------------------------------

def test_sto_recovered_exactly():
    taus = np.array([1000 / C0, 1009.75 / C0, 1200 / C0])
    z = [delay_generator(WF, t) for t in taus]
    k, sto = identify_los(z, 1000.0, WF)
    assert k == 0
    assert sto == pytest.approx(1e-8, abs=1e-12)


def test_zero_sto_single_los():
    wf = WaveformConfig(sto_s=0.0)
    z = [delay_generator(wf, 1000 / C0)]
    assert relative_delays(z, wf)[0] == pytest.approx(1000 / C0, rel=1e-12)
    assert identify_los(z, 1000.0, wf) == (0, pytest.approx(0.0, abs=1e-15))


def test_los_index_is_earliest():
    sc = facing_pair(targets=[target((0, 0, 100)), target((50, 80, 200))])
    paths = [path_truth(*sc.base_stations, t, WF) for t in (sc.targets[1], None, sc.targets[0])]
    z = [delay_generator(WF, p.delay) for p in paths]
    assert identify_los(z, 1000.0, WF)[0] == 1


def test_range_example():
    sc = facing_pair(targets=[target((0, 0, 100))])
    los, tgt = (path_truth(*sc.base_stations, t, WF) for t in (None, sc.targets[0]))
    z = [delay_generator(WF, los.delay), delay_generator(WF, tgt.delay)]
    k, sto = identify_los(z, 1000.0, WF)
    d, ok = extract_ranges(z, k, sto, WF, 1000.0, 5000.0)
    assert d.shape == (1,)  # LoS excluded
    assert d[0] == pytest.approx(1009.75, abs=0.01)
    assert d[0] == pytest.approx(tgt.bistatic_range, abs=1e-6)
    assert ok[0]


def test_delay_aliasing_flagged():
    # 10 km exceeds c0/scs (~9993 m) and wraps below the direct path, posing as
    # the LoS; the implied timing offset then exceeds the cyclic prefix
    z = [delay_generator(WF, 1000 / C0), delay_generator(WF, 10_000 / C0)]
    k, sto = identify_los(z, 1000.0, WF)
    assert k == 1
    d, ok = extract_ranges(z, k, sto, WF, 1000.0, 5000.0)
    assert not ok.any()


@given(st.floats(1e-7, 1 / 30e3 - 2e-8))
def test_delay_round_trip(tau):
    z = delay_generator(WF, tau)
    assert relative_delays([z], WF)[0] - WF.sto_s == pytest.approx(tau, rel=1e-9, abs=1e-15)


# -- Doppler -------------------------------------------------------------------

def test_grid_search_refines_between_points():
    x, edge = grid_search(lambda u: -(u - 0.123456) ** 2, -1, 1, 64)
    assert not edge and x == pytest.approx(0.123456, abs=1e-9)
    x, edge = grid_search(lambda u: u, -1, 1, 64)
    assert edge and x == 1.0


def test_cfo_only_for_stationary_target():
    b = doppler_vector(WF.n_symbols, WF.symbol_period_s, [300.0, 300.0])
    v, cfo = extract_dopplers(b, 0, WF)
    assert cfo == pytest.approx(300.0, abs=0.05)
    assert v[0] == pytest.approx(0.0, abs=1e-3)


def test_matched_doppler_vector():
    f0 = 2 * 16.67 / WF.wavelength
    b = doppler_vector(WF.n_symbols, WF.symbol_period_s, [300.0, f0 + 300.0])
    v, _ = extract_dopplers(b, 0, WF)
    assert v[0] == pytest.approx(2 * 16.67, abs=0.05)


def test_doppler_boundary_warns():
    b = doppler_vector(WF.n_symbols, WF.symbol_period_s, [0.0, 2000.0])
    with pytest.warns(BoundaryOptimumWarning):
        extract_dopplers(b, 0, WF)


@settings(max_examples=30)
@given(st.floats(-2000, 2000), st.floats(0.01, 100), st.floats(-math.pi, math.pi))
def test_doppler_objective_scale_invariant(f, mag, phase):
    b = doppler_vector(WF.n_symbols, WF.symbol_period_s, f)
    grid = np.linspace(-3000, 3000, 41)
    np.testing.assert_allclose(doppler_objective(b, WF)(grid),
                               doppler_objective(mag * np.exp(1j * phase) * b, WF)(grid), atol=1e-12)


# -- angles -------------------------------------------------------------------------

def test_kronecker_split_exact_input(rng):
    qv = rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))
    qh = rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))
    f = kronecker_split_combiner(np.kron(qv, qh), 3, 4, 2, 2)
    assert f.residual < 1e-10
    assert f.j_v == 2 and f.j_h == 2
    with pytest.raises(ValueError):
        kronecker_split_combiner(np.kron(qv, qh), 3, 4, 4, 2)  # 8 chains vs 4 columns


def test_region_beamformer_is_separable(region_bf):
    assert combiner_factors(region_bf, ArrayConfig()).residual < 1e-10
    literal = design_region_beamformer(ArrayConfig(), (40, 90), (40, 140), separable=False)
    assert combiner_factors(literal, ArrayConfig()).residual > 0.1


def _aoa_column(bf, theta, phi):
    arr = ArrayConfig()
    a = steering_vector_dc(arr, math.cos(theta), math.sin(theta) * math.cos(phi))
    return (bf.combined.conj().T @ a)[:, None]


@pytest.mark.parametrize("theta,phi", [(70, 60), (55, 110), (85, 95), (62.3, 77.7)])
def test_aoa_single_target(region_bf, theta, phi):
    factors = combiner_factors(region_bf, ArrayConfig())
    col = _aoa_column(region_bf, math.radians(theta), math.radians(phi))
    el, az, ok = extract_aoas(col * (0.3 - 2j), factors)
    assert ok[0]
    assert math.degrees(el[0]) == pytest.approx(theta, abs=0.1)
    assert math.degrees(az[0]) == pytest.approx(phi, abs=0.1)


def test_aoa_broadside(region_bf):
    factors = combiner_factors(region_bf, ArrayConfig())
    el, az, ok = extract_aoas(_aoa_column(region_bf, math.pi / 2, math.pi / 2), factors)
    assert math.cos(el[0]) == pytest.approx(0.0, abs=1e-4)
    assert math.cos(az[0]) == pytest.approx(0.0, abs=1e-4)


def test_aoa_zenith_flagged():
    arr = ArrayConfig(n_h=4, n_v=8, n_rf=4)
    bf = design_region_beamformer(arr, (0, 20), (40, 140))
    factors = combiner_factors(bf, arr)
    a = steering_vector_dc(arr, 1.0, 0.0)
    el, az, ok = extract_aoas((bf.combined.conj().T @ a)[:, None], factors)
    # endfire: cos(theta) = +1 and -1 alias at half-wavelength spacing
    assert abs(math.sin(el[0])) < 1e-6
    assert not ok[0] and math.isnan(az[0])


# -- end to end -----------------------------------------------------------------------

def test_noiseless_link_k2(region_bf):
    sc = facing_pair(targets=[target((30, 60, 120), (4, -6, 2)), target((-80, 150, 220), (-9, 3, -1))])
    m, truth = run_link(sc, region_bf)
    assert m.n_paths == 2 and m.valid.all()
    assert m.sto_s == pytest.approx(1e-8, abs=1e-12)
    assert m.cfo_hz == pytest.approx(300.0, abs=0.05)
    perm = match_paths(m.ranges, [p.bistatic_range for p in truth])
    for j, p in enumerate(truth):
        i = perm[j]
        assert m.ranges[i] == pytest.approx(p.bistatic_range, abs=1e-3)
        assert m.dopplers[i] == pytest.approx(p.doppler_velocity, abs=0.05)
        assert math.degrees(m.elev[i]) == pytest.approx(math.degrees(p.aoa_elev), abs=0.1)
        assert math.degrees(m.azim[i]) == pytest.approx(math.degrees(p.aoa_azim), abs=0.1)
        # the index matched by range also has the smallest Doppler and AoA error
        assert i == np.argmin(np.abs(m.dopplers - p.doppler_velocity))
        assert i == np.argmin(np.abs(m.elev - p.aoa_elev) + np.abs(m.azim - p.aoa_azim))


def test_los_only_link(region_bf):
    sc = facing_pair()
    m, truth = run_link(sc, region_bf)
    assert m.n_paths == 0 and truth == []
    assert m.sto_s == pytest.approx(1e-8, abs=1e-12)
    assert m.cfo_hz == pytest.approx(300.0, abs=0.05)


def test_high_noise_does_not_crash(region_bf):
    sc = facing_pair(targets=[target((30, 60, 120), (4, -6, 2)), target((-80, 150, 220))])
    flagged = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for seed in range(4):
            m, _ = run_link(sc, region_bf, NoiseConfig(snr_db=-15.0), seed)
            assert m.n_paths == 2
            flagged += int((~m.valid).sum())
    assert flagged > 0


def test_factor_scaling_does_not_move_estimates(region_bf):
    sc = facing_pair(targets=[target((30, 60, 120), (4, -6, 2))])
    T = simulate_received_tensor(sc, (0, 1), (region_bf, region_bf), NoiseConfig(enabled=False))
    wf = sc.waveform
    A, B, C = cp_factors(T.paths, wf, region_bf, region_bf, sc.array, sc.array)
    z = np.array([C[1, k] for k in range(C.shape[1])])
    factors = combiner_factors(region_bf, sc.array)
    base = measurements_from_factors(FactorEstimate(A, B, C, z), 1000.0, factors, wf)
    d1, d2 = np.array([2 - 1j, -0.5j]), np.array([0.1 + 0.1j, 7.0])
    scaled = measurements_from_factors(FactorEstimate(A * d1, B * d2, C, z), 1000.0, factors, wf)
    np.testing.assert_allclose(scaled.dopplers, base.dopplers, atol=1e-9)
    np.testing.assert_allclose(scaled.elev, base.elev, atol=1e-9)
    np.testing.assert_allclose(scaled.azim, base.azim, atol=1e-9)


def test_measurement_csv_round_trip():
    m = LinkMeasurement((2, 5), np.array([1100.5, 1300.25]), np.array([3.5, -12.0]),
                        np.radians([60.0, 75.0]), np.radians([80.0, 100.0]), np.array([True, False]))
    buf = io.StringIO()
    write_measurements_csv([m], buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "tbs,rbs,path,range_m,doppler_mps,elev_deg,azim_deg,valid"
    assert len(lines) == 3
    back, = read_measurements_csv(io.StringIO(buf.getvalue()))
    assert back.pair_id == (2, 5)
    np.testing.assert_allclose(back.ranges, m.ranges)
    np.testing.assert_allclose(back.azim, m.azim, atol=1e-12)
    np.testing.assert_array_equal(back.valid, m.valid)
    with pytest.raises(ValueError):
        read_measurements_csv(io.StringIO("tbs,rbs\n1,2\n"))


def test_match_paths():
    perm = match_paths([1300.0, 1100.0, np.nan], [1101.0, 1299.0])
    assert list(perm) == [1, 0]


def test_link_config_validation():
    with pytest.raises(ValueError):
        LinkConfig(doppler_points=2)
    with pytest.raises(ValueError):
        LinkConfig(estimator="music")
