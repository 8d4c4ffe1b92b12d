import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbcpp.model import (
    MeasurementSet,
    base_covariance,
    build_layout,
    build_matrices,
    clock_augmented_covariance,
    clock_covariance,
    measurement_covariance,
    measurement_pairs,
    synthesize_measurements,
    true_state,
)
from mbcpp.scenario import SPEED_OF_LIGHT, sample_default_scenario


def test_pairs_are_band_major():
    a = np.array([[1, 1], [0, 1], [1, 1]], bool)
    bs, band = measurement_pairs(a)
    np.testing.assert_array_equal(bs, [0, 2, 0, 1, 2])
    np.testing.assert_array_equal(band, [0, 0, 1, 1, 1])


def test_differencer_and_inserter(dual_band):
    lay = build_layout(dual_band)
    L, K = lay.num_pairs, dual_band.num_bands
    assert lay.D.shape == (L - K, L)
    assert lay.E.shape == (L, L - K)
    np.testing.assert_array_equal(lay.D @ lay.E, np.eye(L - K))
    # a per-band constant is removed by differencing
    np.testing.assert_allclose(lay.D @ lay.pair_band.astype(float), 0)
    np.testing.assert_array_equal(lay.reference_pairs, [0, 6])


def test_band_independent_layout():
    cfg = sample_default_scenario(2, 4, (3.5e9, 12e9), phase_offset_mode="band_independent")
    lay = build_layout(cfg)
    assert lay.num_phase == 1 and lay.num_ambiguities == lay.num_pairs - 1


@settings(max_examples=30, deadline=None)
@given(st.floats(-200, 200), st.floats(-200, 200))
def test_jacobian_matches_finite_differences(x0, x1):
    cfg = sample_default_scenario(3, 5, (3.5e9, 28e9))
    lay = build_layout(cfg)
    s = np.array([x0, x1, 2e-8, 0.3, 0.7])
    if np.min(np.linalg.norm(cfg.bs_positions - s[:2], axis=1)) < 1.0:
        return
    J = lay.jacobian(s[:2])
    steps = np.array([1e-4, 1e-4, 1e-12, 1e-2, 1e-2])
    for j, h in enumerate(steps):
        e = np.zeros(5)
        e[j] = h
        fd = (lay.mean(s + e) - lay.mean(s - e)) / (2 * h)
        np.testing.assert_allclose(J[:, j], fd, rtol=1e-6, atol=1e-6 * np.abs(J[:, j]).max())


def test_matrices_match_layout(dual_band):
    mats = build_matrices(dual_band)
    lay = build_layout(dual_band)
    np.testing.assert_allclose(mats.A_f, lay.jacobian(dual_band.ue_position))
    np.testing.assert_allclose(mats.B, lay.B)
    assert mats.Sigma_ch.shape == (2 * lay.num_pairs,) * 2


def test_pruned_matrices_for_nonuniform_assignment():
    a = np.array([[1, 1], [1, 1], [1, 0], [0, 1], [1, 1]], bool)
    cfg = sample_default_scenario(4, 5, (3.5e9, 12e9), assignment=a)
    mats = build_matrices(cfg)
    lay = build_layout(cfg)
    np.testing.assert_allclose(mats.A_f, lay.jacobian(cfg.ue_position))


def test_clock_covariance_couples_pairs_of_one_bs(dual_band):
    cfg = dual_band.replace(bs_clock_std_s=1e-10)
    lay = build_layout(cfg)
    C = clock_covariance(cfg, lay.pair_bs)
    same = lay.pair_bs[:, None] == lay.pair_bs[None, :]
    np.testing.assert_allclose(C[same], (SPEED_OF_LIGHT * 1e-10) ** 2)
    np.testing.assert_array_equal(C[~same], 0)
    full = measurement_covariance(cfg, lay)
    base = measurement_covariance(cfg, lay, include_clock=False)
    L = lay.num_pairs
    for blk in [(slice(0, L), slice(0, L)), (slice(0, L), slice(L, None)), (slice(L, None), slice(L, None))]:
        np.testing.assert_allclose((full - base)[blk], C)


def test_noise_free_measurements(dual_band):
    m = synthesize_measurements(dual_band, seed=3, noise=False)
    lay = build_layout(dual_band)
    d = dual_band.distances()[lay.pair_bs]
    np.testing.assert_allclose(m.y_tau, d + SPEED_OF_LIGHT * dual_band.ue_clock_bias_s)
    frac = m.y_theta / lay.pair_wavelength
    assert np.all((frac >= 0) & (frac < 1 + 1e-9))
    s = true_state(dual_band, m.truth, lay)
    np.testing.assert_allclose(m.y - lay.mean(s), lay.BE @ (lay.D @ m.truth.z), atol=1e-6)


def test_measurement_noise_statistics(single_band):
    lay = build_layout(single_band)
    res = np.array([synthesize_measurements(single_band, seed=i).truth.omega_tau for i in range(2000)])
    m = synthesize_measurements(single_band, seed=0)
    np.testing.assert_allclose(res.std(axis=0), m.sigma_tau, rtol=0.1)
    assert res.shape[1] == lay.num_pairs


def test_measurement_csv_round_trip(tmp_path, dual_band):
    m = synthesize_measurements(dual_band, seed=1)
    path = tmp_path / "m.csv"
    m.to_csv(path)
    back = MeasurementSet.from_csv(path)
    np.testing.assert_array_equal(back.y, m.y)
    np.testing.assert_array_equal(back.pair_bs, m.pair_bs)
    np.testing.assert_allclose(back.covariance, m.covariance)


def test_noise_covariance_matches_clock_augmented(clocked_dual_band):
    cfg = clocked_dual_band
    lay = build_layout(cfg)
    d = cfg.distances()[lay.pair_bs]
    wl = lay.pair_wavelength
    geo = d + SPEED_OF_LIGHT * cfg.ue_clock_bias_s
    n = 100_000
    E = np.empty((n, 2 * lay.num_pairs))
    for i in range(n):
        m = synthesize_measurements(cfg, seed=i)
        phi = m.truth.phase_offsets_cycles[lay.pair_band]
        E[i, : lay.num_pairs] = m.y_tau - geo
        E[i, lay.num_pairs:] = m.y_theta - wl * m.truth.z - geo - wl * phi
    ref = clock_augmented_covariance(cfg, base_covariance(cfg, lay))
    emp = E.T @ E / n
    assert np.linalg.norm(emp - ref) / np.linalg.norm(ref) < 0.05
    # normalized so the millimetre phase block and the clock coupling count as much as the delays
    s = 1 / np.sqrt(np.diag(ref))
    emp_n, ref_n = emp * np.outer(s, s), ref * np.outer(s, s)
    assert np.linalg.norm(emp_n - ref_n) / np.linalg.norm(ref_n) < 0.05
