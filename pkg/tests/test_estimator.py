import numpy as np
import pytest

from mbcpp.bounds import delay_only_fim, known_integer_fim
from mbcpp.estimator import (
    SEARCH_GRID,
    EstimatorConfig,
    LinearizedModel,
    estimate,
    curvature_range_variance,
    search_candidates,
    stage1_tdoa,
)
from mbcpp.model import IdentifiabilityError, build_layout, synthesize_measurements, true_state
from mbcpp.scenario import ConfigError, sample_default_scenario


def test_noise_free_recovery(dual_band):
    m = synthesize_measurements(dual_band, seed=0, noise=False)
    res = estimate(m, dual_band)
    lay = build_layout(dual_band)
    np.testing.assert_allclose(res.x_hat, dual_band.ue_position, atol=1e-7)
    np.testing.assert_array_equal(res.z_d_hat, lay.D @ m.truth.z)
    assert res.clock_bias_hat == pytest.approx(dual_band.ue_clock_bias_s, abs=1e-15)
    s_true = true_state(dual_band, m.truth, lay)
    expected_phase = s_true[3:] - np.floor(s_true[3:])
    np.testing.assert_allclose(np.mod(res.phase_offset_hat, 1.0), expected_phase, atol=1e-6)
    assert res.ml_cost < 1e-10


def test_stage1_noise_free_is_exact(single_band):
    m = synthesize_measurements(single_band, seed=0, noise=False)
    s1 = stage1_tdoa(m, single_band)
    np.testing.assert_allclose(s1.x, single_band.ue_position, atol=1e-6)


def test_result_shapes_and_history(dual_band):
    m = synthesize_measurements(dual_band, seed=4)
    res = estimate(m, dual_band, EstimatorConfig(n_iter=3))
    assert res.x_history.shape == (3, 2)
    assert res.cost_history.shape == (3,)
    np.testing.assert_array_equal(res.x_history[-1], res.x_hat)
    assert res.state.size == 2 + 1 + 2


def test_known_integers_give_small_error(dual_band):
    lay = build_layout(dual_band)
    errs = []
    for t in range(60):
        m = synthesize_measurements(dual_band, seed=t)
        res = estimate(m, dual_band, known_z_d=lay.D @ m.truth.z)
        errs.append(np.sum((res.x_hat - dual_band.ue_position) ** 2))
    rmse = np.sqrt(np.mean(errs))
    assert rmse == pytest.approx(known_integer_fim(dual_band).peb, rel=0.3)


def test_stage1_tracks_delay_bound(single_band):
    errs = [np.sum(stage1_tdoa(synthesize_measurements(single_band, seed=t), single_band).x ** 2)
            for t in range(200)]
    assert np.sqrt(np.mean(errs)) == pytest.approx(delay_only_fim(single_band).peb, rel=0.2)


def test_search_never_raises_cost(dual_band):
    cfg = dual_band.replace(bands=tuple(b.__class__(b.carrier_frequency_hz, num_subcarriers=100) for b in dual_band.bands))
    for t in range(10):
        m = synthesize_measurements(cfg, seed=t)
        one = estimate(m, cfg, EstimatorConfig(n_search=1))
        many = estimate(m, cfg, EstimatorConfig(n_search=50, seed=t))
        assert many.ml_cost <= one.ml_cost * (1 + 1e-9)
        assert many.candidate_costs.size == 50


def test_search_is_deterministic(dual_band):
    m = synthesize_measurements(dual_band, seed=2)
    a = estimate(m, dual_band, EstimatorConfig(n_search=20, seed=5))
    b = estimate(m, dual_band, EstimatorConfig(n_search=20, seed=5))
    np.testing.assert_array_equal(a.x_hat, b.x_hat)
    assert a.best_candidate == b.best_candidate


def test_grid_candidates_start_at_stage1(dual_band):
    m = synthesize_measurements(dual_band, seed=2)
    lay = build_layout(dual_band)
    s1 = stage1_tdoa(m, dual_band)
    C = search_candidates(m, lay, s1, EstimatorConfig(n_search=9, search_sampling=SEARCH_GRID))
    assert C.shape[0] == 9
    np.testing.assert_allclose(C[0, :2], s1.x)


def test_clock_imperfection_scenario_runs(clocked_dual_band):
    m = synthesize_measurements(clocked_dual_band, seed=1)
    res = estimate(m, clocked_dual_band)
    assert np.linalg.norm(res.x_hat) < 1.0


def test_nonuniform_band_independent():
    pattern = [[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [5, 6]]
    a = np.zeros((6, 7), bool)
    for m, ks in enumerate(pattern):
        a[m, ks] = True
    fcs = tuple(f * 1e9 for f in (3.5, 7.5, 11.5, 15.5, 19.5, 23.5, 27.5))
    cfg = sample_default_scenario(1, 6, fcs, assignment=a, phase_offset_mode="band_independent")
    m = synthesize_measurements(cfg, seed=0, noise=False)
    res = estimate(m, cfg)
    np.testing.assert_allclose(res.x_hat, 0, atol=1e-6)


def test_unidentifiable_assignment_is_reported():
    a = np.array([[1, 1], [1, 0], [1, 0], [1, 0]], bool)
    cfg = sample_default_scenario(0, 4, (3.5e9, 12e9), assignment=a)
    with pytest.raises(IdentifiabilityError, match="band_independent"):
        build_layout(cfg)
    with pytest.raises(IdentifiabilityError):
        synthesize_measurements(cfg, seed=0)


def test_linearized_model_rejects_foreign_measurements(dual_band, single_band):
    m = synthesize_measurements(single_band, seed=0)
    with pytest.raises(ConfigError):
        LinearizedModel(m, build_layout(dual_band))


def test_config_validation():
    with pytest.raises(ConfigError):
        EstimatorConfig(n_iter=0)
    with pytest.raises(ConfigError):
        EstimatorConfig(search_sampling="sobol")
    with pytest.raises(ConfigError):
        EstimatorConfig(search_scale=-1)


def test_curvature_variance_matches_monte_carlo(dual_band):
    layout = build_layout(dual_band)
    x = dual_band.ue_position
    P = np.array([[0.3, 0.1], [0.1, 0.5]])
    v = curvature_range_variance(layout, x, P)[0]
    rng = np.random.default_rng(0)
    e = rng.multivariate_normal(np.zeros(2), P, size=200_000)
    for m, bs in enumerate(layout.bs_positions):
        x0 = x + e  # linearize at the perturbed point, evaluate at the truth
        d0 = np.linalg.norm(x0 - bs, axis=1)
        u0 = (x0 - bs) / d0[:, None]
        lin = d0 + np.einsum("ij,ij->i", u0, x - x0)
        err = np.linalg.norm(x - bs) - lin
        assert v[m] == pytest.approx(np.mean(err**2), rel=0.1)


def test_curvature_margin_prevents_wrong_fixes():
    # triple band: the plain ILS covariance over-trusts the geometry-constrained directions
    from mbcpp.harness import STREAM_TRIAL, _build_point, load_preset
    from mbcpp.scenario import scenario_from_dict
    from mbcpp.seeding import trial_rng

    spec = load_preset("fig6")
    series = [s for s in spec.series if s.label == "FR1&FR3&FR2"][0]
    cfg = scenario_from_dict(_build_point(spec, series, 8)["scenario"])
    wrong = {True: 0, False: 0}
    for t in range(80):
        meas = synthesize_measurements(cfg, seed=trial_rng(spec.seed, STREAM_TRIAL, series.stream, t))
        for margin in wrong:
            res = estimate(meas, cfg, EstimatorConfig(curvature_margin=margin))
            wrong[margin] += np.linalg.norm(res.x_hat - cfg.ue_position) > 1e-2
    assert wrong[False] >= 3
    assert wrong[True] == 0
