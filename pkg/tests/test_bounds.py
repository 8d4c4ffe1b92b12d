import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from conftest import random_scenario
from mbcpp.bounds import (
    RankError,
    delay_fim_explicit,
    delay_fim_generic,
    delay_only_fim,
    draw_integer_errors,
    equilibrated_pinv,
    fused_single_band_peb,
    integer_bias_map,
    inverse_sqrt,
    known_fim_explicit,
    known_fim_generic,
    known_integer_fim,
    micrb,
    relaxed_covariance_closed_form,
    relaxed_covariance_schur,
    spd_inverse,
)
from mbcpp.model import build_matrices
from mbcpp.scenario import ConfigError, sample_default_scenario


def test_known_explicit_matches_generic(dual_band):
    mats = build_matrices(dual_band)
    Je, Jg = known_fim_explicit(mats), known_fim_generic(mats)
    np.testing.assert_allclose(Je, Jg, rtol=1e-10, atol=1e-10 * np.abs(Jg).max())


def test_delay_explicit_matches_generic(dual_band):
    mats = build_matrices(dual_band)
    L = mats.layout.num_pairs
    Je = delay_fim_explicit(mats.U_tilde, np.sqrt(np.diag(mats.Sigma_ch)[:L]))
    np.testing.assert_allclose(Je, delay_fim_generic(mats), rtol=1e-10)


def test_delay_fim_matches_finite_differences(dual_band):
    J = delay_only_fim(dual_band).fim
    Jfd = oracles.delay_fim_finite_difference(dual_band)
    np.testing.assert_allclose(J, Jfd, rtol=1e-6)


def test_relaxed_routes_match_high_precision_oracle(dual_band):
    mats = build_matrices(dual_band)
    ref = oracles.relaxed_schur(mats)
    scale = np.abs(ref).max()
    np.testing.assert_allclose(relaxed_covariance_closed_form(mats), ref, rtol=1e-8, atol=1e-8 * scale)
    np.testing.assert_allclose(relaxed_covariance_schur(mats), ref, rtol=1e-8, atol=1e-8 * scale)


def test_relaxed_schur_with_clock_matches_oracle(clocked_dual_band):
    mats = build_matrices(clocked_dual_band)
    ref = oracles.relaxed_schur(mats)
    np.testing.assert_allclose(relaxed_covariance_schur(mats), ref, rtol=1e-8, atol=1e-8 * np.abs(ref).max())
    with pytest.raises(ConfigError):
        relaxed_covariance_closed_form(mats)
    with pytest.raises(ConfigError):
        known_fim_explicit(mats)


def test_known_peb_matches_high_precision_oracle(dual_band, clocked_dual_band):
    for cfg in (dual_band, clocked_dual_band):
        mats = build_matrices(cfg)
        assert known_integer_fim(cfg).peb == pytest.approx(oracles.known_peb(mats), rel=1e-9)


def test_frozen_bounds_for_default_deployment(dual_band, single_band):
    # values from the 40-digit oracle on seed-1 geometry
    rep = micrb(dual_band, n_mc=1000, seed=0)
    assert rep.peb_delay == pytest.approx(0.27017019446728, rel=1e-9)
    assert rep.peb_known == pytest.approx(1.6200349948837e-4, rel=1e-9)
    assert rep.peb_mi == rep.peb_known
    assert single_band.num_bands == 1
    assert delay_only_fim(single_band).peb == pytest.approx(0.38207, rel=1e-4)


def test_fused_known_equals_multi_band(dual_band):
    fz = fused_single_band_peb(dual_band, n_mc=200, seed=1)
    assert fz.peb_known == pytest.approx(known_integer_fim(dual_band).peb, rel=1e-10)
    assert len(fz.per_band) == 2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bound_ordering(seed):
    cfg = random_scenario(np.random.default_rng(seed))
    rep = micrb(cfg, n_mc=200, seed=seed)
    assert rep.peb_known <= rep.peb_delay
    assert rep.peb_known <= rep.peb_mi * (1 + 1e-12)


def test_micrb_is_reproducible(dual_band):
    cfg = sample_default_scenario(1, 6, (15e9,))
    a = micrb(cfg, n_mc=300, seed=7)
    b = micrb(cfg, n_mc=300, seed=7)
    assert a.peb_mi == b.peb_mi
    np.testing.assert_array_equal(a.delta_z, b.delta_z)
    assert a.integer_error_rate > 0 and a.peb_mi > a.peb_known


def test_mixed_integer_covariance_definition():
    cfg = sample_default_scenario(1, 6, (15e9,))
    rep = micrb(cfg, n_mc=400, seed=3)
    mats = build_matrices(cfg)
    G = integer_bias_map(mats)
    b = rep.delta_z @ G.T
    np.testing.assert_allclose(rep.sigma_mi, b.T @ b / rep.n_mc + rep.sigma_known, rtol=1e-9, atol=1e-20)


def test_integer_errors_vanish_for_tiny_covariance():
    dz = draw_integer_errors(1e-6 * np.eye(4), 100, np.random.default_rng(0))
    assert not dz.any()


def test_bias_map_reproduces_integer_shift(dual_band):
    # an integer error shifts the weighted LS solution by exactly -G dz
    mats = build_matrices(dual_band)
    G = integer_bias_map(mats)
    dz = np.zeros(mats.D.shape[0])
    dz[2] = 1
    W = inverse_sqrt(mats.Sigma_ch)
    y = mats.B @ mats.E @ dz
    s = np.linalg.lstsq(W @ mats.A_f, W @ y, rcond=None)[0]
    np.testing.assert_allclose(G @ dz, s, rtol=1e-6, atol=1e-9 * np.abs(s).max())


def test_equilibrated_pinv_handles_badly_scaled_columns():
    A = np.array([[1.0, 3e8], [2.0, 3e8], [0.0, 6e8]])
    J = oracles.fim(A, np.eye(3))
    ref = oracles.inverse(J) @ A.T
    np.testing.assert_allclose(equilibrated_pinv(A), ref, rtol=1e-9, atol=1e-9 * np.abs(ref).max())


def test_rank_errors():
    with pytest.raises(RankError) as exc:
        spd_inverse(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert exc.value.condition > 1e13
    collinear = sample_default_scenario(0, 3, (3.5e9,), bs_positions=np.array([[10.0, 0], [20, 0], [30, 0]]))
    with pytest.raises(np.linalg.LinAlgError):
        delay_only_fim(collinear)
