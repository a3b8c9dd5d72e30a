import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dh_lyapunov.chain_sim import (
    ChainConfig,
    g_inv,
    g_map,
    h_inv,
    h_map,
    lyapunov_matrix,
    lyapunov_mc,
    lyapunov_s_chain,
    sigma_trajectory,
    step_s,
    step_sigma,
    summands,
)
from dh_lyapunov.errors import InvalidParameter, OutOfRange


def test_maps_reference_values():
    eps = 0.1
    assert g_map(eps, 1 / eps) == pytest.approx(1 / eps, rel=1e-15)
    assert h_map(eps, 0.0) == pytest.approx(eps**2, rel=1e-15)
    assert g_map(0.0, 2.5) == 3.5
    assert g_inv(0.0, 2.0) == 1.0
    assert h_inv(eps, eps**2) == 0.0
    assert g_inv(eps, 1 / eps) == pytest.approx(1 / eps, rel=1e-13)


def test_inverses_out_of_range():
    with pytest.raises(OutOfRange):
        g_inv(0.1, 0.5)
    with pytest.raises(OutOfRange):
        g_inv(0.1, 100.0)
    with pytest.raises(OutOfRange):
        h_inv(0.1, 1.0)


def test_step_reference_values():
    assert step_sigma(0.0, 1.7, 0.2) == pytest.approx(1.7 * 0.04, rel=1e-15)
    assert step_sigma(1.0, 1.0, 0.0) == 0.5
    assert abs(step_sigma(1e12, 2.0, 0.1) - 2.0) < 1e-10
    assert step_s(0.0, 1.3, 0.3) == 1.3
    assert step_s(4.0, 0.5, 0.0) == 2.5


@given(st.floats(1e-6, 1e6), st.floats(0.2, 3.0), st.floats(1e-3, 0.9))
def test_chart_consistency(s, z, eps):
    # sigma = eps^2 s maps to eps^2 times the s-chain image
    lhs = step_sigma(eps * eps * s, z, eps)
    rhs = eps * eps * step_s(s, z, eps)
    assert lhs == pytest.approx(rhs, rel=1e-12)


@given(st.floats(1.0, 50.0), st.floats(1e-3, 0.9))
def test_g_inverse_round_trip(y, eps):
    if eps * eps * y >= 1:
        return
    assert g_map(eps, g_inv(eps, y)) == pytest.approx(y, rel=1e-12)


def test_config_validation(model):
    with pytest.raises(InvalidParameter):
        ChainConfig(1.0, 1000, 10, 1)
    with pytest.raises(InvalidParameter):
        ChainConfig(0.1, 1000, 10, 1, n_batches=4)
    with pytest.raises(InvalidParameter):
        ChainConfig(0.1, 1000, 11, 1, n_batches=8)
    cfg = ChainConfig.create(0.1, 100_003, 1, model=model)
    assert (cfg.n_steps - cfg.burn_in) % cfg.n_batches == 0
    assert cfg.burn_in >= 10_000


def test_sigma_chain_stays_in_absorbing_interval(model):
    eps = 0.05
    sig = sigma_trajectory(model, 3, 200_000, eps)
    assert sig[10:].min() >= 0.2 * eps**2 * (1 - 1e-12)
    assert sig.max() <= 3.0
    cfg = ChainConfig.create(eps, 200_000, 3, model=model)
    lyapunov_mc(model, cfg, debug=True)


def test_sigma_chain_deterministic(model):
    cfg = ChainConfig.create(0.05, 300_000, 17, model=model)
    a, b = lyapunov_mc(model, cfg), lyapunov_mc(model, cfg)
    assert a.mean == b.mean and a.std_error == b.std_error


def test_charts_agree_step_by_step(model):
    eps = 0.07
    x = summands(model, 5, 50_000, eps, "sigma_chain")
    y = summands(model, 5, 50_000, eps, "s_chain")
    assert np.allclose(x, y, rtol=1e-11, atol=0)


def test_l0_is_zero(model):
    cfg = ChainConfig.create(0.0, 2_000_000, 8, model=model)
    est = lyapunov_mc(model, cfg)
    assert abs(est.mean) <= 4 * est.std_error + 1e-15
    mat = lyapunov_matrix(model, cfg)
    assert abs(mat.mean) <= 4 * mat.std_error + 1e-15


def test_s_chain_rejects_zero_eps(model):
    with pytest.raises(InvalidParameter):
        lyapunov_s_chain(model, ChainConfig.create(0.0, 100_000, 1, model=model))


def test_three_estimators_agree(model):
    cfg = ChainConfig.create(0.05, 1_000_000, 3, model=model)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a, b, c = lyapunov_mc(model, cfg), lyapunov_s_chain(model, cfg), lyapunov_matrix(model, cfg, debug=True)
    for x, y in ((a, b), (a, c)):
        assert abs(x.mean - y.mean) <= 4 * math.hypot(x.std_error, y.std_error)
    assert abs(a.mean - b.mean) < 1e-12


def test_matrix_sign_symmetry(model):
    plus = lyapunov_matrix(model, ChainConfig.create(0.05, 1_000_000, 21, model=model))
    minus = lyapunov_matrix(model, ChainConfig.create(-0.05, 1_000_000, 21, model=model))
    assert abs(plus.mean - minus.mean) <= 1e-12


def test_estimate_row_round_trips(model):
    est = lyapunov_mc(model, ChainConfig.create(0.1, 100_000, 2, model=model))
    row = est.csv_row()
    assert float(row[2]) == est.mean and float(row[3]) == est.std_error
    assert 0 < est.n_effective <= 100_000
