import math

import numpy as np
import pytest
from scipy import stats

from tractory import rng as rngmod
from tractory import vmf
from tractory.vmf import (
    LOG_INV_4PI,
    VmfParams,
    angle_quantile,
    augment_target,
    kappa_from_fa,
    log_c,
    mean_resultant_length,
    sample,
    sample_axial,
    sample_from_uniforms,
)


def test_log_c_uniform_limit():
    assert log_c(0.0) == pytest.approx(LOG_INV_4PI, abs=1e-15)
    assert log_c(1e-9) == pytest.approx(LOG_INV_4PI, abs=1e-12)


def test_log_c_kappa_64():
    # frozen from 50-digit evaluation of log(k) - log(4 pi) - log(sinh k)
    assert log_c(64.0) == pytest.approx(-61.678993983049673627, abs=1e-12)


def test_log_c_no_overflow():
    v = log_c(1e4)
    assert np.isfinite(v)
    v = log_c(1e8)
    assert np.isfinite(v)


def test_log_c_matches_direct_formula():
    for k in np.geomspace(1e-6, 50.0, 60):
        direct = math.log(k) - math.log(4 * math.pi) - math.log(math.sinh(k))
        assert log_c(k) == pytest.approx(direct, abs=1e-10)


def test_log_c_monotone_decreasing():
    ks = np.linspace(1e-3, 200.0, 500)
    vals = log_c(ks)
    assert np.all(np.diff(vals) < 0)


def test_vmf_params_validation():
    with pytest.raises(ValueError):
        VmfParams(np.array([1.0, 0.0, 0.1]), 4.0)
    with pytest.raises(ValueError):
        VmfParams(np.array([0.0, 0.0, 1.0]), -1.0)
    with pytest.raises(ValueError):
        VmfParams(np.array([0.0, 0.0, 1.0]), np.inf)


def test_sampler_uniform_at_kappa_zero():
    g = rngmod.stream(5, 0)
    s = sample(np.array([0.0, 0.0, 1.0]), 0.0, g, size=100000)
    assert np.abs(s.mean(axis=0)).max() < 0.01


@pytest.mark.parametrize("kappa", [4.0, 16.0, 64.0, 100.0])
def test_sampler_mean_resultant_length(kappa):
    mu = np.array([0.0, 0.0, 1.0])
    g = rngmod.stream(7, int(kappa))
    s = sample(mu, kappa, g, size=100000)
    got = (s @ mu).mean()
    want = mean_resultant_length(kappa)
    assert abs(got - want) < 0.01 * want


@pytest.mark.parametrize("kappa", [4.0, 16.0, 64.0, 100.0])
def test_sampler_angle_quantiles(kappa):
    mu = np.array([0.0, 1.0, 0.0])
    g = rngmod.stream(11, int(kappa))
    s = sample(mu, kappa, g, size=100000)
    ang = np.degrees(np.arccos(np.clip(s @ mu, -1, 1)))
    for q in (0.5, 0.9):
        want = np.degrees(angle_quantile(kappa, q))
        got = np.quantile(ang, q)
        assert abs(got - want) < 0.5


@pytest.mark.parametrize("kappa", [4.0, 16.0, 64.0, 100.0])
def test_sampler_extreme_quantile(kappa):
    # q=0.99 needs more draws for a sound 0.5-degree bound; the angle is a
    # function of the axial component alone, which samples cheaply
    g = rngmod.stream(12, int(kappa))
    w = sample_axial(kappa, g.random(1000000))
    ang = np.degrees(np.arccos(np.clip(w, -1, 1)))
    want = np.degrees(angle_quantile(kappa, 0.99))
    assert abs(np.quantile(ang, 0.99) - want) < 0.5


def test_sampler_concentration_limit():
    mu = np.array([1.0, 0.0, 0.0])
    g = rngmod.stream(13)
    s = sample(mu, 1e6, g)
    assert np.degrees(np.arccos(np.clip(s @ mu, -1, 1))) < 0.5


def test_sampler_unit_norm():
    g = rngmod.stream(17)
    mu = np.array([0.6, 0.0, 0.8])
    s = sample(mu, 3.0, g, size=1000)
    assert np.abs(np.linalg.norm(s, axis=1) - 1).max() < 1e-12


def test_sample_axial_endpoints_and_limits():
    assert sample_axial(0.0, 0.25) == pytest.approx(-0.5)
    assert sample_axial(5.0, 0.0) == pytest.approx(-1.0)
    # huge kappa with xi=0 underflows; exact value is -1
    assert sample_axial(1e9, 0.0) == -1.0
    assert sample_axial(1e9, 0.5) == pytest.approx(1.0, abs=1e-8)


def test_axial_distribution_ks():
    # inverse-CDF oracle: the axial CDF is (e^{k w} - e^{-k}) / (e^k - e^{-k})
    kappa = 16.0
    g = rngmod.stream(19)
    mu = np.array([0.0, 0.0, 1.0])
    s = sample(mu, kappa, g, size=20000)
    w = s @ mu

    def cdf(x):
        x = np.asarray(x, dtype=float)
        return (np.exp(kappa * (x - 1)) - np.exp(-2 * kappa)) / (1 - np.exp(-2 * kappa))

    res = stats.kstest(w, cdf)
    assert res.pvalue > 1e-3


def test_angle_quantile_closed_form_values():
    # frozen: arccos(1 + ln(0.1)/64) = 15.415806 degrees
    assert np.degrees(angle_quantile(64.0, 0.9)) == pytest.approx(15.415806329, abs=1e-6)
    assert np.degrees(angle_quantile(0.0, 0.5)) == pytest.approx(90.0)
    assert angle_quantile(10.0, 1e-12) == pytest.approx(0.0, abs=1e-5)
    with pytest.raises(ValueError):
        angle_quantile(4.0, 0.0)


def test_kappa_from_fa_paper_range():
    assert kappa_from_fa(0.05, 1600.0) == pytest.approx(4.0, rel=1e-12)
    assert kappa_from_fa(0.25, 1600.0) == pytest.approx(100.0, rel=1e-12)
    assert kappa_from_fa(0.20, 1600.0) == pytest.approx(64.0, rel=1e-12)
    assert kappa_from_fa(0.0, 1600.0) == 0.0
    with pytest.raises(ValueError):
        kappa_from_fa(1.5, 1600.0)
    with pytest.raises(ValueError):
        kappa_from_fa(0.5, 0.0)


def test_augment_target_concentration_limit():
    g = rngmod.stream(23)
    u = np.array([0.0, 0.6, 0.8])
    out = augment_target(u, 1e9, g)
    assert np.arccos(np.clip(out @ u, -1, 1)) < 1e-3
    assert np.array_equal(augment_target(u, np.inf, g), u)


def test_augment_target_quantile_self_consistency():
    g = rngmod.stream(29)
    u = np.array([1.0, 0.0, 0.0])
    draws = np.stack([augment_target(u, 64.0, g) for _ in range(4000)])
    ang = np.arccos(np.clip(draws @ u, -1, 1))
    frac = (ang <= angle_quantile(64.0, 0.9)).mean()
    assert abs(frac - 0.9) < 0.02


def test_nll_minimized_at_target():
    # -k <u, mu> - log C is minimized over mu at mu = u: grid search on sphere
    from tractory.dwimath import fibonacci_directions
    u = np.array([0.36, 0.48, 0.8])
    u /= np.linalg.norm(u)
    grid = np.vstack([fibonacci_directions(5000), u])
    nll = -4.0 * (grid @ u) - log_c(4.0)
    assert np.argmin(nll) == len(grid) - 1


def test_sample_from_uniforms_deterministic():
    mu = np.tile(np.array([0.0, 0.0, 1.0]), (4, 1))
    xa = np.array([0.1, 0.5, 0.9, 0.3])
    xb = np.array([0.2, 0.6, 0.1, 0.8])
    a = sample_from_uniforms(mu, 16.0, xa, xb)
    b = sample_from_uniforms(mu, 16.0, xa, xb)
    assert np.array_equal(a, b)
