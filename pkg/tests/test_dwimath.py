import numpy as np
import pytest
from scipy.special import roots_legendre

from tractory import dwimath
from tractory.dwimath import (
    GradientScheme,
    eval_sh,
    fa,
    fibonacci_directions,
    fit_tensor_lls,
    md,
    n_coeffs,
    principal_dir,
    project_sh,
    sh_basis,
    sh_index_table,
    tensor_to_odf,
    tensor_volume_to_odf_sh,
)
from tractory.errors import EstimationError

Y00 = 0.28209479177387814  # 1 / (2 sqrt(pi))


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_spd_tensor(rng, lam_range=(2e-4, 3e-3)):
    lam = np.exp(rng.uniform(np.log(lam_range[0]), np.log(lam_range[1]), size=3))
    r = random_rotation(rng)
    return dwimath.matrix_to_tensor6(r @ np.diag(lam) @ r.T)


def signals_for(d6, scheme, s0=1.0):
    m = dwimath.tensor6_to_matrix(d6)
    quad = np.einsum("ni,ij,nj->n", scheme.directions, m, scheme.directions)
    return s0 * np.exp(-scheme.bvals * quad)


# -- tensor fit ---------------------------------------------------------------

def test_fit_recovers_noiseless_tensor():
    d6 = np.array([1.8e-3, 0.0, 0.0, 0.3e-3, 0.0, 0.3e-3])
    scheme = GradientScheme.uniform(24, 500.0)
    got = fit_tensor_lls(signals_for(d6, scheme), 1.0, scheme)
    assert np.abs(got - d6).max() < 1e-10


def test_fit_isotropic_signals():
    scheme = GradientScheme.uniform(12, 500.0)
    sig = np.full(12, np.exp(-500.0 * 1e-3))
    d6 = fit_tensor_lls(sig, 1.0, scheme)
    m = dwimath.tensor6_to_matrix(d6)
    assert np.allclose(m, 1e-3 * np.eye(3), atol=1e-12)


def test_fit_underdetermined_raises():
    scheme = GradientScheme.uniform(5, 500.0)
    with pytest.raises(EstimationError):
        fit_tensor_lls(np.full(5, 0.5), 1.0, scheme)


def test_fit_clamps_nonpositive_signals():
    scheme = GradientScheme.uniform(24, 500.0)
    sig = signals_for(np.array([1e-3, 0, 0, 1e-3, 0, 1e-3]), scheme)
    sig[0] = -0.1
    with pytest.warns(UserWarning, match="clamped"):
        fit_tensor_lls(sig, 1.0, scheme)


def test_fit_volume_matches_scalar_fit():
    rng = np.random.default_rng(8)
    scheme = GradientScheme.uniform(30, 500.0)
    tensors = np.stack([random_spd_tensor(rng) for _ in range(10)])
    sig = np.stack([signals_for(t, scheme) for t in tensors])
    got = dwimath.fit_tensor_volume(sig, 1.0, scheme)
    assert np.abs(got - tensors).max() < 1e-10


# -- scalar maps --------------------------------------------------------------

def test_fa_md_isotropic():
    d6 = np.array([1e-3, 0, 0, 1e-3, 0, 1e-3])
    assert fa(d6) == pytest.approx(0.0, abs=1e-12)
    assert md(d6) == pytest.approx(1e-3)


def test_fa_degenerate_prolate_limit():
    assert fa(np.array([1.0, 0, 0, 0.0, 0, 0.0])) == pytest.approx(1.0, abs=1e-12)


def test_fa_known_value():
    d6 = np.array([1.8e-3, 0, 0, 0.3e-3, 0, 0.3e-3])
    # frozen from sqrt(3/2)*||lam - mean||/||lam||
    assert fa(d6) == pytest.approx(0.8111071056538126, abs=1e-12)


def test_fa_rotation_invariant():
    rng = np.random.default_rng(13)
    for _ in range(20):
        d6 = random_spd_tensor(rng)
        r = random_rotation(rng)
        m = dwimath.tensor6_to_matrix(d6)
        rotated = dwimath.matrix_to_tensor6(r @ m @ r.T)
        assert fa(rotated) == pytest.approx(fa(d6), abs=1e-10)
        assert 0.0 <= fa(rotated) <= 1.0


def test_principal_dir_sign_canonical():
    d6 = np.array([1.8e-3, 0, 0, 0.3e-3, 0, 0.3e-3])
    e1 = principal_dir(d6)
    assert np.allclose(e1, [1, 0, 0])  # z=0, y=0 -> x >= 0
    dz = np.array([0.3e-3, 0, 0, 0.3e-3, 0, 1.8e-3])
    assert principal_dir(dz)[2] > 0


def test_principal_dir_zero_tensor_flagged():
    e1, undef = principal_dir(np.zeros(6), with_flag=True)
    assert undef
    assert fa(np.zeros(6)) == 0.0


# -- analytic ODF -------------------------------------------------------------

def test_odf_isotropic_closed_form():
    psi = tensor_to_odf(np.array([1e-3, 0, 0, 1e-3, 0, 1e-3]))
    dirs = fibonacci_directions(50)
    assert np.abs(psi(dirs) - 1.0 / (4 * np.pi)).max() < 1e-12


def test_odf_peaks_along_principal_axis():
    d6 = np.array([1.8e-3, 0, 0, 0.3e-3, 0, 0.3e-3])
    psi = tensor_to_odf(d6)
    assert psi(np.array([1.0, 0, 0])) > psi(np.array([0, 1.0, 0]))
    assert psi(np.array([1.0, 0, 0])) > psi(np.array([0, 0.6, 0.8]))
    # antipodal symmetry
    u = np.array([0.48, -0.6, 0.64])
    u /= np.linalg.norm(u)
    assert psi(u) == pytest.approx(psi(-u), abs=1e-15)


def test_odf_quadrature_unit_mass():
    # Monte Carlo quadrature oracle on an equidistributed 10k-point grid
    rng = np.random.default_rng(21)
    dirs = fibonacci_directions(10000)
    for _ in range(25):
        psi = tensor_to_odf(random_spd_tensor(rng))
        integral = psi(dirs).mean() * 4 * np.pi
        assert integral == pytest.approx(1.0, abs=1e-3)


# -- spherical harmonics ------------------------------------------------------

def test_order8_has_45_coefficients():
    assert n_coeffs(8) == 45
    assert len(sh_index_table(8)) == 45
    assert sh_basis(fibonacci_directions(10)).shape == (10, 45)


def test_constant_function_projects_to_l0_only():
    dirs = fibonacci_directions(100)
    c = project_sh(np.full(100, 1.0 / (4 * np.pi)), dirs)
    assert c[0] == pytest.approx(Y00, abs=1e-12)
    assert np.abs(c[1:]).max() < 1e-12


def test_sh_round_trip_band_limited():
    rng = np.random.default_rng(17)
    coeffs = rng.normal(size=45)
    proj_dirs = fibonacci_directions(100)
    vals = eval_sh(coeffs, proj_dirs)
    back = project_sh(vals, proj_dirs)
    assert np.abs(back - coeffs).max() < 1e-10
    eval_dirs = fibonacci_directions(500)
    err = eval_sh(back, eval_dirs) - eval_sh(coeffs, eval_dirs)
    assert np.abs(err).max() < 1e-10


def test_projection_underdetermined_raises():
    dirs = fibonacci_directions(44)
    with pytest.raises(EstimationError):
        project_sh(np.ones(44), dirs)


def test_basis_orthonormal_under_sphere_measure():
    # Gauss-Legendre x uniform-phi product rule is exact for degree <= 16
    nodes, weights = roots_legendre(20)
    n_phi = 40
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    ct, p = np.meshgrid(nodes, phi, indexing="ij")
    st = np.sqrt(1 - ct**2)
    dirs = np.column_stack([(st * np.cos(p)).ravel(), (st * np.sin(p)).ravel(),
                            ct.ravel()])
    w = np.repeat(weights, n_phi) * (2 * np.pi / n_phi)
    B = sh_basis(dirs)
    gram = (B * w[:, None]).T @ B
    assert np.abs(gram - np.eye(45)).max() < 1e-10


def test_basis_antipodally_symmetric():
    rng = np.random.default_rng(19)
    u = rng.normal(size=(20, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    assert np.abs(sh_basis(u) - sh_basis(-u)).max() < 1e-12


def test_regularized_projection_is_stable_not_exact():
    rng = np.random.default_rng(23)
    coeffs = rng.normal(size=45)
    dirs = fibonacci_directions(100)
    vals = eval_sh(coeffs, dirs)
    back = project_sh(vals, dirs, lb_lambda=1e-6)
    # the ridge biases the recovery (mostly high-l); it must stay small
    assert abs(back[0] - coeffs[0]) < 1e-3
    assert np.abs(back - coeffs).max() < 1e-2


def test_sh_argmax_matches_principal_dir():
    # prolate tensors only: for oblate shapes the ODF maximum is a ring and
    # the argmax is not tied to a single eigenvector
    rng = np.random.default_rng(29)
    dense = fibonacci_directions(20000)
    for _ in range(10):
        lam1 = rng.uniform(1.2e-3, 2.4e-3)
        lam23 = rng.uniform(2e-4, 6e-4, size=2)
        r = random_rotation(rng)
        d6 = dwimath.matrix_to_tensor6(r @ np.diag([lam1, *lam23]) @ r.T)
        assert fa(d6) >= 0.2
        coeffs = tensor_volume_to_odf_sh(d6[None, :])[0]
        peak = dense[np.argmax(eval_sh(coeffs, dense))]
        e1 = principal_dir(d6)
        angle = np.degrees(np.arccos(np.clip(abs(peak @ e1), -1, 1)))
        assert angle < 3.0


def test_odf_sh_volume_isotropic_l0_only():
    d6 = np.array([1e-3, 0, 0, 1e-3, 0, 1e-3])
    coeffs = tensor_volume_to_odf_sh(d6[None, :])[0]
    assert coeffs[0] == pytest.approx(Y00, rel=1e-6)
    assert np.abs(coeffs[1:]).max() < 1e-6


def test_gradient_scheme_validation():
    with pytest.raises(ValueError):
        GradientScheme(np.array([[1.0, 0.1, 0.0]]), np.array([500.0]))
    with pytest.raises(ValueError):
        GradientScheme(np.array([[1.0, 0.0, 0.0]]), np.array([-1.0]))
