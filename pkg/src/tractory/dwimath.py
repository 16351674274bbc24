"""Diffusion-tensor estimation, scalar maps, analytic diffusion ODF,
and the real even spherical-harmonic basis of order 8 (45 coefficients).

Tensor layout
-------------
Tensors travel as 6-vectors ``(Dxx, Dxy, Dxz, Dyy, Dyz, Dzz)`` in mm^2/s.

Spherical-harmonic convention
-----------------------------
Real, antipodally symmetric basis over even degrees l in {0,2,4,6,8},
orthonormal under the unprojected sphere measure (integral of Y_i*Y_j
over S^2 equals delta_ij). Coefficient raster order: l ascending, m from
-l to +l within each l. For m<0 the basis function varies as sin(|m|*phi),
for m>0 as cos(m*phi); the Condon-Shortley phase of the associated
Legendre functions is kept. Index of (l, m): offset(l) + (m + l) with
offset(0,2,4,6,8) = (0, 1, 6, 15, 28).
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.special import lpmv

from .errors import EstimationError
from .volume import Volume

SH_ORDER = 8
N_SH_COEFFS = 45


class GradientScheme:
    """Diffusion gradient directions and b-values (s/mm^2)."""

    def __init__(self, directions, bvals):
        directions = np.asarray(directions, dtype=float)
        bvals = np.asarray(bvals, dtype=float)
        if directions.ndim != 2 or directions.shape[1] != 3:
            raise ValueError("directions must be (n, 3)")
        if bvals.shape != (directions.shape[0],):
            raise ValueError("bvals must match directions")
        norms = np.linalg.norm(directions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("gradient directions must be unit norm (1e-9)")
        if np.any(bvals < 0):
            raise ValueError("b-values must be nonnegative")
        self.directions = directions
        self.bvals = bvals

    def __len__(self):
        return len(self.bvals)

    @classmethod
    def uniform(cls, n: int, bval: float) -> "GradientScheme":
        """``n`` spiral-distributed directions at a single b-value."""
        return cls(fibonacci_directions(n), np.full(n, float(bval)))


def fibonacci_directions(n: int) -> np.ndarray:
    """Well-spread unit vectors from the spherical Fibonacci spiral."""
    i = np.arange(n, dtype=float) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = i * (np.pi * (3.0 - np.sqrt(5.0)))
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def tensor6_to_matrix(d6) -> np.ndarray:
    d6 = np.asarray(d6, dtype=float)
    dxx, dxy, dxz, dyy, dyz, dzz = np.moveaxis(d6, -1, 0)
    m = np.empty(d6.shape[:-1] + (3, 3))
    m[..., 0, 0] = dxx
    m[..., 0, 1] = m[..., 1, 0] = dxy
    m[..., 0, 2] = m[..., 2, 0] = dxz
    m[..., 1, 1] = dyy
    m[..., 1, 2] = m[..., 2, 1] = dyz
    m[..., 2, 2] = dzz
    return m


def matrix_to_tensor6(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 0, 0], m[..., 0, 1], m[..., 0, 2],
                     m[..., 1, 1], m[..., 1, 2], m[..., 2, 2]], axis=-1)


def design_matrix(scheme: GradientScheme) -> np.ndarray:
    """Rows of b * (gx^2, 2 gx gy, 2 gx gz, gy^2, 2 gy gz, gz^2)."""
    g = scheme.directions
    b = scheme.bvals[:, None]
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    cols = np.column_stack([gx * gx, 2 * gx * gy, 2 * gx * gz,
                            gy * gy, 2 * gy * gz, gz * gz])
    return b * cols


def fit_tensor_lls(signals, s0: float, scheme: GradientScheme) -> np.ndarray:
    """Log-linear least-squares tensor fit from per-direction signals.

    Minimizes the squared error of ln(S/S0) = -b g^T D g. Nonpositive
    signals are clamped to 1e-8 with a warning; a rank-deficient design
    (fewer than 6 independent directions) raises EstimationError.
    """
    signals = np.asarray(signals, dtype=float)
    if signals.shape != (len(scheme),):
        raise ValueError("signals must match the gradient scheme")
    A = design_matrix(scheme)
    if np.linalg.matrix_rank(A) < 6:
        raise EstimationError(
            "rank-deficient design matrix; need >= 6 non-collinear b>0 directions")
    if np.any(signals <= 0):
        warnings.warn("nonpositive signals clamped to 1e-8 before log transform")
        signals = np.maximum(signals, 1e-8)
    y = -np.log(signals / float(s0))
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef


def fit_tensor_volume(signalvol: np.ndarray, s0, scheme: GradientScheme) -> np.ndarray:
    """Vectorized LLS fit: ``signalvol`` (..., n_dirs) -> tensors (..., 6)."""
    A = design_matrix(scheme)
    if np.linalg.matrix_rank(A) < 6:
        raise EstimationError("rank-deficient design matrix")
    pinv = np.linalg.pinv(A)
    sig = np.maximum(np.asarray(signalvol, dtype=float), 1e-8)
    y = -np.log(sig / np.asarray(s0, dtype=float)[..., None]
                if np.ndim(s0) else sig / float(s0))
    return y @ pinv.T


def eigenvalues(d6) -> np.ndarray:
    """Ascending eigenvalues of the tensor(s)."""
    return np.linalg.eigvalsh(tensor6_to_matrix(d6))


def is_valid_tensor(d6, tol: float = -1e-12) -> bool:
    return bool(np.all(eigenvalues(d6) >= tol))


def md(d6) -> float | np.ndarray:
    d6 = np.asarray(d6, dtype=float)
    out = (d6[..., 0] + d6[..., 3] + d6[..., 5]) / 3.0
    return float(out) if out.ndim == 0 else out


def fa(d6) -> float | np.ndarray:
    """Fractional anisotropy sqrt(3/2)*||lambda - mean||/||lambda||, in [0, 1].

    Negative eigenvalues are clamped to 0 first (invalid-tensor policy).
    """
    lam = np.maximum(eigenvalues(d6), 0.0)
    mean = lam.mean(axis=-1, keepdims=True)
    num = np.linalg.norm(lam - mean, axis=-1)
    den = np.linalg.norm(lam, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, np.sqrt(1.5) * num / np.maximum(den, 1e-300), 0.0)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def principal_dir(d6, with_flag: bool = False):
    """Unit eigenvector of the largest eigenvalue, sign-canonicalized.

    The sign is chosen so z >= 0; if z == 0, so y >= 0; if y == 0 too,
    so x >= 0. A zero tensor yields an undefined direction (flag True).
    """
    m = tensor6_to_matrix(d6)
    w, v = np.linalg.eigh(m)
    e1 = v[..., :, -1]
    e1 = canonicalize_sign(e1)
    undefined = np.all(np.abs(np.asarray(d6)) < 1e-300, axis=-1)
    if with_flag:
        return e1, undefined
    return e1


def canonicalize_sign(vecs: np.ndarray) -> np.ndarray:
    """Flip vectors so that z >= 0 (ties: y >= 0, then x >= 0)."""
    single = np.ndim(vecs) == 1
    v = np.atleast_2d(np.array(vecs, dtype=float, copy=True))
    z, y, x = v[..., 2], v[..., 1], v[..., 0]
    flip = (z < 0) | ((z == 0) & (y < 0)) | ((z == 0) & (y == 0) & (x < 0))
    v[flip] *= -1.0
    return v[0] if single else v


def tensor_to_odf(d6):
    """Analytic Gaussian diffusion ODF of the tensor as a callable psi(u).

    psi(u) = (u^T D^{-1} u)^{-3/2} / (4 pi sqrt(det D)); integrates to 1
    over the sphere and is antipodally symmetric. Eigenvalues below
    1e-6 * MD are clamped before inversion; a tensor still singular after
    clamping falls back to the uniform density 1/(4 pi) with a warning.
    """
    m = tensor6_to_matrix(np.asarray(d6, dtype=float))
    w, v = np.linalg.eigh(m)
    mean_diff = max(np.sum(w) / 3.0, 0.0)
    floor = 1e-6 * mean_diff
    w = np.maximum(w, floor)
    if np.any(w <= 0):
        warnings.warn("singular tensor after clamping; isotropic ODF fallback")
        return lambda u: np.full(np.atleast_2d(u).shape[0] if np.ndim(u) > 1 else (),
                                 1.0 / (4.0 * np.pi))
    inv = (v / w) @ v.T
    det = float(np.prod(w))
    norm = 1.0 / (4.0 * np.pi * np.sqrt(det))

    def psi(u):
        u = np.asarray(u, dtype=float)
        quad = np.einsum("...i,ij,...j->...", u, inv, u)
        return norm * quad ** -1.5

    return psi


# -- spherical harmonics -----------------------------------------------------

def sh_index_table(order: int = SH_ORDER):
    """The (l, m) pairs in coefficient raster order."""
    return [(l, m) for l in range(0, order + 1, 2) for m in range(-l, l + 1)]


def n_coeffs(order: int = SH_ORDER) -> int:
    return (order + 1) * (order + 2) // 2


def sh_basis(dirs, order: int = SH_ORDER) -> np.ndarray:
    """Evaluate the real even SH basis at unit vectors ``dirs`` -> (n, 45)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    ct = np.clip(dirs[:, 2], -1.0, 1.0)
    phi = np.arctan2(dirs[:, 1], dirs[:, 0])
    out = np.empty((dirs.shape[0], n_coeffs(order)))
    col = 0
    for l in range(0, order + 1, 2):
        for m in range(-l, l + 1):
            am = abs(m)
            # lpmv keeps the Condon-Shortley phase
            plm = lpmv(am, l, ct)
            norm = np.sqrt((2 * l + 1) / (4.0 * np.pi)
                           * _factorial_ratio(l - am, l + am))
            if m < 0:
                out[:, col] = np.sqrt(2.0) * norm * plm * np.sin(am * phi)
            elif m == 0:
                out[:, col] = norm * plm
            else:
                out[:, col] = np.sqrt(2.0) * norm * plm * np.cos(am * phi)
            col += 1
    return out


def _factorial_ratio(a: int, b: int) -> float:
    """(a)! / (b)! for b >= a, computed stably."""
    out = 1.0
    for k in range(a + 1, b + 1):
        out /= k
    return out


def sh_laplace_beltrami(order: int = SH_ORDER) -> np.ndarray:
    """Diagonal of the Laplace-Beltrami penalty, (l(l+1))^2 per coefficient."""
    return np.array([(l * (l + 1)) ** 2 for l, _ in sh_index_table(order)], dtype=float)


def project_sh(values, dirs, order: int = SH_ORDER, lb_lambda: float = 0.0) -> np.ndarray:
    """Least-squares SH coefficients of samples ``values`` taken at ``dirs``.

    ``values`` may be (n,) for one function or (..., n) for a stack.
    ``lb_lambda`` adds a Laplace-Beltrami ridge for noisy data; the default
    0 reproduces band-limited functions to machine precision.
    """
    values = np.asarray(values, dtype=float)
    nc = n_coeffs(order)
    P = project_projection_matrix(dirs, order, lb_lambda)
    flat = values.reshape(-1, values.shape[-1])
    coeffs = flat @ P.T
    return coeffs.reshape(values.shape[:-1] + (nc,))


def eval_sh(coeffs, dirs) -> np.ndarray:
    """Evaluate SH coefficients at unit vectors."""
    coeffs = np.asarray(coeffs, dtype=float)
    order = _order_for(coeffs.shape[-1])
    B = sh_basis(dirs, order)
    out = coeffs @ B.T
    return out


def _order_for(nc: int) -> int:
    for order in range(0, 17, 2):
        if n_coeffs(order) == nc:
            return order
    raise ValueError(f"{nc} is not a valid even-order SH coefficient count")


def project_projection_matrix(dirs, order: int = SH_ORDER,
                              lb_lambda: float = 0.0) -> np.ndarray:
    """Matrix P with coeffs = P @ values, for repeated projections on fixed dirs."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    nc = n_coeffs(order)
    if dirs.shape[0] < nc:
        raise EstimationError("projection underdetermined")
    B = sh_basis(dirs, order)
    if lb_lambda > 0.0:
        reg = np.diag(lb_lambda * sh_laplace_beltrami(order))
        return np.linalg.solve(B.T @ B + reg, B.T)
    return np.linalg.pinv(B)


DEFAULT_PROJECTION_DIRS = 100


def tensor_volume_to_odf_sh(tensors: np.ndarray,
                            n_dirs: int = DEFAULT_PROJECTION_DIRS,
                            order: int = SH_ORDER) -> np.ndarray:
    """SH coefficients of the analytic ODF for a whole tensor field.

    ``tensors`` is (..., 6); returns (..., 45). Eigenvalues are clamped to
    1e-6 * MD (with a global floor for void voxels) before inversion.
    """
    tensors = np.asarray(tensors, dtype=float)
    lead = tensors.shape[:-1]
    m = tensor6_to_matrix(tensors.reshape(-1, 6))
    w, v = np.linalg.eigh(m)
    mean_diff = np.maximum(w.sum(axis=1) / 3.0, 1e-12)
    w = np.maximum(w, 1e-6 * mean_diff[:, None])
    inv = np.einsum("nij,nj,nkj->nik", v, 1.0 / w, v)
    det = np.prod(w, axis=1)
    dirs = fibonacci_directions(n_dirs)
    quad = np.einsum("nij,di,dj->nd", inv, dirs, dirs)
    psi = quad ** -1.5 / (4.0 * np.pi * np.sqrt(det))[:, None]
    P = project_projection_matrix(dirs, order)
    coeffs = psi @ P.T
    return coeffs.reshape(lead + (n_coeffs(order),))


def fa_volume(tensors: np.ndarray, spacing, affine=None) -> Volume:
    """FA map of a tensor field (..., 6) as a 1-channel float32 volume."""
    return Volume(fa(tensors).astype(np.float32)[..., None], spacing=spacing,
                  affine=affine)
