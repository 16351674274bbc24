"""von Mises-Fisher distribution on the unit sphere S^2.

Density p(u; mu, kappa) = C(kappa) * exp(kappa * mu . u). Sampling uses
the exact inverse-CDF construction (one uniform for the axial component,
one for the tangent angle), so every draw consumes a fixed number of
random numbers — a requirement for reproducible counter-based streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_INV_4PI = -2.5310242469692907  # log(1/(4*pi)), the kappa->0 limit


@dataclass(frozen=True)
class VmfParams:
    """Mean direction (unit norm) and concentration kappa >= 0."""

    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        if mu.shape != (3,) or abs(np.linalg.norm(mu) - 1.0) > 1e-9:
            raise ValueError("mu must be a 3-vector with unit norm (1e-9)")
        if not np.isfinite(self.kappa) or self.kappa < 0:
            raise ValueError("kappa must be finite and >= 0")
        object.__setattr__(self, "mu", mu)


def log_c(kappa):
    """log of the vMF normalizer C(kappa) = kappa / (4 pi sinh kappa).

    Overflow-safe for arbitrarily large kappa; continuous at kappa=0 where
    it equals log(1/(4 pi)).
    """
    scalar = np.ndim(kappa) == 0
    kappa = np.atleast_1d(np.asarray(kappa, dtype=float))
    if np.any(kappa < 0):
        raise ValueError("kappa must be >= 0")
    out = np.empty_like(kappa)
    small = kappa < 1e-4
    # sinh(k) ~ k (1 + k^2/6): log C ~ -log(4 pi) - k^2/6
    out[small] = LOG_INV_4PI - kappa[small] ** 2 / 6.0
    k = kappa[~small]
    # log sinh(k) = k - log 2 + log1p(-exp(-2k))
    out[~small] = (np.log(k) + LOG_INV_4PI - (k - np.log(2.0) + np.log1p(-np.exp(-2.0 * k))))
    return float(out[0]) if scalar else out


def mean_resultant_length(kappa: float) -> float:
    """E[mu . u] = coth(kappa) - 1/kappa (0 at kappa=0)."""
    if kappa == 0:
        return 0.0
    if kappa > 20:
        return 1.0 - 1.0 / kappa  # coth(k) - 1 < 5e-18 here
    return 1.0 / np.tanh(kappa) - 1.0 / kappa


def angle_quantile(kappa: float, q: float) -> float:
    """Exact q-quantile (radians) of the angle between a draw and mu."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must be in (0, 1)")
    if kappa == 0.0:
        return float(np.arccos(1.0 - 2.0 * q))
    inner = (1.0 - q) + q * np.exp(-2.0 * kappa)
    c = 1.0 + np.log(inner) / kappa
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def sample_axial(kappa, xi):
    """Inverse-CDF draw of w = mu . u from uniforms ``xi`` in [0, 1).

    w = 1 + log(xi + (1 - xi) exp(-2 kappa)) / kappa; the kappa = 0 limit
    is w = 2 xi - 1. Kappa may be a scalar or an array matching xi.
    """
    scalar = np.ndim(xi) == 0
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), xi.shape)
    w = np.empty_like(xi)
    zero = kappa <= 0.0
    w[zero] = 2.0 * xi[zero] - 1.0
    k = kappa[~zero]
    x = xi[~zero]
    with np.errstate(divide="ignore"):
        inner = x + (1.0 - x) * np.exp(-2.0 * k)
        w[~zero] = 1.0 + np.log(inner) / k
    # xi == 0 with huge kappa underflows inner to 0; the exact value is -1
    w[~np.isfinite(w)] = -1.0
    np.clip(w, -1.0, 1.0, out=w)
    return float(w[0]) if scalar else w


def _tangent_frame(mu: np.ndarray):
    """Deterministic orthonormal (t1, t2) spanning the plane normal to mu."""
    mu = np.atleast_2d(mu)
    pick = np.argmin(np.abs(mu), axis=1)
    e = np.zeros_like(mu)
    e[np.arange(len(mu)), pick] = 1.0
    t1 = np.cross(e, mu)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(mu, t1)
    return t1, t2


def sample_from_uniforms(mu, kappa, xi_axial, xi_angle) -> np.ndarray:
    """Deterministic vMF draws from pre-drawn uniforms.

    ``mu`` is (3,) or (n, 3); kappa scalar or (n,). Output rows are unit
    norm to 1e-12.
    """
    mu_arr = np.atleast_2d(np.asarray(mu, dtype=float))
    single = np.asarray(mu).ndim == 1
    n = mu_arr.shape[0]
    w = np.asarray(sample_axial(np.broadcast_to(kappa, (n,)),
                                np.broadcast_to(xi_axial, (n,))))
    phi = 2.0 * np.pi * np.broadcast_to(xi_angle, (n,))
    t1, t2 = _tangent_frame(mu_arr)
    s = np.sqrt(np.maximum(0.0, 1.0 - w * w))
    out = (w[:, None] * mu_arr
           + s[:, None] * (np.cos(phi)[:, None] * t1 + np.sin(phi)[:, None] * t2))
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out[0] if single else out


def sample(params_or_mu, kappa=None, rng: np.random.Generator | None = None,
           size: int | None = None) -> np.ndarray:
    """Draw from vMF(mu, kappa) using ``rng``; two uniforms per sample.

    Accepts either a VmfParams or (mu, kappa). ``size=None`` returns one
    direction, otherwise (size, 3).
    """
    if isinstance(params_or_mu, VmfParams):
        mu, kap = params_or_mu.mu, params_or_mu.kappa
    else:
        mu, kap = np.asarray(params_or_mu, dtype=float), float(kappa)
    if rng is None:
        raise ValueError("an explicit Generator is required for reproducibility")
    n = 1 if size is None else int(size)
    xi = rng.random((n, 2))
    out = sample_from_uniforms(np.broadcast_to(mu, (n, 3)), kap, xi[:, 0], xi[:, 1])
    return out[0] if size is None else out


def kappa_from_fa(fa, alpha: float):
    """Concentration heuristic kappa = alpha * FA^2."""
    fa = np.asarray(fa, dtype=float)
    if np.any((fa < -1e-9) | (fa > 1.0 + 1e-9)):
        raise ValueError("FA must lie in [0, 1]")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    out = alpha * np.clip(fa, 0.0, 1.0) ** 2
    return float(out) if out.ndim == 0 else out


def augment_target(u_ref, kappa: float, rng: np.random.Generator) -> np.ndarray:
    """Jitter a target direction by a vMF draw around it (identity at kappa=inf)."""
    u_ref = np.asarray(u_ref, dtype=float)
    if np.isinf(kappa):
        return u_ref.copy()
    return sample(u_ref, kappa, rng)
