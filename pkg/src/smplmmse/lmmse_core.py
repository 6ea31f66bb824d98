"""Support-aware LMMSE estimation of the value vector ``s``.

Given soft activity probabilities ``b_hat`` the measurement model is treated
as ``y = G s + w`` with ``G = H diag(b_hat)`` and ``s`` estimated linearly
from its prior mean and (diagonal) covariance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import DomainError, NumericalDegeneracyError


@dataclass(frozen=True)
class PriorMoments:
    u_s: np.ndarray  # prior mean of s, length N
    v_s: np.ndarray  # diagonal of the prior covariance of s, length N

    def __post_init__(self):
        if np.any(np.asarray(self.v_s) <= 0):
            raise DomainError("prior variances of s must be strictly positive")

    @classmethod
    def iid(cls, n: int, mean: float, variance: float) -> "PriorMoments":
        return cls(np.full(n, float(mean)), np.full(n, float(variance)))

    @classmethod
    def from_prior(cls, prior, n: int) -> "PriorMoments":
        return cls.iid(n, prior.active.mean, prior.active.var)


@dataclass(frozen=True)
class ValueEstimate:
    s_hat: np.ndarray
    v_diag: np.ndarray
    V_hat: Optional[np.ndarray] = None


def _cho(C):
    if not np.all(np.isfinite(C)):
        raise NumericalDegeneracyError("non-finite entries in matrix to factorize")
    try:
        return linalg.cho_factor(C, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericalDegeneracyError(f"Cholesky factorization failed: {exc}") from exc


def lmmse_values(H, y, b_hat, prior: PriorMoments, sigma_w_sq, full_cov=False) -> ValueEstimate:
    """LMMSE estimate of ``s`` and its error variances.

    The gain is computed through an M x M Cholesky solve.  With
    ``full_cov=True`` the N x N error covariance is formed in information
    form ``(G^T G / sigma^2 + V_s^{-1})^{-1}``; otherwise only its diagonal
    is produced, via the equivalent M-space expression.
    """
    if not sigma_w_sq > 0:
        raise DomainError(f"noise variance must be positive, got {sigma_w_sq}")
    u, v = prior.u_s, prior.v_s
    G = H * np.asarray(b_hat, dtype=float)
    GV = G * v
    C = GV @ G.T
    C[np.diag_indices_from(C)] += sigma_w_sq
    cf = _cho(C)

    innovation = y - G @ u
    s_hat = u + GV.T @ linalg.cho_solve(cf, innovation, check_finite=False)

    if full_cov:
        J = G.T @ G / sigma_w_sq
        J[np.diag_indices_from(J)] += 1.0 / v
        V_hat = linalg.cho_solve(_cho(J), np.eye(len(v)), check_finite=False)
        V_hat = 0.5 * (V_hat + V_hat.T)
        v_diag = np.diag(V_hat).copy()
    else:
        V_hat = None
        K = linalg.solve_triangular(cf[0], GV, lower=True, check_finite=False)
        v_diag = v - np.einsum("ij,ij->j", K, K)
    v_diag = np.clip(v_diag, 0.0, v)
    return ValueEstimate(s_hat, v_diag, V_hat)


def _isotropic(prior: PriorMoments) -> float:
    v = np.asarray(prior.v_s)
    if not np.allclose(v, v[0], rtol=1e-12, atol=0):
        raise DomainError("SNR forms need an isotropic prior covariance v * I")
    return float(v[0])


def lmmse_values_snr_form(H, y, b_hat, prior: PriorMoments, snr, form="high") -> ValueEstimate:
    """SNR-parameterized rewrites of :func:`lmmse_values`.

    Here ``snr`` is the per-entry ratio ``v / sigma_w_sq`` for a prior
    covariance ``v * I``; under that scaling both forms equal
    ``lmmse_values(..., sigma_w_sq=v / snr)``.

    ``form="high"`` regularizes ``G G^T`` by ``1/snr`` and suits snr -> inf;
    ``form="low"`` scales ``G`` by ``snr`` and suits snr -> 0.
    Both return the full covariance.
    """
    if not snr > 0:
        raise DomainError(f"snr must be positive, got {snr}")
    v = _isotropic(prior)
    u = prior.u_s
    G = H * np.asarray(b_hat, dtype=float)
    m, n = G.shape
    innovation = y - G @ u

    if form == "high":
        C = G @ G.T + np.eye(m) / snr
        s_hat = u + G.T @ linalg.cho_solve(_cho(C), innovation, check_finite=False)
        J = G.T @ G / v + np.eye(n) / (snr * v)
        V_hat = linalg.cho_solve(_cho(J), np.eye(n), check_finite=False) / snr
    elif form == "low":
        C = snr * (G @ G.T) + np.eye(m)
        cf = _cho(C)
        s_hat = u + snr * (G.T @ linalg.cho_solve(cf, innovation, check_finite=False))
        V_hat = v * np.eye(n) - v * snr * (G.T @ linalg.cho_solve(cf, G, check_finite=False))
    else:
        raise DomainError(f"unknown form {form!r}")
    V_hat = 0.5 * (V_hat + V_hat.T)
    return ValueEstimate(s_hat, np.diag(V_hat).copy(), V_hat)


def lmmse_mse(V_hat) -> float:
    return float(np.trace(V_hat))


@dataclass(frozen=True)
class CavityEstimate:
    """Per-entry view of the data with entry n's own prior removed.

    ``r[n]`` and ``tau_sq[n]`` describe what the measurements say about the
    coefficient of column ``n`` (at full weight) when every other entry keeps
    its weighted prior; ``s_cond`` and ``v_cond`` combine that with the prior
    of ``s`` and are the value estimate given that entry ``n`` is active.
    """

    r: np.ndarray
    tau_sq: np.ndarray
    s_cond: np.ndarray
    v_cond: np.ndarray


def cavity_values(H, y, weights, prior: PriorMoments, sigma_w_sq, switch=0.5) -> CavityEstimate:
    """Leave-one-prior-out LMMSE statistics for every column of ``H``.

    Entries whose own column carries little of the innovation covariance
    use the rank-one downdate of the M x M solve.  For the rest that
    downdate cancels catastrophically at high SNR, so their data precision
    is read off the N x N information matrix instead.
    """
    if not sigma_w_sq > 0:
        raise DomainError(f"noise variance must be positive, got {sigma_w_sq}")
    u, v = prior.u_s, prior.v_s
    w = np.asarray(weights, dtype=float)
    G = H * w
    C = (G * v) @ G.T
    C[np.diag_indices_from(C)] += sigma_w_sq
    cf = _cho(C)
    z = y - G @ u
    Lh = linalg.solve_triangular(cf[0], H, lower=True, check_finite=False)
    a = np.einsum("ij,ij->j", Lh, Lh)
    c = H.T @ linalg.cho_solve(cf, z, check_finite=False)

    load = v * w**2 * a
    prec = np.zeros_like(a)  # cavity precision of the full-weight coefficient
    r = np.zeros_like(a)
    easy = (load < switch) | (w == 0)
    den = 1.0 - load[easy]
    prec[easy] = a[easy] / den
    with np.errstate(divide="ignore", invalid="ignore"):
        r[easy] = np.where(a[easy] > 0, c[easy] / a[easy], 0.0) + w[easy] * u[easy]

    hard = np.flatnonzero(~easy)
    if hard.size:
        J = G.T @ G / sigma_w_sq
        J[np.diag_indices_from(J)] += 1.0 / v
        jf = _cho(J)
        s_post = u + (G * v).T @ linalg.cho_solve(cf, z, check_finite=False)
        E = np.zeros((len(v), hard.size))
        E[hard, np.arange(hard.size)] = 1.0
        P_cols = linalg.cho_solve(jf, E, check_finite=False)
        p_nn = P_cols[hard, np.arange(hard.size)]
        d = 1.0 / p_nn - 1.0 / v[hard]  # data precision on s_n at weight w_n
        if np.any(d <= 0):
            raise NumericalDegeneracyError("non-positive data precision in cavity computation")
        rho = s_post[hard] + (s_post[hard] - u[hard]) / (v[hard] * d)
        prec[hard] = d / w[hard] ** 2
        r[hard] = w[hard] * rho

    with np.errstate(divide="ignore"):
        tau_sq = np.where(prec > 0, 1.0 / np.where(prec > 0, prec, 1.0), np.inf)
    finite = np.isfinite(tau_sq)
    s_cond = u.astype(float).copy()
    v_cond = v.astype(float).copy()
    t = tau_sq[finite]
    s_cond[finite] = (r[finite] * v[finite] + u[finite] * t) / (v[finite] + t)
    v_cond[finite] = v[finite] * t / (v[finite] + t)
    r = np.where(finite, r, u)
    return CavityEstimate(r, tau_sq, s_cond, v_cond)
