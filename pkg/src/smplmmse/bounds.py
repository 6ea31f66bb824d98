"""Closed-form MSE bounds, their large-system limit and an interlacing check."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .baselines import genie_mmse, plain_lmmse
from .errors import DomainError, NumericalDegeneracyError
from .lmmse_core import PriorMoments
from .signal_model import SparsityPrior

INTERLACING_SLACK = 1e-8


@dataclass(frozen=True)
class BoundReport:
    upper_lmmse: float
    lower_genie: float
    prop1_trace: float
    alpha: float
    asymptote: float

    def __post_init__(self):
        for name in ("upper_lmmse", "lower_genie", "prop1_trace", "alpha", "asymptote"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val >= 0):
                raise DomainError(f"{name} must be finite and non-negative, got {val}")


def lemma1_upper(H, prior: SparsityPrior, moments: PriorMoments, sigma_w_sq) -> float:
    """Error-covariance trace of the LMMSE of x (sum over entries)."""
    if prior.lam == 0.0:
        return 0.0
    _, mse_pred = plain_lmmse(H, np.zeros(H.shape[0]), prior, moments, sigma_w_sq)
    return mse_pred


def lemma2_lower(H, support, moments: PriorMoments, sigma_w_sq) -> float:
    """Error-covariance trace of the genie LMMSE on the true support."""
    if len(support) == 0:
        return 0.0
    _, mse_pred = genie_mmse(H, np.zeros(H.shape[0]), support, moments, sigma_w_sq)
    return mse_pred


def prop1_trace(H, support, snr, sigma_w_sq) -> float:
    """``sigma^-2 * trace((H_L^T H_L + I / snr)^-1)``, evaluated as written."""
    if not snr > 0:
        raise DomainError(f"snr must be positive, got {snr}")
    idx = np.asarray(support, dtype=int)
    if idx.size == 0:
        return 0.0
    HL = H[:, idx]
    A = HL.T @ HL
    A[np.diag_indices_from(A)] += 1.0 / snr
    try:
        c, low = linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericalDegeneracyError(f"singular restricted Gram matrix: {exc}") from exc
    Linv = linalg.solve_triangular(c, np.eye(idx.size), lower=True, check_finite=False)
    return float(np.einsum("ij,ij->", Linv, Linv)) / sigma_w_sq


def lemma4_asymptote(alpha, sigma_w_sq) -> float:
    """Large-system limit ``alpha / sigma^2`` of :func:`prop1_trace` in its stated form."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha / sigma_w_sq


def _check_psd(V, name):
    V = np.asarray(V, dtype=float)
    if V.ndim != 2 or V.shape[0] != V.shape[1]:
        raise DomainError(f"{name} must be square")
    if not np.allclose(V, V.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(V).max(initial=0.0))):
        raise DomainError(f"{name} must be symmetric")
    ev = np.linalg.eigvalsh(V)
    if ev.size and ev[0] < -1e-10 * max(1.0, abs(ev[-1])):
        raise DomainError(f"{name} is not positive semidefinite")
    return ev


def check_interlacing(V_full, V_restricted) -> bool:
    """Cauchy interlacing ``l_k >= m_k >= l_{k+1}`` (descending order).

    For an L x L principal block of an N x N matrix the right-hand
    inequality only binds up to ``k = L`` with ``l_{k + N - L}``; the usual
    statement is checked in that general form, with 1e-8 relative slack.
    """
    lam = _check_psd(V_full, "V_full")[::-1]
    mu = _check_psd(V_restricted, "V_restricted")[::-1]
    n, l = lam.size, mu.size
    if l > n:
        raise DomainError("restricted matrix is larger than the full one")
    tol = INTERLACING_SLACK * max(1.0, abs(lam[0]) if n else 1.0)
    for k in range(l):
        if mu[k] > lam[k] + tol:
            return False
        if mu[k] < lam[k + n - l] - tol:
            return False
    return True


def bound_report(H, support, prior: SparsityPrior, moments: PriorMoments, sigma_w_sq, snr) -> BoundReport:
    m = H.shape[0]
    alpha = len(support) / m
    return BoundReport(
        upper_lmmse=lemma1_upper(H, prior, moments, sigma_w_sq),
        lower_genie=lemma2_lower(H, support, moments, sigma_w_sq),
        prop1_trace=prop1_trace(H, support, snr, sigma_w_sq),
        alpha=alpha,
        asymptote=lemma4_asymptote(min(alpha, 1.0), sigma_w_sq),
    )
