"""Reference estimators: plain LMMSE, genie-aided LMMSE and AMP.

AMP works on the column-normalized operator ``A = H / sqrt(M)`` so that the
usual state-evolution scalings apply; ``x`` keeps its scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy import linalg, stats
from scipy.special import expit, logsumexp

from .errors import ConfigurationError, DomainError
from .lmmse_core import PriorMoments, _cho
from .signal_model import ActiveDistribution, SparsityPrior


def plain_lmmse(H, y, prior: SparsityPrior, moments: PriorMoments, sigma_w_sq):
    """LMMSE of ``x`` under its sparse marginal moments.

    Returns ``(x_hat, mse_pred)`` where ``mse_pred`` is the trace of the
    error covariance.
    """
    if not sigma_w_sq > 0:
        raise DomainError(f"noise variance must be positive, got {sigma_w_sq}")
    lam = prior.lam
    u_s, v_s = np.asarray(moments.u_s, float), np.asarray(moments.v_s, float)
    u_x = lam * u_s
    var_x = np.maximum(lam * (v_s + u_s**2) - u_x**2, 0.0)
    if not np.any(var_x > 0):
        return u_x.copy(), 0.0
    HV = H * var_x
    C = HV @ H.T
    C[np.diag_indices_from(C)] += sigma_w_sq
    cf = _cho(C)
    x_hat = u_x + HV.T @ linalg.cho_solve(cf, y - H @ u_x, check_finite=False)
    K = linalg.solve_triangular(cf[0], HV, lower=True, check_finite=False)
    mse_pred = float(var_x.sum() - np.einsum("ij,ij->", K, K))
    return x_hat, max(mse_pred, 0.0)


def genie_mmse(H, y, support, moments: PriorMoments, sigma_w_sq):
    """LMMSE on the true support, zeros elsewhere.

    Exact MMSE when the active values are Gaussian.  Returns
    ``(x_hat, mse_pred)`` with ``mse_pred = trace((H_L^T H_L / sigma^2 + V_L^-1)^-1)``.
    """
    if not sigma_w_sq > 0:
        raise DomainError(f"noise variance must be positive, got {sigma_w_sq}")
    n = H.shape[1]
    idx = np.asarray(support, dtype=int)
    x_hat = np.zeros(n)
    if idx.size == 0:
        return x_hat, 0.0
    HL = H[:, idx]
    u = np.asarray(moments.u_s, float)[idx]
    v = np.asarray(moments.v_s, float)[idx]
    J = HL.T @ HL / sigma_w_sq
    J[np.diag_indices_from(J)] += 1.0 / v
    jf = _cho(J)
    # information form: s = u + J^-1 H_L^T (y - H_L u) / sigma^2
    x_hat[idx] = u + linalg.cho_solve(jf, HL.T @ (y - HL @ u) / sigma_w_sq, check_finite=False)
    Linv = linalg.solve_triangular(jf[0], np.eye(idx.size), lower=True, check_finite=False)
    mse_pred = float(np.einsum("ij,ij->", Linv, Linv))
    return x_hat, mse_pred


# -- scalar denoisers ---------------------------------------------------------


def bg_denoiser(r, tau_sq, lam, mean, variance):
    """Posterior mean and variance of ``x ~ (1-lam) delta_0 + lam N(mean, variance)``
    observed as ``r = x + N(0, tau_sq)``.  Works elementwise on arrays."""
    if np.any(np.asarray(tau_sq) <= 0):
        raise DomainError("tau_sq must be positive")
    r = np.asarray(r, dtype=float)
    tau_sq = np.asarray(tau_sq, dtype=float)
    if lam <= 0.0:
        return np.zeros_like(r), np.zeros_like(r)
    s1 = variance + tau_sq
    m1 = (r * variance + mean * tau_sq) / s1
    v1 = variance * tau_sq / s1
    if lam >= 1.0:
        return m1, v1 + np.zeros_like(r)
    llr = (
        math.log(lam / (1.0 - lam))
        - 0.5 * np.log(s1 / tau_sq)
        - (r - mean) ** 2 / (2.0 * s1)
        + r**2 / (2.0 * tau_sq)
    )
    pi = expit(llr)
    post_mean = pi * m1
    post_var = pi * (v1 + m1**2) - post_mean**2
    return post_mean, np.maximum(post_var, 0.0)


def _prior_window(active: ActiveDistribution):
    """Interval carrying all but ~1e-14 of the active density."""
    if active.kind == "gaussian":
        sd = math.sqrt(active.variance)
        return active.loc - 12.0 * sd, active.loc + 12.0 * sd
    return 0.0, float(stats.chi2.isf(1e-14, active.dof))


def general_denoiser(r, tau_sq, lam, active: ActiveDistribution, nodes=64):
    """Bernoulli-mixture posterior mean/variance by Gauss-Legendre quadrature.

    The active integral runs over the part of the prior window within 12
    noise deviations of the observation, in the log domain.  Chi-square
    values are integrated in ``t = sqrt(s)``, which removes the ``s^(k/2-1)``
    behaviour at the origin.
    """
    r = np.atleast_1d(np.asarray(r, dtype=float))
    tau_sq = np.broadcast_to(np.asarray(tau_sq, dtype=float), r.shape)
    if np.any(tau_sq <= 0):
        raise DomainError("tau_sq must be positive")
    if lam <= 0.0:
        return np.zeros_like(r), np.zeros_like(r)
    if active.kind == "gaussian" and active.variance == 0.0:
        return bg_denoiser(r, tau_sq, lam, active.loc, 0.0)

    tau = np.sqrt(tau_sq)
    lo, hi = _prior_window(active)
    c = np.clip(r, lo, hi)
    a = np.maximum(lo, c - 12.0 * tau)
    b = np.minimum(hi, c + 12.0 * tau)
    g, gw = np.polynomial.legendre.leggauss(nodes)

    if active.kind == "chisquare":
        ta, tb = np.sqrt(a), np.sqrt(b)
        t = 0.5 * (tb - ta)[:, None] * g + 0.5 * (tb + ta)[:, None]
        s = t**2
        jac = np.log(0.5 * (tb - ta))[:, None] + np.log(2.0 * t)
        logf = stats.chi2.logpdf(s, active.dof)
    else:
        s = 0.5 * (b - a)[:, None] * g + 0.5 * (b + a)[:, None]
        jac = np.log(0.5 * (b - a))[:, None] + np.zeros_like(s)
        logf = stats.norm.logpdf(s, active.loc, math.sqrt(active.variance))

    loglik = -((r[:, None] - s) ** 2) / (2.0 * tau_sq[:, None]) - 0.5 * np.log(2 * np.pi * tau_sq[:, None])
    logw = logf + loglik + jac + np.log(gw)
    log_z1 = logsumexp(logw, axis=1)
    wts = np.exp(logw - log_z1[:, None])
    m1 = np.sum(wts * s, axis=1)
    v1 = np.maximum(np.sum(wts * s**2, axis=1) - m1**2, 0.0)

    log_z0 = -(r**2) / (2.0 * tau_sq) - 0.5 * np.log(2 * np.pi * tau_sq)
    if lam >= 1.0:
        pi = np.ones_like(r)
    else:
        pi = expit(math.log(lam / (1.0 - lam)) + log_z1 - log_z0)
    post_mean = pi * m1
    post_var = np.maximum(pi * (v1 + m1**2) - post_mean**2, 0.0)
    return post_mean, post_var


@dataclass(frozen=True)
class DenoiserSpec:
    kind: str  # "bernoulli_gaussian" or "bernoulli_general"
    lam: float
    active: ActiveDistribution = field(default_factory=ActiveDistribution)
    quadrature_nodes: int = 64

    def __post_init__(self):
        if self.kind not in ("bernoulli_gaussian", "bernoulli_general"):
            raise ConfigurationError(f"unknown denoiser kind {self.kind!r}")
        if self.kind == "bernoulli_gaussian" and self.active.kind != "gaussian":
            raise ConfigurationError("the closed-form denoiser needs Gaussian active values")
        if self.kind == "bernoulli_general" and self.quadrature_nodes < 8:
            raise ConfigurationError("quadrature_nodes must be >= 8")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError("sparsity ratio must lie in [0, 1]")

    @classmethod
    def for_prior(cls, prior: SparsityPrior, quadrature_nodes=64):
        kind = "bernoulli_gaussian" if prior.active.kind == "gaussian" else "bernoulli_general"
        return cls(kind, prior.lam, prior.active, quadrature_nodes)

    def __call__(self, r, tau_sq):
        if self.kind == "bernoulli_gaussian":
            return bg_denoiser(r, tau_sq, self.lam, self.active.loc, self.active.variance)
        return general_denoiser(r, tau_sq, self.lam, self.active, self.quadrature_nodes)


# -- AMP ---------------------------------------------------------------------


@dataclass
class AmpResult:
    x_hat: np.ndarray
    trajectory: List[np.ndarray]
    tau_sq: List[float]
    residual_norms: List[float]
    diverged: bool = False


def amp_estimate(H, y, denoiser: DenoiserSpec, iterations=20, tau_floor=1e-30) -> AmpResult:
    """AMP with Onsager correction and empirical noise estimate ``||z||^2 / M``.

    Divergence (residual norm 10x larger than five iterations earlier) stops
    the recursion and is flagged on the result; the last finite estimate is
    returned and repeated for the remaining iterations.
    """
    if iterations < 1:
        raise ConfigurationError("iterations must be >= 1")
    m, n = H.shape
    scale = math.sqrt(m)
    A = H / scale
    yy = np.asarray(y, dtype=float) / scale
    delta = m / n

    x_hat = np.zeros(n)
    z = yy.copy()
    onsager = 0.0
    trajectory, taus, norms = [], [], []
    diverged = False
    for _ in range(iterations):
        z = yy - A @ x_hat + onsager * z
        tau_sq = max(float(z @ z) / m, tau_floor)
        norms.append(math.sqrt(float(z @ z)))
        if not math.isfinite(tau_sq) or (len(norms) > 5 and norms[-1] > 10.0 * norms[-6]):
            diverged = True
            break
        r = x_hat + A.T @ z
        x_new, v_post = denoiser(r, tau_sq)
        if not np.all(np.isfinite(x_new)):
            diverged = True
            break
        # mean denoiser derivative is the average posterior variance over tau^2
        onsager = float(np.mean(v_post)) / tau_sq / delta
        x_hat = x_new
        trajectory.append(x_hat.copy())
        taus.append(tau_sq)
    while len(trajectory) < iterations:
        trajectory.append(x_hat.copy())
    return AmpResult(x_hat, trajectory, taus, norms, diverged)
