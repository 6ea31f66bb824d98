"""Sparse message passing (SMP) support detector.

Loopy belief propagation on the bipartite graph between measurements (sum
nodes) and signal entries (variable nodes).  Each edge carries the LLR that
entry ``n`` is active.  At a sum node the interference from all other
entries plus noise is replaced by a Gaussian with matched mean and
variance, so the detector only needs the current value estimates
``(s_hat, v_s_hat)``, the sparsity ratio and the noise level.

Every per-edge "all others" sum is computed as a row/column total minus the
edge's own term, which keeps a sweep at O(MN).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .errors import DomainError, NumericalDegeneracyError


@dataclass(frozen=True)
class DetectorConfig:
    max_iterations: int = 15
    llr_clamp: float = 30.0
    convergence_tol: float = 1e-4
    damping: float = 0.0  # weight of the previous variable-to-sum message

    def __post_init__(self):
        if self.max_iterations < 1:
            raise DomainError("max_iterations must be >= 1")
        if not (self.llr_clamp > 0 and math.isfinite(self.llr_clamp)):
            raise DomainError("llr_clamp must be finite and positive")
        if not self.convergence_tol > 0:
            raise DomainError("convergence_tol must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise DomainError("damping must lie in [0, 1)")


@dataclass(frozen=True)
class GaussianEdgeStats:
    u: np.ndarray  # mean of the equivalent noise on each edge, M x N
    v: np.ndarray  # its variance, >= sigma_w_sq


@dataclass
class DetectorState:
    iteration: int
    llr_sum_to_var: np.ndarray
    llr_var_to_sum: np.ndarray
    llr_full: np.ndarray
    posterior: np.ndarray
    max_delta: float = math.inf

    @classmethod
    def initial(cls, m: int, n: int, prior_llr: float) -> "DetectorState":
        """State before any sum-node pass: every edge carries the prior LLR."""
        return cls(
            iteration=0,
            llr_sum_to_var=np.zeros((m, n)),
            llr_var_to_sum=np.full((m, n), prior_llr),
            llr_full=np.full(n, prior_llr),
            posterior=np.full(n, expit(prior_llr)),
        )


def sum_node_stats(H, y, s_hat, v_s_hat, p_var_to_sum, sigma_w_sq) -> GaussianEdgeStats:
    """Mean and variance of the interference-plus-noise seen by each edge."""
    v_s_hat = np.asarray(v_s_hat, dtype=float)
    if np.any(v_s_hat < 0):
        raise DomainError("value-estimate variances must be non-negative")
    if sigma_w_sq < 0:
        raise DomainError("noise variance must be non-negative")
    P = np.asarray(p_var_to_sum, dtype=float)
    H2 = H * H

    mean_terms = H * (s_hat * P)
    var_terms = H2 * (P * v_s_hat + P * (1.0 - P) * s_hat**2)

    u = mean_terms.sum(axis=1, keepdims=True) - mean_terms
    v = var_terms.sum(axis=1, keepdims=True) - var_terms
    # the exclusion sum is non-negative; cancellation can push it slightly below
    v = np.maximum(v, 0.0) + sigma_w_sq
    return GaussianEdgeStats(u, v)


def sum_node_llr(y, stats: GaussianEdgeStats, H, s_hat, v_s_hat, llr_clamp=30.0) -> np.ndarray:
    """LLR of b_n = 1 vs b_n = 0 from measurement m alone, for every edge."""
    u, v = stats.u, stats.v
    if np.any(v <= 0):
        raise NumericalDegeneracyError("equivalent noise variance must be positive")
    resid0 = y[:, None] - u
    hs = H * s_hat
    v1 = v + H * H * v_s_hat
    resid1 = resid0 - hs
    llr = -0.5 * np.log(v1 / v) - resid1**2 / (2.0 * v1) + resid0**2 / (2.0 * v)
    return np.clip(llr, -llr_clamp, llr_clamp)


def variable_node_update(llr_sum_to_var, l_0, llr_clamp=30.0) -> np.ndarray:
    """Extrinsic variable-to-sum LLRs: prior plus every other sum node's message."""
    total = llr_sum_to_var.sum(axis=0, keepdims=True) + l_0
    return np.clip(total - llr_sum_to_var, -llr_clamp, llr_clamp)


def posterior_update(llr_sum_to_var, l_0, llr_clamp=None):
    """Full LLR from all sum nodes and the resulting activity probability."""
    llr_full = l_0 + llr_sum_to_var.sum(axis=0)
    if llr_clamp is not None:
        llr_full = np.clip(llr_full, -llr_clamp, llr_clamp)
    return llr_full, expit(llr_full)


def detector_pass(state: DetectorState, H, y, s_hat, v_s_hat, sigma_w_sq, l_0, config=DetectorConfig()):
    """One flooding sweep: sum nodes, then variable nodes, then posteriors.

    Returns the new state and whether max |delta llr_full| fell below the
    configured tolerance.
    """
    p_var = expit(state.llr_var_to_sum)
    stats = sum_node_stats(H, y, s_hat, v_s_hat, p_var, sigma_w_sq)
    llr_s = sum_node_llr(y, stats, H, s_hat, v_s_hat, config.llr_clamp)
    llr_v = variable_node_update(llr_s, l_0, config.llr_clamp)
    if config.damping:
        llr_v = config.damping * state.llr_var_to_sum + (1.0 - config.damping) * llr_v
    llr_full, posterior = posterior_update(llr_s, l_0, config.llr_clamp)

    max_delta = float(np.max(np.abs(llr_full - state.llr_full))) if llr_full.size else 0.0
    new_state = replace(
        state,
        iteration=state.iteration + 1,
        llr_sum_to_var=llr_s,
        llr_var_to_sum=llr_v,
        llr_full=llr_full,
        posterior=posterior,
        max_delta=max_delta,
    )
    return new_state, max_delta < config.convergence_tol


def run_detector(H, y, s_hat, v_s_hat, sigma_w_sq, l_0, config=DetectorConfig(), state=None):
    """Sweep with fixed value estimates until convergence or the iteration cap."""
    m, n = H.shape
    if state is None:
        state = DetectorState.initial(m, n, l_0)
    converged = False
    for _ in range(config.max_iterations):
        state, converged = detector_pass(state, H, y, s_hat, v_s_hat, sigma_w_sq, l_0, config)
        if converged:
            break
    return state, converged
