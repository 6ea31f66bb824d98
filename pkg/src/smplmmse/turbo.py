"""SMP-LMMSE turbo loop and sparsity combiner."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError
from .lmmse_core import PriorMoments, cavity_values, lmmse_values
from .smp_detector import DetectorConfig, DetectorState, detector_pass


FEEDBACK_MODES = ("calibrated", "posterior")


@dataclass(frozen=True)
class TurboConfig:
    max_outer_iterations: int = 10
    # light damping of the variable-to-sum messages steadies the coupled loop
    detector: DetectorConfig = field(default_factory=lambda: DetectorConfig(damping=0.3))
    stop_tol: float = 1e-6
    hard_combine: bool = False
    # "calibrated": conditional value estimates with an evidence-matched
    # variance; "posterior": the LMMSE posterior (s_hat, v_diag) as is
    feedback: str = "calibrated"
    # outer iterations run on soft D(b_hat) before the LMMSE switches to
    # 1{b_hat > 0.5}; None keeps the soft support throughout, 0 is always hard
    hard_support_after: Optional[int] = 3
    sweeps_per_outer: int = 2
    # hard support keeps at most this many entries (highest LLR first),
    # as a multiple of lambda * N; None disables the cap
    support_cap: Optional[float] = 1.5
    # a run whose data misfit |y - H x_hat|^2 / (M sigma^2) exceeds this is
    # rerun with the (hard_support_after, damping) schedules in `restarts`,
    # in order; None disables restarts
    restart_misfit: Optional[float] = 2.0
    restarts: Tuple[Tuple[int, float], ...] = ((4, 0.5), (4, 0.7), (6, 0.7), (2, 0.5))

    def __post_init__(self):
        if self.max_outer_iterations < 1:
            raise ConfigurationError("max_outer_iterations must be >= 1")
        if self.sweeps_per_outer < 1:
            raise ConfigurationError("sweeps_per_outer must be >= 1")
        if self.feedback not in FEEDBACK_MODES:
            raise ConfigurationError(f"unknown feedback mode {self.feedback!r}")
        if self.hard_support_after is not None and self.hard_support_after < 0:
            raise ConfigurationError("hard_support_after must be >= 0")
        if not self.stop_tol >= 0:
            raise ConfigurationError("stop_tol must be >= 0")
        if self.restart_misfit is not None and not self.restart_misfit > 0:
            raise ConfigurationError("restart_misfit must be positive")
        restarts = tuple((int(k), float(d)) for k, d in self.restarts)
        for k, d in restarts:
            if k < 0 or not 0.0 <= d < 1.0:
                raise ConfigurationError(f"bad restart schedule ({k}, {d})")
        object.__setattr__(self, "restarts", restarts)

    def restart_configs(self):
        """Configs tried in order after a run fails the misfit check."""
        return [
            replace(self, hard_support_after=k, detector=replace(self.detector, damping=d), restart_misfit=None)
            for k, d in self.restarts
        ]


@dataclass
class IterationRecord:
    iteration: int
    x_hat: np.ndarray
    mse: float  # per-component, nan without ground truth
    detector_sweeps: int  # cumulative
    detector_delta: float  # max |delta llr_full| of the last sweep
    detector_converged: bool
    trace_v: float
    rel_change: float
    b_hat: Optional[np.ndarray] = None


@dataclass
class TurboResult:
    x_hat: np.ndarray
    b_hat: np.ndarray
    s_hat: np.ndarray
    trajectory: List[IterationRecord]
    note: str = ""
    # mean and variance of s last handed to the detector
    s_det: Optional[np.ndarray] = None
    v_det: Optional[np.ndarray] = None
    misfit: float = float("nan")  # |y - H x_hat|^2 / (M sigma^2)
    runs: int = 1  # loop runs made, restarts included

    @property
    def detector_deltas(self):
        return [r.detector_delta for r in self.trajectory]


def combine(s_hat, b_hat, hard=False) -> np.ndarray:
    b = np.asarray(b_hat, dtype=float)
    if hard:
        b = (b > 0.5).astype(float)
    return np.asarray(s_hat, dtype=float) * b


def stopping_check(trajectory, config: TurboConfig) -> bool:
    if not trajectory:
        raise ValueError("trajectory is empty")
    if len(trajectory) >= config.max_outer_iterations:
        return True
    return trajectory[-1].rel_change < config.stop_tol


def _rel_change(new, old):
    if old is None:
        return math.inf
    denom = np.linalg.norm(old)
    diff = np.linalg.norm(new - old)
    if denom == 0:
        return 0.0 if diff == 0 else math.inf
    return float(diff / denom)


def _mse(x_hat, x_true):
    if x_true is None:
        return math.nan
    return float(np.mean((x_hat - x_true) ** 2))


def calibrated_feedback(cav, prior: PriorMoments):
    """Value estimate and uncertainty handed to the detector.

    The mean is the value estimate given that the entry is active.  The
    variance ``nu`` solves ``(2 r mu - mu^2 - nu) / (2 tau^2) = log BF``,
    where ``log BF`` is the log Bayes factor of ``r ~ N(x_n, tau^2)`` for an
    active value ``N(u, V)`` versus zero.  That left side is the sum of the
    per-edge LLRs expanded to first order in ``h^2 nu / sigma^2`` with the
    residual term ``(y - h mu)^2 h^2 nu / (2 sigma^4)`` left out.  That term
    is not small: on average it cancels the ``-nu`` part, so the Occam
    penalty is only partly carried over to the detector.
    """
    u, V = prior.u_s, prior.v_s
    t = cav.tau_sq
    nu = V.astype(float).copy()  # entries the data says nothing about
    ok = np.isfinite(t)
    tt = t[ok]
    nu[ok] = tt * np.log1p(V[ok] / tt) + tt * (cav.r[ok] - u[ok]) ** 2 * V[ok] / (V[ok] + tt) ** 2
    return cav.s_cond, nu


def _hard_weights(llr_full, lam, cap, score):
    """1{b_hat > 0.5}, trimmed to the ``cap * lam * N`` strongest entries.

    Entries are ranked by their full LLR; ties (typically at the clamp) are
    broken by ``score``, the data z-score of the last value step.
    """
    w = (llr_full > 0).astype(float)
    if cap is not None:
        k = int(math.ceil(cap * lam * llr_full.size))
        if w.sum() > k:
            keep = np.lexsort((-score, -llr_full))[:k]
            w = np.zeros_like(w)
            w[keep] = 1.0
    return w


def _value_step(H, y, weights, moments, sigma_w_sq, feedback):
    """LMMSE stage.

    Returns the value estimate for the combiner, the mean and variance fed
    to the detector, trace of the error variances, and a per-entry z-score
    of the data evidence used to rank entries.
    """
    if feedback == "posterior":
        est = lmmse_values(H, y, weights, moments, sigma_w_sq)
        with np.errstate(divide="ignore", invalid="ignore"):
            score = np.nan_to_num(np.abs(est.s_hat - moments.u_s) / np.sqrt(est.v_diag))
        return est.s_hat, est.s_hat, est.v_diag, float(est.v_diag.sum()), score
    cav = cavity_values(H, y, weights, moments, sigma_w_sq)
    s_det, v_det = calibrated_feedback(cav, moments)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.nan_to_num(np.abs(cav.r) / np.sqrt(cav.tau_sq))
    return cav.s_cond, s_det, v_det, float(cav.v_cond.sum()), score


def estimate(H, y, prior, moments: Optional[PriorMoments], sigma_w_sq, config=TurboConfig(), x_true=None):
    """Run SMP-LMMSE.

    Each outer iteration runs ``sweeps_per_outer`` detector sweeps with the
    current value estimates, then an LMMSE pass with the new support
    weights.  The detector starts from the prior mean and variance of ``s``
    and keeps its messages across outer iterations.

    A run that ends with a misfit above ``config.restart_misfit`` has
    usually locked onto a wrong support.  The loop is then rerun from
    scratch with each restart schedule until one fits; if none does, the run
    with the smallest misfit is returned.  The returned trajectory is that
    of the selected run.
    """
    res = _run(H, y, prior, moments, sigma_w_sq, config, x_true)
    if config.restart_misfit is None or prior.lam in (0.0, 1.0):
        return res
    runs = [res]
    for cfg in config.restart_configs():
        if runs[-1].misfit <= config.restart_misfit:
            break
        runs.append(_run(H, y, prior, moments, sigma_w_sq, cfg, x_true))
    k = next((i for i, r in enumerate(runs) if r.misfit <= config.restart_misfit), None)
    if k is None:
        k = int(np.argmin([r.misfit for r in runs]))
    best = runs[k]
    best.runs = len(runs)
    if k:
        best.note = f"restart {k}"
    return best


def _run(H, y, prior, moments, sigma_w_sq, config, x_true):
    m, n = H.shape
    if moments is None:
        moments = PriorMoments.from_prior(prior, n)

    if prior.lam == 0.0:
        x_hat = np.zeros(n)
        rec = IterationRecord(1, x_hat, _mse(x_hat, x_true), 0, 0.0, True, 0.0, 0.0, np.zeros(n))
        return TurboResult(x_hat, np.zeros(n), moments.u_s.copy(), [rec], note="degenerate prior: lambda=0")
    if prior.lam == 1.0:
        b_hat = np.ones(n)
        est = lmmse_values(H, y, b_hat, moments, sigma_w_sq)
        x_hat = combine(est.s_hat, b_hat)
        rec = IterationRecord(1, x_hat, _mse(x_hat, x_true), 0, 0.0, True, float(est.v_diag.sum()), 0.0, b_hat)
        return TurboResult(x_hat, b_hat, est.s_hat, [rec], note="degenerate prior: lambda=1")

    l_0 = prior.prior_llr
    det_cfg = config.detector
    state = DetectorState.initial(m, n, l_0)
    s_det = moments.u_s.astype(float).copy()
    v_det = moments.v_s.astype(float).copy()
    score = np.zeros(n)
    converged = False
    trajectory: List[IterationRecord] = []
    x_prev = None

    for it in range(1, config.max_outer_iterations + 1):
        for _ in range(min(config.sweeps_per_outer, det_cfg.max_iterations)):
            state, converged = detector_pass(state, H, y, s_det, v_det, sigma_w_sq, l_0, det_cfg)
            if converged:
                break
        b_hat = state.posterior
        hard = config.hard_support_after is not None and it > config.hard_support_after
        weights = _hard_weights(state.llr_full, prior.lam, config.support_cap, score) if hard else b_hat
        s_hat, s_det, v_det, trace_v, score = _value_step(H, y, weights, moments, sigma_w_sq, config.feedback)

        x_hat = combine(s_hat, b_hat, config.hard_combine)
        rel = _rel_change(x_hat, x_prev)
        trajectory.append(
            IterationRecord(
                iteration=it,
                x_hat=x_hat,
                mse=_mse(x_hat, x_true),
                detector_sweeps=state.iteration,
                detector_delta=state.max_delta,
                detector_converged=converged,
                trace_v=trace_v,
                rel_change=rel,
                b_hat=b_hat,
            )
        )
        x_prev = x_hat
        if stopping_check(trajectory, config):
            break

    misfit = float(np.sum((y - H @ x_hat) ** 2) / (m * sigma_w_sq))
    return TurboResult(x_hat, b_hat, s_hat, trajectory, s_det=s_det, v_det=v_det, misfit=misfit)
