"""Sparse recovery by SMP support detection interleaved with LMMSE value estimation."""

from .baselines import DenoiserSpec, amp_estimate, bg_denoiser, general_denoiser, genie_mmse, plain_lmmse
from .bounds import (
    BoundReport,
    bound_report,
    check_interlacing,
    lemma1_upper,
    lemma2_lower,
    lemma4_asymptote,
    prop1_trace,
)
from .errors import ConfigurationError, DomainError, NumericalDegeneracyError
from .lmmse_core import (
    CavityEstimate,
    PriorMoments,
    ValueEstimate,
    cavity_values,
    lmmse_mse,
    lmmse_values,
    lmmse_values_snr_form,
)
from .signal_model import (
    ActiveDistribution,
    ProblemInstance,
    SparsityPrior,
    db_to_linear,
    load_instance,
    noise_variance_for_snr,
    sample_matrix,
    sample_signal,
    save_instance,
    synthesize,
)
from .smp_detector import DetectorConfig, DetectorState, detector_pass, run_detector
from .turbo import TurboConfig, TurboResult, combine, estimate, stopping_check

__version__ = "0.1.0"
