"""Seeded Monte Carlo runner, metrics, CSV output and config loading."""

from __future__ import annotations

import csv
import io
import json
import math
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .baselines import DenoiserSpec, amp_estimate, genie_mmse, plain_lmmse
from .bounds import lemma1_upper, lemma2_lower, prop1_trace
from .errors import ConfigurationError
from .lmmse_core import PriorMoments
from .signal_model import ActiveDistribution, SparsityPrior, db_to_linear, synthesize, trial_seed
from .smp_detector import DetectorConfig
from .turbo import TurboConfig, estimate

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CSV_SCHEMA_VERSION = 1
CSV_HEADER = ("trial", "estimator", "snr_db", "iteration", "mse", "mse_db", "support_error_rate", "wall_time_ms", "seed")
ESTIMATORS = ("smp_lmmse", "amp", "lmmse", "genie")
BOUND_ESTIMATORS = ("bound:upper", "bound:lower", "bound:prop1")


@dataclass(frozen=True)
class ExperimentConfig:
    n: int = 512
    m: int = 256
    prior: SparsityPrior = field(default_factory=lambda: SparsityPrior(0.125))
    snr_grid: Sequence[float] = (50.0,)
    trials: int = 100
    estimators: Sequence[str] = ESTIMATORS
    master_seed: int = 0
    turbo: TurboConfig = field(default_factory=TurboConfig)
    output_path: Optional[str] = None
    amp_iterations: int = 20
    bounds: bool = True
    timing: bool = False  # wall_time_ms is 0 unless set; timings break byte-identical output
    allow_m_gt_n: bool = False

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ConfigurationError("n and m must be >= 1")
        if self.m > self.n:
            if not self.allow_m_gt_n:
                raise ConfigurationError(f"m={self.m} exceeds n={self.n}; set allow_m_gt_n to override")
            warnings.warn(f"m={self.m} exceeds n={self.n}", stacklevel=2)
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        if len(self.snr_grid) == 0:
            raise ConfigurationError("snr_grid must not be empty")
        if self.amp_iterations < 1:
            raise ConfigurationError("amp_iterations must be >= 1")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigurationError("master_seed must be an unsigned 64-bit integer")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ConfigurationError(f"unknown estimator(s) {unknown}; choose from {list(ESTIMATORS)}")
        if len(set(self.estimators)) != len(self.estimators):
            raise ConfigurationError("estimators must not repeat")

    def iterations(self, estimator: str) -> int:
        if estimator == "smp_lmmse":
            return self.turbo.max_outer_iterations
        if estimator == "amp":
            return self.amp_iterations
        return 1


@dataclass(frozen=True)
class TrialRecord:
    trial: int
    estimator: str
    snr_db: float
    iteration: int
    mse: float
    mse_db: float
    support_error_rate: float
    wall_time_ms: float
    seed: int
    sq_error: float = math.nan  # unnormalized ||x_hat - x||^2; not part of the CSV

    def sort_key(self):
        return (self.snr_db, self.trial, self.estimator, self.iteration)

    def csv_row(self):
        return (
            str(self.trial),
            self.estimator,
            repr(float(self.snr_db)),
            str(self.iteration),
            repr(float(self.mse)),
            repr(float(self.mse_db)),
            repr(float(self.support_error_rate)),
            repr(float(self.wall_time_ms)),
            str(self.seed),
        )


def mse(x_hat, x_true) -> float:
    x_hat = np.asarray(x_hat, dtype=float)
    x_true = np.asarray(x_true, dtype=float)
    if x_hat.shape != x_true.shape:
        raise ConfigurationError("x_hat and x_true differ in length")
    return float(np.sum((x_hat - x_true) ** 2) / x_true.size)


def to_db(value: float) -> float:
    return 10.0 * math.log10(value) if value > 0 else -math.inf


def support_error_rate(b_hat_hard, b_true) -> float:
    a = np.asarray(b_hat_hard).astype(bool)
    b = np.asarray(b_true).astype(bool)
    if a.shape != b.shape:
        raise ConfigurationError("support vectors differ in length")
    return float(np.count_nonzero(a != b) / b.size)


def magnitude_support(x_hat, lam) -> np.ndarray:
    """Hard support of a non-sparse estimate: its round(lam N) largest magnitudes."""
    n = len(x_hat)
    k = int(round(lam * n))
    out = np.zeros(n, dtype=bool)
    if k > 0:
        out[np.argsort(-np.abs(x_hat), kind="stable")[:k]] = True
    return out


def _record(trial, est, snr_db, it, x_hat, x, b_hat, b, elapsed, seed):
    err = float(np.sum((x_hat - x) ** 2))
    val = err / x.size
    return TrialRecord(trial, est, snr_db, it, val, to_db(val), support_error_rate(b_hat, b), elapsed, seed, err)


def run_trial(config: ExperimentConfig, snr_index: int, trial: int) -> List[TrialRecord]:
    snr_db = float(config.snr_grid[snr_index])
    seed = trial_seed(config.master_seed, snr_index, trial)
    snr = db_to_linear(snr_db)
    inst = synthesize(config.prior, config.m, config.n, snr, seed)
    moments = PriorMoments.from_prior(config.prior, config.n)
    H, y, x, b = inst.H, inst.y, inst.x, inst.b
    recs: List[TrialRecord] = []

    def clock():
        return time.perf_counter() if config.timing else 0.0

    def ms(t0):
        return (time.perf_counter() - t0) * 1e3 if config.timing else 0.0

    for est in config.estimators:
        t0 = clock()
        if est == "smp_lmmse":
            res = estimate(H, y, config.prior, moments, inst.sigma_w_sq, config.turbo)
            elapsed = ms(t0)
            traj = res.trajectory
            for it in range(1, config.turbo.max_outer_iterations + 1):
                # early stops repeat the final estimate so every run has the same rows
                rec = traj[min(it, len(traj)) - 1]
                recs.append(_record(trial, est, snr_db, it, rec.x_hat, x, rec.b_hat > 0.5, b, elapsed, seed))
        elif est == "amp":
            res = amp_estimate(H, y, DenoiserSpec.for_prior(config.prior), config.amp_iterations)
            elapsed = ms(t0)
            for it, xh in enumerate(res.trajectory, start=1):
                recs.append(_record(trial, est, snr_db, it, xh, x, magnitude_support(xh, config.prior.lam), b, elapsed, seed))
        elif est == "lmmse":
            xh, _ = plain_lmmse(H, y, config.prior, moments, inst.sigma_w_sq)
            recs.append(_record(trial, est, snr_db, 1, xh, x, magnitude_support(xh, config.prior.lam), b, ms(t0), seed))
        elif est == "genie":
            xh, _ = genie_mmse(H, y, inst.support, moments, inst.sigma_w_sq)
            recs.append(_record(trial, est, snr_db, 1, xh, x, b, b, ms(t0), seed))

    if config.bounds:
        n = config.n
        values = {
            "bound:upper": lemma1_upper(H, config.prior, moments, inst.sigma_w_sq) / n,
            "bound:lower": lemma2_lower(H, inst.support, moments, inst.sigma_w_sq) / n,
            "bound:prop1": prop1_trace(H, inst.support, snr, inst.sigma_w_sq) / n,
        }
        for name in BOUND_ESTIMATORS:
            v = values[name]
            recs.append(TrialRecord(trial, name, snr_db, 0, v, to_db(v), 0.0, 0.0, seed, v * n))
    return recs


def _run_chunk(args):
    config, jobs = args
    from threadpoolctl import threadpool_limits

    # one BLAS thread per worker keeps every trial bit-reproducible
    with threadpool_limits(limits=1):
        out = []
        for snr_index, trial in jobs:
            out.extend(run_trial(config, snr_index, trial))
    return out


def run_experiment(config: ExperimentConfig, workers: int = 1) -> List[TrialRecord]:
    jobs = [(i, t) for i in range(len(config.snr_grid)) for t in range(config.trials)]
    if workers < 1:
        raise ConfigurationError("workers must be >= 1")
    if workers == 1:
        records = _run_chunk((config, jobs))
    else:
        chunks = [jobs[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = [r for part in pool.map(_run_chunk, [(config, c) for c in chunks if c]) for r in part]
    records.sort(key=TrialRecord.sort_key)
    return records


def expected_row_count(config: ExperimentConfig) -> int:
    per_instance = sum(config.iterations(e) for e in config.estimators)
    if config.bounds:
        per_instance += len(BOUND_ESTIMATORS)
    return config.trials * len(config.snr_grid) * per_instance


@dataclass(frozen=True)
class SummaryRow:
    estimator: str
    snr_db: float
    iteration: int
    count: int
    mean: float
    stderr: float

    @property
    def mean_db(self) -> float:
        return to_db(self.mean)


def aggregate(records) -> List[SummaryRow]:
    """Mean and standard error of mse per (estimator, snr_db, iteration)."""
    records = list(records)
    if not records:
        raise ConfigurationError("no records to aggregate")
    groups: Dict[tuple, List[float]] = {}
    for r in records:
        groups.setdefault((r.estimator, r.snr_db, r.iteration), []).append(r.mse)
    out = []
    for key in sorted(groups):
        vals = np.sort(np.asarray(groups[key], dtype=float))  # sorted: order-independent sums
        k = vals.size
        se = float(np.std(vals, ddof=1) / math.sqrt(k)) if k > 1 else 0.0
        out.append(SummaryRow(key[0], key[1], key[2], k, float(np.mean(vals)), se))
    return out


def run_metadata(config: ExperimentConfig) -> dict:
    """Settings that produced a CSV, written as a comment line after the schema line."""
    meta = asdict(config)
    meta.pop("output_path")
    # AMP runs undamped with the matched prior denoiser
    denoiser = DenoiserSpec.for_prior(config.prior).kind
    meta["amp"] = {"iterations": config.amp_iterations, "damping": 0.0, "denoiser": denoiser}
    del meta["amp_iterations"]
    return meta


def records_to_csv(records, meta: Optional[dict] = None) -> str:
    buf = io.StringIO()
    buf.write(f"# smplmmse-trials schema_version={CSV_SCHEMA_VERSION}\n")
    if meta is not None:
        buf.write(f"# run {json.dumps(meta, sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(r.csv_row())
    return buf.getvalue()


def write_csv(records, path, meta: Optional[dict] = None) -> None:
    Path(path).write_text(records_to_csv(records, meta), encoding="utf-8")


def read_csv(path) -> List[TrialRecord]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ConfigurationError(f"{path}: unexpected CSV header {reader.fieldnames}")
    return [
        TrialRecord(
            int(row["trial"]),
            row["estimator"],
            float(row["snr_db"]),
            int(row["iteration"]),
            float(row["mse"]),
            float(row["mse_db"]),
            float(row["support_error_rate"]),
            float(row["wall_time_ms"]),
            int(row["seed"]),
        )
        for row in reader
    ]


# -- config files -------------------------------------------------------------


def _take(table: dict, allowed, where: str) -> dict:
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return dict(table)


def _build(cls, table: dict, where: str, **nested):
    names = {f.name for f in fields(cls)}
    table = _take(table, names, where)
    for key, fn in nested.items():
        if key in table:
            if not isinstance(table[key], dict):
                raise ConfigurationError(f"[{where}.{key}] must be a table")
            table[key] = fn(table[key])
    try:
        return cls(**table)
    except TypeError as exc:
        raise ConfigurationError(f"bad value in [{where}]: {exc}") from exc


def _active_from_table(t: dict) -> ActiveDistribution:
    t = _take(t, ("kind", "mean", "variance", "dof"), "prior.active")
    kind = t.get("kind", "gaussian")
    if kind == "gaussian" and "dof" in t:
        raise ConfigurationError("dof only applies to chisquare")
    if kind == "chisquare" and ({"mean", "variance"} & set(t)):
        raise ConfigurationError("mean/variance do not apply to chisquare")
    return ActiveDistribution.from_dict(t)


def _prior_from_table(t: dict) -> SparsityPrior:
    t = _take(t, ("lambda", "active"), "prior")
    if "lambda" not in t:
        raise ConfigurationError("[prior] needs lambda")
    return SparsityPrior(float(t["lambda"]), _active_from_table(t.get("active", {})))


def _turbo_from_table(t: dict) -> TurboConfig:
    t = dict(t)
    for key in ("hard_support_after", "restart_misfit"):
        if t.get(key, 0) is False:
            t[key] = None
    return _build(TurboConfig, t, "turbo", detector=lambda d: _build(DetectorConfig, d, "turbo.detector"))


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    if "snr_grid" in d:
        d["snr_grid"] = tuple(float(v) for v in d["snr_grid"])
    if "estimators" in d:
        d["estimators"] = tuple(d["estimators"])
    return _build(ExperimentConfig, d, "config", prior=_prior_from_table, turbo=_turbo_from_table)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config not found: {path}")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return config_from_dict(data)


PRESETS = {
    "fig3-desk": dict(n=512, m=256, prior=SparsityPrior(0.125), snr_grid=(50.0,), trials=100),
    "fig3-desk-chisquare": dict(
        n=512, m=256, prior=SparsityPrior(0.125, ActiveDistribution.chisquare(4)), snr_grid=(50.0,), trials=100
    ),
    "sweep-snr": dict(
        n=512,
        m=256,
        prior=SparsityPrior(0.04),
        snr_grid=(-20.0, -10.0, 0.0, 10.0, 20.0, 30.0, 40.0, 50.0),
        trials=100,
        estimators=("smp_lmmse", "lmmse", "genie"),
    ),
    # full-size problems; dense N x N work makes these long-running
    "fig3-full": dict(n=8192, m=4096, prior=SparsityPrior(0.125), snr_grid=(50.0,), trials=100),
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**kw)


def with_overrides(config: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
