"""Sparse signal generation and problem instances.

The measurement model is ``y = H x + w`` with ``x = s * b``: ``b`` is an
i.i.d. Bernoulli(lambda) activity mask and ``s`` holds an active value at
every index (masked where ``b`` is zero).  Everything is real valued.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError

INSTANCE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ActiveDistribution:
    """Distribution of the non-zero coefficients.

    ``kind`` is ``"gaussian"`` (parameters ``mean``, ``variance``) or
    ``"chisquare"`` (parameter ``dof``).
    """

    kind: str = "gaussian"
    loc: float = 0.0
    variance: float = 1.0
    dof: int = 4

    def __post_init__(self):
        if self.kind not in ("gaussian", "chisquare"):
            raise ConfigurationError(f"unknown active distribution {self.kind!r}")
        if self.kind == "gaussian" and not self.variance >= 0:
            raise ConfigurationError("gaussian variance must be >= 0")
        if self.kind == "chisquare" and (int(self.dof) != self.dof or self.dof < 1):
            raise ConfigurationError("chi-square dof must be a positive integer")

    @classmethod
    def gaussian(cls, mean=0.0, variance=1.0):
        return cls("gaussian", loc=float(mean), variance=float(variance))

    @classmethod
    def chisquare(cls, dof=4):
        return cls("chisquare", dof=int(dof))

    @property
    def mean(self) -> float:
        if self.kind == "gaussian":
            return self.loc
        return float(self.dof)

    @property
    def var(self) -> float:
        if self.kind == "gaussian":
            return self.variance
        return 2.0 * self.dof

    @property
    def second_moment(self) -> float:
        return self.var + self.mean**2

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "gaussian":
            return self.loc + math.sqrt(self.variance) * rng.standard_normal(size)
        return rng.chisquare(self.dof, size)

    def to_dict(self) -> dict:
        if self.kind == "gaussian":
            return {"kind": "gaussian", "mean": self.loc, "variance": self.variance}
        return {"kind": "chisquare", "dof": self.dof}

    @classmethod
    def from_dict(cls, d: dict) -> "ActiveDistribution":
        kind = d.get("kind", "gaussian")
        if kind == "gaussian":
            return cls.gaussian(d.get("mean", 0.0), d.get("variance", 1.0))
        if kind == "chisquare":
            return cls.chisquare(d.get("dof", 4))
        raise ConfigurationError(f"unknown active distribution {kind!r}")


@dataclass(frozen=True)
class SparsityPrior:
    lam: float
    active: ActiveDistribution = field(default_factory=ActiveDistribution)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"sparsity ratio must lie in [0, 1], got {self.lam}")

    @property
    def prior_llr(self) -> float:
        """log(lam / (1 - lam)); infinite at the endpoints."""
        if self.lam == 0.0:
            return -math.inf
        if self.lam == 1.0:
            return math.inf
        return -math.log(1.0 / self.lam - 1.0)

    @property
    def x_mean(self) -> float:
        return self.lam * self.active.mean

    @property
    def x_var(self) -> float:
        """Marginal variance of one entry of x = s * b."""
        return max(self.lam * self.active.second_moment - self.x_mean**2, 0.0)

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "active": self.active.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SparsityPrior":
        return cls(float(d["lambda"]), ActiveDistribution.from_dict(d.get("active", {})))


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    H: np.ndarray
    s: np.ndarray
    b: np.ndarray
    x: np.ndarray
    y: np.ndarray
    sigma_w_sq: float
    support: np.ndarray
    seed: int
    prior: SparsityPrior
    snr: float = math.nan

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ProblemInstance):
            return NotImplemented
        arrays = ("H", "s", "b", "x", "y", "support")
        return (
            all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
            and self.sigma_w_sq == other.sigma_w_sq
            and self.seed == other.seed
            and self.prior == other.prior
        )


def db_to_linear(snr_db: float) -> float:
    return 10.0 ** (snr_db / 10.0)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def trial_seed(master_seed: int, *index: int) -> int:
    """Derive an independent 64-bit seed for one trial of a run."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(int(i) for i in index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sample_signal(prior: SparsityPrior, n: int, rng: np.random.Generator):
    """Draw (s, b, x) with b ~ Bernoulli(lam) and s drawn at every index."""
    if not 0.0 <= prior.lam <= 1.0:
        raise ConfigurationError("sparsity ratio must lie in [0, 1]")
    if n < 1:
        raise ConfigurationError("signal length must be >= 1")
    b = (rng.random(n) < prior.lam).astype(np.int8)
    s = prior.active.sample(rng, n)
    x = s * b
    return s, b, x


def sample_matrix(m: int, n: int, rng: np.random.Generator) -> np.ndarray:
    # raw N(0, 1) entries, deliberately not column-normalized
    if m < 1 or n < 1:
        raise ConfigurationError("matrix dimensions must be >= 1")
    return rng.standard_normal((m, n))


def noise_variance_for_snr(prior: SparsityPrior, n: int, m: int, snr: float) -> float:
    """Noise variance making E||x||^2 / E||w||^2 equal to ``snr`` (linear)."""
    if not snr > 0:
        raise DomainError(f"snr must be positive, got {snr}")
    return n * prior.lam * prior.active.second_moment / (m * snr)


def synthesize(prior: SparsityPrior, m: int, n: int, snr: float, seed: int) -> ProblemInstance:
    """Build one reproducible instance; ``snr`` is linear, not dB."""
    sigma_w_sq = noise_variance_for_snr(prior, n, m, snr)
    rng = make_rng(seed)
    s, b, x = sample_signal(prior, n, rng)
    H = sample_matrix(m, n, rng)
    w = math.sqrt(sigma_w_sq) * rng.standard_normal(m)
    y = H @ x + w
    support = np.flatnonzero(b)
    return ProblemInstance(H, s, b, x, y, sigma_w_sq, support, int(seed), prior, float(snr))


def save_instance(inst: ProblemInstance, path) -> None:
    """Write an instance as ``.npz``; metadata lives in a JSON string member."""
    meta = {
        "format_version": INSTANCE_FORMAT_VERSION,
        "m": inst.m,
        "n": inst.n,
        "seed": inst.seed,
        "sigma_w_sq": inst.sigma_w_sq,
        "snr": inst.snr,
        "prior": inst.prior.to_dict(),
    }
    with open(path, "wb") as fh:
        np.savez(
            fh,
            meta=np.array(json.dumps(meta, sort_keys=True)),
            H=inst.H,
            s=inst.s,
            b=inst.b,
            x=inst.x,
            y=inst.y,
            support=inst.support,
        )


def load_instance(path) -> ProblemInstance:
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format_version") != INSTANCE_FORMAT_VERSION:
            raise ConfigurationError(f"{path}: unsupported instance format {meta.get('format_version')}")
        arrays = {k: data[k] for k in ("H", "s", "b", "x", "y", "support")}
    return ProblemInstance(
        arrays["H"],
        arrays["s"],
        arrays["b"],
        arrays["x"],
        arrays["y"],
        float(meta["sigma_w_sq"]),
        arrays["support"],
        int(meta["seed"]),
        SparsityPrior.from_dict(meta["prior"]),
        float(meta["snr"]),
    )
