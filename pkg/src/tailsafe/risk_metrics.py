"""Loss-convention VaR/ES, percentile bootstrap, and paired-bootstrap ES differences.

VaR is the ceil(alpha n)-th order statistic (1-indexed) of the losses; ES is the
mean of all losses at or above VaR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DEFAULT_ALPHA = 0.975


class PairingError(ValueError):
    """Two samples are not aligned on the same (seed, path) labels."""


@dataclass(frozen=True, eq=False)
class LossSample:
    losses: np.ndarray
    pool_labels: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        x = np.asarray(self.losses, dtype=float).ravel()
        if not np.all(np.isfinite(x)):
            raise ValueError("losses must be finite")
        object.__setattr__(self, "losses", x)
        if self.pool_labels is not None:
            labels = tuple((int(a), int(b)) for a, b in self.pool_labels)
            if len(labels) != x.size:
                raise ValueError("one (seed, path) label per loss is required")
            object.__setattr__(self, "pool_labels", labels)

    def __len__(self) -> int:
        return self.losses.size

    @classmethod
    def from_pnl(cls, pnl, pool_labels=None) -> "LossSample":
        return cls(-np.asarray(pnl, dtype=float), pool_labels)


@dataclass
class IntervalEstimate:
    point: float
    ci_low: float
    ci_high: float
    resamples: int
    seed: int
    level: float = 0.95
    n: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def excludes_zero(self) -> bool:
        return self.ci_high < 0.0 or self.ci_low > 0.0

    def covers(self, value: float, tol: float = 0.0) -> bool:
        return self.ci_low - tol <= value <= self.ci_high + tol

    def to_row(self, metric: str) -> dict:
        return {"metric": metric, "point": self.point, "ci_low": self.ci_low, "ci_high": self.ci_high,
                "n": self.n, "resamples": self.resamples, "seed": self.seed}


def _var_index(n: int, alpha: float) -> int:
    return min(max(math.ceil(alpha * n - 1e-9) - 1, 0), n - 1)


def var_es(sample, alpha: float = DEFAULT_ALPHA) -> tuple[float, float]:
    x = sample.losses if isinstance(sample, LossSample) else np.asarray(sample, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empty loss sample")
    if x.size < 2:
        raise ValueError("need at least 2 losses")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    s = np.sort(x)
    var = s[_var_index(x.size, alpha)]
    return float(var), float(s[s >= var].mean())


def _es_rows(samples: np.ndarray, alpha: float) -> np.ndarray:
    """ES along axis 1 for a (resamples, n) array."""
    s = np.sort(samples, axis=1)
    var = s[:, _var_index(s.shape[1], alpha)][:, None]
    mask = s >= var
    return (s * mask).sum(axis=1) / mask.sum(axis=1)


def expected_shortfall(losses, alpha: float = DEFAULT_ALPHA) -> float:
    return var_es(losses, alpha)[1]


def _percentile_interval(stats: np.ndarray, level: float) -> tuple[float, float]:
    lo, hi = np.quantile(stats, [(1 - level) / 2, 1 - (1 - level) / 2])
    return float(lo), float(hi)


def bootstrap_ci(sample, statistic: Callable[[np.ndarray], float] = np.mean, resamples: int = 500,
                 seed: int = 0, level: float = 0.95) -> IntervalEstimate:
    """Percentile interval from i.i.d. resampling with replacement."""
    if resamples < 100:
        raise ValueError("resamples must be >= 100")
    x = sample.losses if isinstance(sample, LossSample) else np.asarray(sample, dtype=float).ravel()
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(resamples, x.size))
    stats = np.array([statistic(x[row]) for row in idx])
    lo, hi = _percentile_interval(stats, level)
    return IntervalEstimate(float(statistic(x)), lo, hi, resamples, seed, level, x.size)


def bootstrap_es_ci(sample, alpha: float = DEFAULT_ALPHA, resamples: int = 500, seed: int = 0,
                    level: float = 0.95) -> IntervalEstimate:
    x = sample.losses if isinstance(sample, LossSample) else np.asarray(sample, dtype=float).ravel()
    if resamples < 100:
        raise ValueError("resamples must be >= 100")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(resamples, x.size))
    lo, hi = _percentile_interval(_es_rows(x[idx], alpha), level)
    return IntervalEstimate(expected_shortfall(x, alpha), lo, hi, resamples, seed, level, x.size)


def paired_bootstrap_delta_es(losses_a: LossSample, losses_b: LossSample, alpha: float = DEFAULT_ALPHA,
                              resamples: int = 2000, seed: int = 0,
                              level: float = 0.95) -> IntervalEstimate:
    """CI for ES_a - ES_b, resampling aligned (seed, path) indices jointly."""
    if resamples < 100:
        raise ValueError("resamples must be >= 100")
    a, b = losses_a.losses, losses_b.losses
    if a.size != b.size:
        raise PairingError(f"sample sizes differ: {a.size} vs {b.size}")
    la, lb = losses_a.pool_labels, losses_b.pool_labels
    if (la is None) != (lb is None) or (la is not None and la != lb):
        raise PairingError("samples are not aligned on identical (seed, path) labels")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, a.size, size=(resamples, a.size))
    diffs = _es_rows(a[idx], alpha) - _es_rows(b[idx], alpha)
    lo, hi = _percentile_interval(diffs, level)
    point = expected_shortfall(a, alpha) - expected_shortfall(b, alpha)
    est = IntervalEstimate(point, lo, hi, resamples, seed, level, a.size)
    est.extras["excludes_zero"] = est.excludes_zero
    return est
