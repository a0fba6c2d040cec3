"""Bit accuracy, exact binomial threshold calibration and the verification rule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

WATERMARKED = "Watermarked"
NON_WATERMARKED = "NonWatermarked"


def bit_accuracy(m, m_prime) -> float:
    m = np.asarray(m)
    m_prime = np.asarray(m_prime)
    if m.shape[-1] != m_prime.shape[-1]:
        raise ValueError(f"message length mismatch: {m.shape[-1]} vs {m_prime.shape[-1]}")
    return float(np.mean(m.astype(bool) == m_prime.astype(bool)))


def tail_count(K: int, c: int) -> int:
    """Number of K-bit strings with at least ``c`` matches: sum_{k>=c} C(K, k)."""
    return sum(math.comb(K, k) for k in range(max(c, 0), K + 1))


def binomial_tail(K: int, c: int) -> Fraction:
    """Exact P(Binomial(K, 1/2) >= c)."""
    return Fraction(tail_count(K, c), 2 ** K)


@dataclass(frozen=True)
class VerificationPolicy:
    K: int
    c: int
    target_fpr: float
    pool_K: int = 1

    @property
    def rho(self) -> float:
        return self.c / self.K

    @property
    def tail(self) -> Fraction:
        return binomial_tail(self.K, self.c)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rho"] = self.rho
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationPolicy":
        pol = calibrate_threshold(int(d["K"]), float(d["target_fpr"]), int(d.get("pool_K", 1)))
        if "c" in d and int(d["c"]) != pol.c:
            raise ValueError(f"stored threshold c={d['c']} disagrees with recalibration c={pol.c}")
        return pol


def calibrate_threshold(K: int, target_fpr: float, pool_K: int = 1) -> VerificationPolicy:
    """Smallest count ``c`` with P(Bin(K, 1/2) >= c) <= target_fpr / pool_K.

    The comparison is carried out in exact rational arithmetic, so the
    threshold is correct at any target, including 1e-6.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0.0 < target_fpr < 1.0:
        raise ValueError("target_fpr must lie in (0, 1)")
    if pool_K < 1:
        raise ValueError("pool_K must be >= 1")
    budget = Fraction(target_fpr) / pool_K
    total = 2 ** K
    acc = 0
    c = K + 1
    # walk the tail downwards while it stays within budget
    for k in range(K, -1, -1):
        acc += math.comb(K, k)
        if Fraction(acc, total) > budget:
            break
        c = k
    if c > K:
        raise ValueError(
            f"target FPR {target_fpr:g} (pool {pool_K}) unreachable for K={K}: "
            f"minimum achievable FPR is 1/2^{K} = {1.0 / total:g}"
        )
    return VerificationPolicy(K=K, c=c, target_fpr=target_fpr, pool_K=pool_K)


def empirical_threshold(K: int, clean_accuracies: Sequence[float], target_fpr: float) -> VerificationPolicy:
    """Calibrate ``c`` from observed bit accuracies of clean images instead of the Bernoulli null.

    Picks the smallest count whose empirical exceedance rate is <= target_fpr.
    """
    counts = np.rint(np.asarray(clean_accuracies, dtype=np.float64) * K).astype(int)
    if counts.size == 0:
        raise ValueError("no clean accuracies supplied")
    for c in range(0, K + 2):
        if np.mean(counts >= c) <= target_fpr:
            break
    if c > K:
        raise ValueError("empirical calibration failed: every clean sample is perfect")
    return VerificationPolicy(K=K, c=c, target_fpr=target_fpr, pool_K=1)


def verify(m, m_prime, policy: VerificationPolicy) -> str:
    m = np.asarray(m)
    if m.shape[-1] != policy.K:
        raise ValueError(f"message length {m.shape[-1]} does not match policy K={policy.K}")
    matches = int(np.sum(np.asarray(m).astype(bool) == np.asarray(m_prime).astype(bool)))
    # inclusive boundary; integer compare avoids float rounding at rho
    return WATERMARKED if matches >= policy.c else NON_WATERMARKED


def match_counts(messages: np.ndarray, extracted: np.ndarray) -> np.ndarray:
    """Matching-bit counts between every extracted row and every pool row.

    ``extracted`` is (N, K), ``messages`` is (P, K); returns (N, P) ints.
    """
    messages = np.atleast_2d(np.asarray(messages, dtype=bool))
    extracted = np.atleast_2d(np.asarray(extracted, dtype=bool))
    agree = extracted[:, None, :] == messages[None, :, :]
    return agree.sum(axis=-1)


def verify_pool(extracted, pool, policy: VerificationPolicy) -> tuple[str, int]:
    """Detect if any pool message meets the threshold; returns (decision, argmax index)."""
    messages = pool.messages if hasattr(pool, "messages") else np.asarray(pool)
    if len(messages) != policy.pool_K:
        raise ValueError(f"pool has {len(messages)} messages but policy expects pool_K={policy.pool_K}")
    counts = match_counts(messages, extracted)[0]
    best = int(np.argmax(counts))
    return (WATERMARKED if counts[best] >= policy.c else NON_WATERMARKED), best


def empirical_rates(positive_decisions, negative_decisions) -> tuple[float, float]:
    """(TPR, FPR) from decision lists; decisions are booleans or verdict strings."""
    pos = [_as_bool(d) for d in positive_decisions]
    neg = [_as_bool(d) for d in negative_decisions]
    if not pos or not neg:
        raise ValueError("decision lists must be non-empty")
    return sum(pos) / len(pos), sum(neg) / len(neg)


def _as_bool(d) -> bool:
    if isinstance(d, str):
        if d not in (WATERMARKED, NON_WATERMARKED):
            raise ValueError(f"unknown verdict {d!r}")
        return d == WATERMARKED
    return bool(d)
