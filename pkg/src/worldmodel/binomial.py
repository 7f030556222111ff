"""Log-space binomial tails for the counting-goal branch values."""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln, xlog1py, xlogy

from .goals import Branch, Predicate

# relative slack under which two branch values count as tied
TIE_RTOL = 1e-12


def log_pmf(n: int, p: float) -> np.ndarray:
    """``log P(X = r)`` for ``r = 0..n`` with ``X ~ Bin(n, p)``; exact at p in {0, 1}."""
    r = np.arange(n + 1)
    log_c = gammaln(n + 1) - gammaln(r + 1) - gammaln(n - r + 1)
    with np.errstate(divide="ignore"):
        return log_c + xlogy(r, p) + xlog1py(n - r, -p)


def _log_sum(log_terms: np.ndarray) -> float:
    if log_terms.size == 0:
        return -np.inf
    top = np.max(log_terms)
    if top == -np.inf:
        return -np.inf
    return float(top + np.log(np.sum(np.exp(log_terms - top))))


def log_cdf(k: int, n: int, p: float) -> float:
    """``log P(X <= k)``."""
    return _log_sum(log_pmf(n, p)[: k + 1])


def log_sf(k: int, n: int, p: float) -> float:
    """``log P(X > k)``."""
    return _log_sum(log_pmf(n, p)[k + 1:])


def cdf(k: int, n: int, p: float) -> float:
    return float(np.exp(log_cdf(k, n, p)))


def sf(k: int, n: int, p: float) -> float:
    return float(np.exp(log_sf(k, n, p)))


def log_branch_value(branch: Branch, p: float) -> float:
    """Log of the best achievable success probability of one branch when ``P(s'|s,a) = p``."""
    n = branch.trials
    if branch.predicate is Predicate.AT_MOST:
        return log_cdf(branch.k, n, p)
    if branch.predicate is Predicate.MORE_THAN:
        return log_sf(branch.k, n, p)
    with np.errstate(divide="ignore"):
        if branch.predicate is Predicate.ALL_SUCCEED:
            return float(xlogy(n, p))
        return float(xlog1py(n, -p))


def branch_value(branch: Branch, p: float) -> float:
    return float(np.exp(log_branch_value(branch, p)))


def prefers_first(log_a: float, log_b: float) -> bool:
    """``value_a >= value_b`` with ties (to ``TIE_RTOL``) going to the first branch."""
    if log_a == -np.inf:
        return log_b == -np.inf
    return log_a >= log_b + np.log1p(-TIE_RTOL)
