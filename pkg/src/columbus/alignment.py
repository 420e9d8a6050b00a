"""Pairwise mean and covariance matching of per-domain embeddings."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from columbus import tensor as T
from columbus.tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class DomainStats:
    domain: int
    mean: np.ndarray
    covariance: Optional[np.ndarray]
    count: int


def domain_stats(embeddings: np.ndarray, domain: int = 0) -> DomainStats:
    """Column mean and unbiased covariance; covariance is None for fewer than two rows."""
    E = np.asarray(embeddings, dtype=np.float64)
    n = E.shape[0]
    mean = E.mean(axis=0)
    cov = None
    if n >= 2:
        centered = E - mean
        cov = centered.T @ centered / (n - 1)
    return DomainStats(domain, mean, cov, n)


def pair_term(a: DomainStats, b: DomainStats, d: int) -> float:
    loss = float(np.sum((a.mean - b.mean) ** 2))
    if a.covariance is not None and b.covariance is not None:
        loss += float(np.sum((a.covariance - b.covariance) ** 2)) / (4.0 * d * d)
    return loss


def alignment_loss(stats: Sequence[DomainStats], d: int) -> float:
    """Average pair term over all domain pairs; 0 (with a warning) for fewer than two domains."""
    if len(stats) < 2:
        log.warning("alignment loss needs at least two domains, got %d", len(stats))
        return 0.0
    # fixed pair order makes the float sum independent of how the caller lists domains
    ordered = sorted(stats, key=lambda s: s.domain)
    pairs = list(itertools.combinations(ordered, 2))
    return sum(pair_term(a, b, d) for a, b in pairs) / len(pairs)


def alignment_penalty(embeddings: Tensor, domains: np.ndarray) -> Tensor:
    """Differentiable :func:`alignment_loss` over rows of ``embeddings`` grouped by ``domains``."""
    E = embeddings.data
    d = E.shape[1]
    domains = np.asarray(domains)
    ids = np.unique(domains)
    rows = [np.flatnonzero(domains == i) for i in ids]
    stats = [domain_stats(E[r], int(i)) for i, r in zip(ids, rows)]
    value = alignment_loss(stats, d)
    n_pairs = len(ids) * (len(ids) - 1) // 2

    def fn(g, mode):
        grad = np.zeros_like(E)
        if n_pairs == 0:
            return (grad,)
        scale = float(g) / n_pairs
        for a in range(len(stats)):
            gmean = np.zeros(d)
            gcov = np.zeros((d, d))
            for b in range(len(stats)):
                if a == b:
                    continue
                sa, sb = stats[a], stats[b]
                gmean += 2.0 * (sa.mean - sb.mean)
                if sa.covariance is not None and sb.covariance is not None:
                    gcov += 2.0 * (sa.covariance - sb.covariance) / (4.0 * d * d)
            r = rows[a]
            n = len(r)
            grad[r] += scale * gmean / n
            if stats[a].covariance is not None:
                centered = E[r] - stats[a].mean
                grad[r] += scale * centered @ (gcov + gcov.T) / (n - 1)
        return (grad,)

    return T._make(np.asarray(value), (embeddings,), fn, "alignment")
