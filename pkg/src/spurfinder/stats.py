"""Numerical statistics: rate intervals, rank tests, distribution-shift
metrics, error consistency, transfer rates, and nearest neighbors.

Everything here is a pure function over value inputs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .core import FailurePolicy, LabelHierarchy, Prediction, is_failure


# ---------------------------------------------------------------------------
# Failure-rate intervals


@dataclass(frozen=True)
class RateEstimate:
    k: int
    n: int
    p: float
    ci_lo: float
    ci_hi: float
    level: float = 0.95

    def to_json(self) -> dict:
        return {"k": self.k, "n": self.n, "p": self.p, "ci_lo": self.ci_lo, "ci_hi": self.ci_hi, "level": self.level}

    @classmethod
    def from_json(cls, d: dict) -> "RateEstimate":
        return cls(int(d["k"]), int(d["n"]), float(d["p"]), float(d["ci_lo"]), float(d["ci_hi"]), float(d["level"]))


def wilson_ci(k: int, n: int, level: float = 0.95) -> RateEstimate:
    """Wilson score interval for a binomial proportion; well-behaved at k=0."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= k <= n:
        raise ValueError("k must be in [0, n]")
    z = float(norm.ppf(0.5 + level / 2.0))
    p = k / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = (z / denom) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    # rounding can push the bounds a few ulp past the estimate at k=0 / k=n
    lo = 0.0 if k == 0 else max(0.0, center - half)
    hi = 1.0 if k == n else min(1.0, center + half)
    return RateEstimate(k=k, n=n, p=p, ci_lo=lo, ci_hi=hi, level=level)


# ---------------------------------------------------------------------------
# Mann-Whitney U

EXACT_LIMIT = 12  # full enumeration stays under 10^4 arrangements


@dataclass(frozen=True)
class MannWhitneyResult:
    U: float
    p: float
    method: str  # "exact" | "normal"


def _rank(pooled: Sequence[float]) -> list[float]:
    order = sorted(range(len(pooled)), key=lambda i: pooled[i])
    ranks = [0.0] * len(pooled)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and pooled[order[j + 1]] == pooled[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for t in range(i, j + 1):
            ranks[order[t]] = avg
        i = j + 1
    return ranks


def mann_whitney(xs: Sequence[float], ys: Sequence[float], alternative: str = "two-sided") -> MannWhitneyResult:
    """Mann-Whitney U test; ``alternative="greater"`` tests that ys tend larger.

    Exact p by full enumeration of rank arrangements when the pooled
    sample is small and tie-free; otherwise a tie-corrected normal
    approximation with continuity correction.
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    n, m = len(xs), len(ys)
    if n == 0 or m == 0:
        raise ValueError("both samples must be non-empty")
    pooled = list(xs) + list(ys)
    ranks = _rank(pooled)
    rank_y = sum(ranks[n:])
    u_y = rank_y - m * (m + 1) / 2.0
    has_ties = len(set(pooled)) != len(pooled)
    if n + m <= EXACT_LIMIT and not has_ties:
        # distribution of U_y over all C(n+m, m) rank assignments
        total = 0
        ge = 0
        le = 0
        base = m * (m + 1) / 2.0
        for combo in itertools.combinations(range(1, n + m + 1), m):
            u = sum(combo) - base
            total += 1
            if u >= u_y - 1e-12:
                ge += 1
            if u <= u_y + 1e-12:
                le += 1
        if alternative == "greater":
            p = ge / total
        elif alternative == "less":
            p = le / total
        else:
            p = min(1.0, 2.0 * min(ge, le) / total)
        return MannWhitneyResult(U=u_y, p=p, method="exact")
    # normal approximation with tie correction
    N = n + m
    counts = {}
    for v in pooled:
        counts[v] = counts.get(v, 0) + 1
    tie_term = sum(t**3 - t for t in counts.values())
    var = n * m / 12.0 * ((N + 1) - tie_term / (N * (N - 1)))
    mu = n * m / 2.0
    if var <= 0:
        return MannWhitneyResult(U=u_y, p=1.0, method="normal")
    sd = math.sqrt(var)
    if alternative == "greater":
        z = (u_y - mu - 0.5) / sd
        p = float(norm.sf(z))
    elif alternative == "less":
        z = (u_y - mu + 0.5) / sd
        p = float(norm.cdf(z))
    else:
        z = (abs(u_y - mu) - 0.5) / sd
        p = min(1.0, 2.0 * float(norm.sf(max(z, 0.0))))
    return MannWhitneyResult(U=u_y, p=p, method="normal")


# ---------------------------------------------------------------------------
# FID / KID


@dataclass(frozen=True)
class EmbeddingSetStats:
    n: int
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least 2 embeddings")
        cov = np.asarray(self.covariance)
        if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-12 * max(1.0, float(np.abs(cov).max()))):
            raise ValueError("covariance must be symmetric")


def embedding_stats(vectors: Sequence[Sequence[float]]) -> EmbeddingSetStats:
    arr = np.asarray(vectors, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("need a 2-D array with at least 2 rows")
    cov = np.cov(arr, rowvar=False)
    cov = np.atleast_2d(cov)
    cov = (cov + cov.T) / 2.0
    return EmbeddingSetStats(n=arr.shape[0], mean=arr.mean(axis=0), covariance=cov)


def fid(a: EmbeddingSetStats, b: EmbeddingSetStats, jitter: float = 0.0) -> float:
    """Frechet distance between two Gaussian fits.

    The matrix square root is taken on the symmetrized product
    sqrt(Sa) Sb sqrt(Sa) with eigenvalues clamped at zero, which keeps
    the result real, non-negative (up to rounding) and symmetric in its
    arguments.
    """
    mu_a, mu_b = np.asarray(a.mean, float), np.asarray(b.mean, float)
    if mu_a.shape != mu_b.shape:
        raise ValueError("dimension mismatch between embedding sets")
    sig_a = np.asarray(a.covariance, float)
    sig_b = np.asarray(b.covariance, float)
    if not (np.all(np.isfinite(sig_a)) and np.all(np.isfinite(sig_b)) and np.all(np.isfinite(mu_a)) and np.all(np.isfinite(mu_b))):
        raise ValueError("non-finite embedding statistics")
    if jitter:
        sig_a = sig_a + jitter * np.eye(sig_a.shape[0])
        sig_b = sig_b + jitter * np.eye(sig_b.shape[0])
    w, v = np.linalg.eigh(sig_a)
    sqrt_a = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    inner = sqrt_a @ sig_b @ sqrt_a
    inner = (inner + inner.T) / 2.0
    eigs = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(sig_a) + np.trace(sig_b) - 2.0 * np.sum(np.sqrt(eigs)))


@dataclass(frozen=True)
class KidResult:
    value: float
    stderr: float
    blocks: int


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m = x.shape[0]
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    sum_xy = kxy.mean()
    return float(sum_xx + sum_yy - 2.0 * sum_xy)


def kid(A: Sequence[Sequence[float]], B: Sequence[Sequence[float]], block_size: int = 100) -> KidResult:
    """Unbiased polynomial-kernel MMD^2, averaged over disjoint blocks."""
    a = np.asarray(A, float)
    b = np.asarray(B, float)
    if a.shape[0] < 2 * block_size or b.shape[0] < 2 * block_size:
        raise ValueError(f"both sets need at least {2 * block_size} vectors")
    if a.shape[1] != b.shape[1]:
        raise ValueError("dimension mismatch between embedding sets")
    nblocks = min(a.shape[0], b.shape[0]) // block_size
    values = []
    for i in range(nblocks):
        lo, hi = i * block_size, (i + 1) * block_size
        values.append(_mmd2_unbiased(a[lo:hi], b[lo:hi]))
    arr = np.asarray(values)
    stderr = float(arr.std(ddof=1) / math.sqrt(nblocks)) if nblocks > 1 else 0.0
    return KidResult(value=float(arr.mean()), stderr=stderr, blocks=nblocks)


# ---------------------------------------------------------------------------
# Error consistency


def error_consistency(correct_a: Sequence[bool], correct_b: Sequence[bool]) -> float:
    """Chance-corrected agreement kappa of two correctness patterns."""
    if len(correct_a) != len(correct_b):
        raise ValueError("correctness vectors must have equal length")
    n = len(correct_a)
    if n < 1:
        raise ValueError("need at least one observation")
    pa = sum(correct_a) / n
    pb = sum(correct_b) / n
    c_exp = pa * pb + (1 - pa) * (1 - pb)
    if c_exp >= 1.0:
        raise ValueError("degenerate case: expected consistency is 1")
    c_obs = sum(1 for x, y in zip(correct_a, correct_b) if x == y) / n
    return (c_obs - c_exp) / (1 - c_exp)


# ---------------------------------------------------------------------------
# Transfer matrix


@dataclass(frozen=True)
class TransferResult:
    rates: tuple[float, ...]
    excluded: tuple[int, ...]


def transfer_matrix(
    dataset: Sequence[tuple[bytes | str, str]],
    classifiers: Sequence,
    policy: FailurePolicy,
    hierarchy: LabelHierarchy,
) -> TransferResult:
    """Per-classifier fraction of dataset samples that are policy failures.

    ``classifiers`` are gateways (or anything with ``classify(image, k)``).
    Samples whose classification errors out are excluded and tallied.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    rates = []
    excluded = []
    for clf in classifiers:
        failures = 0
        skipped = 0
        counted = 0
        for image, truth in dataset:
            try:
                pred = clf.classify(image, policy.k)
            except Exception:
                skipped += 1
                continue
            counted += 1
            if is_failure(pred, truth, policy, hierarchy):
                failures += 1
        rates.append(failures / counted if counted else 0.0)
        excluded.append(skipped)
    return TransferResult(rates=tuple(rates), excluded=tuple(excluded))


# ---------------------------------------------------------------------------
# Nearest neighbors


def nearest_neighbors(
    query: Sequence[float],
    corpus: Sequence[tuple],
    k: int,
    filter_label: Optional[str] = None,
) -> list:
    """Top-k corpus ids by cosine similarity to the query.

    Corpus entries are ``(id, vector)`` or ``(id, vector, label)``; the
    optional label filter needs the 3-tuple form. Zero-vector entries
    are excluded; ties break by ascending id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, float)
    qn = np.linalg.norm(q)
    if qn == 0:
        raise ValueError("query is the zero vector")
    scored = []
    for entry in corpus:
        if filter_label is not None:
            if len(entry) < 3:
                raise ValueError("label filter requires (id, vector, label) entries")
            if entry[2] != filter_label:
                continue
        ident, vec = entry[0], np.asarray(entry[1], float)
        vn = np.linalg.norm(vec)
        if vn == 0:
            continue
        scored.append((float(q @ vec / (qn * vn)), ident))
    if not scored:
        raise ValueError("corpus is empty after filtering")
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [ident for _, ident in scored[:k]]
