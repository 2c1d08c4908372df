"""Non-negative factorization of binary report matrices into topic groups.

Reports (columns) are soft-assigned to K topics by factorizing the
substances-by-reports matrix V into W*H with multiplicative updates under
the Frobenius objective; a report's cluster is the argmax of its H column.
Topic quality is scored with log co-occurrence coherence over each topic's
top-ranked substances, and the group count K is picked by maximizing mean
coherence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import as_float_array

__all__ = [
    "ToxMatrix",
    "NmfFactors",
    "CoherenceResult",
    "SelectKResult",
    "factorize",
    "assign_clusters",
    "coherence",
    "select_k",
    "top_terms",
    "NmfClusterer",
]

logger = logging.getLogger(__name__)

_EPS = 1e-12


@dataclass
class ToxMatrix:
    """Substances-by-reports indicator matrix with name/id indices.

    All-zero report columns carry no signal and are dropped at
    construction with a logged count.
    """

    matrix: np.ndarray
    substances: list[str]
    report_ids: list

    def __post_init__(self):
        m = as_float_array(self.matrix, "matrix")
        if m.ndim != 2:
            raise ValueError("matrix must be 2-D (substances x reports)")
        if np.any(m < 0):
            raise ValueError("matrix entries must be >= 0")
        if m.shape[0] != len(self.substances):
            raise ValueError("substances length must match matrix rows")
        if m.shape[1] != len(self.report_ids):
            raise ValueError("report_ids length must match matrix columns")
        keep = m.sum(axis=0) > 0
        dropped = int((~keep).sum())
        if dropped:
            logger.warning("dropped %d all-zero report columns", dropped)
            m = m[:, keep]
            self.report_ids = [r for r, k in zip(self.report_ids, keep) if k]
        self.matrix = m

    @property
    def n_substances(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_reports(self) -> int:
        return self.matrix.shape[1]


@dataclass
class NmfFactors:
    """Factor pair W (substances x topics), H (topics x reports) plus the
    per-iteration Frobenius objective trace of the winning restart."""

    w: np.ndarray
    h: np.ndarray
    objective: np.ndarray
    substances: list[str] = field(default_factory=list)
    report_ids: list = field(default_factory=list)
    restart: int = 0

    @property
    def n_topics(self) -> int:
        return self.w.shape[1]


@dataclass
class CoherenceResult:
    per_topic: list[float]
    mean: float
    skipped_pairs: int


@dataclass
class SelectKResult:
    best_k: int
    scores: dict[int, float]
    per_topic: dict[int, list[float]]


def _frobenius_sq(v, w, h) -> float:
    d = v - w @ h
    return float(np.sum(d * d))


def _run_updates(v, w, h, iters):
    trace = np.empty(iters + 1)
    trace[0] = _frobenius_sq(v, w, h)
    for i in range(iters):
        w *= (v @ h.T) / (w @ (h @ h.T) + _EPS)
        h *= (w.T @ v) / ((w.T @ w) @ h + _EPS)
        trace[i + 1] = _frobenius_sq(v, w, h)
    return w, h, trace


def factorize(
    tox: ToxMatrix,
    n_topics: int,
    seed: int = 0,
    iters: int = 500,
    restarts: int = 5,
) -> NmfFactors:
    """Best-of-restarts multiplicative-update factorization of tox.matrix."""
    v = tox.matrix
    d, n = v.shape
    if not 1 <= n_topics <= min(d, n):
        raise ValueError(f"n_topics must be in 1..{min(d, n)}, got {n_topics}")
    if v.sum() <= 0:
        raise ValueError("matrix is all zeros")
    best = None
    for ridx in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(ridx,)))
        # uniform on (0, 1]: zero entries would lock under multiplicative updates
        w0 = 1.0 - rng.random((d, n_topics))
        h0 = 1.0 - rng.random((n_topics, n))
        w, h, trace = _run_updates(v, w0, h0, iters)
        if best is None or trace[-1] < best.objective[-1]:
            best = NmfFactors(
                w=w,
                h=h,
                objective=trace,
                substances=list(tox.substances),
                report_ids=list(tox.report_ids),
                restart=ridx,
            )
    return best


def assign_clusters(factors: NmfFactors) -> np.ndarray:
    """Report labels: argmax of each H column, ties going to the lowest
    topic index.  All-zero columns get label 0 with a logged warning."""
    h = factors.h
    dead = np.flatnonzero(h.sum(axis=0) <= 0)
    if dead.size:
        logger.warning("%d reports have all-zero topic weights; labeled 0", dead.size)
    return np.argmax(h, axis=0).astype(np.int64)


def _ranked_substances(factors: NmfFactors, topic: int) -> list[int]:
    col = factors.w[:, topic]
    names = factors.substances
    return sorted(range(col.size), key=lambda d: (-col[d], names[d]))


def top_terms(factors: NmfFactors, top_m: int) -> list[list[str]]:
    """Per-topic substance names ranked by W column weight."""
    if top_m > factors.w.shape[0]:
        raise ValueError(f"top_m ({top_m}) exceeds substance count ({factors.w.shape[0]})")
    return [
        [factors.substances[d] for d in _ranked_substances(factors, k)[:top_m]]
        for k in range(factors.n_topics)
    ]


def coherence(factors: NmfFactors, tox: ToxMatrix, top_m: int = 5) -> CoherenceResult:
    """Log co-occurrence coherence of each topic's top_m substances.

    For ranked substances w_1..w_m the topic score sums, over pairs with
    i < j, log((co(w_j, w_i) + 1) / single(w_i)); pairs whose reference
    substance never occurs are skipped and counted.
    """
    if top_m > tox.n_substances:
        raise ValueError("top_m exceeds substance count")
    binary = (tox.matrix > 0).astype(float)
    co = binary @ binary.T
    single = np.diag(co)
    per_topic = []
    skipped = 0
    for k in range(factors.n_topics):
        ranked = _ranked_substances(factors, k)[:top_m]
        score = 0.0
        for j in range(1, len(ranked)):
            for i in range(j):
                ref = ranked[i]
                if single[ref] <= 0:
                    skipped += 1
                    continue
                score += float(np.log((co[ranked[j], ref] + 1.0) / single[ref]))
        per_topic.append(score)
    return CoherenceResult(
        per_topic=per_topic, mean=float(np.mean(per_topic)), skipped_pairs=skipped
    )


def select_k(
    tox: ToxMatrix,
    k_range,
    seed: int = 0,
    iters: int = 500,
    restarts: int = 5,
    top_m: int = 5,
) -> SelectKResult:
    """Pick the K maximizing mean coherence (ties go to the smallest K)."""
    k_values = sorted(set(int(k) for k in k_range))
    if not k_values:
        raise ValueError("k_range must be nonempty")
    scores: dict[int, float] = {}
    per_topic: dict[int, list[float]] = {}
    best_k = None
    for k in k_values:
        factors = factorize(tox, k, seed=seed, iters=iters, restarts=restarts)
        res = coherence(factors, tox, top_m=min(top_m, tox.n_substances))
        scores[k] = res.mean
        per_topic[k] = res.per_topic
        if best_k is None or res.mean > scores[best_k]:
            best_k = k
    return SelectKResult(best_k=best_k, scores=scores, per_topic=per_topic)


class NmfClusterer(BaseEstimator):
    """Topic clustering of binary report matrices.

    ``fit`` factorizes, ``predict``/``labels_`` give hard cluster labels,
    and ``transform`` projects reports onto the fitted topic basis.
    """

    def __init__(
        self,
        n_topics: int = 4,
        iters: int = 500,
        restarts: int = 5,
        random_state: int = 0,
    ):
        self.n_topics = n_topics
        self.iters = iters
        self.restarts = restarts
        self.random_state = random_state

    def fit(self, tox: ToxMatrix, y=None):
        self.factors_ = factorize(
            tox,
            self.n_topics,
            seed=self.random_state,
            iters=self.iters,
            restarts=self.restarts,
        )
        self.labels_ = assign_clusters(self.factors_)
        return self

    def fit_predict(self, tox: ToxMatrix, y=None) -> np.ndarray:
        return self.fit(tox).labels_

    def transform(self, tox: ToxMatrix) -> np.ndarray:
        """Topic weights for new reports under the fitted W (H-only updates)."""
        v = tox.matrix
        if v.shape[0] != self.factors_.w.shape[0]:
            raise ValueError("substance dimension mismatch with fitted factors")
        rng = np.random.default_rng(np.random.SeedSequence(self.random_state))
        w = self.factors_.w
        h = 1.0 - rng.random((self.n_topics, v.shape[1]))
        wtw = w.T @ w
        for _ in range(self.iters):
            h *= (w.T @ v) / (wtw @ h + _EPS)
        return h
