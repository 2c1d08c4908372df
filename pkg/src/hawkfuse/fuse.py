"""Multi-group EM over merged labeled and unlabeled event data.

The merged dataset mixes source A (no group mark) and source B (marked)
events.  Each group keeps its own excitation parameters and background;
the branching posterior becomes one matrix per group.  Rows of unlabeled
events are normalized jointly across all groups, so the posterior doubles
as a soft mark assignment; labeled rows are pinned to their own group.

Unlabeled events also act as potential parents.  A parent contributes to
group k's triggering sum weighted by its current group responsibility,
which reduces to the hard-label rule when every mark is known.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import _emcore
from ._emcore import EventArrays, SparsePosterior
from .model import Assignment, FitConfig, FittedModel, GroupParams

logger = logging.getLogger(__name__)

__all__ = [
    "BranchingPosteriorMulti",
    "init_posteriors",
    "e_step_multi",
    "m_step_multi",
    "fit_fused",
    "infer_marks",
    "responsibilities",
    "FusedHawkesEM",
]


@dataclass
class BranchingPosteriorMulti:
    """K per-group branching posteriors that are jointly row-stochastic."""

    groups: list[SparsePosterior]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_events(self) -> int:
        return self.groups[0].n_events

    def responsibilities(self) -> np.ndarray:
        """(K, N) per-event group masses; each column sums to 1."""
        return np.vstack([g.responsibilities() for g in self.groups])


def init_posteriors(dataset, n_groups: int | None = None) -> BranchingPosteriorMulti:
    """Diagonal starting posterior: 1/K for unlabeled events, one-hot for
    labeled events, all triggering entries zero."""
    n_groups = dataset.n_groups if n_groups is None else n_groups
    ev = _emcore.collapse_marks(EventArrays.from_dataset(dataset), n_groups)
    diag = _emcore.init_diagonals(ev, n_groups)
    empty = np.empty(0, dtype=np.int64)
    return BranchingPosteriorMulti(
        groups=[
            SparsePosterior(diag=diag[k], child=empty, parent=empty, p=np.empty(0))
            for k in range(n_groups)
        ]
    )


def responsibilities(posterior: BranchingPosteriorMulti) -> np.ndarray:
    return posterior.responsibilities()


def e_step_multi(
    dataset,
    models: list[GroupParams],
    p_prev: BranchingPosteriorMulti,
    config: FitConfig | None = None,
) -> BranchingPosteriorMulti:
    """Update all K posteriors under the current per-group parameters."""
    config = config or FitConfig()
    ev = _emcore.collapse_marks(EventArrays.from_dataset(dataset), len(models))
    if len(models) != p_prev.n_groups:
        raise ValueError("models and posterior group counts differ")
    eps_lambda = config.epsilon_lambda_scale * max(ev.n, 1) / dataset.window.volume
    r_prev = p_prev.responsibilities()
    posteriors, _ = _emcore.e_step_engine(ev, models, r_prev, config, eps_lambda)
    if config.validate_posteriors:
        _emcore.check_posterior_invariants(ev, posteriors)
    return BranchingPosteriorMulti(groups=posteriors)


def m_step_multi(
    dataset,
    posterior: BranchingPosteriorMulti,
    config: FitConfig | None = None,
    prev: list[GroupParams] | None = None,
) -> list[GroupParams]:
    """Per-group weighted-average updates; groups whose total mass drops
    below one event are flagged empty and frozen at the priors."""
    config = config or FitConfig()
    ev = _emcore.collapse_marks(EventArrays.from_dataset(dataset), posterior.n_groups)
    return _emcore.m_step_engine(
        ev, posterior.groups, config, dataset.window, prev_groups=prev
    )


def fit_fused(dataset, n_groups: int | None = None, config: FitConfig | None = None) -> FittedModel:
    """Jointly fit all groups and infer marks for unlabeled events."""
    config = config or FitConfig()
    n_groups = dataset.n_groups if n_groups is None else n_groups
    if n_groups > 1:
        present = set(dataset.marks[dataset.is_b].tolist())
        missing = [k for k in range(n_groups) if k not in present]
        if missing:
            logger.warning(
                "no labeled events for group(s) %s; their fits rely on unlabeled data only",
                missing,
            )
    model, _, _ = _emcore.fit_engine(dataset, n_groups, config, keep_assignments=True)
    return model


def infer_marks(model: FittedModel) -> list[Assignment]:
    """Inferred (event id, group, probability) rows for unlabeled events."""
    if model.assignments is None:
        raise ValueError("model carries no mark assignments; fit it with fit_fused")
    return list(model.assignments)


class FusedHawkesEM(BaseEstimator):
    """Multi-group estimator over merged labeled/unlabeled event data.

    ``fit`` estimates per-group parameters and the posterior over missing
    marks; ``predict`` returns the hard mark per unlabeled event of the
    fitted dataset and ``predict_proba`` the full responsibility matrix.
    """

    def __init__(
        self,
        n_groups: int = 1,
        max_iters: int = 200,
        tol: float = 1e-4,
        bandwidth_k: int = 15,
        bandwidth_strategy: str = "knn",
        freeze_bandwidths: bool = False,
        seed: int = 0,
    ):
        self.n_groups = n_groups
        self.max_iters = max_iters
        self.tol = tol
        self.bandwidth_k = bandwidth_k
        self.bandwidth_strategy = bandwidth_strategy
        self.freeze_bandwidths = freeze_bandwidths
        self.seed = seed

    def _config(self) -> FitConfig:
        return FitConfig(
            max_iters=self.max_iters,
            tol=self.tol,
            bandwidth_k=self.bandwidth_k,
            bandwidth_strategy=self.bandwidth_strategy,
            freeze_bandwidths=self.freeze_bandwidths,
            seed=self.seed,
        )

    def fit(self, dataset, y=None):
        model, posteriors, resp = _emcore.fit_engine(
            dataset, self.n_groups, self._config(), keep_assignments=True
        )
        self.model_ = model
        self.responsibilities_ = resp
        self.group_sizes_ = model.group_sizes
        self.n_iter_ = model.trace.iterations
        self.converged_ = model.trace.converged
        self._unlabeled_ids = dataset.ids[~dataset.is_b]
        self._unlabeled_index = np.flatnonzero(~dataset.is_b)
        return self

    def predict(self, dataset=None) -> np.ndarray:
        """Hard group assignment per unlabeled event of the fitted data."""
        return np.array([a.group for a in self.model_.assignments], dtype=np.int64)

    def predict_proba(self, dataset=None) -> np.ndarray:
        """(n_unlabeled, K) responsibility matrix for the fitted data."""
        return self.responsibilities_[:, self._unlabeled_index].T.copy()

    def fit_predict(self, dataset, y=None) -> np.ndarray:
        return self.fit(dataset).predict()

    def score(self, dataset, subset: str = "all") -> float:
        from .evaluate import observed_loglik

        return observed_loglik(dataset, self.model_, subset=subset)
