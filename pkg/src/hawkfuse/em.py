"""Single-group EM estimator for the unmarked self-exciting model.

The expectation step attributes each event either to the background or to
an earlier event through the branching posterior; the maximization step
turns those soft attributions into weighted-average parameter updates and
a reweighted background KDE.  Iterating the two to convergence yields the
maximum-likelihood fit.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import _emcore
from ._emcore import EventArrays, SparsePosterior
from .kernels import KdeBackground, TriggerParams
from .model import FitConfig, FittedModel, GroupParams

__all__ = [
    "BranchingPosteriorSingle",
    "e_step",
    "m_step",
    "fit",
    "complete_data_loglik",
    "HawkesEM",
]

# Branching probabilities for one unmarked process: diagonal = background,
# sparse (child, parent, p) entries = triggering attributions.
BranchingPosteriorSingle = SparsePosterior


def _unmarked_arrays(dataset) -> EventArrays:
    n = len(dataset)
    return EventArrays.from_dataset(
        dataset, marks=np.full(n, -1, dtype=np.int64), is_b=np.zeros(n, dtype=bool)
    )


def _check_support(dataset, background: KdeBackground):
    if background.size != len(dataset):
        raise ValueError(
            "background support must be the dataset events (one weighted point per event)"
        )


def e_step(
    dataset,
    params: TriggerParams,
    background: KdeBackground,
    config: FitConfig | None = None,
) -> BranchingPosteriorSingle:
    """Update the branching posterior under fixed parameters.

    Each row is normalized by the event's computed intensity
    lambda_i = mu0*u*v + sum_j g, so rows sum to one by construction;
    mu0 is the background mass background.nb.
    """
    config = config or FitConfig()
    _check_support(dataset, background)
    ev = _unmarked_arrays(dataset)
    gp = GroupParams(trigger=params, mu0=background.nb, background=background)
    eps_lambda = config.epsilon_lambda_scale * max(ev.n, 1) / dataset.window.volume
    r = np.ones((1, ev.n))
    posteriors, _ = _emcore.e_step_engine(ev, [gp], r, config, eps_lambda)
    return posteriors[0]


def m_step(
    dataset, posterior: BranchingPosteriorSingle, config: FitConfig | None = None
):
    """Weighted-average updates from the posterior.

    Returns (TriggerParams, KdeBackground, mu0).  With zero triggering mass
    the offspring count is 0 and decay/spread fall back to the configured
    priors rather than NaN.
    """
    config = config or FitConfig()
    ev = _unmarked_arrays(dataset)
    groups = _emcore.m_step_engine(ev, [posterior], config, dataset.window)
    gp = groups[0]
    return gp.trigger, gp.background, gp.mu0


def complete_data_loglik(
    dataset,
    posterior: BranchingPosteriorSingle,
    params: TriggerParams,
    background: KdeBackground,
    window=None,
) -> float:
    """Soft complete-data log-likelihood at (posterior, parameters).

    sum_i p_ii log(mu0*u*v) - mu0 + sum_ij p_ij log g - sum_j k0*(1 -
    exp(-omega*(T - t_j))), with mu0 = background.nb.  When the background
    is supported on the dataset events, u and v are evaluated leave-one-out
    as in the E-step; an arbitrary support is evaluated as a plain mixture.
    """
    from .kernels import kde_space, kde_time

    window = window or dataset.window
    ev = _unmarked_arrays(dataset)
    gp = GroupParams(trigger=params, mu0=background.nb, background=background)
    aligned = background.size == len(dataset) and (
        np.array_equal(background.t, ev.t)
        and np.array_equal(background.x, ev.x)
        and np.array_equal(background.y, ev.y)
    )
    if aligned:
        r = np.ones((1, ev.n))
        return _emcore.objective_engine(ev, [posterior], [gp], r, window)

    total = 0.0
    mask = posterior.diag > 0
    if np.any(mask) and gp.mu0 > 0 and background.nb > 0:
        dens = gp.mu0 * kde_space(ev.x[mask], ev.y[mask], background) * kde_time(
            ev.t[mask], background
        )
        total += float(posterior.diag[mask] @ np.log(np.maximum(dens, 1e-300)))
    total -= gp.mu0
    if posterior.p.size:
        g = _emcore._trigger_at_pairs(ev, posterior.child, posterior.parent, params)
        total += float(posterior.p @ np.log(np.maximum(g, 1e-300)))
    if params.k0 > 0:
        tail = params.k0 * -np.expm1(-params.omega * (window.t1 - ev.t))
        total -= float(tail.sum())
    return total


def fit(dataset, config: FitConfig | None = None) -> FittedModel:
    """Fit the single-group model by EM from a deterministic warm start."""
    config = config or FitConfig()
    n = len(dataset)
    model, _, _ = _emcore.fit_engine(
        dataset,
        1,
        config,
        marks=np.full(n, -1, dtype=np.int64),
        is_b=np.zeros(n, dtype=bool),
        keep_assignments=False,
    )
    return model


class HawkesEM(BaseEstimator):
    """Single-group self-exciting point process estimator.

    Parameters mirror :class:`hawkfuse.model.FitConfig`; the fitted state
    lives in ``model_`` with convergence metadata in ``model_.trace``.
    """

    def __init__(
        self,
        max_iters: int = 200,
        tol: float = 1e-4,
        bandwidth_k: int = 15,
        bandwidth_strategy: str = "knn",
        freeze_bandwidths: bool = False,
        seed: int = 0,
    ):
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
        self.model_ = fit(dataset, self._config())
        self.n_iter_ = self.model_.trace.iterations
        self.converged_ = self.model_.trace.converged
        return self

    def score(self, dataset, subset: str = "all") -> float:
        """Observed-data log-likelihood of ``dataset`` under the fit."""
        from .evaluate import observed_loglik

        return observed_loglik(dataset, self.model_, subset=subset)
