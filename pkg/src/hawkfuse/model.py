"""Fitted-model containers and the fitting configuration."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import KdeBackground, TriggerParams

__all__ = ["FitConfig", "GroupParams", "Assignment", "FitTrace", "FittedModel"]


@dataclass(frozen=True)
class FitConfig:
    """Knobs for the EM loop.

    ``epsilon_lambda_scale`` is multiplied by N / window volume to get the
    intensity floor used before taking logs.  ``time_cutoff`` and
    ``space_cutoff`` truncate excitation pairs at omega*dt > time_cutoff or
    distance > space_cutoff * sigma; both cuts drop terms below ~1e-17
    relative.  Bandwidths are re-selected every M-step unless
    ``freeze_bandwidths`` is set.
    """

    max_iters: int = 200
    tol: float = 1e-4
    epsilon_lambda_scale: float = 1e-12
    bandwidth_k: int = 15
    bandwidth_floor: float = 1e-6
    bandwidth_strategy: str = "knn"  # "knn" or "cv"
    freeze_bandwidths: bool = False
    time_cutoff: float = 40.0
    space_cutoff: float = 8.0
    sigma_floor_frac: float = 1e-6
    init_k0: float = 0.5
    prior_omega: float = 1.0
    prior_sigma: float = 0.01
    seed: int = 0
    validate_posteriors: bool = True
    track_objective: bool = False
    kde_cache_limit: int = 3000
    adaptive_bandwidth_floor: bool = True
    bandwidth_freeze_delta: float = 1e-2

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.bandwidth_strategy not in ("knn", "cv"):
            raise ValueError("bandwidth_strategy must be 'knn' or 'cv'")


@dataclass(frozen=True)
class GroupParams:
    """One group's excitation parameters plus its background component."""

    trigger: TriggerParams
    mu0: float
    background: KdeBackground
    empty: bool = False

    def __post_init__(self):
        if self.mu0 < 0:
            raise ValueError("mu0 must be >= 0")


@dataclass(frozen=True)
class Assignment:
    """Inferred mark for one unlabeled event."""

    event_id: int
    group: int
    prob: float


@dataclass
class FitTrace:
    """Per-iteration record of an EM run."""

    iterations: int = 0
    converged: bool = False
    deltas: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    lambda_clamps: int = 0
    fallback_rows: int = 0


@dataclass
class FittedModel:
    """A fitted (possibly multi-group) self-exciting model.

    ``assignments`` and ``group_sizes`` are populated by the fused fit;
    single-group fits leave them None.  ``window`` records the space-time
    box the model was fitted on.
    """

    n_groups: int
    window: "Window"  # noqa: F821 - data.Window, kept untyped to avoid a cycle
    groups: list[GroupParams]
    assignments: list[Assignment] | None = None
    group_sizes: np.ndarray | None = None
    trace: FitTrace | None = None

    def __post_init__(self):
        if len(self.groups) != self.n_groups:
            raise ValueError("groups length must equal n_groups")

    @property
    def is_fused(self) -> bool:
        return self.assignments is not None

    def assignment_map(self) -> dict[int, int]:
        if self.assignments is None:
            return {}
        return {a.event_id: a.group for a in self.assignments}
