"""Shared EM engine behind the single-group and multi-group estimators.

The multi-group machinery treats a single-group fit as K=1, so both public
modules delegate here and stay numerically identical on shared quantities.
Everything is plain numpy with a fixed reduction order, which makes every
fit bit-reproducible for a given seed and configuration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .kernels import (
    KdeBackground,
    KdeEvalCache,
    TriggerParams,
    _loo_space_density,
    _loo_time_density,
    select_bandwidths,
    select_bandwidths_cv,
)
from .model import Assignment, FitConfig, FitTrace, FittedModel, GroupParams

logger = logging.getLogger(__name__)

_TWO_PI = 2.0 * math.pi
_LOG_FLOOR = 1e-300


@dataclass
class SparsePosterior:
    """One group's branching probabilities.

    ``diag[i]`` is the probability that event i is a background event of
    this group; the parallel arrays (child, parent, p) hold triggering
    probabilities for pairs with t_child > t_parent.
    """

    diag: np.ndarray
    child: np.ndarray
    parent: np.ndarray
    p: np.ndarray

    @property
    def n_events(self) -> int:
        return self.diag.size

    def responsibilities(self) -> np.ndarray:
        """Per-event total probability mass assigned to this group."""
        return self.diag + np.bincount(
            self.child, weights=self.p, minlength=self.diag.size
        )


@dataclass
class EventArrays:
    """Column view of a dataset, with an optional mark override."""

    ids: np.ndarray
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    is_b: np.ndarray
    marks: np.ndarray

    @classmethod
    def from_dataset(cls, dataset, marks=None, is_b=None):
        marks = dataset.marks if marks is None else np.asarray(marks, dtype=np.int64)
        is_b = dataset.is_b if is_b is None else np.asarray(is_b, dtype=bool)
        return cls(dataset.ids, dataset.t, dataset.x, dataset.y, is_b, marks)

    @property
    def n(self) -> int:
        return self.t.size


def build_pairs(ev: EventArrays, dt_max: float, r2_max: float, block: int = 512):
    """Candidate (child, parent) index pairs with 0 < dt <= dt_max and
    squared distance <= r2_max, in (child asc, parent asc) order."""
    n = ev.n
    children = []
    parents = []
    for a in range(0, n, block):
        b = min(a + block, n)
        tb = ev.t[a:b]
        lo = np.searchsorted(ev.t, tb - dt_max, side="left")
        hi = np.searchsorted(ev.t, tb, side="left")  # strict dt > 0
        counts = hi - lo
        total = int(counts.sum())
        if total == 0:
            continue
        child = np.repeat(np.arange(a, b, dtype=np.int64), counts)
        starts = np.repeat(lo.astype(np.int64), counts)
        offsets = np.arange(total, dtype=np.int64) - np.repeat(
            np.concatenate([[0], np.cumsum(counts[:-1])]).astype(np.int64), counts
        )
        parent = starts + offsets
        if math.isfinite(r2_max):
            r2 = (ev.x[child] - ev.x[parent]) ** 2 + (ev.y[child] - ev.y[parent]) ** 2
            keep = r2 <= r2_max
            child = child[keep]
            parent = parent[keep]
        children.append(child)
        parents.append(parent)
    if not children:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy()
    return np.concatenate(children), np.concatenate(parents)


def _trigger_at_pairs(ev: EventArrays, child, parent, trig: TriggerParams):
    dt = ev.t[child] - ev.t[parent]
    r2 = (ev.x[child] - ev.x[parent]) ** 2 + (ev.y[child] - ev.y[parent]) ** 2
    norm = trig.k0 * trig.omega / (_TWO_PI * trig.sigma**2)
    with np.errstate(under="ignore"):
        return norm * np.exp(-trig.omega * dt - r2 / (2.0 * trig.sigma**2))


def collapse_marks(ev: EventArrays, n_groups: int) -> EventArrays:
    """With a single group every mark means group 0; the unmarked and
    marked encodings then coincide, keeping K=1 fits label-agnostic."""
    if n_groups != 1:
        return ev
    return EventArrays(
        ev.ids, ev.t, ev.x, ev.y, ev.is_b, np.where(ev.is_b, 0, -1).astype(np.int64)
    )


def init_diagonals(ev: EventArrays, n_groups: int) -> np.ndarray:
    """Starting posterior diagonals: 1/K for unlabeled events, a one-hot
    row for labeled ones."""
    diag = np.zeros((n_groups, ev.n))
    unl = ~ev.is_b
    diag[:, unl] = 1.0 / n_groups
    lab = np.flatnonzero(ev.is_b)
    if lab.size:
        if np.any(ev.marks[lab] >= n_groups) or np.any(ev.marks[lab] < 0):
            raise ValueError("labeled event with mark outside 0..K-1")
        diag[ev.marks[lab], lab] = 1.0
    return diag


def background_intensity(gp: GroupParams, cache: KdeEvalCache | None = None) -> np.ndarray:
    """mu0 * u * v at every support point of the group's background KDE,
    leave-one-out (each point's own kernel excluded)."""
    if gp.mu0 <= 0 or gp.background.nb <= 0:
        return np.zeros(gp.background.size)
    if cache is not None:
        u = cache.loo_space(gp.background.w, gp.background.b2)
        v = cache.loo_time(gp.background.w, gp.background.b1)
    else:
        u = _loo_space_density(gp.background)
        v = _loo_time_density(gp.background)
    return gp.mu0 * u * v


def e_step_engine(
    ev: EventArrays,
    groups: list[GroupParams],
    r_prev: np.ndarray,
    config: FitConfig,
    eps_lambda: float,
    cache: KdeEvalCache | None = None,
):
    """One expectation step.

    Returns (posteriors per group, stats dict).  Unlabeled events are
    normalized jointly across groups; labeled events only within their own
    group, leaving every other group's row exactly zero.
    """
    n = ev.n
    n_groups = len(groups)
    bg_num = np.zeros((n_groups, n))
    trig_parts = []
    lam = np.zeros((n_groups, n))
    admissible = np.ones((n_groups, n), dtype=bool)
    for k in range(n_groups):
        admissible[k] = (~ev.is_b) | (ev.marks == k)

    for k, gp in enumerate(groups):
        bg_num[k] = np.where(admissible[k], background_intensity(gp, cache), 0.0)
        child = parent = num = None
        if gp.trigger.k0 > 0:
            dt_max = config.time_cutoff / gp.trigger.omega
            r2_max = (config.space_cutoff * gp.trigger.sigma) ** 2
            child, parent = build_pairs(ev, dt_max, r2_max)
            if child.size:
                keep = admissible[k][child] & (r_prev[k][parent] > 0)
                child = child[keep]
                parent = parent[keep]
            if child.size:
                num = r_prev[k][parent] * _trigger_at_pairs(ev, child, parent, gp.trigger)
                pos = num > 0
                child, parent, num = child[pos], parent[pos], num[pos]
        if child is None or child.size == 0:
            child = np.empty(0, dtype=np.int64)
            parent = np.empty(0, dtype=np.int64)
            num = np.empty(0)
        trig_parts.append((child, parent, num))
        lam[k] = bg_num[k] + np.bincount(child, weights=num, minlength=n)

    z = np.where(ev.is_b, lam[ev.marks, np.arange(n)], lam.sum(axis=0))
    has_source = any(
        (gp.mu0 > 0 and gp.background.nb > 0) or gp.trigger.k0 > 0 for gp in groups
    )
    if not np.any(z > 0) and not has_source:
        raise ValueError("all event intensities are zero: model has no mass")
    fallback = z <= 0.0
    clamps = int(np.count_nonzero((z > 0) & (z < eps_lambda)))
    z_safe = np.where(z > 0, z, 1.0)

    posteriors = []
    for k in range(n_groups):
        diag = bg_num[k] / z_safe
        if np.any(fallback):
            fb_rows = fallback & admissible[k]
            diag[fb_rows] = np.where(ev.is_b[fb_rows], 1.0, 1.0 / n_groups)
        child, parent, num = trig_parts[k]
        posteriors.append(
            SparsePosterior(diag=diag, child=child, parent=parent, p=num / z_safe[child])
        )
    stats = {"lambda_clamps": clamps, "fallback_rows": int(fallback.sum())}
    return posteriors, stats


def check_posterior_invariants(
    ev: EventArrays, posteriors: list[SparsePosterior], tol: float = 1e-10
):
    """Joint row sums must be 1 and labeled rows masked to their own group."""
    rows = np.zeros(ev.n)
    for k, post in enumerate(posteriors):
        rows += post.responsibilities()
        off = ev.is_b & (ev.marks != k)
        if np.any(post.diag[off] != 0.0):
            raise RuntimeError("label mask violated on posterior diagonal")
        if post.child.size and np.any(off[post.child]):
            raise RuntimeError("label mask violated on triggering entries")
    err = np.max(np.abs(rows - 1.0)) if ev.n else 0.0
    if err > tol:
        raise RuntimeError(f"posterior rows deviate from 1 by {err:.3e}")


def m_step_engine(
    ev: EventArrays,
    posteriors: list[SparsePosterior],
    config: FitConfig,
    window,
    prev_groups: list[GroupParams] | None = None,
) -> list[GroupParams]:
    """Weighted-average parameter updates from the current posterior.

    One bandwidth pair is selected from the pooled background weights and
    shared by every group: a group whose mass shrinks mid-run would
    otherwise see its own bandwidth statistic degrade, flattening its
    density and starving it of further background mass.
    """
    sigma_min = config.sigma_floor_frac * window.diagonal
    pooled = posteriors[0].diag.copy()
    for post in posteriors[1:]:
        pooled += post.diag
    prev_bg = prev_groups[0].background if prev_groups is not None else None
    b1, b2 = _select_shared_bandwidths(ev, pooled, config, window, prev_bg)
    out = []
    for k, post in enumerate(posteriors):
        sum_p = float(post.p.sum())
        sum_diag = float(post.diag.sum())
        total = sum_p + sum_diag
        background = KdeBackground(ev.t, ev.x, ev.y, post.diag.copy(), b1, b2)
        if total < 1.0:
            # frozen empty group: keep index stability, see fuse docs
            out.append(
                GroupParams(
                    trigger=TriggerParams(0.0, config.prior_omega, max(config.prior_sigma, sigma_min)),
                    mu0=sum_diag,
                    background=background,
                    empty=True,
                )
            )
            continue
        k0 = sum_p / total
        if sum_p > 0:
            dt = ev.t[post.child] - ev.t[post.parent]
            r2 = (ev.x[post.child] - ev.x[post.parent]) ** 2 + (
                ev.y[post.child] - ev.y[post.parent]
            ) ** 2
            p_dt = float(post.p @ dt)
            omega = sum_p / p_dt if p_dt > 0 else config.prior_omega
            sigma = math.sqrt(float(post.p @ r2) / (2.0 * sum_p))
        else:
            k0 = 0.0
            omega = config.prior_omega
            sigma = config.prior_sigma
        sigma = max(sigma, sigma_min)
        out.append(
            GroupParams(
                trigger=TriggerParams(k0, omega, sigma),
                mu0=sum_diag,
                background=background,
            )
        )
    return out


def _select_shared_bandwidths(
    ev: EventArrays, weights: np.ndarray, config: FitConfig, window, prev_bg
):
    if config.freeze_bandwidths and prev_bg is not None:
        return prev_bg.b1, prev_bg.b2
    select = select_bandwidths_cv if config.bandwidth_strategy == "cv" else select_bandwidths
    # neighbor count scaled to the available background mass: a 20-event
    # background smoothed over its 15th neighbor would blur to its
    # diameter and lose its spatial profile entirely
    m = max(float(weights.sum()), 2.0)
    kk = min(config.bandwidth_k, max(int(round(math.sqrt(m))), 2))
    b1, b2 = select(
        ev.t, ev.x, ev.y, weights=weights, k=kk, floor=config.bandwidth_floor
    )
    if config.adaptive_bandwidth_floor and window is not None:
        # A background of mass m cannot resolve detail below its own k-NN
        # sampling scale; flooring there keeps the KDE from collapsing
        # onto excitation clusters mid-EM.
        b1 = max(b1, 0.25 * kk * window.duration / m)
        b2 = max(b2, 0.5 * math.sqrt(kk * window.area / (math.pi * m)))
    return b1, b2


def _make_background(
    ev: EventArrays, weights: np.ndarray, config: FitConfig, prev_bg, window=None
):
    b1, b2 = _select_shared_bandwidths(ev, weights, config, window, prev_bg)
    return KdeBackground(ev.t, ev.x, ev.y, weights.copy(), b1, b2)


def objective_engine(
    ev: EventArrays,
    posteriors: list[SparsePosterior],
    groups: list[GroupParams],
    r: np.ndarray,
    window,
    cache: KdeEvalCache | None = None,
) -> float:
    """Soft complete-data log-likelihood of the current (P, theta) pair.

    Background and triggering densities integrate to one in space, so the
    background integral collapses to mu0; the triggering integral keeps
    its temporal tail correction at the window end.
    """
    total = 0.0
    t_end = window.t1
    for k, (post, gp) in enumerate(zip(posteriors, groups)):
        mask = post.diag > 0
        if np.any(mask) and gp.mu0 > 0 and gp.background.nb > 0:
            dens = background_intensity(gp, cache)
            total += float(
                post.diag[mask] @ np.log(np.maximum(dens[mask], _LOG_FLOOR))
            )
        total -= gp.mu0
        if post.p.size:
            g = _trigger_at_pairs(ev, post.child, post.parent, gp.trigger)
            total += float(post.p @ np.log(np.maximum(g, _LOG_FLOOR)))
        if gp.trigger.k0 > 0:
            tail = gp.trigger.k0 * -np.expm1(-gp.trigger.omega * (t_end - ev.t))
            total -= float(r[k] @ tail)
    return total


def _scale_statistics(ev: EventArrays, config: FitConfig):
    """Deterministic data scales for the warm start: mean inter-event time
    and median pairwise distance (seeded subsample above 2000 events)."""
    n = ev.n
    tbar = (ev.t[-1] - ev.t[0]) / (n - 1) if n > 1 else 1.0
    if tbar <= 0:
        tbar = 1.0
    if n > 2000:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
        idx = rng.choice(n, size=2000, replace=False)
        xs, ys = ev.x[idx], ev.y[idx]
    else:
        xs, ys = ev.x, ev.y
    dx = xs[:, None] - xs[None, :]
    dy = ys[:, None] - ys[None, :]
    iu = np.triu_indices(xs.size, k=1)
    rbar = float(np.median(np.hypot(dx[iu], dy[iu]))) if iu[0].size else 0.0
    return tbar, rbar


def _warm_trigger_from(
    t: np.ndarray, x: np.ndarray, y: np.ndarray, config: FitConfig, window
) -> TriggerParams | None:
    """Scale-aware starting excitation parameters from one point set.

    Pairs are scored by temporal and spatial proximity relative to the
    set's own scales, q_ij = exp(-dt/tbar - d^2/(2 rbar^2)); running the
    weighted-average updates on those scores yields a decay and spread on
    the natural scale of temporally adjacent events, which gives the
    excitation kernel enough contrast to start claiming clusters.
    """
    n = t.size
    if n < 8:
        return None
    tbar = (t[-1] - t[0]) / (n - 1)
    if tbar <= 0:
        return None
    iu = np.triu_indices(n, k=1) if n <= 2000 else None
    if iu is None:
        return None
    rbar = float(np.median(np.hypot(x[iu[0]] - x[iu[1]], y[iu[0]] - y[iu[1]])))
    sigma_min = config.sigma_floor_frac * window.diagonal
    sub = EventArrays(
        ids=np.arange(n), t=t, x=x, y=y,
        is_b=np.zeros(n, dtype=bool), marks=np.full(n, -1, dtype=np.int64),
    )
    child, parent = build_pairs(sub, 40.0 * tbar, math.inf)
    if child.size == 0:
        return None
    dt = t[child] - t[parent]
    r2 = (x[child] - x[parent]) ** 2 + (y[child] - y[parent]) ** 2
    rb2 = max(rbar, config.bandwidth_floor) ** 2
    with np.errstate(under="ignore"):
        q = np.exp(-dt / tbar - r2 / (2.0 * rb2))
    sq = float(q.sum())
    if sq <= 0 or float(q @ dt) <= 0:
        return None
    omega0 = sq / float(q @ dt)
    sigma0 = max(math.sqrt(float(q @ r2) / (2.0 * sq)), sigma_min, config.bandwidth_floor)
    return TriggerParams(config.init_k0, omega0, sigma0)


def initial_groups(
    ev: EventArrays, diag0: np.ndarray, config: FitConfig, window
) -> list[GroupParams]:
    """Backgrounds from the starting diagonals plus scale-aware trigger
    guesses (the all-diagonal start carries no pair information).

    Each group warm-starts from its own labeled events when it has enough
    of them, anchoring every group near its own time and length scales;
    groups without a usable labeled subset share a global warm start."""
    tbar, rbar = _scale_statistics(ev, config)
    sigma_min = config.sigma_floor_frac * window.diagonal
    fallback = TriggerParams(
        config.init_k0, 1.0 / tbar, max(rbar / 2.0, sigma_min, config.bandwidth_floor)
    )
    shared = _warm_trigger_from(ev.t, ev.x, ev.y, config, window) or fallback
    b1, b2 = _select_shared_bandwidths(ev, diag0.sum(axis=0), config, window, None)
    groups = []
    for k in range(diag0.shape[0]):
        warm = None
        if diag0.shape[0] > 1:
            # with one group the labeled subset is just a subsample of the
            # whole data, so the shared warm start is already exact
            sel = ev.is_b & (ev.marks == k)
            if np.any(sel):
                warm = _warm_trigger_from(ev.t[sel], ev.x[sel], ev.y[sel], config, window)
        background = KdeBackground(ev.t, ev.x, ev.y, diag0[k].copy(), b1, b2)
        groups.append(
            GroupParams(
                trigger=warm or shared,
                mu0=float(diag0[k].sum()),
                background=background,
            )
        )
    return groups


def _param_vector(groups: list[GroupParams]) -> np.ndarray:
    return np.array(
        [
            [g.trigger.k0, g.trigger.omega, g.trigger.sigma, g.mu0]
            for g in groups
        ]
    )


def fit_engine(
    dataset,
    n_groups: int,
    config: FitConfig,
    marks=None,
    is_b=None,
    keep_assignments: bool = True,
):
    """Run EM to convergence and package the result.

    ``marks``/``is_b`` override the dataset's labels (the single-group fit
    passes all-unlabeled).  Returns (FittedModel, posteriors, responsibilities).
    """
    if len(dataset) < 2:
        raise ValueError("need at least 2 events to fit")
    ev = collapse_marks(EventArrays.from_dataset(dataset, marks=marks, is_b=is_b), n_groups)
    window = dataset.window
    eps_lambda = config.epsilon_lambda_scale * ev.n / window.volume
    cache = KdeEvalCache(ev.t, ev.x, ev.y) if ev.n <= config.kde_cache_limit else None

    diag0 = init_diagonals(ev, n_groups)
    r = diag0.copy()
    groups = initial_groups(ev, diag0, config, window)
    trace = FitTrace()
    posteriors = None

    theta = _param_vector(groups)
    step_config = config
    for it in range(1, config.max_iters + 1):
        posteriors, stats = e_step_engine(ev, groups, r, step_config, eps_lambda, cache=cache)
        trace.lambda_clamps += stats["lambda_clamps"]
        trace.fallback_rows += stats["fallback_rows"]
        if config.validate_posteriors:
            check_posterior_invariants(ev, posteriors)
        r = np.vstack([p.responsibilities() for p in posteriors])
        groups = m_step_engine(ev, posteriors, step_config, window, prev_groups=groups)
        new_theta = _param_vector(groups)
        delta = float(np.max(np.abs(new_theta - theta) / (np.abs(theta) + 1e-12)))
        theta = new_theta
        trace.deltas.append(delta)
        if config.track_objective:
            trace.objective.append(
                objective_engine(ev, posteriors, groups, r, window, cache=cache)
            )
        trace.iterations = it
        if delta < config.tol:
            trace.converged = True
            break
        # once parameters settle, pin the bandwidths so the discrete
        # resampled k-NN statistic cannot hold the loop in a limit cycle
        if (
            not step_config.freeze_bandwidths
            and config.bandwidth_freeze_delta > 0
            and it >= 10
            and delta < config.bandwidth_freeze_delta
        ):
            step_config = replace(step_config, freeze_bandwidths=True)
    if not trace.converged:
        logger.warning("EM did not converge in %d iterations", config.max_iters)

    assignments = None
    group_sizes = r.sum(axis=1)
    if keep_assignments:
        assignments = []
        for i in np.flatnonzero(~ev.is_b):
            k = int(np.argmax(r[:, i]))
            assignments.append(Assignment(int(ev.ids[i]), k, float(r[k, i])))
    model = FittedModel(
        n_groups=n_groups,
        window=window,
        groups=groups,
        assignments=assignments,
        group_sizes=group_sizes,
        trace=trace,
    )
    return model, posteriors, r
