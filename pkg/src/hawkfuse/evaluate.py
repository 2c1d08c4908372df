"""Model scoring: observed-data log-likelihood, AIC, grid forecasts, AUC.

The observed-data log-likelihood scores a chosen subset of events (A, B,
or all) against the model intensity, conditioning triggering sums on the
full history the model can attribute to a group: an event's group comes
from its mark, from the model's stored assignments, or trivially from a
single-group model.  History events the model cannot attribute are left
out of its triggering sums, so a model fitted on one dataset is scored
with exactly the history it knows about.

Grid forecasts rank cell-center intensities at the start of each day and
label a cell positive when an event of the target subset lands in it
during that day; the ranking quality is the tie-aware Mann-Whitney AUC.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import MarkedDataset, Window
from .kernels import kde_space, kde_time, kde_time_mass
from .model import FitConfig, FittedModel

__all__ = [
    "GridForecast",
    "ScoreRow",
    "observed_loglik",
    "aic",
    "grid_forecast",
    "forecast_series",
    "auc",
    "branching_ratio",
    "compare_models",
    "fit_baselines",
    "write_report_csv",
    "write_forecast_csv",
]

logger = logging.getLogger(__name__)

_TWO_PI = 2.0 * math.pi


@dataclass
class GridForecast:
    """Scores and next-day occurrence labels over a G x G cell grid."""

    day: int
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels must share a shape")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise ValueError("scores must be finite and >= 0")


@dataclass
class ScoreRow:
    model: str
    subset: str
    loglik: float
    df: int
    aic: float
    auc: float | None = None


def resolve_groups(dataset: MarkedDataset, model: FittedModel) -> np.ndarray:
    """Group index per event, -1 where the model cannot attribute one."""
    n = len(dataset)
    if model.n_groups == 1:
        return np.zeros(n, dtype=np.int64)
    out = dataset.marks.copy()
    amap = model.assignment_map()
    for i in np.flatnonzero(out < 0):
        out[i] = amap.get(int(dataset.ids[i]), -1)
    return out


def _subset_mask(dataset: MarkedDataset, subset: str) -> np.ndarray:
    subset = subset.lower()
    if subset == "all":
        return np.ones(len(dataset), dtype=bool)
    if subset == "a":
        return ~dataset.is_b
    if subset == "b":
        return dataset.is_b.copy()
    raise ValueError("subset must be 'A', 'B', or 'all'")


def _trigger_sums(
    child_t, child_x, child_y, par_t, par_x, par_y, trig, time_cutoff=40.0, block=512
):
    """Sum of the excitation kernel over all (child, parent) pairs with
    t_parent < t_child, vectorized in child blocks."""
    n = child_t.size
    out = np.zeros(n)
    if par_t.size == 0 or trig.k0 <= 0:
        return out
    dt_max = time_cutoff / trig.omega
    norm = trig.k0 * trig.omega / (_TWO_PI * trig.sigma**2)
    for a in range(0, n, block):
        b = min(a + block, n)
        lo = np.searchsorted(par_t, child_t[a:b] - dt_max, side="left")
        hi = np.searchsorted(par_t, child_t[a:b], side="left")
        for row in range(a, b):
            l, h = lo[row - a], hi[row - a]
            if h <= l:
                continue
            dt = child_t[row] - par_t[l:h]
            r2 = (child_x[row] - par_x[l:h]) ** 2 + (child_y[row] - par_y[l:h]) ** 2
            with np.errstate(under="ignore"):
                out[row] = norm * float(
                    np.exp(-trig.omega * dt - r2 / (2.0 * trig.sigma**2)).sum()
                )
    return out


def observed_loglik(
    dataset: MarkedDataset,
    model: FittedModel,
    window: Window | None = None,
    subset: str = "all",
    config: FitConfig | None = None,
    calibrate_subset: bool = True,
) -> float:
    """Observed-data log-likelihood of the subset under the model.

    sum over scored events of log lambda^k at the event, minus the model's
    intensity integral over the window: each group's background mass times
    its temporal coverage, plus every attributable event's triggered mass
    with the temporal tail correction.

    When a proper subset is scored (``subset`` "A" or "B") the model's
    intensity level is profiled: its integral is rescaled to the subset
    count (the ML thinning factor), so a model of the full merged process
    and a model trained on the subset alone are compared on the same
    pattern without a bookkeeping penalty for the events not being scored.
    ``calibrate_subset=False`` gives the raw uncalibrated value.
    """
    window = window or dataset.window
    config = config or FitConfig()
    groups = resolve_groups(dataset, model)
    scored = _subset_mask(dataset, subset)
    scored &= (dataset.t >= window.t0) & (dataset.t <= window.t1)
    # a single-group model ignores marks: every event scores under its one
    # intensity, exactly like an unmarked one
    mark_known = (dataset.marks >= 0) & (model.n_groups > 1)
    unlabeled_scored = scored & ~mark_known
    if model.n_groups > 1 and model.assignments is None and np.any(unlabeled_scored):
        bad = dataset.ids[unlabeled_scored][:5]
        raise ValueError(
            f"events {bad.tolist()} have no mark and the model has no responsibilities"
        )
    eps_lambda = config.epsilon_lambda_scale * max(len(dataset), 1) / window.volume

    # marked events are scored under their own group's intensity; unmarked
    # events under the ground intensity sum_k lambda^k (their group is not
    # observed, so the mixture is the observed-data density)
    scored_idx = np.flatnonzero(scored)
    pos = np.full(len(dataset), -1, dtype=np.int64)
    pos[scored_idx] = np.arange(scored_idx.size)
    lam = np.zeros(scored_idx.size)
    integral = 0.0
    hist_ok = (groups >= 0) & (dataset.t <= window.t1)
    for k, gp in enumerate(model.groups):
        sc = unlabeled_scored | (scored & mark_known & (dataset.marks == k))
        if np.any(sc):
            lam_k = np.zeros(int(sc.sum()))
            if gp.mu0 > 0 and gp.background.nb > 0:
                u = kde_space(dataset.x[sc], dataset.y[sc], gp.background)
                v = kde_time(dataset.t[sc], gp.background)
                lam_k += gp.mu0 * u * v
            hk = hist_ok & (groups == k)
            lam_k += _trigger_sums(
                dataset.t[sc],
                dataset.x[sc],
                dataset.y[sc],
                dataset.t[hk],
                dataset.x[hk],
                dataset.y[hk],
                gp.trigger,
                time_cutoff=config.time_cutoff,
            )
            lam[pos[sc]] += lam_k

        # integral terms: background coverage + triggered mass of history events
        if gp.mu0 > 0 and gp.background.nb > 0:
            integral += gp.mu0 * kde_time_mass(gp.background, window.t0, window.t1)
        hk = hist_ok & (groups == k)
        if np.any(hk) and gp.trigger.k0 > 0:
            tj = dataset.t[hk]
            lead = np.exp(-gp.trigger.omega * np.maximum(window.t0 - tj, 0.0))
            tail = np.exp(-gp.trigger.omega * (window.t1 - tj))
            integral += gp.trigger.k0 * float((lead - tail).sum())

    n_clamped = int((lam < eps_lambda).sum())
    if n_clamped:
        logger.warning("clamped %d intensities below the floor", n_clamped)
    log_sum = float(np.log(np.maximum(lam, eps_lambda)).sum())

    n_scored = int(scored.sum())
    if calibrate_subset and subset.lower() != "all" and n_scored > 0 and integral > 0:
        # profile the global intensity scale: max over f of
        # sum log(f*lambda) - f*integral is attained at f = n/integral
        scale = n_scored / integral
        return log_sum + n_scored * math.log(scale) - n_scored
    return log_sum - integral


def aic(loglik: float, df: int) -> float:
    """Akaike information criterion: 2*df - 2*loglik."""
    if df < 1:
        raise ValueError("df must be >= 1")
    return 2.0 * df - 2.0 * loglik


def _cell_centers(window: Window, grid: int):
    cw = (window.x1 - window.x0) / grid
    ch = (window.y1 - window.y0) / grid
    cx = window.x0 + cw * (np.arange(grid) + 0.5)
    cy = window.y0 + ch * (np.arange(grid) + 0.5)
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    return gx.ravel(), gy.ravel()


def _bin_labels(dataset, mask, window, grid, t_lo, t_hi) -> np.ndarray:
    labels = np.zeros(grid * grid)
    sel = mask & (dataset.t >= t_lo) & (dataset.t < t_hi)
    if not np.any(sel):
        return labels
    xs, ys = dataset.x[sel], dataset.y[sel]
    ix = np.floor((xs - window.x0) / (window.x1 - window.x0) * grid).astype(int)
    iy = np.floor((ys - window.y0) / (window.y1 - window.y0) * grid).astype(int)
    inside = (xs >= window.x0) & (xs <= window.x1) & (ys >= window.y0) & (ys <= window.y1)
    ix = np.clip(ix, 0, grid - 1)
    iy = np.clip(iy, 0, grid - 1)
    labels[ix[inside] * grid + iy[inside]] = 1.0
    return labels


def grid_forecast(
    model: FittedModel,
    dataset: MarkedDataset,
    day: int,
    grid: int = 50,
    subset: str = "all",
    day_length: float = 1.0,
    mode: str = "start",
) -> GridForecast:
    """Intensity scores at cell centers at the start of one day, with
    next-day occurrence labels for the target subset.

    ``mode="start"`` evaluates the intensity at day start (default);
    ``mode="integrated"`` accumulates it over the whole day.
    """
    window = model.window
    t_start = window.t0 + day * day_length
    if not (window.t0 <= t_start <= window.t1):
        raise ValueError(f"day {day} lies outside the model window")
    if mode not in ("start", "integrated"):
        raise ValueError("mode must be 'start' or 'integrated'")
    gx, gy = _cell_centers(window, grid)
    groups = resolve_groups(dataset, model)
    hist = (groups >= 0) & (dataset.t < t_start)
    scores = np.zeros(grid * grid)
    for k, gp in enumerate(model.groups):
        if gp.mu0 > 0 and gp.background.nb > 0:
            u = kde_space(gx, gy, gp.background)
            if mode == "start":
                scores += gp.mu0 * u * kde_time(t_start, gp.background)
            else:
                scores += gp.mu0 * u * kde_time_mass(
                    gp.background, t_start, t_start + day_length
                )
        hk = hist & (groups == k)
        if np.any(hk) and gp.trigger.k0 > 0:
            trig = gp.trigger
            dtv = t_start - dataset.t[hk]
            if mode == "start":
                wgt = trig.k0 * trig.omega * np.exp(-trig.omega * dtv)
            else:
                wgt = trig.k0 * np.exp(-trig.omega * dtv) * -np.expm1(-trig.omega * day_length)
            d2 = (gx[:, None] - dataset.x[hk][None, :]) ** 2 + (
                gy[:, None] - dataset.y[hk][None, :]
            ) ** 2
            with np.errstate(under="ignore"):
                scores += (np.exp(-d2 / (2.0 * trig.sigma**2)) @ wgt) / (
                    _TWO_PI * trig.sigma**2
                )
    labels = _bin_labels(
        dataset, _subset_mask(dataset, subset), window, grid, t_start, t_start + day_length
    )
    return GridForecast(
        day=day, scores=scores.reshape(grid, grid), labels=labels.reshape(grid, grid)
    )


def forecast_series(
    model: FittedModel,
    dataset: MarkedDataset,
    days,
    grid: int = 50,
    subset: str = "all",
    day_length: float = 1.0,
    mode: str = "start",
):
    """Forecasts for many days at once via exponential-decay recursion.

    Equivalent to calling :func:`grid_forecast` per day but each history
    event's spatial kernel is rasterized once.  Returns (scores, labels)
    arrays of shape (n_days, grid*grid).
    """
    window = model.window
    days = sorted(int(d) for d in days)
    if not days:
        raise ValueError("days must be nonempty")
    gx, gy = _cell_centers(window, grid)
    groups = resolve_groups(dataset, model)
    sub_mask = _subset_mask(dataset, subset)
    n_days = len(days)
    n_cells = grid * grid
    scores = np.zeros((n_days, n_cells))
    labels = np.zeros((n_days, n_cells))

    for d_pos, day in enumerate(days):
        t_lo = window.t0 + day * day_length
        labels[d_pos] = _bin_labels(
            dataset, sub_mask, window, grid, t_lo, t_lo + day_length
        )

    for k, gp in enumerate(model.groups):
        if gp.mu0 > 0 and gp.background.nb > 0:
            u = kde_space(gx, gy, gp.background)
            for d_pos, day in enumerate(days):
                ts = window.t0 + day * day_length
                if mode == "start":
                    scores[d_pos] += gp.mu0 * u * kde_time(ts, gp.background)
                else:
                    scores[d_pos] += gp.mu0 * u * kde_time_mass(
                        gp.background, ts, ts + day_length
                    )
        if gp.trigger.k0 <= 0:
            continue
        trig = gp.trigger
        hk = np.flatnonzero((groups == k) & (dataset.t < window.t0 + days[-1] * day_length))
        state = np.zeros(n_cells)  # sum_j k0*omega*exp(-omega*(t_now - t_j))*phi_j
        t_now = None
        ptr = 0
        ht, hx, hy = dataset.t[hk], dataset.x[hk], dataset.y[hk]
        for d_pos, day in enumerate(days):
            ts = window.t0 + day * day_length
            if t_now is not None and ts > t_now:
                state = state * math.exp(-trig.omega * (ts - t_now))
            new_hi = int(np.searchsorted(ht, ts, side="left"))
            if new_hi > ptr:
                sl = slice(ptr, new_hi)
                wgt = trig.k0 * trig.omega * np.exp(-trig.omega * (ts - ht[sl]))
                d2 = (gx[:, None] - hx[sl][None, :]) ** 2 + (gy[:, None] - hy[sl][None, :]) ** 2
                with np.errstate(under="ignore"):
                    state = state + (np.exp(-d2 / (2.0 * trig.sigma**2)) @ wgt) / (
                        _TWO_PI * trig.sigma**2
                    )
                ptr = new_hi
            t_now = ts
            if mode == "start":
                scores[d_pos] += state
            else:
                scores[d_pos] += state / trig.omega * -math.expm1(-trig.omega * day_length)
    return scores, labels


def auc(scores, labels) -> float:
    """Tie-aware ranking AUC: P(score+ > score-) + 0.5 * P(score+ = score-).

    Computed with integer win/tie counts so it matches an exhaustive
    pairwise comparison exactly.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    pos_total = int((labels == 1).sum())
    neg_total = int(labels.size - pos_total)
    if pos_total == 0 or neg_total == 0:
        raise ValueError("degenerate labels: need at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    l = labels[order]
    wins2 = 0  # twice the win count plus ties, kept integral
    neg_below = 0
    i = 0
    n = s.size
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        pos_here = int((l[i:j] == 1).sum())
        neg_here = (j - i) - pos_here
        wins2 += pos_here * (2 * neg_below + neg_here)
        neg_below += neg_here
        i = j
    return wins2 / (2.0 * pos_total * neg_total)


def branching_ratio(model: FittedModel) -> list[tuple[float, bool]]:
    """Per-group (k0, subcritical) pairs straight off the fitted model."""
    return [(g.trigger.k0, g.trigger.k0 < 1.0) for g in model.groups]


def fit_baselines(dataset: MarkedDataset, n_groups: int, config: FitConfig | None = None):
    """Single-dataset reference fits: an unmarked model on source A alone
    and a per-group model on source B alone."""
    from .em import fit as fit_single
    from .fuse import fit_fused

    config = config or FitConfig()
    model_a = fit_single(dataset.filter_source("A"), config)
    model_b = fit_fused(dataset.filter_source("B"), n_groups, config)
    return model_a, model_b


def compare_models(
    dataset: MarkedDataset,
    fused: FittedModel,
    baseline_a: FittedModel,
    baseline_b: FittedModel,
    window: Window | None = None,
    config: FitConfig | None = None,
    with_auc: bool = False,
    grid: int = 50,
    days=None,
    day_length: float = 1.0,
) -> list[ScoreRow]:
    """Score the fused model against both single-dataset baselines on the
    subsets they compete on."""
    window = window or dataset.window
    rows = []
    pairs = [
        ("fused", fused, "A"),
        ("fused", fused, "B"),
        ("baseline_A", baseline_a, "A"),
        ("baseline_B", baseline_b, "B"),
    ]
    for name, model, subset in pairs:
        ll = observed_loglik(dataset, model, window, subset=subset, config=config)
        df = 4 * model.n_groups
        auc_val = None
        if with_auc:
            if days is None:
                last = int(math.floor(window.duration / day_length)) - 1
                days = range(0, max(last, 1))
            scores, labels = forecast_series(
                model, dataset, days, grid=grid, subset=subset, day_length=day_length
            )
            auc_val = auc(scores.ravel(), labels.ravel())
        rows.append(
            ScoreRow(model=name, subset=subset, loglik=ll, df=df, aic=aic(ll, df), auc=auc_val)
        )
    return rows


def write_report_csv(rows: list[ScoreRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "subset", "loglik", "df", "aic", "auc"])
        for r in rows:
            writer.writerow(
                [r.model, r.subset, repr(r.loglik), r.df, repr(r.aic), "" if r.auc is None else repr(r.auc)]
            )


def write_forecast_csv(forecasts: list[GridForecast], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["day", "cell_x", "cell_y", "score", "label"])
        for fc in forecasts:
            grid = fc.scores.shape[0]
            for ix in range(grid):
                for iy in range(grid):
                    writer.writerow(
                        [fc.day, ix, iy, repr(float(fc.scores[ix, iy])), int(fc.labels[ix, iy])]
                    )
