"""Branching-process simulator for multi-group self-exciting data.

Each group draws Poisson(mu) background events, uniform in time over the
horizon and placed in the unit square by quadrant probabilities; every
event then spawns Poisson(k0) offspring displaced by an exponential time
lag and an isotropic Gaussian offset, recursively, until the cascade dies
out or leaves the horizon.  Offspring may land outside the unit square
and are kept; the dataset window grows to the data bounding box.

True group labels and parent links are retained beside the dataset so
recovery experiments can score themselves.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ._validation import check_in_unit_interval, check_nonnegative
from .data import EventRecord, MarkedDataset, Window
from .kernels import TriggerParams

__all__ = [
    "GroupSimSpec",
    "SimConfig",
    "SimResult",
    "simulate_background",
    "simulate_offspring",
    "simulate_dataset",
    "resplit",
    "write_truth",
    "four_group_config",
]

# quadrants of the unit square, indexed 0..3:
# 0 upper-left, 1 upper-right, 2 lower-left, 3 lower-right
_QUAD_X0 = np.array([0.0, 0.5, 0.0, 0.5])
_QUAD_Y0 = np.array([0.5, 0.5, 0.0, 0.0])

MAX_CASCADE = 1_000_000


@dataclass(frozen=True)
class GroupSimSpec:
    """Background quadrant probabilities, expected background count over
    the horizon, and excitation parameters for one group."""

    bg: tuple[float, float, float, float]
    mu: float
    trigger: TriggerParams
    label: int

    def __post_init__(self):
        if len(self.bg) != 4:
            raise ValueError("bg must have 4 quadrant probabilities")
        check_nonnegative("bg", list(self.bg))
        if abs(sum(self.bg) - 1.0) > 1e-12:
            raise ValueError(f"bg must sum to 1, got {sum(self.bg)}")
        check_nonnegative("mu", self.mu)
        if self.label < 0:
            raise ValueError("label must be >= 0")


@dataclass(frozen=True)
class SimConfig:
    groups: tuple[GroupSimSpec, ...]
    t_horizon: float
    unlabeled_fraction: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if self.t_horizon <= 0:
            raise ValueError("t_horizon must be > 0")
        check_in_unit_interval("unlabeled_fraction", self.unlabeled_fraction)


@dataclass
class SimResult:
    """Simulated dataset plus the hidden truth for diagnostics."""

    dataset: MarkedDataset
    true_groups: np.ndarray  # aligned with dataset order
    parent_ids: np.ndarray  # event id of the parent, -1 for background

    def true_counts(self) -> np.ndarray:
        return np.bincount(self.true_groups, minlength=self.dataset.n_groups)


def _rng_from(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.random.SeedSequence(seed))


def simulate_background(spec: GroupSimSpec, t_horizon: float, seed=0):
    """Poisson(mu) spontaneous events: uniform times, quadrant locations."""
    rng = _rng_from(seed)
    n = int(rng.poisson(spec.mu))
    t = rng.uniform(0.0, t_horizon, size=n)
    quad = rng.choice(4, size=n, p=np.asarray(spec.bg, dtype=float))
    x = _QUAD_X0[quad] + 0.5 * rng.random(n)
    y = _QUAD_Y0[quad] + 0.5 * rng.random(n)
    return t, x, y


def _spawn_generation(rng, t, x, y, trigger: TriggerParams, t_horizon: float):
    """One generation of offspring for the given parents; horizon-clipped."""
    counts = rng.poisson(trigger.k0, size=t.size)
    total = int(counts.sum())
    if total == 0:
        return (np.empty(0), np.empty(0), np.empty(0), np.empty(0, dtype=np.int64))
    parent_idx = np.repeat(np.arange(t.size, dtype=np.int64), counts)
    dt = rng.exponential(1.0 / trigger.omega, size=total)
    off = rng.normal(0.0, trigger.sigma, size=(total, 2))
    ct = t[parent_idx] + dt
    keep = ct <= t_horizon
    return (
        ct[keep],
        x[parent_idx[keep]] + off[keep, 0],
        y[parent_idx[keep]] + off[keep, 1],
        parent_idx[keep],
    )


def simulate_offspring(
    parent_t: float,
    parent_x: float,
    parent_y: float,
    trigger: TriggerParams,
    t_horizon: float,
    seed=0,
    max_events: int = MAX_CASCADE,
):
    """Full cascade below a single parent event.

    Returns (t, x, y, parent_index) arrays over all generations, where
    parent_index points into the returned arrays and -1 means the root
    parent itself.
    """
    if parent_t > t_horizon:
        raise ValueError("parent event lies beyond the horizon")
    rng = _rng_from(seed)
    out_t, out_x, out_y, out_par = [], [], [], []
    frontier = (
        np.array([parent_t]),
        np.array([parent_x]),
        np.array([parent_y]),
        np.array([-1], dtype=np.int64),
    )
    produced = 0
    frontier_global = frontier[3]  # global index of each frontier member
    while frontier[0].size:
        ct, cx, cy, pidx = _spawn_generation(
            rng, frontier[0], frontier[1], frontier[2], trigger, t_horizon
        )
        if ct.size == 0:
            break
        produced += ct.size
        if produced > max_events:
            raise RuntimeError(
                f"supercritical cascade: more than {max_events} offspring generated"
            )
        global_idx = np.arange(len(out_t), len(out_t) + ct.size, dtype=np.int64)
        out_t.extend(ct.tolist())
        out_x.extend(cx.tolist())
        out_y.extend(cy.tolist())
        out_par.extend(frontier_global[pidx].tolist())
        frontier = (ct, cx, cy, pidx)
        frontier_global = global_idx
    return (
        np.array(out_t),
        np.array(out_x),
        np.array(out_y),
        np.array(out_par, dtype=np.int64),
    )


def simulate_dataset(config: SimConfig, rng=None) -> SimResult:
    """Simulate all groups, merge, and split into sources A and B."""
    rng = _rng_from(config.seed) if rng is None else _rng_from(rng)
    n_groups = len(config.groups)
    t_all, x_all, y_all, group_all, parent_all = [], [], [], [], []

    for spec in config.groups:
        bt, bx, by = simulate_background(spec, config.t_horizon, rng)
        base = len(t_all)
        t_all.extend(bt.tolist())
        x_all.extend(bx.tolist())
        y_all.extend(by.tolist())
        group_all.extend([spec.label] * bt.size)
        parent_all.extend([-1] * bt.size)

        # breadth-first cascades over the whole group's background cohort
        frontier = (bt, bx, by)
        frontier_global = np.arange(base, base + bt.size, dtype=np.int64)
        produced = 0
        while frontier[0].size:
            ct, cx, cy, pidx = _spawn_generation(
                rng, frontier[0], frontier[1], frontier[2], spec.trigger, config.t_horizon
            )
            if ct.size == 0:
                break
            produced += ct.size
            if produced > MAX_CASCADE:
                raise RuntimeError("supercritical cascade: generation cap exceeded")
            global_idx = np.arange(len(t_all), len(t_all) + ct.size, dtype=np.int64)
            t_all.extend(ct.tolist())
            x_all.extend(cx.tolist())
            y_all.extend(cy.tolist())
            group_all.extend([spec.label] * ct.size)
            parent_all.extend(frontier_global[pidx].tolist())
            frontier = (ct, cx, cy)
            frontier_global = global_idx

    t_arr = np.array(t_all)
    order = np.argsort(t_arr, kind="stable")
    n = t_arr.size
    raw_to_id = np.empty(n, dtype=np.int64)
    raw_to_id[order] = np.arange(n, dtype=np.int64)

    unlabeled = rng.random(n) < config.unlabeled_fraction

    events = []
    true_groups = np.empty(n, dtype=np.int64)
    parent_ids = np.empty(n, dtype=np.int64)
    x_arr = np.array(x_all)
    y_arr = np.array(y_all)
    group_arr = np.array(group_all, dtype=np.int64)
    parent_arr = np.array(parent_all, dtype=np.int64)
    for new_id, raw in enumerate(order):
        grp = int(group_arr[raw])
        is_a = bool(unlabeled[new_id])
        events.append(
            EventRecord(
                id=new_id,
                t=float(t_arr[raw]),
                x=float(x_arr[raw]),
                y=float(y_arr[raw]),
                source="A" if is_a else "B",
                mark=None if is_a else grp,
            )
        )
        true_groups[new_id] = grp
        parent_ids[new_id] = -1 if parent_arr[raw] < 0 else raw_to_id[parent_arr[raw]]

    window = Window(
        t0=0.0,
        t1=config.t_horizon,
        x0=min(0.0, float(x_arr.min()) if n else 0.0),
        x1=max(1.0, float(x_arr.max()) if n else 1.0),
        y0=min(0.0, float(y_arr.min()) if n else 0.0),
        y1=max(1.0, float(y_arr.max()) if n else 1.0),
    )
    dataset = MarkedDataset(events, window, n_groups)
    return SimResult(dataset=dataset, true_groups=true_groups, parent_ids=parent_ids)


def resplit(result: SimResult, unlabeled_fraction: float, seed=0) -> SimResult:
    """Re-draw the A/B source split on an existing simulation, leaving the
    events and true labels untouched."""
    check_in_unit_interval("unlabeled_fraction", unlabeled_fraction)
    rng = _rng_from(seed)
    ds = result.dataset
    unlabeled = rng.random(len(ds)) < unlabeled_fraction
    events = [
        EventRecord(
            id=e.id,
            t=e.t,
            x=e.x,
            y=e.y,
            source="A" if unlabeled[i] else "B",
            mark=None if unlabeled[i] else int(result.true_groups[i]),
        )
        for i, e in enumerate(ds.events)
    ]
    dataset = MarkedDataset(events, ds.window, ds.n_groups)
    return SimResult(
        dataset=dataset,
        true_groups=result.true_groups.copy(),
        parent_ids=result.parent_ids.copy(),
    )


def write_truth(result: SimResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "true_group", "parent_id"])
        for e, g, p in zip(result.dataset.events, result.true_groups, result.parent_ids):
            writer.writerow([e.id, int(g), int(p)])


def four_group_config(
    t_horizon: float = 1000.0,
    unlabeled_fraction: float = 0.3,
    seed: int = 0,
    bg_rows=None,
) -> SimConfig:
    """The standard 4-group synthetic benchmark configuration."""
    if bg_rows is None:
        bg_rows = [
            (0.1, 0.2, 0.3, 0.4),
            (0.4, 0.3, 0.2, 0.1),
            (0.4, 0.4, 0.1, 0.1),
            (0.1, 0.4, 0.1, 0.4),
        ]
    triggers = [
        TriggerParams(0.9, 0.1, 0.01),
        TriggerParams(0.8, 0.5, 0.001),
        TriggerParams(0.6, 1.0, 0.02),
        TriggerParams(0.75, 0.3, 0.003),
    ]
    mus = [67.0, 28.0, 55.0, 132.0]
    groups = tuple(
        GroupSimSpec(bg=tuple(bg), mu=mu, trigger=trig, label=k)
        for k, (bg, mu, trig) in enumerate(zip(bg_rows, mus, triggers))
    )
    return SimConfig(
        groups=groups,
        t_horizon=t_horizon,
        unlabeled_fraction=unlabeled_fraction,
        seed=seed,
    )
