"""Event data model, CSV ingestion, and JSON model persistence.

Events carry a source tag: ``A`` rows are unlabeled (no group mark on
ingest), ``B`` rows must carry a group mark in 0..K-1.  Coordinates and
times are stored exactly as given; the time unit is whatever the data
uses (days for the real-data scale) and nothing downstream hard-codes it.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np

from .kernels import KdeBackground, TriggerParams
from .model import Assignment, FittedModel, GroupParams

__all__ = [
    "EventRecord",
    "Window",
    "MarkedDataset",
    "load_events",
    "write_events",
    "load_tox",
    "save_model",
    "load_model",
    "MODEL_FORMAT_VERSION",
]

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1

EVENT_HEADER = ["id", "t", "x", "y", "source", "group"]


@dataclass(frozen=True)
class EventRecord:
    """One space-time event with a source tag and optional group mark."""

    id: int
    t: float
    x: float
    y: float
    source: str
    mark: int | None = None

    def __post_init__(self):
        if self.source not in ("A", "B"):
            raise ValueError(f"source must be 'A' or 'B', got {self.source!r}")
        if self.source == "B" and self.mark is None:
            raise ValueError(f"event {self.id}: source B requires a group mark")
        if self.mark is not None and self.mark < 0:
            raise ValueError(f"event {self.id}: mark must be >= 0")


@dataclass(frozen=True)
class Window:
    """Space-time observation window."""

    t0: float
    t1: float
    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if not (self.t1 > self.t0 and self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("window bounds must satisfy t1>t0, x1>x0, y1>y0")

    @property
    def duration(self) -> float:
        return self.t1 - self.t0

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def volume(self) -> float:
        return self.duration * self.area

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.x1 - self.x0, self.y1 - self.y0))

    def contains_time(self, t: float) -> bool:
        return self.t0 <= t <= self.t1


class MarkedDataset:
    """Time-sorted events inside a window, with K possible group marks.

    Events are sorted by (t, id) at construction; cached coordinate arrays
    are read-only so instances can be shared freely across threads.
    """

    def __init__(self, events, window: Window, n_groups: int):
        if n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        events = sorted(events, key=lambda e: (e.t, e.id))
        for ev in events:
            if not window.contains_time(ev.t):
                raise ValueError(f"event {ev.id}: event outside window (t={ev.t})")
            if ev.mark is not None and ev.mark >= n_groups:
                raise ValueError(
                    f"event {ev.id}: group {ev.mark} >= n_groups ({n_groups})"
                )
        ids = [e.id for e in events]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate event ids")
        self.events: tuple[EventRecord, ...] = tuple(events)
        self.window = window
        self.n_groups = int(n_groups)

        self.ids = np.array(ids, dtype=np.int64)
        self.t = np.array([e.t for e in events], dtype=float)
        self.x = np.array([e.x for e in events], dtype=float)
        self.y = np.array([e.y for e in events], dtype=float)
        self.is_b = np.array([e.source == "B" for e in events], dtype=bool)
        self.marks = np.array(
            [-1 if e.mark is None else e.mark for e in events], dtype=np.int64
        )
        for arr in (self.ids, self.t, self.x, self.y, self.is_b, self.marks):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self.events)

    @property
    def n_unlabeled(self) -> int:
        return int((~self.is_b).sum())

    def filter_source(self, source: str) -> "MarkedDataset":
        """Subset to one source, keeping window and group count."""
        if source not in ("A", "B"):
            raise ValueError("source must be 'A' or 'B'")
        return MarkedDataset(
            [e for e in self.events if e.source == source], self.window, self.n_groups
        )

    def replace_events(self, events) -> "MarkedDataset":
        return MarkedDataset(events, self.window, self.n_groups)


def _parse_event_row(row, line_no: int, n_groups: int) -> EventRecord:
    if len(row) != len(EVENT_HEADER):
        raise ValueError(f"line {line_no}: expected {len(EVENT_HEADER)} fields, got {len(row)}")
    try:
        ev_id = int(row[0])
        t = float(row[1])
        x = float(row[2])
        y = float(row[3])
    except ValueError as exc:
        raise ValueError(f"line {line_no}: malformed numeric field ({exc})") from exc
    source = row[4].strip()
    if source not in ("A", "B"):
        raise ValueError(f"line {line_no}: source must be 'A' or 'B', got {source!r}")
    group_field = row[5].strip()
    if source == "B":
        if group_field == "":
            raise ValueError(f"line {line_no}: source B row has empty group")
        mark = int(group_field)
    else:
        if group_field != "":
            raise ValueError(f"line {line_no}: source A row must leave group blank")
        mark = None
    if mark is not None and mark >= n_groups:
        raise ValueError(f"line {line_no}: group {mark} >= K ({n_groups})")
    return EventRecord(ev_id, t, x, y, source, mark)


def _bounding_window(events) -> Window:
    """Smallest window covering the events, padded where a range collapses."""
    if not events:
        return Window(0.0, 1.0, 0.0, 1.0, 0.0, 1.0)
    ts = [e.t for e in events]
    xs = [e.x for e in events]
    ys = [e.y for e in events]

    def span(lo, hi):
        return (lo, hi) if hi > lo else (lo - 0.5, lo + 0.5)

    t0, t1 = span(min(ts), max(ts))
    x0, x1 = span(min(xs), max(xs))
    y0, y1 = span(min(ys), max(ys))
    return Window(t0, t1, x0, x1, y0, y1)


def load_events(
    path,
    window: Window | None,
    n_groups: int,
    labels: dict[int, int] | None = None,
) -> MarkedDataset:
    """Read an events CSV (``id,t,x,y,source,group``) into a MarkedDataset.

    ``window=None`` infers the window from the data bounds.  ``labels``
    optionally supplies group marks for B rows whose group cell is blank
    (the output of a separate clustering step), keyed by event id.
    """
    events = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != EVENT_HEADER:
            raise ValueError(f"bad header, expected {','.join(EVENT_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if labels is not None and len(row) == 6 and row[4].strip() == "B" and row[5].strip() == "":
                try:
                    row = row[:5] + [str(labels[int(row[0])])]
                except KeyError as exc:
                    raise ValueError(f"line {line_no}: no label for event id {row[0]}") from exc
            events.append(_parse_event_row(row, line_no, n_groups))
    if window is None:
        window = _bounding_window(events)
    return MarkedDataset(events, window, n_groups)


def write_events(dataset: MarkedDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENT_HEADER)
        for e in dataset.events:
            writer.writerow(
                [e.id, repr(e.t), repr(e.x), repr(e.y), e.source, "" if e.mark is None else e.mark]
            )


def load_tox(path):
    """Read a binary reports-by-substances CSV into a ToxMatrix.

    Header is ``id`` followed by one column per substance; cells must be
    0 or 1.  Reports with an all-zero screen are dropped with a logged
    count.  Returns the matrix transposed to substances x reports.
    """
    from .nmf import ToxMatrix

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0].strip() != "id" or len(header) < 2:
            raise ValueError("bad header, expected 'id' then substance columns")
        substances = [h.strip() for h in header[1:]]
        ids: list[str] = []
        rows = []
        seen = set()
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"line {line_no}: expected {len(header)} fields")
            rid = row[0].strip()
            if rid in seen:
                raise ValueError(f"line {line_no}: duplicate report id {rid!r}")
            seen.add(rid)
            vals = []
            for col, cell in zip(substances, row[1:]):
                cell = cell.strip()
                if cell not in ("0", "1"):
                    raise ValueError(f"line {line_no}: non-binary cell {cell!r} in {col!r}")
                vals.append(float(cell))
            ids.append(rid)
            rows.append(vals)
    matrix = np.array(rows, dtype=float).reshape(len(rows), len(substances)).T
    # ToxMatrix drops all-zero report columns itself, with a logged count
    return ToxMatrix(matrix=matrix, substances=substances, report_ids=ids)


def _background_to_json(bg: KdeBackground) -> dict:
    return {
        "b1": bg.b1,
        "b2": bg.b2,
        "background_points": [
            {"t": t, "x": x, "y": y, "w": w}
            for t, x, y, w in zip(bg.t, bg.x, bg.y, bg.w)
        ],
    }


def save_model(model: FittedModel, path) -> None:
    """Persist a fitted model as a single versioned JSON document."""
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "K": model.n_groups,
        "window": {
            "t0": model.window.t0,
            "t1": model.window.t1,
            "x0": model.window.x0,
            "x1": model.window.x1,
            "y0": model.window.y0,
            "y1": model.window.y1,
        },
        "groups": [
            {
                "K0": g.trigger.k0,
                "omega": g.trigger.omega,
                "sigma": g.trigger.sigma,
                "mu0": g.mu0,
                **_background_to_json(g.background),
            }
            for g in model.groups
        ],
        "assignments": None
        if model.assignments is None
        else [
            {"id": a.event_id, "group": a.group, "prob": a.prob}
            for a in model.assignments
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path) -> FittedModel:
    """Load a model saved by :func:`save_model`; the round trip is lossless."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"truncated or malformed model file: {exc}") from exc
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(
            f"unsupported model format_version {version!r}, expected {MODEL_FORMAT_VERSION}"
        )
    w = doc["window"]
    window = Window(w["t0"], w["t1"], w["x0"], w["x1"], w["y0"], w["y1"])
    groups = []
    for g in doc["groups"]:
        pts = g["background_points"]
        bg = KdeBackground(
            t=np.array([p["t"] for p in pts], dtype=float),
            x=np.array([p["x"] for p in pts], dtype=float),
            y=np.array([p["y"] for p in pts], dtype=float),
            w=np.array([p["w"] for p in pts], dtype=float),
            b1=g["b1"],
            b2=g["b2"],
        )
        groups.append(
            GroupParams(
                trigger=TriggerParams(g["K0"], g["omega"], g["sigma"]),
                mu0=g["mu0"],
                background=bg,
            )
        )
    assignments = None
    if doc.get("assignments") is not None:
        assignments = [
            Assignment(a["id"], a["group"], a["prob"]) for a in doc["assignments"]
        ]
    return FittedModel(
        n_groups=doc["K"], window=window, groups=groups, assignments=assignments
    )
