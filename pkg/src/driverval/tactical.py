"""Tactical classification: collision > off-road > lane change > car following."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError
from .trajdata import RoadLayout

COLLISION = "Collision"
OFF_ROAD = "OffRoad"
LANE_CHANGE = "LaneChange"
CAR_FOLLOWING = "CarFollowing"
CATEGORIES = (LANE_CHANGE, COLLISION, CAR_FOLLOWING, OFF_ROAD)  # table row order
DESIRABLE = (LANE_CHANGE, CAR_FOLLOWING)


@dataclass(frozen=True)
class TacticalLabel:
    label: str
    event_frame: int | None = None

    def __post_init__(self):
        if self.label not in CATEGORIES:
            raise ContractError(f"unknown tactical label {self.label!r}")
        if (self.event_frame is None) != (self.label == CAR_FOLLOWING):
            raise ContractError("event_frame is required for every label except CarFollowing")

    @property
    def desirable(self) -> bool:
        return self.label in DESIRABLE


def _xy_frames(traj):
    frames = np.asarray(traj.frames, dtype=np.int64)
    x = np.asarray(traj.x, dtype=float)
    y = np.asarray(traj.y, dtype=float)
    return frames, x, y


def detect_collision(traj, neighbors, dims) -> int | None:
    """First frame where the ego rectangle overlaps another vehicle's.

    Rectangles are axis-aligned, centered on the vehicle centers; touching
    edges do not count. Vehicles missing at a frame are skipped.
    """
    length, width = dims
    frames, x, y = _xy_frames(traj)
    if not len(frames):
        return None
    first = int(frames[0])
    hits = []
    for nb in neighbors:
        if not len(nb):
            continue
        nf = np.asarray(nb.frames, dtype=np.int64)
        idx = nf - first
        ok = (idx >= 0) & (idx < len(frames))
        if not np.any(ok):
            continue
        i = idx[ok]
        gap_x = np.abs(x[i] - np.asarray(nb.x)[ok]) < (length + nb.length) / 2.0
        gap_y = np.abs(y[i] - np.asarray(nb.y)[ok]) < (width + nb.width) / 2.0
        both = np.flatnonzero(gap_x & gap_y)
        if both.size:
            hits.append(int(nf[ok][both[0]]))
    return min(hits) if hits else None


def detect_offroad(traj, layout: RoadLayout) -> int | None:
    """First frame whose center lies outside the road boundaries."""
    frames, _, y = _xy_frames(traj)
    out = np.flatnonzero((y < layout.road_boundary_low) | (y > layout.road_boundary_high))
    return int(frames[out[0]]) if out.size else None


def detect_lane_change(traj, layout: RoadLayout) -> int | None:
    """First frame on the far side of a lane marking."""
    frames, _, y = _xy_frames(traj)
    lanes = layout.lane_index(y)
    ch = np.flatnonzero(np.diff(lanes) != 0)
    return int(frames[ch[0] + 1]) if ch.size else None


def classify(traj, neighbors, layout: RoadLayout, dims) -> TacticalLabel:
    frame = detect_collision(traj, neighbors, dims)
    if frame is not None:
        return TacticalLabel(COLLISION, frame)
    frame = detect_offroad(traj, layout)
    if frame is not None:
        return TacticalLabel(OFF_ROAD, frame)
    frame = detect_lane_change(traj, layout)
    if frame is not None:
        return TacticalLabel(LANE_CHANGE, frame)
    return TacticalLabel(CAR_FOLLOWING)


@dataclass
class TacticalTable:
    model_counts: dict
    human_counts: dict
    n_model: int
    n_human: int

    def model_pct(self, cat: str) -> float:
        return 100.0 * self.model_counts[cat] / self.n_model

    def human_pct(self, cat: str) -> float:
        return 100.0 * self.human_counts[cat] / self.n_human if self.n_human else 0.0

    @property
    def desirable_share(self) -> float:
        return sum(self.model_pct(c) for c in DESIRABLE)

    @property
    def undesirable_share(self) -> float:
        return 100.0 - self.desirable_share

    def rows(self) -> list[dict]:
        return [
            {
                "behavior": cat,
                "n_agents": self.model_counts[cat],
                "pct_agents": self.model_pct(cat),
                "pct_human": self.human_pct(cat),
            }
            for cat in CATEGORIES
        ]

    def to_dict(self) -> dict:
        return {
            "rows": self.rows(),
            "total_agents": self.n_model,
            "total_human": self.n_human,
            "desirable_pct": self.desirable_share,
            "undesirable_pct": self.undesirable_share,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["behavior", "n_agents", "pct_agents", "pct_human"])
        for r in self.rows():
            w.writerow([r["behavior"], r["n_agents"], f"{r['pct_agents']:.1f}", f"{r['pct_human']:.1f}"])
        w.writerow(["Total", self.n_model, "100.0", "100.0" if self.n_human else "0.0"])
        return buf.getvalue()

    def write(self, csv_path, json_path) -> None:
        Path(csv_path).write_text(self.to_csv())
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def tabulate(labels: dict, human_labels: dict) -> TacticalTable:
    """Counts and percentages per category for model and human labels.

    Both dicts map demo_id to a TacticalLabel (or a label string) and must
    cover the same demonstrations.
    """
    if not labels:
        raise ContractError("no model labels to tabulate")
    orphans = sorted(set(labels) ^ set(human_labels))
    if orphans:
        raise ContractError(f"model and human labels cover different demos: {orphans}")

    def count(d):
        c = {cat: 0 for cat in CATEGORIES}
        for v in d.values():
            c[v.label if isinstance(v, TacticalLabel) else v] += 1
        return c

    return TacticalTable(count(labels), count(human_labels), len(labels), len(human_labels))
