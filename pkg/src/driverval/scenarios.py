"""Extraction of single left-lane-change demonstrations."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataIntegrityError, MergeLaneRecordingError, UnsuitableDemoError
from .trajdata import Recording, RoadLayout, Track


@dataclass(frozen=True, eq=False)
class Demonstration:
    """One human lane change plus everything around it.

    ``ego`` covers the full recorded track; ``neighbors`` are all other
    tracks of the same roadway that share at least one frame with it, clipped
    to the ego's frame span.
    """

    demo_id: str
    recording_id: int
    ego: Track
    neighbors: tuple[Track, ...]
    layout: RoadLayout
    v_d: float
    dt: float

    @property
    def n_frames(self) -> int:
        return len(self.ego)

    @property
    def frame_span(self) -> tuple[int, int]:
        return (self.ego.first_frame, self.ego.last_frame)

    def check(self) -> None:
        """Raise DataIntegrityError if the demonstration breaks its invariants."""
        if not is_single_left_change(self.ego):
            raise DataIntegrityError(f"{self.demo_id}: ego is not a single left lane change",
                                     self.ego.track_id)
        if self.v_d != float(np.max(self.ego.vx)):
            raise DataIntegrityError(f"{self.demo_id}: v_d is not the ego's maximum velocity",
                                     self.ego.track_id)
        first, last = self.frame_span
        for nb in self.neighbors:
            if len(nb) and (nb.first_frame < first or nb.last_frame > last):
                raise DataIntegrityError(
                    f"{self.demo_id}: neighbor {nb.track_id} exceeds the ego span", nb.track_id)

    def manifest_entry(self) -> dict:
        first, last = self.frame_span
        return {
            "demo_id": self.demo_id,
            "recording_id": self.recording_id,
            "ego_id": self.ego.track_id,
            "first_frame": first,
            "last_frame": last,
            "v_d": self.v_d,
        }


def demo_id_for(recording_id: int, track_id: int) -> str:
    return f"{recording_id:02d}-{track_id:05d}"


def lane_steps(lanes: np.ndarray) -> np.ndarray:
    """Non-zero lane-index steps, ignoring frames outside the roadway (0)."""
    seq = lanes[lanes > 0]
    d = np.diff(seq)
    return d[d != 0]


def is_single_left_change(track: Track) -> bool:
    steps = lane_steps(np.asarray(track.lane))
    return len(steps) == 1 and steps[0] > 0


def _build_demo(recording: Recording, ego: Track) -> Demonstration:
    first, last = ego.first_frame, ego.last_frame
    neighbors = tuple(
        t.slice_frames(first, last) for t in recording.tracks
        if t.track_id != ego.track_id
        and t.driving_direction == ego.driving_direction
        and t.overlaps(first, last)
    )
    return Demonstration(
        demo_id=demo_id_for(recording.recording_id, ego.track_id),
        recording_id=recording.recording_id,
        ego=ego,
        neighbors=neighbors,
        layout=recording.layout(ego.driving_direction),
        v_d=float(np.max(ego.vx)),
        dt=recording.meta.dt,
    )


def extract_left_lane_changes(recording: Recording) -> list[Demonstration]:
    """All single left lane changes of a recording, sorted by ego track id.

    Raises:
        MergeLaneRecordingError: the recording has a merge lane.
        ContractError: the recording was not canonicalized.
    """
    if recording.meta.has_merge_lane:
        raise MergeLaneRecordingError(
            f"recording {recording.recording_id} has a merging lane; merge scenarios are excluded")
    if not recording.canonical:
        raise ContractError("extract_left_lane_changes needs a canonicalized recording")
    demos = []
    for track in sorted(recording.tracks, key=lambda t: t.track_id):
        if track.num_lane_changes != 1 or len(track) == 0:
            continue
        if not is_single_left_change(track):
            continue
        demo = _build_demo(recording, track)
        demo.check()
        demos.append(demo)
    return demos


def demo_from_manifest(recording: Recording, entry: dict) -> Demonstration:
    ego = recording.track(int(entry["ego_id"]))
    demo = _build_demo(recording, ego)
    if demo.demo_id != entry["demo_id"]:
        raise DataIntegrityError(f"manifest entry {entry['demo_id']} does not match recording data")
    return demo


def write_manifest(path, demos: list[Demonstration], extra: dict | None = None) -> dict:
    doc = {"demonstrations": [d.manifest_entry() for d in demos]}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


@dataclass(frozen=True, eq=False)
class Segment:
    """N consecutive demonstration frames, as a velocity-control problem.

    ``actions`` are the recorded (vx, vy) of the N frames. ``state0`` is
    backed out from the first frame (``p - v dt``) so that the resulting
    states of the actions line up with the recorded frames.
    """

    index: int
    frames: np.ndarray
    positions: np.ndarray  # (N, 2)
    actions: np.ndarray  # (N, 2)
    state0: np.ndarray  # (2,)


def segment(demo: Demonstration, N: int) -> list[Segment]:
    """Cut the ego track into consecutive, non-overlapping N-frame windows.

    A trailing remainder shorter than N is dropped.
    """
    if N < 2:
        raise ContractError(f"segment length must be >= 2, got {N}")
    ego = demo.ego
    n = len(ego)
    if n < N:
        raise UnsuitableDemoError(f"{demo.demo_id}: {n} frames is shorter than N={N}")
    pos = ego.positions()
    vel = np.column_stack([ego.vx, ego.vy])
    out = []
    for k in range(n // N):
        sl = slice(k * N, (k + 1) * N)
        p = pos[sl]
        u = vel[sl]
        out.append(Segment(
            index=k,
            frames=np.asarray(ego.frames[sl]),
            positions=p.copy(),
            actions=u.copy(),
            state0=p[0] - u[0] * demo.dt,
        ))
    return out


def neighbor_positions(neighbors, frames) -> np.ndarray:
    """(M, len(frames), 2) neighbor centers at the given frames; NaN if absent."""
    frames = np.asarray(frames, dtype=np.int64)
    out = np.full((len(neighbors), len(frames), 2), np.nan)
    for o, nb in enumerate(neighbors):
        if not len(nb):
            continue
        idx = frames - nb.first_frame
        ok = (idx >= 0) & (idx < len(nb))
        out[o, ok, 0] = nb.x[idx[ok]]
        out[o, ok, 1] = nb.y[idx[ok]]
    return out
