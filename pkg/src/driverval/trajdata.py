"""HighD-schema ingestion and the canonical trajectory data model.

Raw HighD tracks store the top-left corner of each vehicle's bounding box in
image coordinates (x to the right, y downwards). Everything downstream works
on vehicle centers in a per-roadway *canonical* frame:

* x increases along the direction of travel,
* y increases towards the driver's left,
* lanes are numbered 1 (rightmost) upwards.

For the upper roadway (vehicles travel towards decreasing raw x) this means
``x -> -x``; for the lower roadway ``y -> -y``. Both are reflections of the
left-handed image frame, so the canonical frame is right-handed.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import pandas as pd

from .errors import DataIntegrityError, GeometryError, SchemaError

UPPER = "upper"
LOWER = "lower"
ROADWAYS = (UPPER, LOWER)


@dataclass(frozen=True)
class ColumnMap:
    """Column names of the three CSV files. Defaults are the HighD names."""

    frame: str = "frame"
    track_id: str = "id"
    x: str = "x"
    y: str = "y"
    length: str = "width"  # HighD: bbox extent along x
    width: str = "height"  # HighD: bbox extent along y
    vx: str = "xVelocity"
    vy: str = "yVelocity"
    ax: str = "xAcceleration"
    ay: str = "yAcceleration"
    lane_id: str = "laneId"
    preceding_id: str = "precedingId"

    meta_id: str = "id"
    driving_direction: str = "drivingDirection"
    num_lane_changes: str = "numLaneChanges"

    recording_id: str = "id"
    frame_rate: str = "frameRate"
    speed_limit: str = "speedLimit"
    upper_markings: str = "upperLaneMarkings"
    lower_markings: str = "lowerLaneMarkings"
    merge_flag: str = "hasMergeLane"  # optional column

    def tracks_columns(self) -> list[str]:
        return [
            self.frame, self.track_id, self.x, self.y, self.length, self.width,
            self.vx, self.vy, self.ax, self.ay, self.lane_id, self.preceding_id,
        ]

    def tracks_meta_columns(self) -> list[str]:
        return [self.meta_id, self.driving_direction, self.num_lane_changes, self.length, self.width]

    def recording_meta_columns(self) -> list[str]:
        return [
            self.recording_id, self.frame_rate, self.speed_limit,
            self.upper_markings, self.lower_markings,
        ]


HIGHD_COLUMNS = ColumnMap()


@dataclass(frozen=True)
class RecordingMeta:
    recording_id: int
    frame_rate: float
    upper_lane_markings: tuple[float, ...]
    lower_lane_markings: tuple[float, ...]
    speed_limit: float | None = None
    has_merge_lane: bool = False

    def __post_init__(self):
        if not self.frame_rate > 0:
            raise DataIntegrityError(f"frame rate must be positive, got {self.frame_rate}")
        for name in ("upper_lane_markings", "lower_lane_markings"):
            marks = np.asarray(getattr(self, name), dtype=float)
            if marks.size > 1 and not np.all(np.diff(marks) > 0):
                raise DataIntegrityError(f"{name} must be strictly increasing: {tuple(marks)}")

    @property
    def dt(self) -> float:
        return 1.0 / self.frame_rate

    def markings(self, roadway: str) -> tuple[float, ...]:
        if roadway == UPPER:
            return self.upper_lane_markings
        if roadway == LOWER:
            return self.lower_lane_markings
        raise ValueError(f"unknown roadway {roadway!r}")

    def lane_ids(self, roadway: str) -> list[int]:
        """Raw HighD lane ids of a roadway, ordered by increasing raw y.

        HighD numbers lanes top to bottom across both roadways, leaving one id
        for each area outside a roadway: the upper lanes are ``2..n_up`` and
        the lower lanes start at ``n_up + 2`` (``n_up`` = upper marking count).
        """
        n_up = len(self.upper_lane_markings)
        if roadway == UPPER:
            return list(range(2, n_up + 1))
        n_low = len(self.lower_lane_markings)
        return list(range(n_up + 2, n_up + n_low + 1))


class TrackFrame(NamedTuple):
    frame_index: int
    x: float
    y: float
    vx: float
    vy: float
    lane_id: int
    preceding_id: int | None


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Track:
    """One vehicle's trajectory, stored column-wise.

    ``preceding`` uses 0 for "no preceding vehicle", as in HighD.
    """

    track_id: int
    length: float
    width: float
    driving_direction: str
    num_lane_changes: int
    frames: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    lane: np.ndarray
    preceding: np.ndarray
    canonical: bool = False

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise DataIntegrityError(
                f"track {self.track_id}: vehicle dimensions must be positive", self.track_id)
        if self.num_lane_changes < 0:
            raise DataIntegrityError(
                f"track {self.track_id}: negative lane change count", self.track_id)
        if self.driving_direction not in ROADWAYS:
            raise DataIntegrityError(
                f"track {self.track_id}: unknown driving direction {self.driving_direction!r}",
                self.track_id)
        object.__setattr__(self, "frames", _frozen(self.frames, np.int64))
        for name in ("x", "y", "vx", "vy"):
            object.__setattr__(self, name, _frozen(getattr(self, name), float))
        object.__setattr__(self, "lane", _frozen(self.lane, np.int64))
        object.__setattr__(self, "preceding", _frozen(self.preceding, np.int64))
        n = len(self.frames)
        for name in ("x", "y", "vx", "vy", "lane", "preceding"):
            if len(getattr(self, name)) != n:
                raise DataIntegrityError(
                    f"track {self.track_id}: column {name} has wrong length", self.track_id)
        if n and np.any(np.diff(self.frames) != 1):
            raise DataIntegrityError(
                f"track {self.track_id}: frames are not contiguous", self.track_id)
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise DataIntegrityError(f"track {self.track_id}: non-finite position", self.track_id)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def first_frame(self) -> int:
        return int(self.frames[0])

    @property
    def last_frame(self) -> int:
        return int(self.frames[-1])

    def frame_at(self, i: int) -> TrackFrame:
        pid = int(self.preceding[i])
        return TrackFrame(int(self.frames[i]), float(self.x[i]), float(self.y[i]),
                          float(self.vx[i]), float(self.vy[i]), int(self.lane[i]),
                          pid if pid != 0 else None)

    def overlaps(self, first: int, last: int) -> bool:
        return len(self) > 0 and self.first_frame <= last and self.last_frame >= first

    def slice_frames(self, first: int, last: int) -> "Track":
        """Rows with ``first <= frame <= last`` (possibly empty)."""
        m = (self.frames >= first) & (self.frames <= last)
        return replace(
            self, frames=self.frames[m], x=self.x[m], y=self.y[m], vx=self.vx[m],
            vy=self.vy[m], lane=self.lane[m], preceding=self.preceding[m])

    def index_of(self, frame: int) -> int | None:
        i = frame - self.first_frame if len(self) else -1
        return i if 0 <= i < len(self) else None

    def positions(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])


@dataclass(frozen=True)
class RoadLayout:
    """Lane geometry of one roadway in canonical coordinates."""

    lane_boundaries: tuple[float, ...]
    lane_centers: tuple[float, ...]
    road_boundary_low: float
    road_boundary_high: float
    lane_width: float

    @property
    def n_lanes(self) -> int:
        return len(self.lane_centers)

    @property
    def road_boundaries(self) -> tuple[float, float]:
        return (self.road_boundary_low, self.road_boundary_high)

    def lane_index(self, y):
        """Canonical lane number of lateral position(s) ``y``.

        1 is the rightmost lane; 0 and ``n_lanes + 1`` are the areas outside
        the outermost markings. A point exactly on a marking belongs to the
        lane on its left.
        """
        return np.searchsorted(np.asarray(self.lane_boundaries), y, side="right")

    def to_dict(self) -> dict:
        return {
            "lane_boundaries": list(self.lane_boundaries),
            "lane_centers": list(self.lane_centers),
            "road_boundary_low": self.road_boundary_low,
            "road_boundary_high": self.road_boundary_high,
            "lane_width": self.lane_width,
        }


def layout_from_markings(markings: Iterable[float]) -> RoadLayout:
    marks = np.asarray(sorted(float(m) for m in markings))
    if marks.size < 3:
        raise GeometryError(f"need at least 3 lane markings (2 lanes), got {marks.size}")
    gaps = np.diff(marks)
    if np.any(gaps <= 0):
        raise GeometryError(f"lane markings must be distinct: {tuple(marks)}")
    lane_width = float(np.median(gaps))
    centers = tuple(float(c) for c in (marks[:-1] + marks[1:]) / 2.0)
    return RoadLayout(
        lane_boundaries=tuple(float(m) for m in marks),
        lane_centers=centers,
        road_boundary_low=float(marks[0] - lane_width / 2.0),
        road_boundary_high=float(marks[-1] + lane_width / 2.0),
        lane_width=lane_width,
    )


def build_layout(meta: RecordingMeta, roadway: str) -> RoadLayout:
    """Canonical layout of one roadway of a recording."""
    marks = np.asarray(meta.markings(roadway), dtype=float)
    if roadway == LOWER:
        marks = -marks
    return layout_from_markings(marks)


def canonicalize(track: Track, meta: RecordingMeta) -> Track:
    """Express ``track`` in its roadway's canonical frame.

    Idempotent: canonical tracks are returned unchanged.
    """
    if track.canonical:
        return track
    roadway = track.driving_direction
    ids = meta.lane_ids(roadway)
    if roadway == UPPER:
        x, y, vx, vy = -track.x, track.y, -track.vx, track.vy
        mapping = {lid: k + 1 for k, lid in enumerate(ids)}
    else:
        x, y, vx, vy = track.x, -track.y, track.vx, -track.vy
        mapping = {lid: len(ids) - k for k, lid in enumerate(ids)}
    lane = np.array([mapping.get(int(l), 0) for l in track.lane], dtype=np.int64)
    if len(lane) and not np.any(lane):
        raise DataIntegrityError(
            f"track {track.track_id}: lane ids {sorted(set(track.lane.tolist()))} "
            f"do not belong to the {roadway} roadway", track.track_id)
    return replace(track, x=x, y=y, vx=vx, vy=vy, lane=lane, canonical=True)


@dataclass(frozen=True)
class Recording:
    meta: RecordingMeta
    tracks: tuple[Track, ...]
    layouts: dict = field(default_factory=dict)

    @property
    def recording_id(self) -> int:
        return self.meta.recording_id

    @property
    def canonical(self) -> bool:
        return all(t.canonical for t in self.tracks)

    def track(self, track_id: int) -> Track:
        for t in self.tracks:
            if t.track_id == track_id:
                return t
        raise KeyError(track_id)

    def layout(self, roadway: str) -> RoadLayout:
        if roadway not in self.layouts:
            raise GeometryError(f"recording {self.recording_id} has no layout for {roadway}")
        return self.layouts[roadway]

    def canonicalized(self) -> "Recording":
        return replace(self, tracks=tuple(canonicalize(t, self.meta) for t in self.tracks))


def _read_csv(path, required: list[str]) -> pd.DataFrame:
    df = pd.read_csv(path)
    df.columns = [c.strip() for c in df.columns]
    for col in required:
        if col not in df.columns:
            raise SchemaError(col, str(path))
    return df


def _parse_markings(value, column: str, path) -> tuple[float, ...]:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if math.isnan(value):
            return ()
        return (float(value),)
    parts = [p for p in re.split(r"[;\s]+", str(value).strip()) if p]
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise SchemaError(column, str(path), f"cannot parse {value!r}") from exc


def _bad_line(series: pd.Series, integer: bool) -> int | None:
    """1-based CSV line (header is line 1) of the first unparseable value."""
    num = pd.to_numeric(series, errors="coerce")
    bad = num.isna().to_numpy()
    if integer:
        vals = num.to_numpy(dtype=float)
        bad |= np.isfinite(vals) & (vals != np.round(vals))
    idx = np.flatnonzero(bad)
    return int(idx[0]) + 2 if idx.size else None


def _as_int(series: pd.Series, column: str, path) -> np.ndarray:
    line = _bad_line(series, integer=True)
    if line is not None:
        raise SchemaError(column, str(path), f"expected an integer at line {line}")
    return pd.to_numeric(series).to_numpy(dtype=np.int64)


def _as_float(series: pd.Series, column: str, path) -> np.ndarray:
    line = _bad_line(series, integer=False)
    if line is not None:
        raise SchemaError(column, str(path), f"expected a number at line {line}")
    return pd.to_numeric(series).to_numpy(dtype=float)


def read_recording_meta(path, columns: ColumnMap = HIGHD_COLUMNS,
                        merge_recordings: Iterable[int] = ()) -> RecordingMeta:
    df = _read_csv(path, columns.recording_meta_columns())
    row = df.iloc[0]
    rec_id = int(row[columns.recording_id])
    speed = float(row[columns.speed_limit])
    has_merge = rec_id in set(merge_recordings)
    if columns.merge_flag in df.columns:
        flag = row[columns.merge_flag]
        has_merge = has_merge or str(flag).strip().lower() in ("1", "true", "yes")
    return RecordingMeta(
        recording_id=rec_id,
        frame_rate=float(row[columns.frame_rate]),
        upper_lane_markings=_parse_markings(row[columns.upper_markings], columns.upper_markings, path),
        lower_lane_markings=_parse_markings(row[columns.lower_markings], columns.lower_markings, path),
        speed_limit=None if speed < 0 else speed,
        has_merge_lane=has_merge,
    )


def load_recording(meta_path, tracks_meta_path, tracks_path,
                   columns: ColumnMap = HIGHD_COLUMNS,
                   merge_recordings: Iterable[int] = ()) -> Recording:
    """Read one recording from its three CSV files.

    Bounding-box corners are converted to vehicle centers. The returned
    tracks are in raw (non-canonical) coordinates; call
    :meth:`Recording.canonicalized` before extraction.

    Raises:
        SchemaError: a required column is missing or unparseable.
        DataIntegrityError: a track's frames are not contiguous.
    """
    meta = read_recording_meta(meta_path, columns, merge_recordings)
    tmeta = _read_csv(tracks_meta_path, columns.tracks_meta_columns())
    tracks_df = _read_csv(tracks_path, columns.tracks_columns())

    c = columns
    info = {}
    ids = _as_int(tmeta[c.meta_id], c.meta_id, tracks_meta_path)
    dirs = _as_int(tmeta[c.driving_direction], c.driving_direction, tracks_meta_path)
    nlc = _as_int(tmeta[c.num_lane_changes], c.num_lane_changes, tracks_meta_path)
    lengths = _as_float(tmeta[c.length], c.length, tracks_meta_path)
    widths = _as_float(tmeta[c.width], c.width, tracks_meta_path)
    for tid, d, n, ln, wd in zip(ids, dirs, nlc, lengths, widths):
        if d not in (1, 2):
            raise SchemaError(c.driving_direction, str(tracks_meta_path), f"invalid value {d}")
        info[int(tid)] = (UPPER if d == 1 else LOWER, int(n), float(ln), float(wd))

    cols = {}
    for key in ("frame", "track_id", "lane_id", "preceding_id"):
        name = getattr(c, key)
        cols[key] = _as_int(tracks_df[name], name, tracks_path)
    for key in ("x", "y", "length", "width", "vx", "vy"):
        name = getattr(c, key)
        cols[key] = _as_float(tracks_df[name], name, tracks_path)

    order = np.lexsort((cols["frame"], cols["track_id"]))
    for key in cols:
        cols[key] = cols[key][order]
    tids = cols["track_id"]
    bounds = np.flatnonzero(np.diff(tids)) + 1
    starts = np.concatenate([[0], bounds]) if len(tids) else np.array([], dtype=int)
    ends = np.concatenate([bounds, [len(tids)]]) if len(tids) else np.array([], dtype=int)

    tracks = []
    for s, e in zip(starts, ends):
        tid = int(tids[s])
        if tid not in info:
            raise DataIntegrityError(f"track {tid} has no entry in tracks meta", tid)
        direction, n_lc, length, width = info[tid]
        frames = cols["frame"][s:e]
        if np.any(np.diff(frames) != 1):
            raise DataIntegrityError(f"track {tid}: frames are not contiguous", tid)
        # corner -> center, using the per-frame bbox size
        x = cols["x"][s:e] + cols["length"][s:e] / 2.0
        y = cols["y"][s:e] + cols["width"][s:e] / 2.0
        tracks.append(Track(
            track_id=tid, length=length, width=width, driving_direction=direction,
            num_lane_changes=n_lc, frames=frames, x=x, y=y,
            vx=cols["vx"][s:e], vy=cols["vy"][s:e],
            lane=cols["lane_id"][s:e], preceding=cols["preceding_id"][s:e],
        ))

    layouts = {}
    for roadway in ROADWAYS:
        if len(meta.markings(roadway)) >= 3:
            layouts[roadway] = build_layout(meta, roadway)
    return Recording(meta=meta, tracks=tuple(tracks), layouts=layouts)


def recording_paths(data_dir, recording_id: int) -> tuple[Path, Path, Path]:
    """HighD file names: ``01_recordingMeta.csv`` and friends."""
    d = Path(data_dir)
    stem = f"{recording_id:02d}"
    return (d / f"{stem}_recordingMeta.csv", d / f"{stem}_tracksMeta.csv", d / f"{stem}_tracks.csv")


def discover_recordings(data_dir) -> list[int]:
    ids = []
    for p in Path(data_dir).glob("*_recordingMeta.csv"):
        m = re.match(r"(\d+)_recordingMeta\.csv$", p.name)
        if m:
            ids.append(int(m.group(1)))
    return sorted(ids)


def read_recording(data_dir, recording_id: int, columns: ColumnMap = HIGHD_COLUMNS,
                   merge_recordings: Iterable[int] = ()) -> Recording:
    return load_recording(*recording_paths(data_dir, recording_id), columns=columns,
                          merge_recordings=merge_recordings)
