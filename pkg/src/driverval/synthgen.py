"""Synthetic recordings and demonstrations with known ground truth.

Two generators:

* :func:`generate_kinematic_fixture` builds a whole recording from a JSON-able
  description (lanes, speed knots, scheduled lane changes). Longitudinal
  motion is integrated with the same Euler rule as the agent, lateral motion
  follows a smoothstep between lane centers.
* :func:`generate_demo` lets an agent with known weights drive through a
  scripted scene and returns the result as a demonstration.

Everything is generated in canonical coordinates and converted back to raw
HighD conventions when written, so the output goes through the normal
ingestion path.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError
from .reward import DEFAULT_CONSTANTS, FeatureConstants
from .rollout import AgentConfig, rollout
from .scenarios import Demonstration, demo_id_for, is_single_left_change, lane_steps
from .trajdata import (
    LOWER,
    UPPER,
    Recording,
    RecordingMeta,
    RoadLayout,
    Track,
    build_layout,
    layout_from_markings,
)

KNOWN_WEIGHTS_ROLLOUT = "known_weights_rollout"
KINEMATIC_SCRIPT = "kinematic_script"

# two 3.75 m lanes, canonical lateral coordinates
DEFAULT_MARKINGS = (0.0, 3.75, 7.5)


class FixtureSpecError(ContractError):
    """A synthetic fixture description is inconsistent."""


# -- canonical <-> raw ------------------------------------------------------


def raw_markings(canonical_markings, roadway: str) -> tuple[float, ...]:
    m = [float(v) for v in canonical_markings]
    if roadway == LOWER:
        m = [-v for v in m]
    return tuple(sorted(m))


def _raw_lane_ids(meta: RecordingMeta, roadway: str, canon_lane: np.ndarray) -> np.ndarray:
    ids = meta.lane_ids(roadway)
    n = len(ids)
    n_up = len(meta.upper_lane_markings)
    out = np.empty(len(canon_lane), dtype=np.int64)
    for i, cl in enumerate(canon_lane):
        if 1 <= cl <= n:
            out[i] = ids[cl - 1] if roadway == UPPER else ids[n - cl]
        elif roadway == UPPER:
            out[i] = 1 if cl == 0 else n_up + 1
        else:
            # outside the lower roadway: towards the median (left) or the verge (right)
            out[i] = n_up + 1 if cl > n else ids[-1] + 1
    return out


def _preceding_ids(tracks: list[Track], layout_by_road: dict) -> dict:
    """HighD-style precedingId per track and frame, from canonical positions."""
    by_frame: dict = {}
    for t in tracks:
        lay = layout_by_road[t.driving_direction]
        lanes = lay.lane_index(t.y)
        for i, f in enumerate(t.frames):
            by_frame.setdefault(int(f), []).append((t.driving_direction, int(lanes[i]), float(t.x[i]), t.track_id))
    out = {}
    for t in tracks:
        lay = layout_by_road[t.driving_direction]
        lanes = lay.lane_index(t.y)
        pre = np.zeros(len(t), dtype=np.int64)
        for i, f in enumerate(t.frames):
            best = None
            for road, lane, x, tid in by_frame[int(f)]:
                if tid == t.track_id or road != t.driving_direction or lane != lanes[i] or x <= t.x[i]:
                    continue
                if best is None or x < best[0]:
                    best = (x, tid)
            pre[i] = 0 if best is None else best[1]
        out[t.track_id] = pre
    return out


def to_raw(track: Track, meta: RecordingMeta) -> Track:
    """Inverse of :func:`driverval.trajdata.canonicalize` (centers stay centers)."""
    if not track.canonical:
        return track
    road = track.driving_direction
    if road == UPPER:
        x, y, vx, vy = -track.x, track.y, -track.vx, track.vy
    else:
        x, y, vx, vy = track.x, -track.y, track.vx, -track.vy
    return replace(track, x=x, y=y, vx=vx, vy=vy, lane=_raw_lane_ids(meta, road, track.lane), canonical=False)


def canonical_recording(meta: RecordingMeta, tracks: list[Track]) -> Recording:
    """Recording from canonical tracks; lanes, lane-change counts and
    preceding ids are recomputed from positions."""
    layouts = {r: build_layout(meta, r) for r in (UPPER, LOWER) if len(meta.markings(r)) >= 3}
    fixed = []
    for t in tracks:
        lanes = layouts[t.driving_direction].lane_index(t.y)
        n_lc = len(lane_steps(np.asarray(lanes)))
        fixed.append(replace(t, lane=lanes, num_lane_changes=n_lc, canonical=True))
    pre = _preceding_ids(fixed, layouts)
    fixed = [replace(t, preceding=pre[t.track_id]) for t in fixed]
    return Recording(meta=meta, tracks=tuple(sorted(fixed, key=lambda t: t.track_id)), layouts=layouts)


def _r(v: float) -> str:
    return repr(float(v))


def recording_csvs(recording: Recording) -> dict:
    """The three HighD CSV files of a recording as strings.

    Canonical tracks are converted back to raw coordinates; positions are
    written as bounding-box corners.
    """
    meta = recording.meta
    rec_buf = io.StringIO()
    w = csv.writer(rec_buf, lineterminator="\n")
    w.writerow(["id", "frameRate", "speedLimit", "upperLaneMarkings", "lowerLaneMarkings", "hasMergeLane"])
    w.writerow([
        meta.recording_id, _r(meta.frame_rate),
        _r(-1.0 if meta.speed_limit is None else meta.speed_limit),
        ";".join(_r(m) for m in meta.upper_lane_markings),
        ";".join(_r(m) for m in meta.lower_lane_markings),
        int(meta.has_merge_lane),
    ])

    raw = [to_raw(t, meta) for t in sorted(recording.tracks, key=lambda t: t.track_id)]
    tm_buf = io.StringIO()
    w = csv.writer(tm_buf, lineterminator="\n")
    w.writerow(["id", "width", "height", "initialFrame", "finalFrame", "numFrames",
                "drivingDirection", "numLaneChanges"])
    for t in raw:
        w.writerow([t.track_id, _r(t.length), _r(t.width), t.first_frame, t.last_frame, len(t),
                    1 if t.driving_direction == UPPER else 2, t.num_lane_changes])

    tr_buf = io.StringIO()
    w = csv.writer(tr_buf, lineterminator="\n")
    w.writerow(["frame", "id", "x", "y", "width", "height", "xVelocity", "yVelocity",
                "xAcceleration", "yAcceleration", "laneId", "precedingId"])
    dt = meta.dt
    for t in raw:
        ax = np.gradient(t.vx, dt) if len(t) > 1 else np.zeros(len(t))
        ay = np.gradient(t.vy, dt) if len(t) > 1 else np.zeros(len(t))
        for i in range(len(t)):
            w.writerow([
                int(t.frames[i]), t.track_id,
                _r(t.x[i] - t.length / 2.0), _r(t.y[i] - t.width / 2.0),
                _r(t.length), _r(t.width), _r(t.vx[i]), _r(t.vy[i]), _r(ax[i]), _r(ay[i]),
                int(t.lane[i]), int(t.preceding[i]),
            ])
    stem = f"{meta.recording_id:02d}"
    return {
        f"{stem}_recordingMeta.csv": rec_buf.getvalue(),
        f"{stem}_tracksMeta.csv": tm_buf.getvalue(),
        f"{stem}_tracks.csv": tr_buf.getvalue(),
    }


def write_recording(recording: Recording, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in recording_csvs(recording).items():
        p = out / name
        p.write_text(text)
        paths.append(p)
    return paths


# -- kinematic fixtures -------------------------------------------------------


def _smoothstep(tau):
    tau = np.clip(tau, 0.0, 1.0)
    return tau * tau * (3.0 - 2.0 * tau)


def _smoothstep_rate(tau):
    inside = (tau > 0.0) & (tau < 1.0)
    return np.where(inside, 6.0 * tau * (1.0 - tau), 0.0)


def _speed_profile(track_spec: dict, t: np.ndarray) -> np.ndarray:
    if "speed_knots" in track_spec:
        knots = np.asarray(track_spec["speed_knots"], dtype=float)
        return np.interp(t, knots[:, 0], knots[:, 1])
    return np.full(t.shape, float(track_spec["speed"]))


def kinematic_track(track_spec: dict, layout: RoadLayout, dt: float, roadway: str) -> Track:
    n = int(track_spec["n_frames"])
    if n < 1:
        raise FixtureSpecError(f"track {track_spec.get('id')}: n_frames must be positive")
    first = int(track_spec.get("first_frame", 1))
    t = np.arange(n) * dt
    vx = _speed_profile(track_spec, t)
    x = float(track_spec.get("x0", 0.0)) + dt * np.concatenate([[0.0], np.cumsum(vx[:-1])])

    lane0 = int(track_spec.get("lane", 1))
    if not 1 <= lane0 <= layout.n_lanes:
        raise FixtureSpecError(f"track {track_spec.get('id')}: lane {lane0} does not exist")
    offset = float(track_spec.get("lane_offset", 0.0))
    y = np.full(n, layout.lane_centers[lane0 - 1] + offset)
    vy = np.zeros(n)
    lane = lane0
    for ch in sorted(track_spec.get("lane_changes", []), key=lambda c: c["t"]):
        to = int(ch["to_lane"])
        if not 1 <= to <= layout.n_lanes:
            raise FixtureSpecError(f"track {track_spec.get('id')}: lane {to} does not exist")
        dur = float(ch.get("duration", 3.0))
        start = float(ch["t"]) - dur / 2.0
        dy = layout.lane_centers[to - 1] - layout.lane_centers[lane - 1]
        tau = (t - start) / dur
        y = y + dy * _smoothstep(tau)
        vy = vy + dy / dur * _smoothstep_rate(tau)
        lane = to
    return Track(
        track_id=int(track_spec["id"]),
        length=float(track_spec.get("length", 4.5)),
        width=float(track_spec.get("width", 1.8)),
        driving_direction=roadway,
        num_lane_changes=0,
        frames=np.arange(first, first + n),
        x=x, y=y, vx=vx, vy=vy,
        lane=np.zeros(n, dtype=np.int64),
        preceding=np.zeros(n, dtype=np.int64),
        canonical=True,
    )


def fixture_meta(spec: dict) -> RecordingMeta:
    roadway = spec.get("roadway", LOWER)
    markings = spec.get("markings", DEFAULT_MARKINGS)
    other = spec.get("other_markings", ())
    upper = raw_markings(markings, UPPER) if roadway == UPPER else tuple(float(m) for m in other)
    lower = raw_markings(markings, LOWER) if roadway == LOWER else tuple(float(m) for m in other)
    return RecordingMeta(
        recording_id=int(spec.get("recording_id", 1)),
        frame_rate=float(spec.get("frame_rate", 25.0)),
        upper_lane_markings=upper,
        lower_lane_markings=lower,
        speed_limit=spec.get("speed_limit"),
        has_merge_lane=bool(spec.get("has_merge_lane", False)),
    )


def generate_kinematic_fixture(spec: dict) -> Recording:
    """Canonicalized recording exactly following a kinematic description.

    ``spec`` keys: ``recording_id``, ``frame_rate``, ``roadway`` (default
    lower), ``markings`` (canonical lateral positions), ``has_merge_lane`` and
    ``tracks``; each track has ``id``, ``n_frames``, optional ``first_frame``,
    ``x0``, ``lane``, ``lane_offset``, ``length``, ``width``, either
    ``speed`` or ``speed_knots`` ([[t, v], ...]) and ``lane_changes``
    ([{"t": crossing time, "duration": s, "to_lane": k}]).

    Raises:
        FixtureSpecError: duplicate track ids, unknown lanes, empty tracks.
    """
    ids = [int(t["id"]) for t in spec.get("tracks", [])]
    if len(ids) != len(set(ids)):
        raise FixtureSpecError(f"duplicate track ids in fixture spec: {sorted(ids)}")
    meta = fixture_meta(spec)
    roadway = spec.get("roadway", LOWER)
    layout = build_layout(meta, roadway)
    tracks = [kinematic_track(t, layout, meta.dt, roadway) for t in spec.get("tracks", [])]
    return canonical_recording(meta, tracks)


# -- agent-generated demonstrations -------------------------------------------


@dataclass(frozen=True)
class VehicleScript:
    """A vehicle at constant speed (optionally following lane changes)."""

    track_id: int
    lane: int
    x0: float
    speed: float
    length: float = 4.5
    width: float = 1.8
    lane_offset: float = 0.0
    lane_changes: tuple = ()

    def spec(self, n_frames: int, first_frame: int) -> dict:
        return {
            "id": self.track_id, "lane": self.lane, "x0": self.x0, "speed": self.speed,
            "length": self.length, "width": self.width, "lane_offset": self.lane_offset,
            "lane_changes": [dict(c) for c in self.lane_changes],
            "n_frames": n_frames, "first_frame": first_frame,
        }


@dataclass(frozen=True)
class SyntheticScenario:
    ego: VehicleScript
    neighbors: tuple = ()
    markings: tuple = DEFAULT_MARKINGS
    v_d: float = 30.0
    frame_rate: float = 25.0
    roadway: str = LOWER
    recording_id: int = 1
    first_frame: int = 1
    generator: str = KNOWN_WEIGHTS_ROLLOUT
    seed: int = 0
    noise_sigma: float = 0.0
    constants: FeatureConstants = DEFAULT_CONSTANTS

    @property
    def layout(self) -> RoadLayout:
        return layout_from_markings(self.markings)

    def meta(self) -> RecordingMeta:
        return fixture_meta({"recording_id": self.recording_id, "frame_rate": self.frame_rate,
                             "roadway": self.roadway, "markings": self.markings})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["neighbors"] = [asdict(n) for n in self.neighbors]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScenario":
        d = dict(d)
        d["ego"] = VehicleScript(**{**d["ego"], "lane_changes": tuple(d["ego"].get("lane_changes", ()))})
        d["neighbors"] = tuple(VehicleScript(**{**n, "lane_changes": tuple(n.get("lane_changes", ()))})
                               for n in d.get("neighbors", ()))
        d["markings"] = tuple(d.get("markings", DEFAULT_MARKINGS))
        if "constants" in d:
            d["constants"] = FeatureConstants(**d["constants"])
        return cls(**d)


def _scripted_recording(scenario: SyntheticScenario, n_frames: int) -> Recording:
    meta = scenario.meta()
    layout = build_layout(meta, scenario.roadway)
    tracks = [kinematic_track(v.spec(n_frames, scenario.first_frame), layout, meta.dt, scenario.roadway)
              for v in (scenario.ego,) + tuple(scenario.neighbors)]
    ids = [t.track_id for t in tracks]
    if len(ids) != len(set(ids)):
        raise FixtureSpecError(f"duplicate track ids in scenario: {sorted(ids)}")
    return canonical_recording(meta, tracks)


def generate_demo(theta_star, scenario: SyntheticScenario, duration: int,
                  agent_config: AgentConfig | None = None) -> Demonstration:
    """Demonstration driven by an agent with weights ``theta_star``.

    The acceleration-controlled rollout is stored as an ordinary track, so
    its per-frame velocities become the demonstration's actions. The
    demonstration's ``v_d`` is the maximum ego velocity, as for recorded
    data; the agent itself drives with ``scenario.v_d``. The result is not
    required to be a lane change (see :meth:`Demonstration.check`).
    """
    if duration < 1:
        raise ContractError("duration must be at least one frame")
    rec = _scripted_recording(scenario, duration)
    layout = rec.layout(scenario.roadway)
    ego = rec.track(scenario.ego.track_id)
    neighbors = tuple(t for t in rec.tracks if t.track_id != ego.track_id)
    dt = rec.meta.dt
    skeleton = Demonstration(demo_id_for(rec.recording_id, ego.track_id), rec.recording_id, ego,
                             neighbors, layout, scenario.v_d, dt)
    if scenario.generator == KNOWN_WEIGHTS_ROLLOUT:
        cfg = agent_config or AgentConfig(dt=dt)
        ro = rollout(skeleton, theta_star, cfg, scenario.constants, v_d=scenario.v_d)
        x, y, vx, vy = (ro.states[:, k].copy() for k in range(4))
    elif scenario.generator == KINEMATIC_SCRIPT:
        x, y, vx, vy = ego.x.copy(), ego.y.copy(), ego.vx.copy(), ego.vy.copy()
    else:
        raise ContractError(f"unknown ego generator {scenario.generator!r}")
    if scenario.noise_sigma > 0:
        rng = np.random.default_rng(scenario.seed)
        x = x + rng.normal(0.0, scenario.noise_sigma, x.shape)
        y = y + rng.normal(0.0, scenario.noise_sigma, y.shape)
    lanes = layout.lane_index(y)
    ego_track = replace(ego, x=x, y=y, vx=vx, vy=vy, lane=lanes,
                        num_lane_changes=len(lane_steps(np.asarray(lanes))))
    rec = canonical_recording(rec.meta, [ego_track] + list(neighbors))
    ego_track = rec.track(ego.track_id)
    neighbors = tuple(t for t in rec.tracks if t.track_id != ego.track_id)
    return Demonstration(skeleton.demo_id, rec.recording_id, ego_track, neighbors, layout,
                         float(np.max(ego_track.vx)), dt)


def demo_recording(demo: Demonstration, scenario: SyntheticScenario) -> Recording:
    """Recording (HighD schema, canonical tracks) holding a generated demonstration."""
    return canonical_recording(scenario.meta(), [demo.ego] + list(demo.neighbors))


# -- randomized oracle scenarios -----------------------------------------------


def lane_change_scenario(seed: int, recording_id: int = 1, first_frame: int = 1,
                         id_base: int = 0) -> SyntheticScenario:
    """Ego in the right lane closing in on a slower leader, left lane free ahead.

    All numbers are drawn from ``seed``. Track ids are ``id_base + 1`` (ego),
    ``+ 2`` (leader) and ``+ 3`` (follower in the left lane).
    """
    rng = np.random.default_rng(seed)
    speed = float(rng.uniform(24.0, 28.0))
    v_d = speed + float(rng.uniform(1.0, 3.0))
    leader = VehicleScript(id_base + 2, lane=1, x0=float(rng.uniform(35.0, 50.0)),
                           speed=speed - float(rng.uniform(6.0, 9.0)),
                           length=float(rng.uniform(4.0, 12.0)), width=float(rng.uniform(1.8, 2.5)))
    follower = VehicleScript(id_base + 3, lane=2, x0=float(rng.uniform(-60.0, -40.0)),
                             speed=float(rng.uniform(speed - 1.0, speed + 1.0)))
    ego = VehicleScript(id_base + 1, lane=1, x0=0.0, speed=speed,
                        lane_offset=float(rng.uniform(-0.3, 0.3)))
    return SyntheticScenario(ego=ego, neighbors=(leader, follower), v_d=v_d,
                             recording_id=recording_id, first_frame=first_frame, seed=seed)


def random_theta(seed: int, min_abs: float = 0.5) -> np.ndarray:
    """Weights with the sign pattern (-, +, -, -) and magnitudes >= ``min_abs``."""
    rng = np.random.default_rng(seed)
    mags = np.array([
        rng.uniform(min_abs, 2.0),
        rng.uniform(min_abs, 4.0),
        rng.uniform(min_abs, 4.0),
        rng.uniform(10.0, 30.0),
    ])
    return mags * np.array([-1.0, 1.0, -1.0, -1.0])


def write_scenario(path, scenario: SyntheticScenario) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=2, sort_keys=True) + "\n")


def read_scenario(path) -> SyntheticScenario:
    return SyntheticScenario.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class CorpusSpec:
    n_recordings: int = 3
    demos_per_recording: int = 3
    duration: int = 100  # frames per generated demonstration
    with_merge_recording: bool = True
    window: int = 300  # frames reserved per scenario inside a recording
    max_attempts: int = 20  # redraws allowed per demonstration


def synthetic_corpus(out_dir, seed: int, spec: CorpusSpec = CorpusSpec()) -> dict:
    """Write a HighD-schema corpus of agent-generated lane changes.

    Draws whose ego does not make exactly one left lane change (it can drift
    back across the marking on a two-lane road) are discarded and redrawn
    from the same random stream.

    Each recording holds ``demos_per_recording`` scenarios in disjoint time
    windows. With ``with_merge_recording`` one extra recording is flagged as
    having a merge lane. Returns (and writes as ``truth.json``) the weights
    each ego was generated with, keyed by recording and track id.
    """
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = {}
    redraws = 0
    n_rec = spec.n_recordings + (1 if spec.with_merge_recording else 0)
    for r in range(n_rec):
        rec_id = r + 1
        tracks = []
        scenario = None
        for k in range(spec.demos_per_recording):
            for attempt in range(spec.max_attempts):
                s_seed = int(rng.integers(2**31))
                t_seed = int(rng.integers(2**31))
                scenario = lane_change_scenario(s_seed, rec_id, 1 + k * spec.window, 10 * k)
                theta = random_theta(t_seed)
                demo = generate_demo(theta, scenario, spec.duration)
                if is_single_left_change(demo.ego):
                    break
                redraws += 1
            else:
                raise ContractError(f"no single left lane change after {spec.max_attempts} draws")
            tracks.extend([demo.ego, *demo.neighbors])
            truth[f"{rec_id:02d}-{demo.ego.track_id:05d}"] = [float(v) for v in theta]
        meta = replace(scenario.meta(), has_merge_lane=r >= spec.n_recordings)
        write_recording(canonical_recording(meta, tracks), out)
    doc = {"seed": seed, "spec": asdict(spec), "theta_star": truth, "redraws": redraws}
    (out / "truth.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc
