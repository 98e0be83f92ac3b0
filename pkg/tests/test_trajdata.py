import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from driverval import synthgen as sg
from driverval.errors import DataIntegrityError, GeometryError, SchemaError
from driverval.trajdata import (
    LOWER,
    UPPER,
    build_layout,
    canonicalize,
    discover_recordings,
    layout_from_markings,
    load_recording,
    read_recording,
    recording_paths,
)


def three_track_spec(roadway=LOWER):
    return {
        "recording_id": 7, "roadway": roadway, "markings": [0.0, 3.75, 7.5],
        "tracks": [
            {"id": 1, "n_frames": 150, "lane": 1, "x0": 0.0, "speed": 30.0,
             "lane_changes": [{"t": 4.0, "duration": 3.0, "to_lane": 2}]},
            {"id": 2, "n_frames": 120, "first_frame": 10, "lane": 2, "x0": 30.0, "speed": 28.0,
             "lane_changes": [{"t": 2.0, "duration": 2.0, "to_lane": 1}]},
            {"id": 3, "n_frames": 150, "lane": 1, "x0": 40.0, "speed": 30.0, "length": 12.0},
        ],
    }


@pytest.fixture
def written(tmp_path):
    rec = sg.generate_kinematic_fixture(three_track_spec())
    sg.write_recording(rec, tmp_path)
    return rec, tmp_path


def test_layout_examples():
    lay = layout_from_markings((0, 4, 8))
    assert lay.lane_centers == (2.0, 6.0) and lay.road_boundaries == (-2.0, 10.0) and lay.lane_width == 4.0
    lay = layout_from_markings((0, 3.9, 7.8))
    assert lay.lane_width == pytest.approx(3.9)
    assert lay.road_boundaries == pytest.approx((-1.95, 9.75))
    with pytest.raises(GeometryError):
        layout_from_markings((0, 4))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(2.5, 5.0), min_size=2, max_size=6), st.floats(-30, 30))
def test_layout_boundaries_exact(gaps, start):
    marks = start + np.concatenate([[0.0], np.cumsum(gaps)])
    lay = layout_from_markings(marks)
    assert lay.road_boundary_low == marks.min() - lay.lane_width / 2
    assert lay.road_boundary_high == marks.max() + lay.lane_width / 2
    np.testing.assert_allclose(lay.lane_centers, (marks[:-1] + marks[1:]) / 2)


def test_round_trip_preserves_tracks(written):
    rec, d = written
    loaded = read_recording(d, 7)
    assert len(loaded.tracks) == 3
    assert [len(t) for t in loaded.tracks] == [150, 120, 150]
    can = loaded.canonicalized()
    for a, b in zip(rec.tracks, can.tracks):
        np.testing.assert_allclose(a.x, b.x, atol=1e-9)
        np.testing.assert_allclose(a.y, b.y, atol=1e-9)
        np.testing.assert_allclose(a.vx, b.vx)
        assert np.array_equal(a.lane, b.lane)
        assert a.num_lane_changes == b.num_lane_changes


@pytest.mark.parametrize("roadway", [UPPER, LOWER])
def test_canonical_frame_and_idempotence(tmp_path, roadway):
    rec = sg.generate_kinematic_fixture(three_track_spec(roadway))
    sg.write_recording(rec, tmp_path)
    raw = read_recording(tmp_path, 7)
    if roadway == UPPER:
        assert all(np.all(t.vx < 0) for t in raw.tracks)
    can = raw.canonicalized()
    for t in can.tracks:
        assert np.all(t.vx > 0) and np.mean(t.vx) > 0
        again = canonicalize(t, raw.meta)
        assert again is t or (np.array_equal(again.x, t.x) and np.array_equal(again.lane, t.lane))
    lane = can.track(1).lane
    assert lane[0] == 1 and lane[-1] == 2  # leftward change stays leftward


def test_center_from_corner(tmp_path, written):
    _, d = written
    meta, tmeta, tracks = recording_paths(d, 7)
    df = pd.read_csv(tracks)
    df.loc[df.index[0], ["x", "y", "width", "height"]] = [10.0, 20.0, 4.0, 2.0]
    df.to_csv(tracks, index=False)
    rec = load_recording(meta, tmeta, tracks)
    t = rec.track(int(df.iloc[0]["id"]))
    assert (t.x[0], t.y[0]) == (12.0, 21.0)


def test_missing_lane_id_column(written):
    _, d = written
    meta, tmeta, tracks = recording_paths(d, 7)
    pd.read_csv(tracks).drop(columns=["laneId"]).to_csv(tracks, index=False)
    with pytest.raises(SchemaError, match="laneId"):
        load_recording(meta, tmeta, tracks)


def test_malformed_value_reports_line(written):
    _, d = written
    meta, tmeta, tracks = recording_paths(d, 7)
    df = pd.read_csv(tracks).astype({"xVelocity": object})
    df.loc[df.index[4], "xVelocity"] = "fast"
    df.to_csv(tracks, index=False)
    with pytest.raises(SchemaError, match="line 6"):
        load_recording(meta, tmeta, tracks)


def test_non_contiguous_frames(written):
    _, d = written
    meta, tmeta, tracks = recording_paths(d, 7)
    df = pd.read_csv(tracks)
    df = df.drop(index=df.index[(df["id"] == 3) & (df["frame"] == 50)])
    df.to_csv(tracks, index=False)
    with pytest.raises(DataIntegrityError) as err:
        load_recording(meta, tmeta, tracks)
    assert err.value.track_id == 3


def test_unmatched_lane_ids_are_an_integrity_error(written):
    _, d = written
    meta, tmeta, tracks = recording_paths(d, 7)
    df = pd.read_csv(tracks)
    df.loc[df["id"] == 3, "laneId"] = 99
    df.to_csv(tracks, index=False)
    rec = load_recording(meta, tmeta, tracks)
    with pytest.raises(DataIntegrityError):
        rec.canonicalized()


def test_merge_flag_and_list(tmp_path):
    spec = three_track_spec()
    sg.write_recording(sg.generate_kinematic_fixture({**spec, "has_merge_lane": True}), tmp_path)
    assert read_recording(tmp_path, 7).meta.has_merge_lane
    spec["recording_id"] = 8
    sg.write_recording(sg.generate_kinematic_fixture(spec), tmp_path)
    assert not read_recording(tmp_path, 8).meta.has_merge_lane
    assert read_recording(tmp_path, 8, merge_recordings=[8]).meta.has_merge_lane
    assert discover_recordings(tmp_path) == [7, 8]


def test_build_layout_lower_roadway_is_mirrored(written):
    rec, d = written
    meta = read_recording(d, 7).meta
    assert meta.lower_lane_markings == (-7.5, -3.75, -0.0) or meta.lower_lane_markings == (-7.5, -3.75, 0.0)
    lay = build_layout(meta, LOWER)
    assert lay.lane_centers == (1.875, 5.625)
