import json
import shutil

import pandas as pd
import pytest

from driverval import synthgen as sg
from driverval.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_PARTIAL, main
from driverval.errors import ContractError
from driverval.pipeline import PipelineConfig, cmd_validate
from driverval.trajdata import recording_paths

STAGES = ("extract", "train", "validate")


@pytest.fixture(scope="module")
def pipeline_run(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["run", "--data", str(corpus_dir), "--out", str(out), "--jobs", "2"])
    return out, code


def read(path):
    return json.loads(path.read_text())


def test_extract_counts_and_merge_exclusion(pipeline_run):
    out, _ = pipeline_run
    m = read(out / "extract" / "manifest.json")
    assert m["per_recording"] == {"01": 3, "02": 3, "03": 3}
    assert m["total"] == 9 == len(m["demonstrations"])
    assert [(e["recording_id"], e["reason"]) for e in m["excluded_recordings"]] == [(4, "merge_lane")]


def test_exit_code_reflects_partial_failure(pipeline_run):
    out, code = pipeline_run
    s = read(out / "train" / "summary.json")
    assert s["total"] == 9 and s["converged"] >= 1
    assert code == (EXIT_PARTIAL if s["failed"] else EXIT_OK)
    results = [json.loads(l) for l in (out / "train" / "results.jsonl").read_text().splitlines()]
    assert [r["demo_id"] for r in results] == sorted(r["demo_id"] for r in results)
    assert all(r["diagnostics"]["init_jacobian"] for r in results)


def test_every_stage_records_its_config(pipeline_run):
    out, _ = pipeline_run
    cfgs = [read(out / s / "config.json") for s in STAGES]
    assert cfgs[0] == cfgs[1] == cfgs[2]
    assert PipelineConfig.from_dict(cfgs[0]).to_dict() == cfgs[0]


def test_validate_report(pipeline_run):
    out, _ = pipeline_run
    rep = read(out / "validate" / "report.json")
    tac = rep["tactical"]
    assert tac and tac["total_agents"] == rep["n_rollouts"] == rep["n_converged"]
    assert {r["behavior"] for r in tac["rows"]} == {"LaneChange", "Collision", "CarFollowing", "OffRoad"}
    assert all(v["human"] == "LaneChange" for v in rep["labels"].values())
    assert tac["desirable_pct"] == 100.0  # agents reproduce their own generated lane changes
    op = rep["operational"]
    assert set(op["panels"]) == {"human_lane_change", "model_lane_change",
                                 "human_car_following", "model_car_following"}
    assert "lane_change_point" in op
    for entry in rep["phase_data"]:
        assert (out / "validate" / "phase" / entry["file"]).exists()
    assert len(rep["heatmaps"]) == min(3, rep["n_rollouts"])
    assert (out / "validate" / "tactical.csv").exists()
    assert len(list((out / "validate" / "rollouts").glob("*.csv"))) == rep["n_rollouts"]


def test_stage_rerun_is_byte_identical(pipeline_run):
    out, _ = pipeline_run
    before = {p: p.read_bytes() for p in (out / "validate").rglob("*") if p.is_file()}
    cfg = PipelineConfig.load(out / "validate" / "config.json")
    cmd_validate(cfg)
    after = {p: p.read_bytes() for p in (out / "validate").rglob("*") if p.is_file()}
    assert before == after


def test_validate_names_missing_demos(pipeline_run, tmp_path):
    out, _ = pipeline_run
    copy = tmp_path / "out"
    shutil.copytree(out, copy)
    with open(copy / "train" / "results.jsonl", "a") as fh:
        fh.write(json.dumps({"demo_id": "07-00099", "status": "converged",
                             "weights": {"theta_vel": -1.0, "theta_lane": 1.0, "theta_bounds": -1.0,
                                         "theta_collision": -1.0},
                             "iterations": 1, "final_nll": 0.0, "failed_segment": None}) + "\n")
    cfg = PipelineConfig.from_dict({**read(out / "validate" / "config.json"), "out_dir": str(copy)})
    with pytest.raises(ContractError, match="07-00099"):
        cmd_validate(cfg)


def test_gridsearch_single_combination_and_tie(pipeline_run, tmp_path):
    out, _ = pipeline_run
    data = read(out / "extract" / "config.json")["data_dir"]
    one = tmp_path / "one.json"
    one.write_text(json.dumps({"grid": {"c": [0.14], "sigma_x": [15.0], "sigma_y": [1.4]}}))
    copy = tmp_path / "out"
    shutil.copytree(out, copy)
    assert main(["gridsearch", "--config", str(one), "--data", data, "--out", str(copy),
                 "--grid-demos", "2"]) == EXIT_OK
    r = read(copy / "gridsearch" / "ranking.json")
    assert len(r["ranking"]) == 1 and r["n_demos"] == 2 and not r["tie"]["tied"]
    assert r["best"]["score"] <= 2

    two = tmp_path / "two.json"
    two.write_text(json.dumps({"grid": [[0.18, 15.0, 1.4], [0.14, 15.0, 1.4]], "grid_demos": 1}))
    assert main(["gridsearch", "--config", str(two), "--data", data, "--out", str(copy)]) == EXIT_OK
    r = read(copy / "gridsearch" / "ranking.json")
    scores = [e["score"] for e in r["ranking"]]
    if scores[0] == scores[1]:
        assert r["tie"]["tied"] and r["tie"]["resolved_by"]
        assert r["best"]["constants"] == {"c": 0.14, "sigma_x": 15.0, "sigma_y": 1.4}  # preference order
    else:
        assert not r["tie"]["tied"] and scores[0] > scores[1]


@pytest.mark.parametrize("argv", [
    ["extract", "--jobs", "0"],
    ["extract", "--ax-bounds", "3,1"],
    ["extract", "--horizon", "1"],
])
def test_config_errors_exit_2(argv, corpus_dir, tmp_path, capsys):
    assert main(argv + ["--data", str(corpus_dir), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_unknown_config_key_exit_2(corpus_dir, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"jbos": 2}))
    assert main(["extract", "--config", str(bad), "--data", str(corpus_dir), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_schema_error_exit_3(corpus_dir, tmp_path, capsys):
    data = tmp_path / "data"
    shutil.copytree(corpus_dir, data)
    tracks = recording_paths(data, 2)[2]
    pd.read_csv(tracks).drop(columns=["laneId"]).to_csv(tracks, index=False)
    assert main(["extract", "--data", str(data), "--out", str(tmp_path / "o")]) == EXIT_DATA
    err = capsys.readouterr().err
    assert "laneId" in err and "02_tracks.csv" in err


def test_empty_data_dir_exit_2(tmp_path):
    assert main(["extract", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_vel_dominance_batch_exit_4(tmp_path, capsys):
    spec = {"recording_id": 1, "tracks": [
        {"id": 1, "n_frames": 150, "lane": 1, "speed_knots": [[0.0, 20.0], [6.0, 35.0]],
         "lane_changes": [{"t": 3.0, "duration": 3.0, "to_lane": 2}]}]}
    sg.write_recording(sg.generate_kinematic_fixture(spec), tmp_path / "data")
    argv = ["--data", str(tmp_path / "data"), "--out", str(tmp_path / "o")]
    assert main(["extract", *argv]) == EXIT_OK
    assert main(["train", *argv]) == EXIT_PARTIAL
    s = read(tmp_path / "o" / "train" / "summary.json")
    assert s["failed"] == 1 and s["failed_with_vel_dominance"] == 1
    r = json.loads((tmp_path / "o" / "train" / "results.jsonl").read_text())
    assert r["status"] == "failed_indefinite_hessian" and r["diagnostics"]["vel_dominance"]
    assert main(["validate", *argv]) == EXIT_OK
    assert read(tmp_path / "o" / "validate" / "report.json")["tactical"] is None


def test_synth_subcommand(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--seed", "2", "--recordings", "1",
                 "--demos-per-recording", "1", "--duration", "60", "--no-merge-recording"]) == EXIT_OK
    assert "wrote 1 generated" in capsys.readouterr().out
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "01_recordingMeta.csv", "01_tracks.csv", "01_tracksMeta.csv", "truth.json"]
