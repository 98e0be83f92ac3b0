"""Pipeline stages: extract, train, validate, gridsearch.

Stages communicate only through files in the output directory:

    <out>/extract/manifest.json
    <out>/train/results.jsonl       (one record per demo, sorted by demo_id)
    <out>/validate/report.json      (+ rollouts, tactical table, phase data, heat maps)
    <out>/gridsearch/ranking.{csv,json}

Every stage directory also receives ``config.json``. Wall-clock timings are
kept in a separate ``timings.jsonl`` so the other outputs stay byte-identical
across reruns.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import irl
from .errors import (
    ConfigError,
    ContractError,
    DrivervalError,
    InsufficientDataError,
    MergeLaneRecordingError,
    PlanningError,
    UnsuitableDemoError,
)
from .operational import (
    HUMAN,
    MODEL,
    PhaseSeries,
    emit_phase_data,
    exclusion_counts,
    lane_change_point_stats,
    preceding_series,
)
from .reward import DEFAULT_CONSTANTS, FeatureConstants, GridSpec, RewardWeights, heatmap, write_heatmap
from .rollout import AgentConfig, rollout
from .scenarios import demo_from_manifest, extract_left_lane_changes, write_manifest
from .tactical import CATEGORIES, classify, tabulate
from .trajdata import discover_recordings, read_recording

log = logging.getLogger(__name__)

CONFIG_NAME = "config.json"
DEFAULT_MERGE_RECORDINGS = (58, 59, 60)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


@dataclass
class PipelineConfig:
    data_dir: str = "data"
    out_dir: str = "out"
    recordings: list | None = None  # None: every recording found in data_dir
    merge_recordings: list = field(default_factory=lambda: list(DEFAULT_MERGE_RECORDINGS))
    constants: FeatureConstants = DEFAULT_CONSTANTS
    agent: AgentConfig = field(default_factory=AgentConfig)
    optimizer: irl.OptimizerConfig = field(default_factory=irl.OptimizerConfig)
    theta_init: tuple = irl.DEFAULT_THETA_INIT
    jobs: int = 1
    seed: int = 0
    max_demos: int | None = None  # cap on demos per stage (reduced runs)
    heatmap_demos: int = 3
    grid: dict = field(default_factory=lambda: {k: list(v) for k, v in irl.DEFAULT_GRID.items()})
    grid_demos: int = 15
    grid_preference: list = field(default_factory=lambda: [list(DEFAULT_CONSTANTS.as_tuple())])

    def validate(self) -> "PipelineConfig":
        """Raise ConfigError on anything a stage would trip over later."""
        if not isinstance(self.jobs, int) or self.jobs < 1:
            raise ConfigError(f"jobs must be a positive integer, got {self.jobs!r}")
        if not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if self.max_demos is not None and (not isinstance(self.max_demos, int) or self.max_demos < 1):
            raise ConfigError(f"max_demos must be a positive integer or null, got {self.max_demos!r}")
        if self.heatmap_demos < 0 or self.grid_demos < 1:
            raise ConfigError("heatmap_demos must be >= 0 and grid_demos >= 1")
        th = np.asarray(self.theta_init, dtype=float)
        if th.shape != (4,) or not np.all(np.isfinite(th)):
            raise ConfigError(f"theta_init must be 4 finite numbers, got {self.theta_init!r}")
        try:
            irl.expand_grid(self.grid)
        except (KeyError, TypeError, ValueError, DrivervalError) as exc:
            raise ConfigError(f"invalid constants grid: {exc}") from exc
        return self

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["constants"] = asdict(self.constants)
        d["agent"] = asdict(self.agent)
        d["agent"]["ax_bounds"] = list(self.agent.ax_bounds)
        d["agent"]["ay_bounds"] = list(self.agent.ay_bounds)
        d["optimizer"] = asdict(self.optimizer)
        d["theta_init"] = [float(v) for v in self.theta_init]
        d["merge_recordings"] = list(self.merge_recordings)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        d = dict(d)
        try:
            if "constants" in d:
                d["constants"] = FeatureConstants(**d["constants"])
            if "agent" in d:
                a = dict(d["agent"])
                for k in ("ax_bounds", "ay_bounds"):
                    if k in a:
                        a[k] = tuple(a[k])
                d["agent"] = AgentConfig(**a)
            if "optimizer" in d:
                d["optimizer"] = irl.OptimizerConfig(**d["optimizer"])
            if "theta_init" in d:
                d["theta_init"] = tuple(d["theta_init"])
            cfg = cls(**d)
        except (TypeError, ValueError, DrivervalError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def stage_dir(self, stage: str) -> Path:
        d = Path(self.out_dir) / stage
        d.mkdir(parents=True, exist_ok=True)
        (d / CONFIG_NAME).write_text(_dump(self.to_dict()))
        return d


def _map(fn, items, jobs: int):
    """Order-preserving map, in worker processes when ``jobs > 1``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


# -- extract ------------------------------------------------------------------


@dataclass
class ExtractSummary:
    manifest_path: Path
    n_demos: int
    per_recording: dict
    excluded: list


def _recording_ids(cfg: PipelineConfig) -> list[int]:
    if cfg.recordings is not None:
        return sorted(int(r) for r in cfg.recordings)
    ids = discover_recordings(cfg.data_dir)
    if not ids:
        raise ConfigError(f"no recordings found in {cfg.data_dir}")
    return ids


def cmd_extract(cfg: PipelineConfig) -> ExtractSummary:
    """Ingest the recordings and write the demonstration manifest."""
    out = cfg.stage_dir("extract")
    demos, per_rec, excluded = [], {}, []
    for rid in _recording_ids(cfg):
        rec = read_recording(cfg.data_dir, rid, merge_recordings=cfg.merge_recordings).canonicalized()
        try:
            found = extract_left_lane_changes(rec)
        except MergeLaneRecordingError as exc:
            excluded.append({"recording_id": rid, "reason": "merge_lane", "detail": str(exc)})
            continue
        per_rec[f"{rid:02d}"] = len(found)
        demos.extend(found)
    path = out / "manifest.json"
    write_manifest(path, demos, {
        "data_dir": str(cfg.data_dir),
        "per_recording": per_rec,
        "excluded_recordings": excluded,
        "total": len(demos),
    })
    log.info("extracted %d demonstrations from %d recordings", len(demos), len(per_rec))
    return ExtractSummary(path, len(demos), per_rec, excluded)


def _manifest(cfg: PipelineConfig) -> dict:
    path = Path(cfg.out_dir) / "extract" / "manifest.json"
    if not path.exists():
        raise ContractError(f"{path} not found; run extract first")
    return json.loads(path.read_text())


def load_demos(cfg: PipelineConfig, entries: list[dict]) -> list:
    """Rebuild demonstrations from manifest entries (recordings read once each)."""
    by_rec: dict = {}
    for e in entries:
        by_rec.setdefault(int(e["recording_id"]), []).append(e)
    demos = {}
    for rid, es in sorted(by_rec.items()):
        rec = read_recording(cfg.data_dir, rid, merge_recordings=cfg.merge_recordings).canonicalized()
        for e in es:
            demos[e["demo_id"]] = demo_from_manifest(rec, e)
    return [demos[e["demo_id"]] for e in entries]


def _selected_entries(cfg: PipelineConfig, limit: int | None = None) -> list[dict]:
    entries = sorted(_manifest(cfg)["demonstrations"], key=lambda e: e["demo_id"])
    cap = limit if limit is not None else cfg.max_demos
    return entries[:cap] if cap is not None else entries


# -- train --------------------------------------------------------------------


@dataclass
class TrainSummary:
    results_path: Path
    n_total: int
    n_converged: int
    status_counts: dict

    @property
    def partial_failure(self) -> bool:
        return self.n_converged < self.n_total


def _train_job(args):
    demo, cfg = args
    t0 = time.perf_counter()
    try:
        res, diag = irl.train(demo, cfg.constants, cfg.theta_init, cfg.optimizer)
        record = {**res.to_dict(), "diagnostics": diag.to_dict()}
    except UnsuitableDemoError as exc:
        record = {"demo_id": demo.demo_id, "status": irl.TrainingStatus.FAILED_NO_MINIMUM.value,
                  "weights": None, "iterations": 0, "final_nll": None, "failed_segment": None,
                  "diagnostics": None, "error": str(exc)}
    return record, time.perf_counter() - t0


def cmd_train(cfg: PipelineConfig) -> TrainSummary:
    """Train every manifest demonstration; failures are recorded, never fatal."""
    out = cfg.stage_dir("train")
    demos = load_demos(cfg, _selected_entries(cfg))
    outputs = _map(_train_job, [(d, cfg) for d in demos], cfg.jobs)
    outputs.sort(key=lambda o: o[0]["demo_id"])
    with open(out / "results.jsonl", "w") as fh:
        for rec, _ in outputs:
            fh.write(json.dumps(rec, sort_keys=True, allow_nan=False) + "\n")
    with open(out / "timings.jsonl", "w") as fh:
        for rec, wall in outputs:
            fh.write(json.dumps({"demo_id": rec["demo_id"], "wall_time_s": wall}) + "\n")

    counts = {s.value: 0 for s in irl.TrainingStatus}
    vel_dom_failed = 0
    for rec, _ in outputs:
        counts[rec["status"]] += 1
        diag = rec.get("diagnostics") or {}
        if rec["status"] != irl.TrainingStatus.CONVERGED.value and diag.get("vel_dominance"):
            vel_dom_failed += 1
    n = len(outputs)
    n_conv = counts[irl.TrainingStatus.CONVERGED.value]
    summary = {
        "total": n,
        "converged": n_conv,
        "failed": n - n_conv,
        "convergence_rate": n_conv / n if n else None,
        "status_counts": counts,
        "failed_with_vel_dominance": vel_dom_failed,
    }
    (out / "summary.json").write_text(_dump(summary))
    log.info("trained %d demonstrations, %d converged", n, n_conv)
    return TrainSummary(out / "results.jsonl", n, n_conv, counts)


def read_results(cfg: PipelineConfig) -> list[dict]:
    path = Path(cfg.out_dir) / "train" / "results.jsonl"
    if not path.exists():
        raise ContractError(f"{path} not found; run train first")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


# -- validate -------------------------------------------------------------------


@dataclass
class ValidationReport:
    path: Path
    report: dict
    n_rollout_failures: int

    @property
    def partial_failure(self) -> bool:
        return self.n_rollout_failures > 0


def _rollout_job(args):
    demo, weights, cfg = args
    try:
        return rollout(demo, weights, replace(cfg.agent, dt=demo.dt), cfg.constants), None
    except PlanningError as exc:
        return None, {"demo_id": demo.demo_id, "frame": exc.frame, "error": str(exc)}


def _stats_block(series: list) -> dict:
    """Mean inverse TTC and time gap over all samples of a panel."""
    inv = [s.inv_ttc for ser in series for s in ser.samples]
    tg = [s.t_gap for ser in series for s in ser.samples if math.isfinite(s.t_gap)]
    return {
        "n_series": len(series),
        "n_samples": len(inv),
        "mean_inv_ttc": float(np.mean(inv)) if inv else None,
        "mean_t_gap": float(np.mean(tg)) if tg else None,
    }


def _heatmap_for(demo, weights: RewardWeights, constants: FeatureConstants, out_dir: Path) -> str:
    ego = demo.ego
    x0 = float(ego.x[0])
    lo, hi = demo.layout.road_boundaries
    spec = GridSpec(x_min=x0 - 50.0, x_max=x0 + 100.0, y_min=lo - 1.0, y_max=hi + 1.0,
                    nx=151, ny=int(round((hi - lo + 2.0) / 0.25)) + 1)
    others = [(float(nb.x[0]), float(nb.y[0])) for nb in demo.neighbors
              if len(nb) and nb.first_frame == ego.first_frame]
    hm = heatmap(weights, constants, demo.layout, np.array(others).reshape(-1, 2), spec)
    stem = f"{demo.demo_id}"
    write_heatmap(hm, out_dir / f"{stem}.csv", out_dir / f"{stem}.json",
                  {"demo_id": demo.demo_id, "frame": int(ego.first_frame)})
    return f"heatmaps/{stem}.csv"


def cmd_validate(cfg: PipelineConfig) -> ValidationReport:
    """Roll out every converged agent and compare it with its demonstration."""
    out = cfg.stage_dir("validate")
    results = read_results(cfg)
    entries = {e["demo_id"]: e for e in _manifest(cfg)["demonstrations"]}
    missing = sorted(r["demo_id"] for r in results if r["demo_id"] not in entries)
    if missing:
        raise ContractError(f"training results without manifest entries: {missing}")
    converged = [r for r in results if r["status"] == irl.TrainingStatus.CONVERGED.value]
    demos = load_demos(cfg, [entries[r["demo_id"]] for r in converged])
    weights = [RewardWeights(**r["weights"]) for r in converged]

    outputs = _map(_rollout_job, [(d, w, cfg) for d, w in zip(demos, weights)], cfg.jobs)
    ro_dir = out / "rollouts"
    ro_dir.mkdir(exist_ok=True)
    failures, labels, human_labels = [], {}, {}
    human_series, model_series, outcomes = [], [], []
    ok = []
    for demo, w, (ro, fail) in zip(demos, weights, outputs):
        if fail is not None:
            failures.append(fail)
            continue
        ok.append((demo, w, ro))
        ro.write_csv(ro_dir / f"{demo.demo_id}.csv")
        dims = (demo.ego.length, demo.ego.width)
        labels[demo.demo_id] = classify(ro, demo.neighbors, demo.layout, dims)
        human_labels[demo.demo_id] = classify(demo.ego, demo.neighbors, demo.layout, dims)
        for source, traj in ((HUMAN, demo.ego), (MODEL, ro)):
            res = preceding_series(traj, demo.neighbors, dims, demo.layout, demo.demo_id, source)
            outcomes.append(res)
            if isinstance(res, PhaseSeries):
                (human_series if source == HUMAN else model_series).append(res)

    report = {
        "n_demos_trained": len(results),
        "n_converged": len(converged),
        "n_rollouts": len(ok),
        "rollout_failures": failures,
        "config": cfg.to_dict(),
    }
    if labels:
        table = tabulate(labels, human_labels)
        table.write(out / "tactical.csv", out / "tactical.json")
        report["tactical"] = table.to_dict()
        report["labels"] = {k: {"model": v.label, "model_event_frame": v.event_frame,
                                "human": human_labels[k].label}
                            for k, v in sorted(labels.items())}
    else:
        report["tactical"] = None

    op = {"exclusions": exclusion_counts(outcomes), "panels": {}}
    for source, series in ((HUMAN, human_series), (MODEL, model_series)):
        for lc in (True, False):
            key = f"{source}_{'lane_change' if lc else 'car_following'}"
            op["panels"][key] = _stats_block([s for s in series if s.is_lane_change == lc])
    try:
        op["lane_change_point"] = lane_change_point_stats(human_series, model_series).to_dict()
    except InsufficientDataError as exc:
        op["lane_change_point"] = {"error": str(exc)}
    (out / "operational.json").write_text(_dump(op))
    report["operational"] = op
    report["phase_data"] = emit_phase_data(human_series + model_series, out / "phase")

    hm_dir = out / "heatmaps"
    hm_files = []
    for demo, w, _ in ok[: cfg.heatmap_demos]:
        hm_dir.mkdir(exist_ok=True)
        hm_files.append(_heatmap_for(demo, w, cfg.constants, hm_dir))
    report["heatmaps"] = hm_files

    path = out / "report.json"
    path.write_text(_dump(report))
    return ValidationReport(path, report, len(failures))


# -- gridsearch -----------------------------------------------------------------


def _grid_job(args):
    demos, constants, cfg = args
    return irl.evaluate_constants(demos, constants, cfg.agent, cfg.optimizer, cfg.theta_init)


def cmd_gridsearch(cfg: PipelineConfig) -> list:
    """Rank feature constants by desirable tactical behaviors on the first demos."""
    out = cfg.stage_dir("gridsearch")
    entries = _selected_entries(cfg, limit=cfg.grid_demos)
    if not entries:
        raise ContractError("grid search needs at least one demonstration in the manifest")
    demos = load_demos(cfg, entries)
    combos = irl.expand_grid(cfg.grid)
    scored = _map(_grid_job, [(demos, k, cfg) for k in combos], cfg.jobs)
    ranked = irl.rank_entries(scored, cfg.grid_preference)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "c", "sigma_x", "sigma_y", "score", "n_converged", "tied_for_best"]
               + list(CATEGORIES))
    for e in ranked:
        w.writerow([e.rank, e.constants.c, e.constants.sigma_x, e.constants.sigma_y, e.score,
                    e.n_converged, int(e.tied_for_best)] + [e.label_counts.get(c, 0) for c in CATEGORIES])
    (out / "ranking.csv").write_text(buf.getvalue())
    tied = [e.to_dict()["constants"] for e in ranked if e.tied_for_best]
    (out / "ranking.json").write_text(_dump({
        "n_demos": len(demos),
        "demo_ids": [d.demo_id for d in demos],
        "ranking": [e.to_dict() for e in ranked],
        "best": ranked[0].to_dict(),
        "tie": {"tied": bool(tied), "combinations": tied,
                "resolved_by": "preference order, then grid order" if tied else None},
    }))
    return ranked
