"""Inverse time-to-collision and time gap with respect to the preceding vehicle.

    TTC = x_gap / v_rel        t_gap = x_gap / v_agent

``x_gap`` is bumper to bumper (center distance minus both half-lengths) and
``v_rel = v_ego - v_preceding`` (positive when closing in). Inverse TTC keeps
its sign, so opening gaps show up as negative values.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContactError, ContractError, InsufficientDataError
from .tactical import detect_lane_change
from .trajdata import RoadLayout

HUMAN = "human"
MODEL = "model"

MULTIPLE_PRECEDING = "multiple_preceding"
PRECEDING_OUT_OF_SIGHT = "preceding_out_of_sight_at_lane_change"
NO_PRECEDING = "no_preceding"
CONTACT = "contact"


@dataclass(frozen=True)
class OperationalSample:
    frame: int
    x_gap: float
    v_rel: float
    v_agent: float
    ttc: float
    inv_ttc: float
    t_gap: float


def compute_metrics(x_gap: float, v_rel: float, v_agent: float, frame: int = 0) -> OperationalSample:
    """TTC, inverse TTC and time gap of one frame.

    Raises:
        ContactError: the vehicles touch or overlap (``x_gap <= 0``).
    """
    if not x_gap > 0:
        raise ContactError(x_gap)
    ttc = x_gap / v_rel if v_rel > 0 else math.inf
    t_gap = x_gap / v_agent if v_agent > 0 else math.inf
    return OperationalSample(int(frame), float(x_gap), float(v_rel), float(v_agent), ttc, v_rel / x_gap, t_gap)


@dataclass(eq=False)
class PhaseSeries:
    demo_id: str
    source: str
    samples: list
    lane_change_frame: int | None = None
    preceding_id: int | None = None
    trace: tuple = ()

    def __post_init__(self):
        frames = [s.frame for s in self.samples]
        if frames != sorted(frames):
            raise ContractError("samples must be ordered by frame")
        if self.lane_change_frame is not None and frames and not (
                frames[0] <= self.lane_change_frame <= frames[-1]):
            raise ContractError("lane change frame outside the sample range")

    def sample_at(self, frame: int) -> OperationalSample | None:
        for s in self.samples:
            if s.frame == frame:
                return s
        return None

    @property
    def is_lane_change(self) -> bool:
        return self.lane_change_frame is not None


@dataclass(frozen=True)
class Exclusion:
    demo_id: str
    source: str
    reason: str
    trace: tuple = ()


def _neighbor_state(nb, frame: int):
    i = frame - int(nb.frames[0]) if len(nb) else -1
    if 0 <= i < len(nb):
        return float(nb.x[i]), float(nb.y[i]), float(nb.vx[i])
    return None


def preceding_series(trajectory, neighbors, dims, layout: RoadLayout, demo_id: str = "",
                     source: str = HUMAN, lane_change_frame: int | None | str = "detect"):
    """Operational series of one trajectory, or the reason it is left out.

    The preceding vehicle at a frame is the nearest vehicle ahead of the ego
    center in the ego's lane (lane membership from center positions). For a
    lane change the analysis covers the frames up to and including the
    change, in the lane of origin; otherwise the whole trajectory. The series
    ends where the preceding vehicle disappears. Rules applied are recorded in
    ``trace`` so human and model series can be checked for equal treatment.
    """
    ego_length = dims[0]
    frames = np.asarray(trajectory.frames, dtype=np.int64)
    x = np.asarray(trajectory.x, dtype=float)
    y = np.asarray(trajectory.y, dtype=float)
    vx = np.asarray(trajectory.vx, dtype=float)
    if lane_change_frame == "detect":
        lane_change_frame = detect_lane_change(trajectory, layout)
    trace = []
    if lane_change_frame is not None:
        stop = int(np.searchsorted(frames, lane_change_frame)) + 1
        ref_lane = int(layout.lane_index(y[0]))
        trace.append("span:until_lane_change")
    else:
        stop = len(frames)
        ref_lane = None
        trace.append("span:full")

    samples = []
    leader = None
    for i in range(stop):
        f = int(frames[i])
        lane = ref_lane if ref_lane is not None else int(layout.lane_index(y[i]))
        best = None
        for nb in neighbors:
            st = _neighbor_state(nb, f)
            if st is None or st[0] <= x[i] or int(layout.lane_index(st[1])) != lane:
                continue
            if best is None or st[0] < best[1][0]:
                best = (nb, st)
        if best is None:
            if leader is not None:
                trace.append("crop:preceding_left_view")
                break
            continue
        nb, (nx, _, nvx) = best
        if leader is not None and nb.track_id != leader:
            trace.append("exclude:" + MULTIPLE_PRECEDING)
            return Exclusion(demo_id, source, MULTIPLE_PRECEDING, tuple(trace))
        leader = nb.track_id
        gap = (nx - x[i]) - (ego_length + nb.length) / 2.0
        try:
            samples.append(compute_metrics(gap, vx[i] - nvx, vx[i], f))
        except ContactError:
            trace.append("exclude:" + CONTACT)
            return Exclusion(demo_id, source, CONTACT, tuple(trace))

    if not samples:
        trace.append("exclude:" + NO_PRECEDING)
        return Exclusion(demo_id, source, NO_PRECEDING, tuple(trace))
    if lane_change_frame is not None and samples[-1].frame != lane_change_frame:
        trace.append("exclude:" + PRECEDING_OUT_OF_SIGHT)
        return Exclusion(demo_id, source, PRECEDING_OUT_OF_SIGHT, tuple(trace))
    return PhaseSeries(demo_id, source, samples, lane_change_frame, leader, tuple(trace))


# -- Student's t ------------------------------------------------------------


def _betacf(a: float, b: float, x: float, eps: float = 1e-16, max_iter: int = 100_000) -> float:
    """Continued fraction of the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float, one_minus_x: float | None = None) -> float:
    """I_x(a, b). Pass ``one_minus_x`` when it is known more accurately than ``1 - x``."""
    if not (a > 0 and b > 0):
        raise ContractError("a and b must be positive")
    y = 1.0 - x if one_minus_x is None else one_minus_x
    if x <= 0.0:
        return 0.0
    if y <= 0.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log(y))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(ln_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(ln_front) * _betacf(b, a, y) / b


def students_t_sf(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) of Student's t with ``df`` degrees of freedom."""
    if not df >= 1:
        raise ContractError(f"degrees of freedom must be >= 1, got {df}")
    if math.isnan(t):
        return math.nan
    if math.isinf(t):
        return 0.0
    t2 = t * t
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2))


@dataclass(frozen=True)
class PairedTTest:
    n: int
    mean_diff: float
    sd_diff: float
    t: float
    df: int
    p: float
    cohen_d: float

    def to_dict(self) -> dict:
        return {k: _jsonable(v) for k, v in self.__dict__.items()}


def paired_t_test(a, b) -> PairedTTest:
    """Paired t-test on ``a - b``; Cohen's d is mean difference over SD of differences."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ContractError("paired samples must have equal length")
    n = a.size
    if n < 2:
        raise InsufficientDataError(f"paired t-test needs at least 2 pairs, got {n}")
    d = a - b
    mean = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        t = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
        cd = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
    else:
        t = mean * math.sqrt(n) / sd
        cd = mean / sd
    return PairedTTest(n, mean, sd, t, n - 1, students_t_sf(t, n - 1), cd)


@dataclass
class LaneChangeStats:
    n: int
    human_mean_inv_ttc: float
    model_mean_inv_ttc: float
    human_mean_t_gap: float
    model_mean_t_gap: float
    inv_ttc_test: PairedTTest
    t_gap_test: PairedTTest
    pairs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "inv_ttc": {
                "human_mean": self.human_mean_inv_ttc,
                "model_mean": self.model_mean_inv_ttc,
                **self.inv_ttc_test.to_dict(),
            },
            "t_gap": {
                "human_mean": _jsonable(self.human_mean_t_gap),
                "model_mean": _jsonable(self.model_mean_t_gap),
                **self.t_gap_test.to_dict(),
            },
        }


def lane_change_point_stats(human_series, model_series) -> LaneChangeStats:
    """Compare inverse TTC and time gap at each source's own lane-change frame.

    Differences are human minus model.
    """
    human = {s.demo_id: s for s in human_series if s.is_lane_change}
    model = {s.demo_id: s for s in model_series if s.is_lane_change}
    pairs = []
    for demo_id in sorted(set(human) & set(model)):
        hs = human[demo_id].sample_at(human[demo_id].lane_change_frame)
        ms = model[demo_id].sample_at(model[demo_id].lane_change_frame)
        if hs is None or ms is None:
            continue
        pairs.append((demo_id, hs, ms))
    if len(pairs) < 2:
        raise InsufficientDataError(f"need at least 2 paired lane changes, got {len(pairs)}")
    h_inv = [p[1].inv_ttc for p in pairs]
    m_inv = [p[2].inv_ttc for p in pairs]
    h_tg = [p[1].t_gap for p in pairs]
    m_tg = [p[2].t_gap for p in pairs]
    return LaneChangeStats(
        n=len(pairs),
        human_mean_inv_ttc=float(np.mean(h_inv)),
        model_mean_inv_ttc=float(np.mean(m_inv)),
        human_mean_t_gap=float(np.mean(h_tg)),
        model_mean_t_gap=float(np.mean(m_tg)),
        inv_ttc_test=paired_t_test(h_inv, m_inv),
        t_gap_test=paired_t_test(h_tg, m_tg),
        pairs=[p[0] for p in pairs],
    )


def exclusion_counts(outcomes) -> dict:
    c = Counter(f"{o.source}:{o.reason}" for o in outcomes if isinstance(o, Exclusion))
    return dict(sorted(c.items()))


# -- plot data --------------------------------------------------------------

PANELS = {
    (HUMAN, True): "a_human_lane_change",
    (MODEL, True): "b_model_lane_change",
    (HUMAN, False): "c_human_car_following",
    (MODEL, False): "d_model_car_following",
}


def _fmt(v: float) -> str:
    return repr(float(v)) if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def phase_csv(series: PhaseSeries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "t_gap", "inv_ttc", "marker"])
    for i, s in enumerate(series.samples):
        marks = []
        if i == 0:
            marks.append("initial")
        if series.lane_change_frame is not None and s.frame == series.lane_change_frame:
            marks.append("lane_change")
        w.writerow([s.frame, _fmt(s.t_gap), _fmt(s.inv_ttc), ";".join(marks)])
    return buf.getvalue()


def emit_phase_data(series_set, out_dir) -> list[dict]:
    """Write one (t_gap, inv_ttc) CSV per series, grouped into the four phase-plot panels.

    Returns the manifest entries (also written as ``manifest.json`` when non-empty).
    """
    series_list = sorted(series_set, key=lambda s: (s.source, s.demo_id))
    manifest = []
    if not series_list:
        return manifest
    out = Path(out_dir)
    for s in series_list:
        panel = PANELS[(s.source, s.is_lane_change)]
        rel = Path(panel) / f"{s.source}_{s.demo_id}.csv"
        (out / panel).mkdir(parents=True, exist_ok=True)
        (out / rel).write_text(phase_csv(s))
        manifest.append({
            "demo_id": s.demo_id,
            "source": s.source,
            "panel": panel,
            "file": rel.as_posix(),
            "n_samples": len(s.samples),
            "lane_change_frame": s.lane_change_frame,
        })
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
