import json
import math
from dataclasses import dataclass

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driverval.errors import ContactError, ContractError, InsufficientDataError
from driverval.operational import (
    HUMAN,
    MODEL,
    MULTIPLE_PRECEDING,
    NO_PRECEDING,
    PRECEDING_OUT_OF_SIGHT,
    CONTACT,
    Exclusion,
    PhaseSeries,
    compute_metrics,
    emit_phase_data,
    exclusion_counts,
    lane_change_point_stats,
    paired_t_test,
    preceding_series,
    regularized_incomplete_beta,
    students_t_sf,
)
from driverval.trajdata import layout_from_markings

LAYOUT = layout_from_markings((0.0, 4.0, 8.0))
DT = 0.04


@dataclass
class Veh:
    frames: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    length: float = 4.0
    width: float = 2.0
    track_id: int = 9

    def __len__(self):
        return len(self.frames)


def veh(x0, speed, n, y=2.0, first=1, **kw):
    k = np.arange(n)
    x = x0 + speed * DT * k
    yy = np.broadcast_to(np.asarray(y, dtype=float), (n,)).copy()
    return Veh(np.arange(first, first + n), x, yy, np.full(n, float(speed)), **kw)


# -- metrics ---------------------------------------------------------------


def test_metric_examples():
    s = compute_metrics(30.0, 5.0, 30.0)
    assert s.ttc == 6.0 and s.inv_ttc == pytest.approx(0.1667, abs=5e-5)
    assert compute_metrics(21.0, 0.0, 30.0).t_gap == pytest.approx(0.7, rel=1e-15)
    o = compute_metrics(30.0, -3.0, 30.0)
    assert o.ttc == math.inf and o.inv_ttc == pytest.approx(-0.1, rel=1e-15)
    assert compute_metrics(10.0, 1.0, 0.0).t_gap == math.inf


def test_contact_is_flagged():
    with pytest.raises(ContactError):
        compute_metrics(0.0, 1.0, 30.0)


@settings(max_examples=300)
@given(st.floats(0.01, 500), st.floats(-40, 40), st.floats(0.1, 60))
def test_metric_invariants(gap, v_rel, v):
    s = compute_metrics(gap, v_rel, v)
    assert s.inv_ttc * s.x_gap == pytest.approx(v_rel, rel=4e-16, abs=1e-300)
    assert 0 < s.t_gap < math.inf
    if v_rel > 1e-9:  # subnormal closing speeds overflow ttc
        assert s.ttc * s.inv_ttc == pytest.approx(1.0, rel=1e-15)


# -- series and exclusions ---------------------------------------------------


def test_bumper_to_bumper_gap():
    ego = veh(0.0, 25.0, 10, length=4.0)
    lead = veh(30.0, 25.0, 10, length=6.0)
    s = preceding_series(ego, [lead], (4.0, 2.0), LAYOUT, "d", lane_change_frame=None)
    assert s.samples[0].x_gap == 25.0 and s.preceding_id == 9


def test_two_successive_leaders_excluded():
    ego = veh(0.0, 25.0, 100)
    first = veh(40.0, 25.0, 100, track_id=1)
    cut_in = veh(70.0, 25.0, 50, first=51, track_id=2)  # 20 m ahead of the ego when it appears
    r = preceding_series(ego, [first, cut_in], (4.5, 2.0), LAYOUT, "d", lane_change_frame=None)
    assert isinstance(r, Exclusion) and r.reason == MULTIPLE_PRECEDING


def test_leader_leaving_view_crops_series():
    ego = veh(0.0, 25.0, 200)
    lead = veh(30.0, 24.0, 99, track_id=3)  # present on frames 1..99, gone from frame 100
    s = preceding_series(ego, [lead], (4.5, 2.0), LAYOUT, "d", lane_change_frame=None)
    assert isinstance(s, PhaseSeries)
    assert s.samples[-1].frame == 99 and len(s.samples) == 99
    assert "crop:preceding_left_view" in s.trace


def test_lane_change_series_uses_origin_lane_until_change():
    n = 60
    ego = veh(0.0, 25.0, n)
    ego.y[:] = np.where(np.arange(1, n + 1) < 30, 2.0, 6.0)
    lead = veh(30.0, 20.0, n)
    other_lane = veh(10.0, 25.0, n, y=6.0, track_id=4)
    s = preceding_series(ego, [lead, other_lane], (4.5, 2.0), LAYOUT, "d")
    assert s.lane_change_frame == 30 and s.samples[-1].frame == 30 and s.preceding_id == 9
    gone = veh(30.0, 20.0, 20)
    r = preceding_series(ego, [gone], (4.5, 2.0), LAYOUT, "d")
    assert isinstance(r, Exclusion) and r.reason == PRECEDING_OUT_OF_SIGHT


def test_no_preceding_and_contact_exclusions():
    ego = veh(0.0, 25.0, 20)
    assert preceding_series(ego, [], (4.5, 2.0), LAYOUT, "d").reason == NO_PRECEDING
    bumper = veh(4.0, 25.0, 20)
    assert preceding_series(ego, [bumper], (4.5, 2.0), LAYOUT, "d").reason == CONTACT


@pytest.mark.parametrize("case", ["follow", "two_leaders", "leaves", "lane_change"])
def test_rules_are_source_symmetric(case):
    ego = veh(0.0, 25.0, 120)
    nbs = [veh(40.0, 24.0, 120, track_id=1)]
    if case == "two_leaders":
        nbs.append(veh(80.0, 25.0, 60, first=61, track_id=2))
    elif case == "leaves":
        nbs = [veh(40.0, 24.0, 70, track_id=1)]
    elif case == "lane_change":
        ego.y[:] = np.where(np.arange(120) < 50, 2.0, 6.0)
    h = preceding_series(ego, nbs, (4.5, 2.0), LAYOUT, "d", HUMAN)
    m = preceding_series(ego, nbs, (4.5, 2.0), LAYOUT, "d", MODEL)
    assert type(h) is type(m) and h.trace == m.trace
    assert exclusion_counts([h, m]) == ({} if isinstance(h, PhaseSeries)
                                         else {f"human:{h.reason}": 1, f"model:{m.reason}": 1})


# -- statistics --------------------------------------------------------------


def test_paired_t_against_hand_formula():
    a = [0.31, 0.12, 0.45, 0.27, 0.19]
    b = [0.52, 0.40, 0.47, 0.61, 0.30]
    d = [x - y for x, y in zip(a, b)]
    n = len(d)
    mean = sum(d) / n
    sd = math.sqrt(sum((v - mean) ** 2 for v in d) / (n - 1))
    r = paired_t_test(a, b)
    assert r.t == pytest.approx(mean * math.sqrt(n) / sd, abs=1e-10)
    assert r.cohen_d == pytest.approx(mean / sd, abs=1e-10)
    assert r.df == 4
    tail = 2 * mpmath.quad(lambda x: (1 + x * x / 4) ** -2.5, [abs(r.t), mpmath.inf]) * \
        mpmath.gamma(2.5) / (mpmath.sqrt(4 * mpmath.pi) * mpmath.gamma(2))
    assert r.p == pytest.approx(float(tail), abs=1e-10)


def test_identical_pairs():
    r = paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert r.t == 0.0 and r.cohen_d == 0.0 and r.p == 1.0
    with pytest.raises(InsufficientDataError):
        paired_t_test([1.0], [2.0])


def t_tail_oracle(t, df):
    mpmath.mp.dps = 40
    nu = mpmath.mpf(df)
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    pdf = lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2)
    t = abs(mpmath.mpf(t))
    # integrate the shorter side
    body = mpmath.quad(pdf, [0, t])
    return float(1 - 2 * body) if t < 1 else float(2 * mpmath.quad(pdf, [t, mpmath.inf]))


def test_student_t_against_quadrature():
    rng = np.random.default_rng(5)
    pts = [(2.0, 10)] + [(float(rng.uniform(-8, 8)), int(d)) for d in
                         rng.choice([1, 2, 3, 5, 10, 30, 100, 1075, 5000, 10000], 19)]
    for t, df in pts:
        assert abs(students_t_sf(t, df) - t_tail_oracle(t, df)) <= 1e-10, (t, df)
    assert students_t_sf(2.0, 10) == pytest.approx(0.07339, abs=5e-6)


def test_student_t_limits():
    assert students_t_sf(0.0, 7) == 1.0
    ps = [students_t_sf(t, 12) for t in np.linspace(0, 40, 200)]
    assert all(b <= a for a, b in zip(ps, ps[1:])) and ps[-1] < 1e-12
    assert students_t_sf(math.inf, 3) == 0.0
    assert students_t_sf(-2.0, 10) == students_t_sf(2.0, 10)
    with pytest.raises(ContractError):
        students_t_sf(1.0, 0.5)


def test_incomplete_beta_symmetry():
    for a, b, x in [(0.5, 3.0, 0.2), (4.0, 0.5, 0.9), (10.0, 10.0, 0.5)]:
        assert regularized_incomplete_beta(a, b, x) + regularized_incomplete_beta(b, a, 1 - x) == \
            pytest.approx(1.0, abs=1e-14)
        assert float(mpmath.betainc(a, b, 0, x, regularized=True)) == \
            pytest.approx(regularized_incomplete_beta(a, b, x), abs=1e-13)


def series(demo_id, source, gap, v_rel, lc=True):
    s = compute_metrics(gap, v_rel, 25.0, frame=10)
    return PhaseSeries(demo_id, source, [compute_metrics(gap + 1, v_rel, 25.0, frame=9), s],
                       10 if lc else None, 1)


def test_lane_change_point_stats_pairs_by_demo():
    human = [series("a", HUMAN, 20, 1), series("b", HUMAN, 25, 2), series("c", HUMAN, 30, 0.5),
             series("x", HUMAN, 30, 0.5)]
    model = [series("a", MODEL, 10, 2), series("b", MODEL, 15, 3), series("c", MODEL, 12, 1),
             series("y", MODEL, 12, 1), series("d", MODEL, 5, 1, lc=False)]
    st_ = lane_change_point_stats(human, model)
    assert st_.n == 3 and st_.pairs == ["a", "b", "c"]
    h = [1 / 20, 2 / 25, 0.5 / 30]
    m = [2 / 10, 3 / 15, 1 / 12]
    assert st_.human_mean_inv_ttc == pytest.approx(np.mean(h))
    assert st_.inv_ttc_test.t == pytest.approx(paired_t_test(h, m).t)
    assert json.loads(json.dumps(st_.to_dict()))["inv_ttc"]["df"] == 2
    with pytest.raises(InsufficientDataError):
        lane_change_point_stats(human[:1], model[:1])


# -- phase data ---------------------------------------------------------------


def test_emit_nothing(tmp_path):
    assert emit_phase_data([], tmp_path) == []
    assert list(tmp_path.iterdir()) == []


def test_emit_one_lane_change_series(tmp_path):
    man = emit_phase_data([series("01-00001", HUMAN, 20, 1)], tmp_path)
    assert len(man) == 1 and man[0]["panel"] == "a_human_lane_change"
    rows = (tmp_path / man[0]["file"]).read_text().splitlines()
    assert rows[0] == "frame,t_gap,inv_ttc,marker"
    assert rows[1].endswith(",initial") and rows[2].endswith(",lane_change")
    assert json.loads((tmp_path / "manifest.json").read_text()) == man
