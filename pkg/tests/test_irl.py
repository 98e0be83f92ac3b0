import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import block_diag

from driverval import irl
from driverval import synthgen as sg
from driverval.errors import ContractError, IndefiniteHessianError
from driverval.reward import DEFAULT_CONSTANTS
from driverval.scenarios import Demonstration, segment
from driverval.trajdata import LOWER, RoadLayout, Track

DT = 0.04
ONE_LANE = RoadLayout((0.0, 4.0), (2.0,), -2.0, 6.0, 4.0)


def straight_demo(n_frames, v_d=30.0, delta=2.0, lane_center=2.0):
    """Ego at the lane center at constant speed ``v_d - delta``; no neighbors."""
    n = n_frames
    vx = np.full(n, v_d - delta)
    ego = Track(1, 4.5, 1.8, LOWER, 0, np.arange(1, n + 1), vx * DT * np.arange(n),
                np.full(n, lane_center), vx, np.zeros(n), np.ones(n, int), np.zeros(n, int), canonical=True)
    return Demonstration("01-00001", 1, ego, (), ONE_LANE, v_d, DT)


def closed_form_nll(n_segments, N, delta, c, theta_lane):
    # velocity block: P = 2I, g = 2*delta; lateral block: P = 2*c*theta_lane*dt^2 * M, det M = 1
    per = N * delta**2 - 0.5 * (N * math.log(2) + N * math.log(2 * c * theta_lane * DT**2)) + N * math.log(2 * math.pi)
    return n_segments * per


@pytest.mark.parametrize("n_frames,theta_lane,delta", [(5, 1.0, 2.0), (12, 3.0, 0.5), (40, 0.7, 1.3)])
def test_straight_fixture_closed_form(n_frames, theta_lane, delta):
    demo = straight_demo(n_frames, delta=delta)
    got = irl.demo_nll((-1.0, theta_lane, 0.0, 0.0), demo)
    want = closed_form_nll(n_frames // 5, 5, delta, DEFAULT_CONSTANTS.c, theta_lane)
    assert got == pytest.approx(want, rel=1e-10)


def test_velocity_only_weights_are_singular():
    # with no lateral term the lateral block of H vanishes, so -H is not definite
    with pytest.raises(IndefiniteHessianError):
        irl.demo_nll((-1.0, 0.0, 0.0, 0.0), straight_demo(10))


def test_positive_velocity_weight_is_indefinite(known_demo):
    _, demo = known_demo
    seg = segment(demo, 5)[3]
    with pytest.raises(IndefiniteHessianError) as err:
        irl.segment_nll((0.5, 1.0, -1.0, -1.0), seg, demo)
    assert err.value.segment_index == 3


def dense_oracle(theta, stack):
    """NLL via one block-diagonal system and slogdet."""
    g = np.einsum("f,sfa->sa", theta, stack.G).ravel()
    P = -block_diag(*np.einsum("f,sfab->sab", theta, stack.Hs))
    sign, logdet = np.linalg.slogdet(P)
    assert sign > 0
    return 0.5 * g @ np.linalg.solve(P, g) - 0.5 * logdet + 0.5 * g.size * math.log(2 * math.pi)


def test_against_dense_slogdet(known_demo):
    theta, demo = known_demo
    stack = irl.derivative_stack(demo)
    for th in (theta, np.array([-0.3, 0.8, -0.2, -5.0]), np.array(irl.DEFAULT_THETA_INIT)):
        try:
            got = irl.stack_nll(th, stack)
        except IndefiniteHessianError:
            continue
        want = dense_oracle(th, stack)
        assert got == pytest.approx(want, rel=1e-8, abs=1e-8)


@pytest.fixture(scope="module")
def small_stack(known_demo):
    return irl.derivative_stack(known_demo[1]).take(np.arange(6))


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 0.5), st.floats(-1, 4), st.floats(-4, 1), st.floats(-30, 5))
def test_finite_iff_definite(small_stack, a, b, c, d):
    stack = small_stack
    th = np.array([a, b, c, d])
    P = -np.einsum("f,sfab->sab", th, stack.Hs)
    eig = np.linalg.eigvalsh(P)
    tol = 1e-10 * max(np.abs(eig).max(), 1e-300)  # eigvalsh and Cholesky may disagree at the boundary
    try:
        v = irl.stack_nll(th, stack)
    except IndefiniteHessianError:
        assert eig.min() < tol
    else:
        assert eig.min() > -tol and math.isfinite(v)


def test_additive_over_segments(known_demo):
    theta, demo = known_demo
    segs = segment(demo, 5)
    total = irl.demo_nll(theta, demo)
    parts = [irl.segment_nll(theta, s, demo) for s in segs]
    assert total == pytest.approx(sum(parts), rel=1e-12)
    stack = irl.derivative_stack(demo, segments=segs + segs)
    assert irl.stack_nll(theta, stack) == pytest.approx(2 * total, rel=1e-12)


def test_gradient_matches_finite_differences(known_demo):
    theta, demo = known_demo
    stack = irl.derivative_stack(demo)
    _, grad = irl.stack_nll(theta, stack, with_grad=True)
    h = 1e-6
    fd = np.array([(irl.stack_nll(theta + h * e, stack) - irl.stack_nll(theta - h * e, stack)) / (2 * h)
                   for e in np.eye(4)])
    np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-5 * np.abs(fd).max())
    np.testing.assert_allclose(irl.nll_gradient_unchecked(theta, stack), grad, rtol=1e-12)


def test_vel_dominates_rule():
    assert irl.vel_dominates([-100.0, 5.0, -9.9, 1.0])
    assert not irl.vel_dominates([-100.0, 10.1, 0.0, 0.0])
    assert not irl.vel_dominates([100.0, 0.0, 0.0, 0.0])
    assert not irl.vel_dominates([np.nan, 0.0, 0.0, 0.0])


def test_known_weights_demo_converges_with_correct_signs(known_demo):
    theta, demo = known_demo
    res, diag = irl.train(demo)
    assert res.converged, res
    w = res.weights.as_array()
    assert np.all(np.sign(w) == np.sign(theta))
    assert not diag.vel_dominance
    assert res.final_nll == pytest.approx(irl.demo_nll(w, demo), rel=1e-12)


def test_training_deterministic(known_demo):
    _, demo = known_demo
    a, _ = irl.train(demo)
    b, _ = irl.train(demo)
    assert a.to_dict() == b.to_dict()
    assert irl.TrainingResult.from_dict(a.to_dict()).to_dict() == a.to_dict()


def test_generated_demos_do_not_depend_on_weight_scale():
    # the reason weight magnitudes cannot be recovered from noiseless generated demos
    theta = np.array([-1.0, 3.0, -3.0, -20.0])
    sc = sg.lane_change_scenario(0)
    a = sg.generate_demo(theta, sc, 60)
    b = sg.generate_demo(2 * theta, sc, 60)
    np.testing.assert_array_equal(a.ego.x, b.ego.x)
    np.testing.assert_array_equal(a.ego.y, b.ego.y)


def test_bad_inputs():
    with pytest.raises(ContractError):
        irl.train(straight_demo(10), theta_init=(0.0, 1.0))
    with pytest.raises(ContractError):
        irl.OptimizerConfig(horizon=1)
    with pytest.raises(ContractError):
        irl.TrainingResult("x", irl.TrainingStatus.CONVERGED, None, 3, 1.0)


def test_failure_reports_status_not_exception():
    res, diag = irl.train(straight_demo(10), theta_init=(-1.0, 0.0, 0.0, 0.0))
    assert res.status == irl.TrainingStatus.FAILED_INDEFINITE_HESSIAN
    assert res.weights is None and res.final_nll is None


# -- grid search ------------------------------------------------------------


def test_default_grid_has_36_combinations():
    combos = irl.expand_grid(irl.DEFAULT_GRID)
    assert len(combos) == 36 and len(set(combos)) == 36
    assert DEFAULT_CONSTANTS in combos


def fake_eval(scores):
    def evaluate(demos, k, *_):
        return irl.GridEntry(k, scores[k.as_tuple()], len(demos))
    return evaluate


def test_tie_ranking_prefers_listed_constants():
    grid = [(0.18, 5.0, 1.8), (0.14, 15.0, 1.4), (0.22, 20.0, 2.2)]
    scores = {grid[0]: 7, grid[1]: 7, grid[2]: 3}
    ranked = irl.grid_search([object()], grid, evaluate=fake_eval(scores))
    assert [e.constants.as_tuple() for e in ranked] == [grid[1], grid[0], grid[2]]
    assert ranked[0].tied_for_best and ranked[1].tied_for_best and not ranked[2].tied_for_best
    assert [e.rank for e in ranked] == [1, 2, 3]
    ranked = irl.grid_search([object()], grid, preference=(), evaluate=fake_eval(scores))
    assert ranked[0].constants.as_tuple() == grid[0]


def test_single_combination_grid(known_demo):
    _, demo = known_demo
    ranked = irl.grid_search([demo], [DEFAULT_CONSTANTS])
    assert len(ranked) == 1
    e = ranked[0]
    assert e.n_converged == 1 and e.score == sum(e.label_counts.get(k, 0) for k in irl.DESIRABLE)
    assert not e.tied_for_best
    with pytest.raises(ContractError):
        irl.grid_search([], [DEFAULT_CONSTANTS])
