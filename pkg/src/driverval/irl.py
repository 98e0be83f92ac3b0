"""Per-demonstration reward learning with the Laplace-approximated likelihood.

For one segment with reward gradient ``g`` and Hessian ``H`` (w.r.t. the
demonstrated velocity actions, dimension ``d = 2N``)::

    log P = 1/2 g^T H^-1 g + 1/2 log det(-H) - d/2 log(2 pi)

and the training objective is the negated sum over all segments. ``g`` and
``H`` are linear in the weights, so the per-feature derivative stacks are
computed once per demonstration and every likelihood evaluation is a handful
of batched Cholesky factorizations.

When ``-H`` is not positive definite the log determinant is undefined and
training fails. The optimizer does not guard against stepping into that
region: a trial point with an indefinite ``-H`` ends the run.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, IndefiniteHessianError
from .reward import (
    FEATURE_NAMES,
    DEFAULT_CONSTANTS,
    FeatureConstants,
    RewardWeights,
    SceneContext,
    VelocityControl,
    _theta,
    feature_derivatives,
)
from .scenarios import Demonstration, Segment, neighbor_positions, segment

DEFAULT_THETA_INIT = (-0.1, 0.1, -0.1, -0.1)
LOG_2PI = math.log(2.0 * math.pi)


class TrainingStatus(str, enum.Enum):
    CONVERGED = "converged"
    FAILED_INDEFINITE_HESSIAN = "failed_indefinite_hessian"
    FAILED_NO_MINIMUM = "failed_no_minimum"


@dataclass(frozen=True)
class OptimizerConfig:
    tol: float = 1e-6
    max_iters: int = 500
    horizon: int = 5
    initial_step: float = 1.0  # length of the first (steepest-descent) step in weight space
    armijo: float = 1e-4
    max_backtracks: int = 40
    restrict_vel_nonpositive: bool = False  # experimental: keep theta_vel <= 0

    def __post_init__(self):
        if self.horizon < 2:
            raise ContractError("horizon must be >= 2")
        if not (self.tol > 0 and self.max_iters > 0 and self.initial_step > 0):
            raise ContractError(f"invalid optimizer config: {self}")


@dataclass
class TrainingResult:
    demo_id: str
    status: TrainingStatus
    weights: RewardWeights | None
    iterations: int
    final_nll: float | None
    failed_segment: int | None = None

    def __post_init__(self):
        if (self.weights is not None) != (self.status == TrainingStatus.CONVERGED):
            raise ContractError("weights are present iff training converged")

    @property
    def converged(self) -> bool:
        return self.status == TrainingStatus.CONVERGED

    def to_dict(self) -> dict:
        return {
            "demo_id": self.demo_id,
            "status": self.status.value,
            "weights": None if self.weights is None else self.weights.to_dict(),
            "iterations": self.iterations,
            "final_nll": self.final_nll,
            "failed_segment": self.failed_segment,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingResult":
        w = d.get("weights")
        return cls(
            demo_id=d["demo_id"],
            status=TrainingStatus(d["status"]),
            weights=None if w is None else RewardWeights(**w),
            iterations=int(d["iterations"]),
            final_nll=d.get("final_nll"),
            failed_segment=d.get("failed_segment"),
        )


@dataclass
class TrainingDiagnostics:
    init_jacobian: np.ndarray
    vel_dominance: bool

    def to_dict(self) -> dict:
        return {
            "init_jacobian": [float(v) for v in self.init_jacobian],
            "vel_dominance": bool(self.vel_dominance),
        }


def vel_dominates(jacobian, factor: float = 10.0) -> bool:
    """Velocity component negative and at least ``factor`` times every other one."""
    j = np.asarray(jacobian, dtype=float)
    if not np.all(np.isfinite(j)) or j[0] >= 0:
        return False
    return bool(np.all(abs(j[0]) >= factor * np.abs(j[1:])))


# -- likelihood ------------------------------------------------------------


def segment_scene(demo: Demonstration, seg: Segment,
                  constants: FeatureConstants = DEFAULT_CONSTANTS) -> SceneContext:
    return SceneContext(demo.layout, neighbor_positions(demo.neighbors, seg.frames), demo.v_d, constants)


@dataclass(eq=False)
class DerivativeStack:
    """Per-feature reward gradients ``G`` (S, 4, d) and Hessians ``Hs`` (S, 4, d, d)."""

    G: np.ndarray
    Hs: np.ndarray

    @property
    def n_segments(self) -> int:
        return self.G.shape[0]

    @property
    def dim(self) -> int:
        return self.G.shape[2]

    def take(self, idx) -> "DerivativeStack":
        idx = np.atleast_1d(idx)
        return DerivativeStack(self.G[idx], self.Hs[idx])


def derivative_stack(demo: Demonstration, constants: FeatureConstants = DEFAULT_CONSTANTS,
                     horizon: int = 5, segments: list[Segment] | None = None) -> DerivativeStack:
    segs = segment(demo, horizon) if segments is None else segments
    dyn = VelocityControl(demo.dt)
    G, Hs = [], []
    for seg in segs:
        _, g, h = feature_derivatives(seg.state0, seg.actions, segment_scene(demo, seg, constants), dyn)
        G.append(g)
        Hs.append(0.5 * (h + np.swapaxes(h, 1, 2)))
    return DerivativeStack(np.array(G), np.array(Hs))


def _assemble(theta: np.ndarray, stack: DerivativeStack):
    g = np.einsum("f,sfa->sa", theta, stack.G)
    H = np.einsum("f,sfab->sab", theta, stack.Hs)
    return g, H


def _cholesky_neg(H: np.ndarray, offset: int = 0) -> np.ndarray:
    P = -H
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    for s in range(P.shape[0]):
        try:
            np.linalg.cholesky(P[s])
        except np.linalg.LinAlgError:
            raise IndefiniteHessianError(offset + s) from None
    raise IndefiniteHessianError(offset)  # pragma: no cover - batched and looped disagree


def stack_nll(theta, stack: DerivativeStack, with_grad: bool = False):
    """Summed negated Laplace log-likelihood over the stacked segments.

    Raises:
        IndefiniteHessianError: ``-H`` of some segment is not positive definite.
    """
    th = _theta(theta)
    g, H = _assemble(th, stack)
    L = _cholesky_neg(H)
    d = stack.dim
    z = np.linalg.solve(L, g[..., None])[..., 0]  # L^-1 g, per segment
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(-1)
    per_seg = 0.5 * (z * z).sum(-1) - 0.5 * logdet + 0.5 * d * LOG_2PI
    nll = float(per_seg.sum())
    if not with_grad:
        return nll
    Pinv = np.linalg.inv(-H)
    w = np.einsum("sab,sb->sa", Pinv, g)  # (-H)^-1 g
    grad = (
        np.einsum("sfa,sa->f", stack.G, w)
        + 0.5 * np.einsum("sa,sfab,sb->f", w, stack.Hs, w)
        + 0.5 * np.einsum("sab,sfba->f", Pinv, stack.Hs)
    )
    return nll, grad


def nll_gradient_unchecked(theta, stack: DerivativeStack) -> np.ndarray:
    """Gradient of the summed NLL without requiring ``-H`` to be definite.

    Uses ``d/dtheta log|det(-H)|``, which exists for any non-singular
    ``H``; returns NaNs if some ``H`` is singular.
    """
    th = _theta(theta)
    g, H = _assemble(th, stack)
    try:
        Pinv = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        return np.full(4, np.nan)
    w = np.einsum("sab,sb->sa", Pinv, g)
    return (
        np.einsum("sfa,sa->f", stack.G, w)
        + 0.5 * np.einsum("sa,sfab,sb->f", w, stack.Hs, w)
        + 0.5 * np.einsum("sab,sfba->f", Pinv, stack.Hs)
    )


def segment_nll(weights, seg: Segment, demo: Demonstration,
                constants: FeatureConstants = DEFAULT_CONSTANTS) -> float:
    """Negated Laplace log-likelihood of one segment's demonstrated actions.

    Raises:
        IndefiniteHessianError: carries ``seg.index``.
    """
    stack = derivative_stack(demo, constants, len(seg.actions), segments=[seg])
    try:
        return stack_nll(weights, stack)
    except IndefiniteHessianError:
        raise IndefiniteHessianError(seg.index) from None


def demo_nll(weights, demo: Demonstration, constants: FeatureConstants = DEFAULT_CONSTANTS,
             horizon: int = 5) -> float:
    """Sum of :func:`segment_nll` over all segments of a demonstration."""
    return stack_nll(weights, derivative_stack(demo, constants, horizon))


# -- training --------------------------------------------------------------


class _Failure(Exception):
    def __init__(self, status: TrainingStatus, iterations: int, segment_index: int | None = None):
        self.status = status
        self.iterations = iterations
        self.segment_index = segment_index


def _project(x: np.ndarray, cfg: OptimizerConfig) -> np.ndarray:
    if cfg.restrict_vel_nonpositive and x[0] > -1e-9:
        x = x.copy()
        x[0] = -1e-9
    return x


def _bfgs(fun, x0: np.ndarray, cfg: OptimizerConfig):
    """BFGS with Armijo backtracking.

    ``fun`` returns (f, g) and raises IndefiniteHessianError outside its
    domain; that error aborts the run. The first step is steepest descent of
    length ``cfg.initial_step``; afterwards the inverse Hessian estimate is
    initialised with the usual ``s.y / y.y`` scaling.
    """
    x = _project(np.asarray(x0, dtype=float), cfg)
    try:
        f, g = fun(x)
    except IndefiniteHessianError as e:
        raise _Failure(TrainingStatus.FAILED_INDEFINITE_HESSIAN, 0, e.segment_index) from None
    n = x.size
    Hinv = None
    for it in range(cfg.max_iters):
        if np.max(np.abs(g)) <= cfg.tol:
            return x, f, it
        if Hinv is None:
            p = -g * (cfg.initial_step / np.linalg.norm(g))
        else:
            p = -Hinv @ g
            if g @ p >= 0:
                Hinv = None
                p = -g * (cfg.initial_step / np.linalg.norm(g))
        slope = g @ p
        alpha = 1.0
        for _ in range(cfg.max_backtracks):
            xt = _project(x + alpha * p, cfg)
            try:
                ft, gt = fun(xt)
            except IndefiniteHessianError as e:
                raise _Failure(TrainingStatus.FAILED_INDEFINITE_HESSIAN, it + 1, e.segment_index) from None
            if ft <= f + cfg.armijo * alpha * slope:
                break
            alpha *= 0.5
        else:
            raise _Failure(TrainingStatus.FAILED_NO_MINIMUM, it + 1)
        s = xt - x
        y = gt - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if Hinv is None:
                Hinv = (sy / (y @ y)) * np.eye(n)
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        x, f, g = xt, ft, gt
    if np.max(np.abs(g)) <= cfg.tol:
        return x, f, cfg.max_iters
    raise _Failure(TrainingStatus.FAILED_NO_MINIMUM, cfg.max_iters)


def train(demo: Demonstration, constants: FeatureConstants = DEFAULT_CONSTANTS,
          theta_init=DEFAULT_THETA_INIT, optimizer_cfg: OptimizerConfig | None = None,
          stack: DerivativeStack | None = None) -> tuple[TrainingResult, TrainingDiagnostics]:
    """Fit the four reward weights to one demonstration.

    Never raises for optimisation failures; they are reported through
    ``TrainingResult.status``.
    """
    cfg = optimizer_cfg or OptimizerConfig()
    th0 = np.asarray(theta_init, dtype=float)
    if th0.shape != (4,) or not np.all(np.isfinite(th0)):
        raise ContractError(f"theta_init must be 4 finite values, got {theta_init}")
    if stack is None:
        stack = derivative_stack(demo, constants, cfg.horizon)

    jac = nll_gradient_unchecked(th0, stack)
    diag = TrainingDiagnostics(init_jacobian=jac, vel_dominance=vel_dominates(jac))

    def fun(th):
        return stack_nll(th, stack, with_grad=True)

    try:
        x, f, iters = _bfgs(fun, th0, cfg)
    except _Failure as fail:
        res = TrainingResult(demo.demo_id, fail.status, None, fail.iterations, None, fail.segment_index)
        return res, diag
    res = TrainingResult(demo.demo_id, TrainingStatus.CONVERGED, RewardWeights.from_array(x), iters, f)
    return res, diag


# -- feature-constant grid search -------------------------------------------

DEFAULT_GRID = {
    "c": (0.14, 0.18, 0.22),
    "sigma_x": (5.0, 10.0, 15.0, 20.0),
    "sigma_y": (1.4, 1.8, 2.2),
}
DESIRABLE = ("LaneChange", "CarFollowing")


def expand_grid(grid) -> list[FeatureConstants]:
    if isinstance(grid, dict):
        combos = [FeatureConstants(c, sx, sy) for c, sx, sy in
                  itertools.product(grid["c"], grid["sigma_x"], grid["sigma_y"])]
    else:
        combos = [g if isinstance(g, FeatureConstants) else FeatureConstants(*g) for g in grid]
    if not combos:
        raise ContractError("empty constants grid")
    return combos


@dataclass
class GridEntry:
    constants: FeatureConstants
    score: int
    n_converged: int
    label_counts: dict = field(default_factory=dict)
    rank: int = 0
    tied_for_best: bool = False

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "constants": asdict(self.constants),
            "score": self.score,
            "n_converged": self.n_converged,
            "label_counts": dict(sorted(self.label_counts.items())),
            "tied_for_best": self.tied_for_best,
        }


def evaluate_constants(demos, constants: FeatureConstants, agent_config=None,
                       optimizer_cfg: OptimizerConfig | None = None,
                       theta_init=DEFAULT_THETA_INIT) -> GridEntry:
    from .rollout import AgentConfig, rollout
    from .tactical import classify

    acfg = agent_config or AgentConfig()
    counts: dict = {}
    n_conv = 0
    for demo in demos:
        res, _ = train(demo, constants, theta_init, optimizer_cfg)
        if not res.converged:
            continue
        n_conv += 1
        ro = rollout(demo, res.weights, acfg, constants)
        label = classify(ro, demo.neighbors, demo.layout, (demo.ego.length, demo.ego.width))
        counts[label.label] = counts.get(label.label, 0) + 1
    score = sum(counts.get(k, 0) for k in DESIRABLE)
    return GridEntry(constants, score, n_conv, counts)


def rank_entries(entries: list[GridEntry], preference=()) -> list[GridEntry]:
    """Sort by score (desc); ties go to the earlier entry of ``preference``,
    then to grid order."""
    pref = [p.as_tuple() if isinstance(p, FeatureConstants) else tuple(p) for p in preference]

    def key(item):
        pos, e = item
        t = e.constants.as_tuple()
        return (-e.score, pref.index(t) if t in pref else len(pref), pos)

    ranked = [e for _, e in sorted(enumerate(entries), key=key)]
    best = ranked[0].score
    for i, e in enumerate(ranked):
        e.rank = i + 1
        e.tied_for_best = e.score == best and sum(x.score == best for x in ranked) > 1
    return ranked


def grid_search(demos_subset, grid=DEFAULT_GRID, agent_config=None,
                optimizer_cfg: OptimizerConfig | None = None,
                preference=(DEFAULT_CONSTANTS,), theta_init=DEFAULT_THETA_INIT,
                evaluate=evaluate_constants) -> list[GridEntry]:
    """Rank feature constants by the number of desirable tactical behaviors.

    For each combination every demonstration is trained, each converged
    agent is rolled out and classified, and the score is the count of lane
    changes plus car following.
    """
    demos = list(demos_subset)
    if not demos:
        raise ContractError("grid search needs at least one demonstration")
    combos = expand_grid(grid)
    entries = [evaluate(demos, k, agent_config, optimizer_cfg, theta_init) for k in combos]
    return rank_entries(entries, preference)


__all__ = [
    "DEFAULT_THETA_INIT", "FEATURE_NAMES", "OptimizerConfig", "TrainingStatus", "TrainingResult",
    "TrainingDiagnostics", "segment_nll", "demo_nll", "train", "grid_search", "vel_dominates",
]
