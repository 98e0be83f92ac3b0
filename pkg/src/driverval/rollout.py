"""Utility-maximizing agent replayed in its own demonstration scene.

The agent is an acceleration-controlled point mass that plans N steps ahead
with perfect knowledge of the other vehicles' recorded futures, executes the
first ``replan_stride`` actions and replans.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .errors import ContractError, PlanningError
from .reward import (
    DEFAULT_CONSTANTS,
    AccelerationControl,
    FeatureConstants,
    SceneContext,
    _theta,
    feature_derivatives,
)
from .scenarios import Demonstration, neighbor_positions


@dataclass(frozen=True)
class AgentConfig:
    N: int = 5
    dt: float = 1.0 / 25.0
    ax_bounds: tuple[float, float] = (-6.63, 20.06)
    ay_bounds: tuple[float, float] = (-1.63, 1.63)
    replan_stride: int = 1
    gtol: float = 1e-10
    max_iter: int = 200

    def __post_init__(self):
        if self.N < 1 or not self.dt > 0:
            raise ContractError(f"invalid horizon/time step: N={self.N}, dt={self.dt}")
        for lo, hi in (self.ax_bounds, self.ay_bounds):
            if not lo <= hi:
                raise ContractError(f"bounds must be ordered: {(lo, hi)}")
        if not 1 <= self.replan_stride <= self.N:
            raise ContractError(f"replan_stride must be in [1, N], got {self.replan_stride}")

    def box(self) -> list[tuple[float, float]]:
        return [tuple(self.ax_bounds), tuple(self.ay_bounds)] * self.N

    def clip(self, actions: np.ndarray) -> np.ndarray:
        a = np.asarray(actions, dtype=float).reshape(-1, 2)
        return np.column_stack([np.clip(a[:, 0], *self.ax_bounds), np.clip(a[:, 1], *self.ay_bounds)])


def step_dynamics(state, action, dt: float) -> np.ndarray:
    """One Euler step of the point mass: velocity first, position with the old velocity."""
    s = np.asarray(state, dtype=float)
    a = np.asarray(action, dtype=float)
    return np.concatenate([s[:2] + s[2:4] * dt, s[2:4] + a * dt])


def plan(state, weights, scene: SceneContext, config: AgentConfig,
         warm_start=None, frame: int = 0) -> tuple[np.ndarray, float]:
    """Box-constrained maximisation of the N-step reward.

    The weights are normalised to unit length first: the maximiser does not
    change under positive scaling and this keeps stopping tolerances
    independent of the weight magnitude. With all-zero weights the
    (clipped) warm start is returned unchanged.

    Returns:
        (actions of shape (N, 2), objective value with the original weights)
    """
    th = _theta(weights)
    dyn = AccelerationControl(config.dt)
    x0 = np.zeros((config.N, 2)) if warm_start is None else config.clip(warm_start)
    norm = float(np.linalg.norm(th))
    if norm == 0.0:
        return x0, 0.0
    th_n = th / norm

    def negated(u):
        phi, grad, _ = feature_derivatives(state, u, scene, dyn, second_order=False)
        val = float(th_n @ phi)
        if not np.isfinite(val):
            raise PlanningError(frame)
        return -val, -(th_n @ grad)

    res = minimize(negated, x0.ravel(), jac=True, method="L-BFGS-B", bounds=config.box(),
                   options={"gtol": config.gtol, "ftol": 0.0, "maxiter": config.max_iter})
    if not np.isfinite(res.fun):
        raise PlanningError(frame)
    u, val = _polish(state, th_n, scene, dyn, config, config.clip(res.x), -float(res.fun))
    return u, val * norm


def _polish(state, th_n, scene, dyn, config: AgentConfig, u, val, max_steps: int = 6):
    """Newton steps on the actions away from the bounds.

    L-BFGS-B stops at an iterate that depends on its path, so weights that
    differ only by rounding could give plans differing by ~1e-9 and rollouts
    that drift apart. A few exact Newton steps settle the plan at the
    optimum to machine precision. Steps are only taken where the Hessian
    is negative definite and the objective does not drop.
    """
    lo = np.array([b[0] for b in config.box()])
    hi = np.array([b[1] for b in config.box()])
    for _ in range(max_steps):
        _, grad, hess = feature_derivatives(state, u, scene, dyn)
        g = th_n @ grad
        H = np.tensordot(th_n, hess, axes=1)
        H = 0.5 * (H + H.T)
        x = u.ravel()
        # actions no feature depends on (the last lateral one, for instance) are pinned
        # to zero so that they do not carry solver noise into the next warm start
        flat = (g == 0) & np.all(H == 0, axis=1)
        if flat.any():
            x = x.copy()
            x[flat] = np.clip(0.0, lo[flat], hi[flat])
            u = x.reshape(-1, 2)
        free = ~(((x <= lo) & (g < 0)) | ((x >= hi) & (g > 0)) | flat)
        if not free.any():
            break
        Hf = H[np.ix_(free, free)]
        try:
            L = np.linalg.cholesky(-Hf)
        except np.linalg.LinAlgError:
            break
        step = np.zeros_like(x)
        step[free] = np.linalg.solve(L.T, np.linalg.solve(L, g[free]))
        cand = config.clip(x + step)
        phi, _, _ = feature_derivatives(state, cand, scene, dyn, second_order=False)
        cval = float(th_n @ phi)
        # near the optimum the gain is below the objective's resolution, so allow a few ulps
        if not (np.isfinite(cval) and cval >= val - 8 * np.finfo(float).eps * (abs(val) + 1.0)):
            break
        done = np.array_equal(cand, u)
        u, val = cand, cval
        if done:
            break
    return u, val


@dataclass(eq=False)
class AgentRollout:
    demo_id: str
    frames: np.ndarray
    states: np.ndarray  # (T, 4): x, y, vx, vy
    actions: np.ndarray  # (T, 2): action applied from frame i to i + 1; zero on the last frame
    planner_values: list = field(default_factory=list)
    length: float = 4.5
    width: float = 2.0

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def x(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.states[:, 1]

    @property
    def vx(self) -> np.ndarray:
        return self.states[:, 2]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "x", "y", "vx", "vy", "ax", "ay"])
        for f, s, a in zip(self.frames, self.states, self.actions):
            w.writerow([int(f)] + [repr(float(v)) for v in s] + [repr(float(v)) for v in a])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path, demo_id: str, length: float = 4.5, width: float = 2.0) -> "AgentRollout":
        rows = list(csv.DictReader(io.StringIO(Path(path).read_text())))
        frames = np.array([int(r["frame"]) for r in rows], dtype=np.int64)
        states = np.array([[float(r[k]) for k in ("x", "y", "vx", "vy")] for r in rows]).reshape(-1, 4)
        actions = np.array([[float(r[k]) for k in ("ax", "ay")] for r in rows]).reshape(-1, 2)
        return cls(demo_id, frames, states, actions, [], length, width)


def _horizon_scene(demo: Demonstration, frames: np.ndarray, constants: FeatureConstants,
                   v_d: float, extrapolate: bool = True) -> SceneContext:
    """Neighbor futures at ``frames``; beyond the demonstration span, vehicles
    present on its last frame continue at constant velocity."""
    pos = neighbor_positions(demo.neighbors, frames)
    if extrapolate:
        last = demo.ego.last_frame
        beyond = frames > last
        if np.any(beyond):
            for o, nb in enumerate(demo.neighbors):
                if len(nb) and nb.last_frame == last:
                    dtf = (frames[beyond] - last) * demo.dt
                    pos[o, beyond, 0] = nb.x[-1] + nb.vx[-1] * dtf
                    pos[o, beyond, 1] = nb.y[-1] + nb.vy[-1] * dtf
    return SceneContext(demo.layout, pos, v_d, constants)


def initial_state(demo: Demonstration) -> np.ndarray:
    e = demo.ego
    return np.array([e.x[0], e.y[0], e.vx[0], e.vy[0]], dtype=float)


def rollout(demo: Demonstration, weights, config: AgentConfig | None = None,
            constants: FeatureConstants = DEFAULT_CONSTANTS, v_d: float | None = None,
            state0=None) -> AgentRollout:
    """Simulate the agent from the demonstration's first frame for its full duration.

    Raises:
        PlanningError: with the frame at which planning broke down.
    """
    cfg = config or AgentConfig(dt=demo.dt)
    th = _theta(weights)
    vd = demo.v_d if v_d is None else float(v_d)
    n = demo.n_frames
    frames = np.asarray(demo.ego.frames, dtype=np.int64)
    states = np.zeros((n, 4))
    actions = np.zeros((n, 2))
    states[0] = initial_state(demo) if state0 is None else np.asarray(state0, dtype=float)
    values = []
    current = None
    warm = None
    for i in range(n - 1):
        k = i % cfg.replan_stride
        if k == 0:
            horizon_frames = frames[i] + 1 + np.arange(cfg.N)
            scene = _horizon_scene(demo, horizon_frames, constants, vd)
            try:
                current, val = plan(states[i], th, scene, cfg, warm, frame=int(frames[i]))
            except PlanningError:
                raise
            except (ValueError, FloatingPointError) as exc:
                raise PlanningError(int(frames[i]), str(exc)) from exc
            values.append(val)
            warm = np.vstack([current[cfg.replan_stride:], np.repeat(current[-1:], cfg.replan_stride, 0)])
        a = current[k]
        actions[i] = a
        states[i + 1] = step_dynamics(states[i], a, cfg.dt)
    return AgentRollout(demo.demo_id, frames, states, actions, values, demo.ego.length, demo.ego.width)
