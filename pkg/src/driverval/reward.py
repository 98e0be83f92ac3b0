"""Four-feature linear reward, its derivatives and heat maps.

The reward of a state is ``theta . phi`` with

* ``phi_vel = (vx - v_d)^2``
* ``phi_lane = sum_lc exp(-c (y_lc - y)^2)`` over all lane centers
* ``phi_bounds = sum_rb exp(-c (y_rb - y)^2)`` over both road boundaries
* ``phi_collision = sum_o N(x - x_o; sigma_x) N(y - y_o; sigma_y)`` over
  all other vehicles (product of two 1-D normal densities).

Headings are ignored. Trajectory rewards sum the state reward over the N
states that result from an action sequence; both dynamics models are linear
in the actions, so gradients and Hessians are assembled from per-state
derivatives through a constant Jacobian.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .trajdata import RoadLayout

FEATURE_NAMES = ("vel", "lane", "bounds", "collision")
N_FEATURES = 4


@dataclass(frozen=True)
class FeatureConstants:
    c: float = 0.14
    sigma_x: float = 15.0
    sigma_y: float = 1.4

    def __post_init__(self):
        if not (self.c > 0 and self.sigma_x > 0 and self.sigma_y > 0):
            raise ContractError(f"feature constants must be positive: {self}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.c, self.sigma_x, self.sigma_y)


DEFAULT_CONSTANTS = FeatureConstants(0.14, 15.0, 1.4)


@dataclass(frozen=True)
class RewardWeights:
    theta_vel: float
    theta_lane: float
    theta_bounds: float
    theta_collision: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_array()):
            raise ContractError(f"weights must be finite: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.theta_vel, self.theta_lane, self.theta_bounds, self.theta_collision])

    @classmethod
    def from_array(cls, a) -> "RewardWeights":
        a = [float(v) for v in a]
        if len(a) != N_FEATURES:
            raise ContractError(f"expected {N_FEATURES} weights, got {len(a)}")
        return cls(*a)

    def to_dict(self) -> dict:
        return asdict(self)


def _theta(weights) -> np.ndarray:
    if isinstance(weights, RewardWeights):
        return weights.as_array()
    th = np.asarray(weights, dtype=float)
    if th.shape != (N_FEATURES,):
        raise ContractError(f"expected {N_FEATURES} weights, got shape {th.shape}")
    return th


@dataclass(frozen=True, eq=False)
class SceneContext:
    """Everything the reward needs besides the ego state.

    ``neighbor_futures[o, k]`` is the (x, y) center of other vehicle ``o`` at
    the k-th queried state; NaN marks a vehicle that is absent at that frame.
    """

    layout: RoadLayout
    neighbor_futures: np.ndarray
    v_d: float
    constants: FeatureConstants = DEFAULT_CONSTANTS
    _lanes: np.ndarray = field(init=False, repr=False)
    _bounds: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nf = np.asarray(self.neighbor_futures, dtype=float)
        if nf.ndim != 3 or nf.shape[2] != 2:
            if nf.size == 0:
                nf = np.zeros((0, max(nf.shape[1] if nf.ndim == 3 else 0, 0), 2))
            else:
                raise ContractError(f"neighbor_futures must have shape (M, T, 2), got {nf.shape}")
        object.__setattr__(self, "neighbor_futures", nf)
        object.__setattr__(self, "_lanes", np.asarray(self.layout.lane_centers, dtype=float))
        object.__setattr__(self, "_bounds", np.asarray(self.layout.road_boundaries, dtype=float))

    @classmethod
    def empty(cls, layout: RoadLayout, v_d: float, horizon: int,
              constants: FeatureConstants = DEFAULT_CONSTANTS) -> "SceneContext":
        return cls(layout, np.zeros((0, horizon, 2)), v_d, constants)

    @property
    def horizon(self) -> int:
        """Number of frames covered; unlimited when there are no neighbors."""
        if self.neighbor_futures.shape[0] == 0:
            return self.neighbor_futures.shape[1] or 10**9
        return self.neighbor_futures.shape[1]


def _gauss_sum(y: np.ndarray, centers: np.ndarray, c: float):
    """Value, first and second y-derivative of sum_k exp(-c (y_k - y)^2)."""
    r = y[..., None] - centers
    e = np.exp(-c * r * r)
    val = e.sum(-1)
    d1 = (-2.0 * c * r * e).sum(-1)
    d2 = ((4.0 * c * c * r * r - 2.0 * c) * e).sum(-1)
    return val, d1, d2


def _collision_terms(x: np.ndarray, y: np.ndarray, others: np.ndarray, consts: FeatureConstants):
    """Collision feature and derivatives for states (T,) against others (M, T, 2)."""
    T = x.shape[0]
    if others.shape[0] == 0:
        z = np.zeros(T)
        return z, z, z, z, z, z
    sx2 = consts.sigma_x ** 2
    sy2 = consts.sigma_y ** 2
    norm = 1.0 / (2.0 * math.pi * consts.sigma_x * consts.sigma_y)
    dx = x[None, :] - others[:, :T, 0]
    dy = y[None, :] - others[:, :T, 1]
    present = np.isfinite(dx) & np.isfinite(dy)
    dx = np.where(present, dx, 0.0)
    dy = np.where(present, dy, 0.0)
    g = np.where(present, norm * np.exp(-0.5 * (dx * dx / sx2 + dy * dy / sy2)), 0.0)
    val = g.sum(0)
    gx = (-dx / sx2 * g).sum(0)
    gy = (-dy / sy2 * g).sum(0)
    gxx = ((dx * dx / (sx2 * sx2) - 1.0 / sx2) * g).sum(0)
    gyy = ((dy * dy / (sy2 * sy2) - 1.0 / sy2) * g).sum(0)
    gxy = (dx * dy / (sx2 * sy2) * g).sum(0)
    return val, gx, gy, gxx, gyy, gxy


def _state_features(x, y, vx, scene: SceneContext, second_order: bool = True):
    """Feature values and derivatives w.r.t. (x, y, vx) for T states.

    Returns ``phi`` (T, 4), ``dphi`` (T, 4, 3) and, if requested, ``d2phi``
    (T, 4, 3, 3).
    """
    k = scene.constants
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    vx = np.asarray(vx, dtype=float)
    T = x.shape[0]
    if scene.neighbor_futures.shape[0] and scene.neighbor_futures.shape[1] < T:
        raise ContractError(
            f"scene covers {scene.neighbor_futures.shape[1]} frames, {T} requested")

    dv = vx - scene.v_d
    lane, lane1, lane2 = _gauss_sum(y, scene._lanes, k.c)
    bnd, bnd1, bnd2 = _gauss_sum(y, scene._bounds, k.c)
    col, cx, cy, cxx, cyy, cxy = _collision_terms(x, y, scene.neighbor_futures, k)

    phi = np.stack([dv * dv, lane, bnd, col], axis=1)
    dphi = np.zeros((T, N_FEATURES, 3))
    dphi[:, 0, 2] = 2.0 * dv
    dphi[:, 1, 1] = lane1
    dphi[:, 2, 1] = bnd1
    dphi[:, 3, 0] = cx
    dphi[:, 3, 1] = cy
    if not second_order:
        return phi, dphi, None
    d2phi = np.zeros((T, N_FEATURES, 3, 3))
    d2phi[:, 0, 2, 2] = 2.0
    d2phi[:, 1, 1, 1] = lane2
    d2phi[:, 2, 1, 1] = bnd2
    d2phi[:, 3, 0, 0] = cxx
    d2phi[:, 3, 1, 1] = cyy
    d2phi[:, 3, 0, 1] = cxy
    d2phi[:, 3, 1, 0] = cxy
    return phi, dphi, d2phi


def features(x: float, y: float, vx: float, scene: SceneContext, frame: int = 0) -> np.ndarray:
    """Feature vector (phi_vel, phi_lane, phi_bounds, phi_collision) of one state.

    ``frame`` indexes the scene's neighbor futures.
    """
    others = scene.neighbor_futures
    if others.shape[0]:
        if not 0 <= frame < others.shape[1]:
            raise ContractError(f"scene does not cover frame {frame}")
        others = others[:, frame:frame + 1]
    sub = SceneContext(scene.layout, others, scene.v_d, scene.constants)
    phi, _, _ = _state_features([x], [y], [vx], sub, second_order=False)
    return phi[0]


def reward(weights, phi) -> float:
    """Linear reward: dot product of weights and feature vector."""
    return float(np.dot(_theta(weights), np.asarray(phi, dtype=float)))


class VelocityControl:
    """Point mass with the velocity as action: state (x, y), action (vx, vy).

    ``p[t+1] = p[t] + v[t] dt``; the resulting state of step t carries the
    applied velocity as its vx.
    """

    name = "velocity"
    state_dim = 2

    def __init__(self, dt: float):
        self.dt = float(dt)

    def states(self, state0, actions) -> np.ndarray:
        """(N, 3) array of (x, y, vx) at the N resulting states."""
        u = np.asarray(actions, dtype=float).reshape(-1, 2)
        s0 = np.asarray(state0, dtype=float)
        pos = s0[:2] + self.dt * np.cumsum(u, axis=0)
        return np.column_stack([pos, u[:, 0]])

    def jacobian(self, n: int) -> np.ndarray:
        """d(x, y, vx)_t / d(flattened actions), shape (n, 3, 2n)."""
        J = np.zeros((n, 3, 2 * n))
        for t in range(n):
            for k in range(t + 1):
                J[t, 0, 2 * k] = self.dt
                J[t, 1, 2 * k + 1] = self.dt
            J[t, 2, 2 * t] = 1.0
        return J


class AccelerationControl:
    """Point mass with the acceleration as action: state (x, y, vx, vy).

    Explicit Euler with the pre-update velocity: ``v' = v + a dt``,
    ``p' = p + v dt``.
    """

    name = "acceleration"
    state_dim = 4

    def __init__(self, dt: float):
        self.dt = float(dt)

    def full_states(self, state0, actions) -> np.ndarray:
        """(N, 4) array of (x, y, vx, vy) at the N resulting states."""
        a = np.asarray(actions, dtype=float).reshape(-1, 2)
        s0 = np.asarray(state0, dtype=float)
        dt = self.dt
        v = s0[2:4] + dt * np.cumsum(a, axis=0)
        v_prev = np.vstack([s0[2:4], v[:-1]])
        p = s0[:2] + dt * np.cumsum(v_prev, axis=0)
        return np.column_stack([p, v])

    def states(self, state0, actions) -> np.ndarray:
        return self.full_states(state0, actions)[:, :3]

    def jacobian(self, n: int) -> np.ndarray:
        dt = self.dt
        J = np.zeros((n, 3, 2 * n))
        for t in range(n):
            # resulting state index t (0-based) is after t + 1 actions
            for k in range(t + 1):
                J[t, 2, 2 * k] = dt
            for k in range(t):
                J[t, 0, 2 * k] = dt * dt * (t - k)
                J[t, 1, 2 * k + 1] = dt * dt * (t - k)
        return J


_JAC_CACHE: dict = {}


def _cached_jacobian(dynamics, n: int) -> np.ndarray:
    key = (dynamics.name, dynamics.dt, n)
    J = _JAC_CACHE.get(key)
    if J is None:
        J = dynamics.jacobian(n)
        J.setflags(write=False)
        _JAC_CACHE[key] = J
    return J


def feature_derivatives(state0, actions, scene: SceneContext, dynamics, second_order: bool = True):
    """Per-feature sums over the horizon and their action derivatives.

    Returns:
        Tuple ``(phi_sum, grad, hess)`` with shapes (4,), (4, 2N), (4, 2N, 2N).
        ``hess`` is None when ``second_order`` is False. Every trajectory
        quantity is the weighted sum of these over the feature axis.
    """
    u = np.asarray(actions, dtype=float).reshape(-1, 2)
    n = u.shape[0]
    if n == 0:
        raise ContractError("empty action sequence")
    st = dynamics.states(state0, u)
    phi, dphi, d2phi = _state_features(st[:, 0], st[:, 1], st[:, 2], scene, second_order)
    J = _cached_jacobian(dynamics, n)
    grad = np.einsum("tfs,tsa->fa", dphi, J)
    hess = None
    if second_order:
        hess = np.einsum("tsa,tfsr,trb->fab", J, d2phi, J, optimize=True)
    return phi.sum(0), grad, hess


def traj_reward(weights, state0, actions, scene: SceneContext, dynamics) -> float:
    """Summed reward over the states produced by ``actions``."""
    phi_sum, _, _ = feature_derivatives(state0, actions, scene, dynamics, second_order=False)
    return float(_theta(weights) @ phi_sum)


def traj_reward_grad(weights, state0, actions, scene: SceneContext, dynamics) -> np.ndarray:
    """Gradient of :func:`traj_reward` w.r.t. the flattened actions (2N,)."""
    _, grad, _ = feature_derivatives(state0, actions, scene, dynamics, second_order=False)
    return _theta(weights) @ grad


def traj_reward_hess(weights, state0, actions, scene: SceneContext, dynamics) -> np.ndarray:
    """Hessian of :func:`traj_reward` w.r.t. the flattened actions (2N, 2N)."""
    _, _, hess = feature_derivatives(state0, actions, scene, dynamics)
    H = np.tensordot(_theta(weights), hess, axes=1)
    return 0.5 * (H + H.T)


def traj_reward_value_and_grad(theta: np.ndarray, state0, actions, scene: SceneContext, dynamics):
    phi_sum, grad, _ = feature_derivatives(state0, actions, scene, dynamics, second_order=False)
    return float(theta @ phi_sum), theta @ grad


# -- heat maps -------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    nx: int
    y_min: float
    y_max: float
    ny: int

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ContractError("grid needs a positive resolution")
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ContractError("grid bounds are reversed")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.ny)


@dataclass(frozen=True, eq=False)
class HeatMap:
    grid: GridSpec
    values: np.ndarray  # (ny, nx)
    weights: tuple
    constants: FeatureConstants
    feature: str | None = None

    def argmax(self) -> tuple[float, float]:
        iy, ix = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return float(self.grid.xs[ix]), float(self.grid.ys[iy])


def heatmap(weights, constants: FeatureConstants, layout: RoadLayout, neighbors,
            grid_spec: GridSpec, feature: str | None = None) -> HeatMap:
    """Position-dependent reward sampled on a grid.

    The velocity feature does not depend on position and is left out.
    ``feature`` restricts the map to a single feature (e.g. ``"collision"``),
    shown unweighted by sign so that its shape stays visible with a
    negative weight; the weight's magnitude still scales it.

    ``neighbors`` is an (M, 2) array of other-vehicle centers.
    """
    th = _theta(weights)
    if feature is not None and feature not in FEATURE_NAMES[1:]:
        raise ContractError(f"unknown position feature {feature!r}")
    xs, ys = grid_spec.xs, grid_spec.ys
    X, Y = np.meshgrid(xs, ys)
    others = np.asarray(neighbors, dtype=float).reshape(-1, 2)
    scene = SceneContext(layout, np.broadcast_to(others[:, None, :], (others.shape[0], X.size, 2)).copy(),
                         0.0, constants)
    phi, _, _ = _state_features(X.ravel(), Y.ravel(), np.zeros(X.size), scene, second_order=False)
    if feature is None:
        vals = phi[:, 1:] @ th[1:]
    else:
        i = FEATURE_NAMES.index(feature)
        vals = abs(th[i]) * phi[:, i]
    return HeatMap(grid_spec, vals.reshape(X.shape), tuple(float(t) for t in th), constants, feature)


def write_heatmap(hm: HeatMap, csv_path, json_path, extra: dict | None = None) -> None:
    """CSV grid (x, y, value) and a JSON sidecar with grid, weights, constants."""
    xs, ys = hm.grid.xs, hm.grid.ys
    lines = ["x,y,value"]
    for iy, yv in enumerate(ys):
        for ix, xv in enumerate(xs):
            lines.append(f"{float(xv)!r},{float(yv)!r},{float(hm.values[iy, ix])!r}")
    Path(csv_path).write_text("\n".join(lines) + "\n")
    meta = {
        "grid": asdict(hm.grid),
        "weights": dict(zip(FEATURE_NAMES, hm.weights)),
        "constants": asdict(hm.constants),
        "feature": hm.feature,
    }
    if extra:
        meta.update(extra)
    Path(json_path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
