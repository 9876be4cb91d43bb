"""Molecular dynamics: find initial velocities that carry particles onto a target shape at t = 1."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..config import SolverConfig
from ..errors import ShapeError
from ..integrate import solve_ivp
from ..optimize import AdamState, adam_step
from ..tensor import (
    Tensor, enable_grad, eye, grad, index, mul, no_grad, pow, reshape, sqrt, stack, sum,
)


@dataclass(frozen=True)
class MDConfig:
    particles: int = 8
    iters: int = 2000
    lr: float = 1e-3
    seed: int = 0
    a: float = 0.1
    spacing: float = 2.0
    target: str = "square"  # "square" | "circle", or an n x 2 array given via ``target_points``
    target_size: float = 6.0
    init: str = "ballistic"  # force-free guess (target - x0) / t1, or "random"
    init_noise: float = 0.05
    target_points: tuple | None = None
    free_flight: bool = False
    t1: float = 1.0
    snapshot_times: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(rtol=1e-7, atol=1e-9))

    def __post_init__(self):
        if self.particles < 2 or self.iters < 0:
            raise ValueError("particles must be >= 2 and iters >= 0")
        if not (self.lr > 0 and self.a > 0 and self.spacing > 0 and self.target_size > 0 and self.t1 > 0):
            raise ValueError("lr, a, spacing, target_size and t1 must be positive")
        if self.target_points is None and self.target not in ("square", "circle"):
            raise ValueError(f"unknown target shape {self.target!r}")
        if self.init not in ("ballistic", "random") or self.init_noise < 0:
            raise ValueError(f"invalid velocity init {self.init!r} / noise {self.init_noise}")
        if any(t < 0 or t > self.t1 for t in self.snapshot_times):
            raise ValueError("snapshot times must lie in [0, t1]")


def grid_positions(n: int, spacing: float) -> np.ndarray:
    """``n`` points on a centered grid with two rows (one row when n is small)."""
    rows = 2 if n >= 4 else 1
    cols = -(-n // rows)
    pts = [(c, r) for r in range(rows) for c in range(cols)][:n]
    pts = np.array(pts, dtype=np.float64) * spacing
    return pts - pts.mean(axis=0)


def _by_angle(p: np.ndarray) -> np.ndarray:
    return np.argsort(np.arctan2(p[:, 1], p[:, 0]), kind="stable")


def shape_points(kind: str, n: int, size: float) -> np.ndarray:
    if kind == "circle":
        ang = 2.0 * np.pi * np.arange(n) / n
        return 0.5 * size * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    # square perimeter, evenly spaced by arc length, starting at a corner
    s = 4.0 * np.arange(n) / n
    side, frac = np.floor(s).astype(int), s - np.floor(s)
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1], [-1, -1]], dtype=np.float64)
    pts = corners[side] + frac[:, None] * (corners[side + 1] - corners[side])
    return 0.5 * size * pts


def make_scene(cfg: MDConfig) -> tuple[np.ndarray, np.ndarray]:
    """Initial positions and targets, paired by polar angle about the centroid."""
    x0 = grid_positions(cfg.particles, cfg.spacing)
    if cfg.target_points is not None:
        targets = np.asarray(cfg.target_points, dtype=np.float64)
    else:
        targets = shape_points(cfg.target, cfg.particles, cfg.target_size)
    if targets.shape != x0.shape:
        raise ShapeError(f"target has shape {targets.shape}, expected {x0.shape}")
    paired = np.empty_like(targets)
    paired[_by_angle(x0)] = targets[_by_angle(targets)]
    return x0, paired


def forces(x: Tensor, a: float) -> Tensor:
    """Pairwise softened attraction F(r) = -(|r|^2 + a)^(-1/2) r_hat, summed per particle."""
    n, d = x.shape
    r = reshape(x, (n, 1, d)) - reshape(x, (1, n, d))
    r2 = sum(mul(r, r), axis=2)
    dist = sqrt(r2 + eye(n))  # the identity keeps the (zero) self term finite
    scale = pow(r2 + a, -0.5) / dist
    return -sum(mul(reshape(scale, (n, n, 1)), r), axis=1)


def dynamics(cfg: MDConfig):
    def rhs(t, y, *params):
        x, v = index(y, 0), index(y, 1)
        acc = mul(v, 0.0) if cfg.free_flight else forces(x, cfg.a)
        return stack([v, acc])

    return rhs


def energy(state: np.ndarray, a: float) -> float:
    """Kinetic plus pair potential asinh(r / sqrt(a)) (unit masses)."""
    x, v = state
    diff = x[:, None, :] - x[None, :, :]
    r = np.sqrt(np.sum(diff * diff, axis=2))
    iu = np.triu_indices(len(x), 1)
    return float(0.5 * np.sum(v * v) + np.sum(np.arcsinh(r[iu] / np.sqrt(a))))


def simulate(x0: np.ndarray, v0: Tensor, cfg: MDConfig, t_eval=None) -> Tensor:
    y0 = stack([Tensor(x0), v0])
    return solve_ivp(dynamics(cfg), 0.0, cfg.t1, y0, t_eval=t_eval, cfg=cfg.solver)


def loss_fn(y1: Tensor, targets: np.ndarray) -> Tensor:
    diff = index(y1, 0) - Tensor(targets)
    return sum(mul(diff, diff))


@dataclass
class MDResult:
    losses: list[float]
    momentum_errors: list[float]
    velocities: np.ndarray
    snapshots: list[tuple]  # (time, particle, x, y)
    targets: np.ndarray


def run(cfg: MDConfig) -> MDResult:
    x0, targets = make_scene(cfg)
    rng = np.random.default_rng(cfg.seed)
    v0 = cfg.init_noise * rng.standard_normal(x0.shape)
    if cfg.init == "ballistic":
        v0 = v0 + (targets - x0) / cfg.t1
    v0 = Tensor(v0, requires_grad=True)
    state: AdamState | None = None
    losses, drift = [], []
    for it in range(cfg.iters + 1):
        with enable_grad():
            y1 = simulate(x0, v0, cfg)
            loss = loss_fn(y1, targets)
        losses.append(loss.item())
        p0, p1 = v0.numpy().sum(axis=0), index(y1, 1).numpy().sum(axis=0)
        drift.append(float(np.max(np.abs(p1 - p0))))
        if it == cfg.iters:
            break
        (g,) = grad(loss, [v0])
        (v0,), state = adam_step([v0], [g], state, lr=cfg.lr)
    times = sorted(set(float(t) for t in cfg.snapshot_times))
    with no_grad():
        traj = _trajectory(x0, v0, cfg, times)
    snaps = [(t, i, *traj[k][0, i]) for k, t in enumerate(times) for i in range(len(x0))]
    return MDResult(losses, drift, v0.numpy(), snaps, targets)


def _trajectory(x0, v0, cfg, times):
    start = stack([Tensor(x0), v0]).numpy()
    rest = [t for t in times if t > 0.0]
    states = [start] if times and times[0] == 0.0 else []
    if rest:
        states.extend(simulate(x0, v0, cfg, t_eval=rest).numpy())
    return states
