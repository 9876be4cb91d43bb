"""Mirror design: shape a surface so rays from a point source focus on a target."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..config import SolverConfig
from ..errors import SolverError
from ..optimize import AdamState, adam_step, rootfinder
from ..tensor import (
    Tensor, concat, enable_grad, grad, index, mul, neg, no_grad, ones, reshape, sqrt, sum, vjp,
)
from .common import init_mlp, mlp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MirrorConfig:
    rays: int = 25
    iters: int = 500
    lr: float = 3e-4
    seed: int = 0
    hidden: tuple[int, ...] = (16, 16)
    init_gain: float = float(np.sqrt(3.0))  # uniform +-sqrt(3/fan_in): unit-variance fan-in scaling
    aperture: float = 0.3  # radius of the aim-point disk on the plane z = 0
    source: tuple[float, float, float] = (-1.5, 0.0, -1.5)
    target: tuple[float, float, float] = (1.0, 0.0, -1.5)
    detector_z: float = -1.5
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(tol=1e-10, max_iter=50))

    def __post_init__(self):
        if self.rays < 1 or self.iters < 0:
            raise ValueError("rays must be >= 1 and iters >= 0")
        if not self.lr > 0 or not self.aperture > 0:
            raise ValueError("lr and aperture must be positive")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden layer widths must be positive")
        if self.source[2] >= 0:
            raise ValueError("source must lie below the mirror (z < 0)")


def ray_directions(cfg: MirrorConfig) -> np.ndarray:
    """Unit directions from the source through a Vogel spiral of aim points on z = 0."""
    k = np.arange(cfg.rays)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    r = cfg.aperture * np.sqrt((k + 0.5) / cfg.rays)
    aim = np.stack([r * np.cos(k * golden), r * np.sin(k * golden), np.zeros(cfg.rays)], axis=1)
    d = aim - np.asarray(cfg.source)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def surface(xy: Tensor, params) -> Tensor:
    return reshape(mlp(xy, params), (xy.shape[0],))


def reflect(d: Tensor, n: Tensor) -> Tensor:
    """Specular reflection of directions ``d`` about unit normals ``n`` (rows)."""
    dn = sum(mul(d, n), axis=1, keepdims=True)
    return d - mul(2.0 * dn, n)


def surface_normals(xy: Tensor, params) -> Tensor:
    (gxy,) = vjp(lambda p: surface(p, params), [xy], ones(xy.shape[0]), create_graph=True)
    raw = concat([neg(gxy), ones((xy.shape[0], 1))], axis=1)
    return raw / sqrt(sum(mul(raw, raw), axis=1, keepdims=True))


def _intersect(origin: np.ndarray, dirs: np.ndarray, params, cfg: MirrorConfig) -> Tensor:
    o, d = Tensor(origin), Tensor(dirs)

    def gap(s, *p):
        pts = o + mul(reshape(s, (-1, 1)), d)
        return surface(index(pts, (slice(None), slice(0, 2))), p) - index(pts, (slice(None), 2))

    s0 = Tensor(-origin[2] / dirs[:, 2])  # hit point on the plane z = 0
    return rootfinder(gap, s0, params, cfg=cfg.solver)


def trace(params, dirs: np.ndarray, cfg: MirrorConfig):
    """Trace rays to the detector; returns (hit points, mirror points, valid mask)."""
    origin = np.asarray(cfg.source, dtype=np.float64)
    valid = np.ones(len(dirs), dtype=bool)
    try:
        s = _intersect(origin, dirs, params, cfg)
    except SolverError:
        # fall back to one ray at a time so a single bad ray cannot sink the batch
        parts = []
        for i in range(len(dirs)):
            try:
                parts.append(_intersect(origin, dirs[i:i + 1], params, cfg))
            except SolverError:
                valid[i] = False
                parts.append(Tensor(np.array([-origin[2] / dirs[i, 2]])))
        s = concat(parts)
    s_np = s.numpy()
    s_max = 4.0 * np.abs(origin[2] / dirs[:, 2])
    valid &= (s_np > 0) & (s_np < s_max)
    d = Tensor(dirs)
    pts = Tensor(origin) + mul(reshape(s, (-1, 1)), d)
    normals = surface_normals(index(pts, (slice(None), slice(0, 2))), params)
    out = reflect(d, normals)
    dz = index(out, (slice(None), 2))
    valid &= dz.numpy() < -1e-6
    dz_safe = dz + Tensor(np.where(valid, 0.0, -1.0 - dz.numpy()))
    tau = (cfg.detector_z - index(pts, (slice(None), 2))) / dz_safe
    hits = pts + mul(reshape(tau, (-1, 1)), out)
    return hits, pts, valid


def loss_fn(hits: Tensor, valid: np.ndarray, target) -> Tensor:
    diff = hits - Tensor(np.asarray(target, dtype=np.float64))
    return sum(mul(sum(mul(diff, diff), axis=1), Tensor(valid.astype(np.float64))))


@dataclass
class MirrorResult:
    losses: list[float]
    skipped: list[int]
    params: list[Tensor]
    rays: list[tuple]  # (ray, mirror point, detector hit) of the final surface


def run(cfg: MirrorConfig) -> MirrorResult:
    dirs = ray_directions(cfg)
    params = init_mlp((2, *cfg.hidden, 1), cfg.seed, cfg.init_gain)
    state: AdamState | None = None
    losses, skipped = [], []
    for it in range(cfg.iters + 1):
        with enable_grad():
            hits, _, valid = trace(params, dirs, cfg)
            loss = loss_fn(hits, valid, cfg.target)
        n_bad = int((~valid).sum())
        if n_bad:
            log.warning("iteration %d: skipped %d ray(s) without a valid intersection", it, n_bad)
        losses.append(loss.item())
        skipped.append(n_bad)
        if it == cfg.iters:
            break
        grads = grad(loss, params)
        params, state = adam_step(params, grads, state, lr=cfg.lr)
    with no_grad():
        hits, pts, valid = trace(params, dirs, cfg)
    rays = [(i, *pts.numpy()[i], *hits.numpy()[i], int(valid[i])) for i in range(len(dirs))]
    return MirrorResult(losses, skipped, params, rays)
