"""Root finding, fixed points and minimization with implicit gradients.

The forward solvers run on plain arrays and are never differentiated. The
backward pass differentiates the optimality condition instead: for a root of
``f(y, params) = 0`` it solves ``(df/dy)^T h = dL/dy`` with
:func:`difunc.linop.solve` on a matrix-free Jacobian operator and returns
``-h^T df/dparams``. Minimization reuses the same path with ``f`` replaced by
the gradient of the objective.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .config import SolverConfig, resolve
from .errors import ConvergenceError, ShapeError, SolverError
from .linop import LinearOperator, solve
from .tensor import (
    ParamFunc, Tensor, _backprop, _prepare_inputs, as_tensor, custom_op, enable_grad, identity,
    index, is_grad_enabled, jacobian, neg, no_grad, ones, reshape, stack, vjp,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# implicit backward shared by every functional in this module
# ---------------------------------------------------------------------------
def _jacobian_transpose_op(fcn: ParamFunc, y: Tensor, params: Sequence[Tensor], symmetric: bool) -> LinearOperator:
    shape = y.shape

    def f_flat(yv, *p):
        return reshape(fcn(reshape(yv, shape), *p), (-1,))

    def matvec(v, yv, *p):
        (out,) = vjp(f_flat, [yv, *p], v, wrt=[0])
        return out

    def matmat(V, yv, *p):
        create = is_grad_enabled()
        with enable_grad():
            args = _prepare_inputs([yv, *p], (0,), create)
            out = f_flat(*args)
            cols = [
                _backprop([out], [args[0]], [index(V, (slice(None), j))], create, True)[0]
                for j in range(V.shape[1])
            ]
        return stack(cols, axis=1)

    n = y.size
    return LinearOperator(matvec, (n, n), [reshape(y, (-1,)), *params], matmat=matmat,
                          symmetric=symmetric, name="jacobian.T")


def _implicit_backward(fcn: ParamFunc, y: Tensor, params: Sequence[Tensor], g: Tensor,
                       cfg: SolverConfig, symmetric: bool = False):
    jt = _jacobian_transpose_op(fcn, y, params, symmetric)
    h = solve(jt, reshape(g, (-1,)), cfg=cfg)
    cot = neg(reshape(h, y.shape))
    wrt = [i + 1 for i, p in enumerate(params) if p.node is not None]
    grads = vjp(lambda yy, *p: fcn(yy, *p), [y, *params], cot, wrt=wrt) if wrt else []
    out = [None] * len(params)
    for i, gi in zip(wrt, grads):
        out[i - 1] = gi
    return tuple(out)


# ---------------------------------------------------------------------------
# rootfinder / equilibrium
# ---------------------------------------------------------------------------
def _numeric_residual(fcn: ParamFunc, params, shape):
    def F(y: np.ndarray) -> np.ndarray:
        with no_grad():
            out = as_tensor(fcn(Tensor(y.reshape(shape)), *params))
        if out.shape != shape:
            raise ShapeError(f"rootfinder: function output shape {out.shape} differs from y shape {shape}")
        return np.array(out.data, dtype=np.float64).ravel()

    def J(y: np.ndarray) -> np.ndarray:
        return jacobian(lambda yy, *p: fcn(yy, *p), [Tensor(y.reshape(shape)), *params], wrt=0)

    return F, J


def _solve_step(J: np.ndarray, fy: np.ndarray) -> np.ndarray:
    try:
        step = np.linalg.solve(J, -fy)
        if np.all(np.isfinite(step)):
            return step
    except np.linalg.LinAlgError:
        pass
    return np.linalg.lstsq(J, -fy, rcond=None)[0]


def _broyden(F, Jfn, y0: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    """Broyden's first method; exact initial Jacobian, backtracking on ||f||."""
    y = y0.astype(np.float64).ravel().copy()
    fy = F(y)
    if not np.all(np.isfinite(fy)):
        raise SolverError("rootfinder: residual is not finite at the initial guess")
    n = y.size
    newton = cfg.method == "newton"
    J = Jfn(y) if n <= cfg.dense_max or newton else np.eye(n)
    fresh = True
    for _ in range(cfg.max_iter):
        if np.max(np.abs(fy)) <= cfg.tol:
            return y
        step = _solve_step(J, fy)
        fnorm = np.linalg.norm(fy)
        alpha = 1.0
        best = None
        accepted = False
        for _ in range(40 if cfg.line_search else 1):
            yn = y + alpha * step
            fn = F(yn)
            if np.all(np.isfinite(fn)):
                nn = np.linalg.norm(fn)
                if best is None or nn < best[2]:
                    best = (yn, fn, nn)
                if nn <= (1.0 - 1e-4 * alpha) * fnorm or not cfg.line_search:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            if not fresh:
                J = Jfn(y)
                fresh = True
                continue
            if best is None:
                raise SolverError("rootfinder: no finite residual along the search direction",
                                  residual=float(np.max(np.abs(fy))))
            yn, fn, _ = best
        s = yn - y
        if newton:
            J = Jfn(yn)
        else:
            ss = s @ s
            if ss > 0:
                J = J + np.outer((fn - fy) - J @ s, s) / ss
        fresh = newton
        y, fy = yn, fn
    res = float(np.max(np.abs(fy)))
    if res <= cfg.tol:
        return y
    raise ConvergenceError(f"rootfinder: no convergence after {cfg.max_iter} iterations "
                           f"(residual {res:.3e})", residual=res)


def rootfinder(fcn: ParamFunc, y0, params: Sequence = (), cfg: SolverConfig | None = None) -> Tensor:
    """Solve ``fcn(y, *params) = 0`` for ``y``, starting from ``y0``.

    The returned root is differentiable wrt ``params`` (to any order);
    ``y0`` is only a starting hint and receives no gradient.

    >>> a = tensor(2.0, requires_grad=True)
    >>> x = rootfinder(lambda x, a: x ** 0.5 - a, tensor(0.1), params=(a,))
    """
    cfg = resolve(cfg)
    y0 = as_tensor(y0)
    params = tuple(as_tensor(p) for p in params)
    F, J = _numeric_residual(fcn, params, y0.shape)
    y = _broyden(F, J, np.array(y0.data), cfg)
    out = custom_op(y.reshape(y0.shape), params, None, "rootfinder")
    if out.node is not None:
        out.node.backward = lambda g: _implicit_backward(fcn, out, params, g, cfg)
    return out


def equilibrium(fcn: ParamFunc, y0, params: Sequence = (), cfg: SolverConfig | None = None) -> Tensor:
    """Fixed point ``y = fcn(y, *params)``, solved as the root of ``y - fcn(y)``."""

    def residual(y, *p):
        return y - fcn(y, *p)

    return rootfinder(residual, y0, params, cfg)


# ---------------------------------------------------------------------------
# minimize
# ---------------------------------------------------------------------------
def gradient_fn(fcn: ParamFunc) -> ParamFunc:
    """``(y, *params) -> d fcn / dy`` as a differentiable function."""

    def gfcn(y, *p):
        create = is_grad_enabled()
        with enable_grad():
            ya = identity(y) if create else Tensor(as_tensor(y).data, requires_grad=True)
            val = as_tensor(fcn(ya, *p))
            if val.size != 1:
                raise ShapeError(f"minimize: objective must be scalar, got shape {val.shape}")
            (gy,) = _backprop([val], [ya], [ones(val.shape)], create, True)
        return gy

    return gfcn


def _minimize_forward(fcn: ParamFunc, params, y0: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    shape = y0.shape
    gfcn = gradient_fn(fcn)

    def value(y):
        with no_grad():
            val = as_tensor(fcn(Tensor(y.reshape(shape)), *params))
        if val.shape != ():
            raise ShapeError(f"minimize: objective must be scalar, got shape {val.shape}")
        return float(val.data)

    def gradient(y):
        with no_grad():
            return np.array(gfcn(Tensor(y.reshape(shape)), *params).data).ravel()

    def hessian(y):
        H = jacobian(lambda yy, *p: gfcn(yy, *p), [Tensor(y.reshape(shape)), *params], wrt=0)
        return 0.5 * (H + H.T)

    method = cfg.method or "newton"
    if method not in ("newton", "gd"):
        raise ValueError(f"minimize: unknown method {method!r}")
    y = y0.ravel().astype(np.float64).copy()
    fy = value(y)
    if not np.isfinite(fy):
        raise SolverError("minimize: objective is not finite at the initial guess")
    for _ in range(cfg.max_iter):
        gy = gradient(y)
        if np.max(np.abs(gy)) <= cfg.tol:
            return y
        directions = [-gy]
        if method == "newton" and y.size <= cfg.dense_max:
            H = hessian(y)
            try:
                np.linalg.cholesky(H)
                directions.insert(0, np.linalg.solve(H, -gy))
            except np.linalg.LinAlgError:
                logger.debug("minimize: Hessian not positive definite, using gradient step")
        moved = False
        for d in directions:
            slope = gy @ d
            alpha = 1.0
            for _ in range(60):
                yn = y + alpha * d
                fn = value(yn)
                if np.isfinite(fn) and fn <= fy + 1e-4 * alpha * slope:
                    moved = True
                    break
                alpha *= 0.5
            if moved:
                break
        if not moved:
            res = float(np.max(np.abs(gy)))
            raise SolverError(f"minimize: line search failed (gradient {res:.3e})", residual=res)
        y, fy = yn, fn
    gy = gradient(y)
    res = float(np.max(np.abs(gy)))
    if res <= cfg.tol:
        return y
    raise ConvergenceError(f"minimize: no convergence after {cfg.max_iter} iterations "
                           f"(gradient {res:.3e})", residual=res)


def minimize(fcn: ParamFunc, y0, params: Sequence = (), cfg: SolverConfig | None = None) -> Tensor:
    """``argmin_y fcn(y, *params)`` for a scalar objective.

    ``cfg.method`` selects ``"newton"`` (default; exact Hessian with a
    gradient-step fallback) or ``"gd"`` (gradient descent). Both use
    backtracking Armijo line search. Gradients wrt ``params`` come from the
    stationarity condition through Hessian-vector products.
    """
    cfg = resolve(cfg)
    y0 = as_tensor(y0)
    params = tuple(as_tensor(p) for p in params)
    y = _minimize_forward(fcn, params, np.array(y0.data), cfg)
    out = custom_op(y.reshape(y0.shape), params, None, "minimize")
    if out.node is not None:
        gfcn = gradient_fn(fcn)
        out.node.backward = lambda g: _implicit_backward(gfcn, out, params, g, cfg, symmetric=True)
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------
@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence, state: AdamState | None = None,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[list[Tensor], AdamState]:
    """One bias-corrected Adam update.

    Returns fresh leaf tensors (``requires_grad=True``) and a new state; the
    inputs are not modified.
    """
    state = state if state is not None else AdamState()
    gs = [np.asarray(as_tensor(g).data, dtype=np.float64) for g in grads]
    if len(gs) != len(params):
        raise ValueError(f"adam_step: {len(params)} params but {len(gs)} gradients")
    for i, g in enumerate(gs):
        if not np.all(np.isfinite(g)):
            raise ValueError(f"adam_step: gradient {i} is not finite")
    m_prev = state.m or [np.zeros_like(g) for g in gs]
    v_prev = state.v or [np.zeros_like(g) for g in gs]
    t = state.step + 1
    m_new, v_new, out = [], [], []
    for p, g, m, v in zip(params, gs, m_prev, v_prev):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        out.append(Tensor(as_tensor(p).data - lr * mhat / (np.sqrt(vhat) + eps), requires_grad=True))
        m_new.append(m)
        v_new.append(v)
    return out, AdamState(t, m_new, v_new)
