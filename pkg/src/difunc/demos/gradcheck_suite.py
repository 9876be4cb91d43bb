"""First- and second-order derivative checks across every functional."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from ..config import SolverConfig
from ..errors import SolverError
from ..gradcheck import gradcheck, gradgradcheck
from ..integrate import quad, solve_ivp, squad
from ..interp import interp1d
from ..linop import LinearOperator, solve, symeig
from ..optimize import equilibrium, minimize, rootfinder
from ..tensor import (
    Tensor, add, broadcast_to, concat, cos, div, dot, exp, index, log, matmul, mean, mul, neg, norm, pow,
    reshape, sigmoid, sin, softplus, sqrt, stack, sub, sum, tanh, transpose,
)
from .md import forces

TIGHT = SolverConfig(tol=1e-13, rtol=1e-10, atol=1e-12)


@dataclass(frozen=True)
class Case:
    name: str
    fn: Callable
    inputs: tuple
    order2: bool = False
    rtol: float | None = None  # first-order override (two stacked integrators need 1e-4)


# -- primitive ops ----------------------------------------------------------
PRIMITIVES: dict[str, tuple[Callable, int]] = {
    "add": (add, 2), "sub": (sub, 2), "mul": (mul, 2), "div": (div, 2),
    "neg": (neg, 1), "pow": (pow, 2), "pow_const": (lambda a: pow(a, 2.5), 1),
    "sqrt": (sqrt, 1), "exp": (exp, 1), "log": (log, 1), "sin": (sin, 1), "cos": (cos, 1),
    "tanh": (tanh, 1), "sigmoid": (sigmoid, 1), "softplus": (softplus, 1),
    "sum": (lambda a: sum(a, axis=0), 1), "mean": (mean, 1),
    "matmul": (lambda a, b: matmul(reshape(a, (2, 2)), reshape(b, (2, 2))), 2),
    "matvec": (lambda a, b: matmul(reshape(a, (2, 2)), index(b, slice(0, 2))), 2),
    "dot": (dot, 2), "norm": (norm, 1),
    "transpose": (lambda a: transpose(reshape(a, (2, 2))), 1),
    "broadcast": (lambda a: broadcast_to(index(a, slice(0, 2)), (3, 2)), 1),
    "reshape": (lambda a: reshape(a, (2, 2)), 1),
    "index": (lambda a: index(a, [3, 0, 0]), 1),
    "concat": (lambda a, b: concat([a, b]), 2),
    "stack": (lambda a, b: stack([a, b], axis=1), 2),
}


def primitive_cases(points: int = 3, seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed)
    cases = []
    for name, (fn, arity) in PRIMITIVES.items():
        for k in range(points):
            inputs = tuple(rng.uniform(0.1, 2.0, size=4) for _ in range(arity))
            cases.append(Case(f"{name}[{k}]", fn, inputs, order2=True))
    return cases


# -- linear algebra -----------------------------------------------------------
_A0 = np.array([[4.0, 1.0], [1.0, 3.0]])
_S4 = np.array([[5.0, 1.0, 0.5, 0.0], [1.0, 3.0, 0.2, 0.3], [0.5, 0.2, 1.0, 0.4], [0.0, 0.3, 0.4, -1.0]])
_D4 = np.diag([1.0, -0.5, 0.25, 2.0])


def _shifted(a0: np.ndarray, direction: np.ndarray | None = None) -> Callable:
    def build(theta):
        if direction is None:
            mv = lambda x, t: matmul(Tensor(a0), x) + mul(t, x)
        else:
            mv = lambda x, t: matmul(Tensor(a0), x) + mul(t, matmul(Tensor(direction), x))
        return LinearOperator(mv, a0.shape, (theta,), symmetric=True)
    return build


def solve_cases() -> list[Case]:
    build = _shifted(_A0)

    def f(b, e, theta):
        return solve(build(theta), reshape(b, (2, 1)), E=e, cfg=TIGHT)

    def f_mass(b, s):
        m = LinearOperator(lambda x, s: x + mul(s, mul(x, Tensor([1.0, 2.0]))), (2, 2), (s,), symmetric=True)
        return solve(build(Tensor(0.5)), reshape(b, (2, 1)), M=m, E=Tensor([0.7]), cfg=TIGHT)

    return [
        Case("solve[B,E,theta]", f, (np.array([1.0, 1.0]), np.array([0.3]), np.array(0.5)), order2=True),
        Case("solve[M]", f_mass, (np.array([1.0, -0.5]), np.array(0.2)), order2=True),
    ]


def symeig_cases() -> list[Case]:
    build = _shifted(_S4, _D4)

    def evals(theta):
        return symeig(build(theta), 2, cfg=TIGHT)[0]

    def evecs(theta):
        return symeig(build(theta), 2, cfg=TIGHT)[1]

    def upper(theta):
        return symeig(build(theta), 2, mode="uppermost", cfg=TIGHT)[0]

    return [
        Case("symeig[evals]", evals, (np.array(0.3),), order2=True),
        Case("symeig[uppermost]", upper, (np.array(0.3),), order2=True),
        Case("symeig[evecs]", evecs, (np.array(0.3),)),
    ]


# -- optimize -----------------------------------------------------------------
def optimize_cases() -> list[Case]:
    sqrt_root = lambda a: rootfinder(lambda x, a: sqrt(x) - a, 0.1, (a,), TIGHT)
    fixed = lambda a: equilibrium(lambda y, a: mul(a, cos(y)), 0.5, (a,), TIGHT)
    const = lambda a: equilibrium(lambda y, a: mul(y, 0.0) + a, 0.0, (a,), TIGHT)
    square = lambda th: minimize(lambda y, th: (y - th) ** 2, 0.0, (th,), TIGHT)
    cosh = lambda th: minimize(lambda y, th: 0.5 * (exp(y - th) + exp(th - y)), 0.0, (th,), TIGHT)
    return [
        Case("rootfinder[a=2]", sqrt_root, (np.array(2.0),), order2=True),
        Case("rootfinder[a=1]", sqrt_root, (np.array(1.0),), order2=True),
        Case("equilibrium[cos]", fixed, (np.array(1.0),)),
        Case("equilibrium[const]", const, (np.array(1.5),)),
        Case("minimize[square]", square, (np.array(3.0),), order2=True),
        Case("minimize[cosh]", cosh, (np.array(1.5),)),
    ]


# -- integrate / interp -----------------------------------------------------
def quad_cases() -> list[Case]:
    lin = lambda th, a, b: quad(lambda t, th: mul(th, t * t), a, b, (th,), TIGHT)
    poly = lambda th, a, b: quad(lambda t, th: th * th * t * t * t + th * t, a, b, (th,), TIGHT)
    return [
        Case("quad[theta x^2]", lin, (np.array(1.0), np.array(0.0), np.array(1.0)), order2=True),
        Case("quad[poly]", poly, (np.array(1.3), np.array(0.2), np.array(1.1)), order2=True),
    ]


def squad_cases() -> list[Case]:
    uniform = np.linspace(0.0, 1.0, 8)
    ragged = np.array([0.0, 0.1, 0.35, 0.5, 0.9, 1.0])
    return [
        Case("squad[simpson+tail]", lambda y: squad(y, uniform), (np.sin(uniform) + 1.0,), order2=True),
        Case("squad[trapezoid]", lambda y, x: squad(y, x), (np.cos(ragged), ragged), order2=True),
        Case("squad[cumulative]", lambda y: squad(y, uniform, cumulative=True), (uniform ** 2,), order2=True),
    ]


def interp_cases() -> list[Case]:
    xs = np.array([0.0, 0.3, 0.7, 1.2, 2.0])
    q = np.array([0.1, 0.5, 1.0, 1.9])
    cases = []
    for kind in ("linear", "cubic-hermite"):
        cases.append(Case(f"interp1d[{kind}]", lambda y, xq, k=kind: interp1d(xs, y, xq, kind=k),
                          (np.sin(xs), q), order2=True))
    return cases


def ivp_cases() -> list[Case]:
    decay = lambda t0, t1, y0, th: solve_ivp(lambda t, y, th: -th * y, t0, t1, y0, (th,), cfg=TIGHT)
    mixed = lambda y0, th: solve_ivp(lambda t, y, th: -th * y + sin(t) * y * y, 0.0, 1.0, y0, (th,),
                                     t_eval=[0.5, 1.0], cfg=TIGHT)

    x0 = np.array([[-0.5, 0.0], [0.5, 0.0]])

    def two_body(v0):
        y0 = stack([Tensor(x0), reshape(v0, (2, 2))])
        rhs = lambda t, y: stack([index(y, 1), forces(index(y, 0), 0.1)])
        return index(solve_ivp(rhs, 0.0, 1.0, y0, cfg=TIGHT), 0)

    return [
        Case("solve_ivp[decay]", decay, (np.array(0.0), np.array(1.0), np.array([1.0, 0.5]), np.array(1.0)),
             order2=True, rtol=1e-4),
        Case("solve_ivp[t_eval]", mixed, (np.array([0.5, 0.3]), np.array(1.2)), rtol=1e-4),
        Case("solve_ivp[two-body]", two_body, (np.array([0.0, 0.3, 0.1, -0.3]),), rtol=1e-4),
    ]


SUITES: dict[str, Callable[[], list[Case]]] = {
    "primitives": primitive_cases,
    "solve": solve_cases,
    "symeig": symeig_cases,
    "rootfinder": lambda: [c for c in optimize_cases() if c.name.startswith("rootfinder")],
    "equilibrium": lambda: [c for c in optimize_cases() if c.name.startswith("equilibrium")],
    "minimize": lambda: [c for c in optimize_cases() if c.name.startswith("minimize")],
    "quad": quad_cases,
    "squad": squad_cases,
    "interp1d": interp_cases,
    "solve_ivp": ivp_cases,
}


def resolve_suites(names) -> list[str]:
    if "all" in names:
        return list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {sorted(SUITES)} or 'all'")
    return list(names)


def _check(kind, case, inputs, eps, rtol, atol) -> dict:
    try:
        rep = kind(case.fn, inputs, eps=eps, rtol=rtol, atol=atol).as_dict()
    except (SolverError, ArithmeticError, ValueError) as exc:
        rep = {"passed": False, "max_abs_err": float("inf"), "max_rel_err": float("inf"),
               "location": None, "message": f"{type(exc).__name__}: {exc}"}
    return rep


def run_suites(names, order: int = 1, eps: float = 1e-6, rtol: float | None = None,
               atol: float = 1e-7) -> dict:
    """Run the named suites; returns a JSON-ready report with per-case results."""
    names = resolve_suites(names)
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    results = []
    for suite in names:
        for case in SUITES[suite]():
            inputs = [np.asarray(x, dtype=np.float64) for x in case.inputs]
            r1 = rtol if rtol is not None else (case.rtol or 1e-5)
            rep = _check(gradcheck, case, inputs, eps, r1, atol)
            results.append({"suite": suite, "case": case.name, "order": 1, "rtol": r1, **rep})
            if order == 2 and case.order2:
                r2 = rtol if rtol is not None else 1e-4
                rep = _check(gradgradcheck, case, inputs, eps, r2, atol)
                results.append({"suite": suite, "case": case.name, "order": 2, "rtol": r2, **rep})
    return {
        "passed": all(r["passed"] for r in results),
        "n_checks": len(results),
        "n_failed": len([r for r in results if not r["passed"]]),
        "max_abs_err": max((r["max_abs_err"] for r in results), default=0.0),
        "results": results,
    }
