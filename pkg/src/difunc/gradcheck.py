"""Finite-difference checks of first and second derivatives."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .tensor import ParamFunc, Tensor, as_tensor, concat, enable_grad, no_grad, reshape, vjp
from .tensor import _backprop, _prepare_inputs, _wrap


@dataclass
class GradcheckReport:
    passed: bool
    max_abs_err: float
    max_rel_err: float
    location: tuple[int, int, int] | None = None  # (input, input element, output element)
    message: str = ""

    def __bool__(self) -> bool:
        return self.passed

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_abs_err": self.max_abs_err,
            "max_rel_err": self.max_rel_err,
            "location": list(self.location) if self.location is not None else None,
            "message": self.message,
        }


def _analytic_jacobians(fn, inputs: list[Tensor]) -> list[np.ndarray]:
    # Record fn once and replay with every basis cotangent.
    wrt = tuple(range(len(inputs)))
    with enable_grad():
        args = _prepare_inputs(inputs, wrt, False)
        out = as_tensor(fn(*args))
        jacs = [np.empty((out.size, x.size)) for x in inputs]
        basis = np.zeros(out.size)
        for k in range(out.size):
            basis[k] = 1.0
            grads = _backprop([out], args, [_wrap(basis.reshape(out.shape))], False, True)
            for jac, g in zip(jacs, grads):
                jac[k] = g.data.ravel()
            basis[k] = 0.0
    return jacs


def _eval(fn, inputs: list[Tensor]) -> np.ndarray:
    with no_grad():
        return np.array(as_tensor(fn(*inputs)).data, dtype=np.float64).ravel()


def gradcheck(fn: ParamFunc, inputs: Sequence, eps: float = 1e-6, rtol: float = 1e-5,
              atol: float = 1e-7, smooth_tol: float = 1e-3) -> GradcheckReport:
    """Compare the AD Jacobian of ``fn`` against central differences.

    Passes iff ``|analytic - numeric| <= atol + rtol * |numeric|`` for every
    Jacobian entry. A point where the forward and backward one-sided
    differences disagree by more than ``smooth_tol * (1 + |numeric|)`` is
    reported as non-smooth and fails regardless of the comparison.
    """
    inputs = [Tensor(as_tensor(x).data) for x in inputs]
    with enable_grad():
        analytic = _analytic_jacobians(fn, inputs)
    f0 = _eval(fn, inputs)

    max_abs = 0.0
    max_rel = 0.0
    worst = None
    passed = True
    message = ""
    for i, x in enumerate(inputs):
        flat = x.data.ravel()
        for j in range(flat.size):
            orig = flat[j]
            perturbed = list(inputs)
            xp = flat.copy()
            xp[j] = orig + eps
            perturbed[i] = Tensor(xp.reshape(x.shape))
            fp = _eval(fn, perturbed)
            xp[j] = orig - eps
            perturbed[i] = Tensor(xp.reshape(x.shape))
            fm = _eval(fn, perturbed)
            numeric = (fp - fm) / (2.0 * eps)
            col = analytic[i][:, j]
            if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(col))):
                k = int(np.argmax(~(np.isfinite(numeric) & np.isfinite(col))))
                return GradcheckReport(False, float("inf"), float("inf"), (i, j, k),
                                       f"non-finite Jacobian entry at input {i}[{j}], output {k}")
            kink = np.abs((fp - f0) / eps - (f0 - fm) / eps)
            bad = kink > smooth_tol * (1.0 + np.abs(numeric))
            if np.any(bad) and passed:
                k = int(np.argmax(bad))
                passed = False
                message = f"function is not smooth at input {i}[{j}] (output {k})"
                worst = (i, j, k)
            err = np.abs(col - numeric)
            rel = err / np.maximum(np.abs(numeric), 1e-300)
            fail = err > atol + rtol * np.abs(numeric)
            if np.any(fail) and passed:
                k = int(np.argmax(fail))
                passed = False
                message = (f"Jacobian mismatch at input {i}[{j}], output {k}: "
                           f"analytic {col[k]!r} vs numeric {numeric[k]!r}")
                worst = (i, j, k)
            if err.size and err.max() > max_abs:
                max_abs = float(err.max())
                if passed:
                    worst = (i, j, int(np.argmax(err)))
            if rel.size:
                max_rel = max(max_rel, float(np.where(err > atol, rel, 0.0).max()))
    return GradcheckReport(passed, max_abs, max_rel, worst, message or "ok")


def gradgradcheck(fn: ParamFunc, inputs: Sequence, eps: float = 1e-6, rtol: float = 1e-4,
                  atol: float = 1e-7, seed: int = 0, smooth_tol: float = 1e-3) -> GradcheckReport:
    """Gradcheck applied to the vjp of ``fn`` built with ``create_graph``.

    The output cotangent is one for scalar outputs and a fixed seeded draw
    otherwise, so the check is deterministic.
    """
    inputs = [Tensor(as_tensor(x).data) for x in inputs]
    out_shape = as_tensor(_shape_probe(fn, inputs)).shape
    if int(np.prod(out_shape)) == 1:
        cot = np.ones(out_shape)
    else:
        cot = np.random.default_rng(seed).uniform(0.5, 1.5, size=out_shape)
    cot_t = Tensor(cot)

    def first_derivative(*xs):
        grads = vjp(fn, xs, cot_t, create_graph=True)
        return concat([reshape(g, (-1,)) for g in grads])

    return gradcheck(first_derivative, inputs, eps=eps, rtol=rtol, atol=atol, smooth_tol=smooth_tol)


def _shape_probe(fn, inputs):
    with no_grad():
        return fn(*inputs)
