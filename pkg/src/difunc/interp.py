"""Differentiable 1-D interpolation on unstructured nodes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, abs, as_tensor, concat, index, mul, reshape, sub, where

KINDS = ("linear", "cubic-hermite")
EXTRAPOLATION = ("error", "clamp")


def _check_table(x: np.ndarray, y: np.ndarray):
    if x.ndim != 1 or y.ndim != 1:
        raise ShapeError(f"interp1d: x and y must be 1-D, got {x.shape} and {y.shape}")
    if x.size != y.size:
        raise ShapeError(f"interp1d: len(x)={x.size} differs from len(y)={y.size}")
    if x.size < 2:
        raise ValueError("interp1d: need at least 2 nodes")
    if not np.all(np.diff(x) > 0):
        raise ValueError("interp1d: x must be strictly increasing")


def _minimum(a: Tensor, b: Tensor) -> Tensor:
    return where(a.data <= b.data, a, b)


def _tangents(x: Tensor, y: Tensor) -> Tensor:
    """Three-point tangents, one-sided at the ends, limited to keep monotone data monotone."""
    n = x.shape[0]
    h = sub(index(x, slice(1, n)), index(x, slice(0, n - 1)))
    delta = sub(index(y, slice(1, n)), index(y, slice(0, n - 1))) / h
    if n == 2:
        return index(delta, [0, 0])
    hl, hr = index(h, slice(0, n - 2)), index(h, slice(1, n - 1))
    dl, dr = index(delta, slice(0, n - 2)), index(delta, slice(1, n - 1))
    inner = (mul(hr, dl) + mul(hl, dr)) / (hl + hr)
    # Fritsch-Carlson style limit: zero at extrema, |m| <= 3 min(|dl|, |dr|)
    bound = mul(_minimum(abs(dl), abs(dr)), 3.0)
    limited = where(inner.data >= 0, _minimum(inner, bound), -_minimum(-inner, bound))
    same_sign = dl.data * dr.data > 0
    inner = where(same_sign, limited, mul(inner, 0.0))
    first = _end_tangent(index(h, 0), index(h, 1), index(delta, 0), index(delta, 1))
    last = _end_tangent(index(h, n - 2), index(h, n - 3), index(delta, n - 2), index(delta, n - 3))
    return concat([reshape(first, (1,)), inner, reshape(last, (1,))])


def _end_tangent(h0: Tensor, h1: Tensor, d0: Tensor, d1: Tensor) -> Tensor:
    # one-sided three-point difference, then the same monotonicity limits
    m = (mul(2.0 * h0 + h1, d0) - mul(h0, d1)) / (h0 + h1)
    if m.data * d0.data <= 0:
        return mul(m, 0.0)
    if d0.data * d1.data <= 0 and np.abs(m.data) > 3.0 * np.abs(d0.data):
        return mul(d0, 3.0)
    return m


@dataclass(frozen=True)
class Interp1D:
    """Interpolation table; ``x`` and ``y`` may carry gradients."""

    x: Tensor
    y: Tensor
    kind: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "x", as_tensor(self.x))
        object.__setattr__(self, "y", as_tensor(self.y))
        if self.kind not in KINDS:
            raise ValueError(f"interp1d: kind must be one of {KINDS}, got {self.kind!r}")
        _check_table(np.asarray(self.x.data), np.asarray(self.y.data))

    def __call__(self, xq, extrapolation: str = "error") -> Tensor:
        return interp1d(self.x, self.y, xq, kind=self.kind, extrapolation=extrapolation)


def interp1d(x, y, xq, kind: str = "linear", extrapolation: str = "error") -> Tensor:
    """Interpolate the table ``(x, y)`` at the query points ``xq``.

    ``kind`` is ``"linear"`` or ``"cubic-hermite"``. Queries outside
    ``[x[0], x[-1]]`` raise under ``extrapolation="error"`` and are moved to
    the nearest end under ``"clamp"``. Node queries return the node value
    exactly.
    """
    if kind not in KINDS:
        raise ValueError(f"interp1d: kind must be one of {KINDS}, got {kind!r}")
    if extrapolation not in EXTRAPOLATION:
        raise ValueError(f"interp1d: extrapolation must be one of {EXTRAPOLATION}, got {extrapolation!r}")
    x, y, xq = as_tensor(x), as_tensor(y), as_tensor(xq)
    xs = np.asarray(x.data)
    _check_table(xs, np.asarray(y.data))
    q = np.asarray(xq.data)
    lo, hi = xs[0], xs[-1]
    outside = (q < lo) | (q > hi) | ~np.isfinite(q)
    if np.any(outside):
        if extrapolation == "error":
            bad = q[outside].ravel()[0]
            raise ValueError(f"interp1d: query {float(bad)!r} outside [{float(lo)!r}, {float(hi)!r}]")
        xq = where(q < lo, index(x, 0), where(q > hi, index(x, -1), xq))
        q = np.clip(q, lo, hi)

    n = xs.size
    i = np.clip(np.searchsorted(xs, q, side="right") - 1, 0, n - 2)
    xl, xr = index(x, i), index(x, i + 1)
    yl, yr = index(y, i), index(y, i + 1)
    h = sub(xr, xl)
    t = sub(xq, xl) / h
    s = 1.0 - t
    if kind == "linear":
        return mul(s, yl) + mul(t, yr)

    m = _tangents(x, y)
    ml, mr = index(m, i), index(m, i + 1)
    t2 = t * t
    t3 = t2 * t
    h00 = 2.0 * t3 - 3.0 * t2 + 1.0
    h10 = t3 - 2.0 * t2 + t
    h01 = 3.0 * t2 - 2.0 * t3
    h11 = t3 - t2
    return mul(h00, yl) + mul(h01, yr) + mul(h, mul(h10, ml) + mul(h11, mr))
