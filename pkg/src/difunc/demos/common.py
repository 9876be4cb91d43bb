from __future__ import annotations

import csv
import json
import os
from collections.abc import Sequence

import numpy as np

from ..tensor import Tensor, matmul, softplus


def init_mlp(sizes: Sequence[int], seed: int, gain: float = 1.0) -> list[Tensor]:
    """Weights and biases drawn uniformly from +-gain/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = gain / np.sqrt(fan_in)
        params.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
        params.append(Tensor(rng.uniform(-bound, bound, size=(fan_out,)), requires_grad=True))
    return params


def mlp(x: Tensor, params: Sequence[Tensor]) -> Tensor:
    """Fully connected net on rows of ``x``; softplus after every layer but the last."""
    h = x
    n_layers = len(params) // 2
    for k in range(n_layers):
        h = matmul(h, params[2 * k]) + params[2 * k + 1]
        if k < n_layers - 1:
            h = softplus(h)
    return h


def write_csv(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, (int, np.integer, str)) else "%.17g" % v for v in row])


def write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def read_points(path: str, dim: int) -> np.ndarray:
    """Load an ``n x dim`` point set from a CSV file (optional header row)."""
    rows = []
    first = True
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if not first:
                    raise ValueError(f"{path}: non-numeric row {row}") from None
            first = False
    pts = np.array(rows, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != dim or len(pts) == 0:
        raise ValueError(f"{path}: expected rows of {dim} numbers, got shape {pts.shape}")
    return pts
