from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class SolverConfig:
    """Numeric policy shared by the functionals.

    Each functional reads the fields relevant to it:

    * ``tol`` / ``max_iter``: residual tolerance (infinity norm) and iteration
      cap for rootfinder, equilibrium and minimize; relative residual
      tolerance for iterative linear solves; subdivision cap for quad.
    * ``rtol`` / ``atol``: error control for solve_ivp and quad.
    * ``max_steps``: step cap for solve_ivp.
    * ``method``: forward algorithm selector (functional specific).
    * ``dense_max``: largest operator size solved by materializing it.
    * ``debug``: run linearity/symmetry checks on operators before use.
    """

    method: str | None = None
    tol: float = 1e-8
    max_iter: int = 200
    rtol: float = 1e-7
    atol: float = 1e-9
    max_steps: int = 100_000
    line_search: bool = True
    dense_max: int = 128
    seed: int = 0
    debug: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if not (self.rtol > 0 and self.atol >= 0):
            raise ValueError(f"invalid rtol/atol: {self.rtol}, {self.atol}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")

    def with_(self, **changes) -> SolverConfig:
        return replace(self, **changes)


def resolve(cfg: SolverConfig | None, **overrides) -> SolverConfig:
    cfg = cfg if cfg is not None else SolverConfig()
    return replace(cfg, **overrides) if overrides else cfg
