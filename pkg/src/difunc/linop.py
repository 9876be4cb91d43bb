"""Matrix-free linear operators with differentiable ``solve`` and ``symeig``."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .config import SolverConfig, resolve
from .errors import DegenerateError, ShapeError, SolverError
from .tensor import (
    Tensor, as_tensor, concat, custom_op, eye, index, is_grad_enabled, matmul, mul, no_grad,
    reshape, stack, sub, sum, transpose, vjp, where, zeros,
)


class LinearOperator:
    """A linear map ``x -> A(params) x`` defined by its matrix-vector product.

    ``matvec(x, *params)`` maps a vector of length ``shape[1]`` to one of
    length ``shape[0]``. The transposed product comes from an explicit
    ``rmatvec`` when given, otherwise from the vjp of ``matvec``. Parameters
    are passed explicitly so that gradients can flow into them.
    """

    def __init__(self, matvec: Callable, shape: tuple[int, int], params: Sequence = (),
                 rmatvec: Callable | None = None, matmat: Callable | None = None,
                 symmetric: bool = False, spd: bool = False, name: str = "linop"):
        if len(shape) != 2:
            raise ShapeError(f"LinearOperator: shape must be (rows, cols), got {shape}")
        self.shape = (int(shape[0]), int(shape[1]))
        self.params = tuple(as_tensor(p) for p in params)
        self._matvec = matvec
        self._rmatvec = rmatvec
        self._matmat = matmat
        self.symmetric = bool(symmetric or spd)
        self.spd = bool(spd)
        self.name = name

    def __repr__(self) -> str:
        return f"LinearOperator({self.name}, shape={self.shape}, nparams={len(self.params)})"

    # -- constructors -------------------------------------------------------
    @classmethod
    def from_matrix(cls, mat, symmetric: bool = False, spd: bool = False) -> LinearOperator:
        mat = as_tensor(mat)
        if mat.ndim != 2:
            raise ShapeError(f"from_matrix: expected a 2-D matrix, got shape {mat.shape}")
        return cls(
            matvec=lambda x, a: matmul(a, x),
            rmatvec=lambda q, a: matmul(transpose(a), q),
            matmat=lambda x, a: matmul(a, x),
            shape=mat.shape, params=(mat,), symmetric=symmetric, spd=spd, name="matrix",
        )

    @classmethod
    def identity(cls, n: int) -> LinearOperator:
        return cls(matvec=lambda x: x, rmatvec=lambda q: q, matmat=lambda x: x,
                   shape=(n, n), spd=True, name="identity")

    # -- products with explicit parameters --------------------------------
    def _check_vec(self, x: Tensor, size: int, what: str):
        if x.ndim != 1 or x.shape[0] != size:
            raise ShapeError(f"{self.name}.{what}: expected a vector of length {size}, got shape {x.shape}")

    def matvec_with(self, x, params: Sequence) -> Tensor:
        x = as_tensor(x)
        self._check_vec(x, self.shape[1], "matvec")
        return as_tensor(self._matvec(x, *params))

    def matmat_with(self, X, params: Sequence) -> Tensor:
        X = as_tensor(X)
        if X.ndim != 2 or X.shape[0] != self.shape[1]:
            raise ShapeError(f"{self.name}.matmat: expected {self.shape[1]} rows, got shape {X.shape}")
        if self._matmat is not None:
            return as_tensor(self._matmat(X, *params))
        cols = [self.matvec_with(index(X, (slice(None), j)), params) for j in range(X.shape[1])]
        return stack(cols, axis=1)

    def rmatvec_with(self, q, params: Sequence) -> Tensor:
        q = as_tensor(q)
        self._check_vec(q, self.shape[0], "rmatvec")
        if self._rmatvec is not None:
            return as_tensor(self._rmatvec(q, *params))
        # adjoint trick: A^T q is the vjp of x -> A x with cotangent q
        (out,) = vjp(lambda x, *p: self._matvec(x, *p), [zeros(self.shape[1]), *params], q, wrt=[0])
        return out

    def rmatmat_with(self, Q, params: Sequence) -> Tensor:
        Q = as_tensor(Q)
        if Q.ndim != 2 or Q.shape[0] != self.shape[0]:
            raise ShapeError(f"{self.name}.rmatmat: expected {self.shape[0]} rows, got shape {Q.shape}")
        if self._rmatvec is not None:
            cols = [as_tensor(self._rmatvec(index(Q, (slice(None), j)), *params)) for j in range(Q.shape[1])]
            return stack(cols, axis=1)
        zero = zeros((self.shape[1], Q.shape[1]))
        (out,) = vjp(lambda x, *p: self.matmat_with(x, p), [zero, *params], Q, wrt=[0])
        return out

    def mv(self, x) -> Tensor:
        return self.matvec_with(x, self.params)

    def mm(self, X) -> Tensor:
        return self.matmat_with(X, self.params)

    def rmv(self, q) -> Tensor:
        return self.rmatvec_with(q, self.params)

    def rmm(self, Q) -> Tensor:
        return self.rmatmat_with(Q, self.params)

    @property
    def T(self) -> LinearOperator:
        op = LinearOperator(
            matvec=lambda q, *p: self.rmatvec_with(q, p),
            rmatvec=lambda x, *p: self.matvec_with(x, p),
            matmat=lambda Q, *p: self.rmatmat_with(Q, p),
            shape=(self.shape[1], self.shape[0]), params=self.params,
            symmetric=self.symmetric, spd=self.spd, name=f"{self.name}.T",
        )
        return op

    def with_params(self, params: Sequence) -> LinearOperator:
        return LinearOperator(self._matvec, self.shape, params, self._rmatvec, self._matmat,
                              self.symmetric, self.spd, self.name)

    def dense(self) -> np.ndarray:
        """Materialize the operator by applying it to the identity."""
        with no_grad():
            return np.array(self.mm(eye(self.shape[1])).data)


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------
@dataclass
class LinopReport:
    passed: bool
    additivity: float
    homogeneity: float
    adjoint: float
    symmetry: float | None = None

    def __bool__(self) -> bool:
        return self.passed


def _rel(err: float, scale: float) -> float:
    return err / scale if scale > 0 else err


def check_linop(A: LinearOperator, probes: int = 20, seed: int = 0, tol: float = 1e-10,
                symmetric: bool | None = None) -> LinopReport:
    """Probe additivity, homogeneity and adjoint consistency on random vectors.

    Each quantity is the largest relative violation over ``probes`` draws.
    ``symmetric`` (default: the operator's flag) also checks ``<Ax,y> = <x,Ay>``.
    """
    rng = np.random.default_rng(seed)
    n, c = A.shape
    symmetric = A.symmetric if symmetric is None else symmetric
    add_v = hom_v = adj_v = 0.0
    sym_v = 0.0 if symmetric else None
    with no_grad():
        for _ in range(probes):
            x, y = rng.standard_normal(c), rng.standard_normal(c)
            q = rng.standard_normal(n)
            alpha = rng.uniform(-3.0, 3.0)
            ax, ay = A.mv(Tensor(x)).data, A.mv(Tensor(y)).data
            axy = A.mv(Tensor(x + y)).data
            scale = np.linalg.norm(ax) + np.linalg.norm(ay)
            add_v = max(add_v, _rel(np.linalg.norm(axy - ax - ay), scale))
            aax = A.mv(Tensor(alpha * x)).data
            hom_v = max(hom_v, _rel(np.linalg.norm(aax - alpha * ax), np.linalg.norm(alpha * ax)))
            atq = A.rmv(Tensor(q)).data
            lhs, rhs = float(ax @ q), float(x @ atq)
            adj_v = max(adj_v, _rel(abs(lhs - rhs), np.linalg.norm(ax) * np.linalg.norm(q)))
            if symmetric:
                if n != c:
                    sym_v = float("inf")
                else:
                    s1, s2 = float(ax @ y), float(x @ ay)
                    sym_v = max(sym_v, _rel(abs(s1 - s2), np.linalg.norm(ax) * np.linalg.norm(y)))
    values = [add_v, hom_v, adj_v] + ([sym_v] if sym_v is not None else [])
    passed = all(np.isfinite(v) and v <= tol for v in values)
    return LinopReport(passed, float(add_v), float(hom_v), float(adj_v),
                       None if sym_v is None else float(sym_v))


# ---------------------------------------------------------------------------
# iterative kernels (numpy level)
# ---------------------------------------------------------------------------
def _cg(apply, b: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x
    for _ in range(max_iter):
        if np.sqrt(rr) <= tol * bnorm:
            return x
        ap = apply(p)
        pap = p @ ap
        if pap <= 0 or not np.isfinite(pap):
            raise SolverError("conjugate gradient broke down (operator not positive definite)",
                               residual=float(np.sqrt(rr) / bnorm))
        alpha = rr / pap
        x += alpha * p
        r -= alpha * ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    if np.sqrt(rr) <= tol * bnorm:
        return x
    raise SolverError("conjugate gradient did not converge", residual=float(np.sqrt(rr) / bnorm))


def _bicgstab(apply, b: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x
    r = b.copy()
    rhat = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    for _ in range(max_iter):
        rho_new = rhat @ r
        if rho_new == 0.0 or omega == 0.0:
            break
        beta = (rho_new / rho) * (alpha / omega)
        p = r + beta * (p - omega * v)
        v = apply(p)
        rv = rhat @ v
        if rv == 0.0 or not np.isfinite(rv):
            break
        alpha = rho_new / rv
        s = r - alpha * v
        if np.linalg.norm(s) <= tol * bnorm:
            x += alpha * p
            return x
        t = apply(s)
        tt = t @ t
        omega = (t @ s) / tt if tt > 0 else 0.0
        x += alpha * p + omega * s
        r = s - omega * t
        rho = rho_new
        if np.linalg.norm(r) <= tol * bnorm:
            return x
    res = float(np.linalg.norm(b - apply(x)) / bnorm)
    if res <= tol:
        return x
    raise SolverError("BiCGSTAB did not converge (system may be singular)", residual=res)


def _np_apply(op: LinearOperator):
    def apply(x: np.ndarray) -> np.ndarray:
        return np.array(op.mv(Tensor(x)).data)
    return apply


def _check_dense_solution(K: np.ndarray, x: np.ndarray, b: np.ndarray, what: str):
    if not np.all(np.isfinite(x)):
        raise SolverError(f"{what}: non-finite solution")
    s = np.linalg.svd(K, compute_uv=False)
    if s[-1] <= s[0] * 1e-14:
        res = float(np.linalg.norm(K @ x - b) / max(np.linalg.norm(b), 1e-300))
        raise SolverError(f"{what}: matrix is singular to working precision", residual=res)


def _solve_forward(A: LinearOperator, B: np.ndarray, M: LinearOperator | None, E: np.ndarray | None,
                   cfg: SolverConfig) -> np.ndarray:
    n = A.shape[0]
    if n <= cfg.dense_max:
        Ad = A.dense()
        Md = M.dense() if M is not None else np.eye(n)
        X = np.empty_like(B)
        if E is None:
            try:
                X[:] = np.linalg.solve(Ad, B)
            except np.linalg.LinAlgError as exc:
                raise SolverError(f"solve: {exc}") from None
            _check_dense_solution(Ad, X, B, "solve")
            return X
        for j in range(B.shape[1]):
            K = Ad - E[j] * Md
            try:
                X[:, j] = np.linalg.solve(K, B[:, j])
            except np.linalg.LinAlgError as exc:
                raise SolverError(f"solve: {exc}") from None
            _check_dense_solution(K, X[:, j], B[:, j], "solve")
        return X

    apply_a = _np_apply(A)
    apply_m = _np_apply(M) if M is not None else (lambda x: x)
    max_iter = max(cfg.max_iter, 4 * n)
    X = np.empty_like(B)
    for j in range(B.shape[1]):
        shift = 0.0 if E is None else E[j]
        if shift == 0.0:
            kernel, apply = (_cg if A.spd else _bicgstab), apply_a
        else:
            kernel = _bicgstab

            def apply(x, shift=shift):
                return apply_a(x) - shift * apply_m(x)
        X[:, j] = kernel(apply, B[:, j], cfg.tol, max_iter)
    return X


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------
def solve(A: LinearOperator, B, M: LinearOperator | None = None, E=None,
          cfg: SolverConfig | None = None) -> Tensor:
    """Solve ``A X - M X diag(E) = B`` for ``X``.

    ``B`` may be a vector or an ``n x m`` matrix; ``E`` holds the diagonal of
    the shift matrix (length ``m``). ``M`` defaults to the identity and ``E``
    to zero. The result is differentiable wrt ``B``, ``E`` and the
    parameters of ``A`` and ``M``; the backward pass solves the transposed
    system with this same function, so it can be differentiated again.
    """
    cfg = resolve(cfg)
    B = as_tensor(B)
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise ShapeError(f"solve: operator must be square, got {A.shape}")
    if M is not None and M.shape != A.shape:
        raise ShapeError(f"solve: M has shape {M.shape}, A has shape {A.shape}")
    if B.ndim not in (1, 2) or B.shape[0] != n:
        raise ShapeError(f"solve: B has shape {B.shape}, expected ({n},) or ({n}, m)")
    vector_rhs = B.ndim == 1
    B2 = reshape(B, (n, 1)) if vector_rhs else B
    m = B2.shape[1]
    if E is not None:
        E = as_tensor(E)
        if E.shape != (m,):
            raise ShapeError(f"solve: E has shape {E.shape}, expected ({m},)")
    if cfg.debug:
        for op in (A, M):
            if op is not None:
                rep = check_linop(op)
                if not rep.passed:
                    raise SolverError(f"solve: operator {op.name} failed linearity checks: {rep}")

    with no_grad():
        X = _solve_forward(A, np.array(B2.data), M, None if E is None else np.array(E.data), cfg)

    pa = len(A.params)
    pm = len(M.params) if M is not None else 0
    inputs = [B2] + ([E] if E is not None else []) + list(A.params) + (list(M.params) if M else [])
    out = custom_op(X, inputs, None, "solve")
    if out.node is not None:
        out.node.backward = lambda g: _solve_backward(g, out, A, M, E, cfg, pa, pm)
    return reshape(out, (n,)) if vector_rhs else out


def _solve_backward(gX, X, A, M, E, cfg, pa, pm):
    G = solve(A.T, gX, M=M.T if M is not None else None, E=E, cfg=cfg)
    grads = [G]
    if E is not None:
        MX = M.mm(X) if M is not None else X
        grads.append(sum(mul(G, MX), axis=0))
    if pa:
        grads.extend(vjp(lambda *p: A.matmat_with(X, p), A.params, -G))
    if pm:
        XE = mul(X, E) if E is not None else zeros(X.shape)
        grads.extend(vjp(lambda *p: M.matmat_with(XE, p), M.params, G))
    return tuple(grads)


# ---------------------------------------------------------------------------
# symeig
# ---------------------------------------------------------------------------
def _fix_signs(U: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def _symeig_dense(A: LinearOperator, M: LinearOperator | None, neig: int, mode: str):
    Ad = A.dense()
    Ad = 0.5 * (Ad + Ad.T)
    if M is None:
        w, U = np.linalg.eigh(Ad)
    else:
        Md = M.dense()
        Md = 0.5 * (Md + Md.T)
        try:
            L = np.linalg.cholesky(Md)
        except np.linalg.LinAlgError:
            raise SolverError("symeig: M is not positive definite") from None
        Linv = np.linalg.inv(L)
        C = Linv @ Ad @ Linv.T
        w, V = np.linalg.eigh(0.5 * (C + C.T))
        U = Linv.T @ V
    if mode == "lowest":
        return w[:neig], U[:, :neig]
    return w[::-1][:neig], U[:, ::-1][:, :neig]


def _block_lanczos(A: LinearOperator, M: LinearOperator | None, neig: int, mode: str, cfg: SolverConfig):
    """Restarted block Lanczos with full reorthogonalization in the M inner product."""
    n = A.shape[0]
    apply_a = _np_apply(A)
    if M is None:
        apply_m = lambda x: x  # noqa: E731
        apply_minv = lambda x: x  # noqa: E731
    else:
        apply_m = _np_apply(M)
        mi_iter = max(cfg.max_iter, 4 * n)

        def apply_minv(x):
            return _cg(apply_m, x, min(cfg.tol, 1e-12), mi_iter)

    def m_orthonormalize(V, Q, MQ):
        # two passes of classical Gram-Schmidt against the basis, then within the block
        for _ in range(2):
            if Q is not None:
                V = V - Q @ (MQ.T @ V)
        cols, mcols = [], []
        for j in range(V.shape[1]):
            v = V[:, j]
            for _ in range(2):
                for u, mu in zip(cols, mcols):
                    v = v - u * (mu @ v)
            mv = apply_m(v)
            nrm2 = v @ mv
            if nrm2 <= 1e-24 * max(1.0, float(V[:, j] @ V[:, j])):
                continue
            nrm = np.sqrt(nrm2)
            cols.append(v / nrm)
            mcols.append(mv / nrm)
        if not cols:
            return None, None
        return np.stack(cols, axis=1), np.stack(mcols, axis=1)

    rng = np.random.default_rng(cfg.seed)
    block = neig
    ncv = min(n, max(2 * neig + 8, 24))
    start = rng.standard_normal((n, block))
    scale = None
    for _ in range(cfg.max_iter):
        Q, MQ = m_orthonormalize(start, None, None)
        AQ = np.stack([apply_a(q) for q in Q.T], axis=1)
        V = Q
        while Q.shape[1] < ncv:
            W = np.stack([apply_minv(av) for av in AQ[:, -V.shape[1]:].T], axis=1)
            V, MV = m_orthonormalize(W, Q, MQ)
            if V is None:
                fresh = rng.standard_normal((n, block))
                V, MV = m_orthonormalize(fresh, Q, MQ)
                if V is None:
                    break
            room = ncv - Q.shape[1]
            V, MV = V[:, :room], MV[:, :room]
            Q = np.concatenate([Q, V], axis=1)
            MQ = np.concatenate([MQ, MV], axis=1)
            AQ = np.concatenate([AQ, np.stack([apply_a(v) for v in V.T], axis=1)], axis=1)
        T = Q.T @ AQ
        theta, S = np.linalg.eigh(0.5 * (T + T.T))
        order = np.arange(len(theta)) if mode == "lowest" else np.arange(len(theta))[::-1]
        sel = order[:neig]
        lam = theta[sel]
        U = Q @ S[:, sel]
        R = AQ @ S[:, sel] - (MQ @ S[:, sel]) * lam
        scale = max(float(np.max(np.abs(theta))), 1e-300)
        if np.max(np.linalg.norm(R, axis=0)) <= cfg.tol * scale or Q.shape[1] >= n:
            return lam, U
        # restart from the wanted Ritz vectors plus the next few
        keep = order[: min(len(order), neig + max(2, neig // 2))]
        start = Q @ S[:, keep]
    raise SolverError("symeig: block Lanczos did not converge",
                      residual=float(np.max(np.linalg.norm(R, axis=0)) / scale))


def symeig(A: LinearOperator, neig: int | None = None, mode: str = "lowest",
           M: LinearOperator | None = None, cfg: SolverConfig | None = None) -> tuple[Tensor, Tensor]:
    """``neig`` lowest or uppermost eigenpairs of ``A U = M U diag(evals)``.

    Returns ``(evals, evecs)``: eigenvalues ascending for ``"lowest"`` and
    descending for ``"uppermost"``; eigenvector columns are M-orthonormal
    with their largest-magnitude entry positive.
    """
    cfg = resolve(cfg)
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise ShapeError(f"symeig: operator must be square, got {A.shape}")
    if M is not None and M.shape != A.shape:
        raise ShapeError(f"symeig: M has shape {M.shape}, A has shape {A.shape}")
    if mode not in ("lowest", "uppermost"):
        raise ValueError(f"symeig: mode must be 'lowest' or 'uppermost', got {mode!r}")
    neig = n if neig is None else int(neig)
    if not 1 <= neig <= n:
        raise ValueError(f"symeig: neig must be in [1, {n}], got {neig}")
    if cfg.debug:
        for op in (A, M):
            if op is not None:
                rep = check_linop(op, symmetric=True)
                if not rep.passed:
                    raise SolverError(f"symeig: operator {op.name} is not a symmetric linear operator: {rep}")

    with no_grad():
        if n <= cfg.dense_max:
            lam, U = _symeig_dense(A, M, neig, mode)
        else:
            lam, U = _block_lanczos(A, M, neig, mode, cfg)
    U = _fix_signs(U)

    pa = len(A.params)
    inputs = list(A.params) + (list(M.params) if M is not None else [])
    out = custom_op(np.concatenate([lam, U.ravel()]), inputs, None, "symeig")
    if out.node is not None:
        out.node.backward = lambda g: _symeig_backward(g, out, A, M, n, neig, pa, cfg)
    evals = index(out, slice(0, neig))
    evecs = reshape(index(out, slice(neig, None)), (n, neig))
    return evals, evecs


def _symeig_backward(g, out, A, M, n, m, pa, cfg):
    lam = index(out, slice(0, m))
    U = reshape(index(out, slice(m, None)), (n, m))
    glam = index(g, slice(0, m))
    gU = reshape(index(g, slice(m, None)), (n, m))
    W = mul(U, glam)
    coef = None

    if gU.node is not None or np.any(gU.data != 0.0):
        lv = lam.data
        gap = np.where(np.eye(m, dtype=bool), np.inf, np.abs(lv[:, None] - lv[None, :]))
        scale = max(1.0, float(np.max(np.abs(lv))))
        if m > 1 and np.min(gap) <= 1e-9 * scale:
            raise DegenerateError("symeig: eigenvector derivative is undefined for repeated eigenvalues")
        UtgU = matmul(transpose(U), gU)
        offdiag = ~np.eye(m, dtype=bool)
        diff = sub(reshape(lam, (m, 1)), reshape(lam, (1, m)))  # lam_k - lam_i
        safe = where(offdiag, diff, 1.0)
        C = where(offdiag, UtgU / safe, 0.0)
        Y = matmul(U, C)
        if m < n:
            MU = M.mm(U) if M is not None else U
            R = sub(gU, matmul(MU, UtgU))
            shift = float(np.max(lv) - np.min(lv)) + scale
            pm = len(M.params) if M is not None else 0

            def deflated(x, *p):
                pa_, pm_, u = p[:pa], p[pa:pa + pm], p[-1]
                mu = M.matmat_with(u, pm_) if M is not None else u
                ax = A.matvec_with(x, pa_)
                return ax + matmul(mu, matmul(transpose(mu), x)) * shift

            params = list(A.params) + (list(M.params) if M is not None else []) + [U]
            Ad = LinearOperator(deflated, (n, n), params, symmetric=True, name="deflated")
            V = solve(Ad, R, M=M, E=lam, cfg=cfg)
            V = sub(V, matmul(U, matmul(transpose(MU), V)))
            Y = Y + V
        W = sub(W, Y)
        coef = sum(mul(U, gU), axis=0)

    grads = []
    if pa:
        grads.extend(vjp(lambda *p: A.matmat_with(U, p), A.params, W))
    if M is not None and M.params:
        cot = mul(W, lam)
        if coef is not None:
            cot = cot + mul(U, coef) * 0.5
        grads.extend(vjp(lambda *p: M.matmat_with(U, p), M.params, -cot))
    return tuple(grads)
