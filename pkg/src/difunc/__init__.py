from .errors import ConvergenceError, DegenerateError, ShapeError, SolverError
from .tensor import (
    ParamFunc, Tensor, abs, add, as_tensor, broadcast_to, concat, cos, custom_op, div, dot,
    enable_grad, exp, eye, grad, identity, index, is_grad_enabled, jacobian, log, matmul, mean,
    mul, neg, no_grad, norm, ones, pow, reshape, set_grad_enabled, sigmoid, sin, softplus, sqrt,
    stack, sub, sum, sum_to, tanh, tensor, transpose, vjp, where, zeros,
)
from .gradcheck import GradcheckReport, gradcheck, gradgradcheck
from .config import SolverConfig
from .linop import LinearOperator, LinopReport, check_linop, solve, symeig
from .optimize import AdamState, adam_step, equilibrium, minimize, rootfinder
from .integrate import mcquad, quad, solve_ivp, squad
from .interp import Interp1D, interp1d
