import numpy as np
import pytest

import difunc as d
from difunc import ConvergenceError, SolverConfig, SolverError, adam_step, equilibrium, minimize, rootfinder
from oracles import DOTTIE


def sqrt_minus(x, a):
    return d.sqrt(x) - a


# -- rootfinder -------------------------------------------------------------------
def test_root_of_sqrt_minus_one(tight):
    x = rootfinder(sqrt_minus, 0.1, (1.0,), tight)
    assert x.item() == pytest.approx(1.0, abs=1e-12)


def test_root_gradient_sqrt_minus_two(tight):
    a = d.tensor(2.0, requires_grad=True)
    x = rootfinder(sqrt_minus, 0.1, (a,), tight)
    assert x.item() == pytest.approx(4.0, abs=1e-12)
    (g,) = d.grad(x, [a], create_graph=True)
    assert g.item() == pytest.approx(4.0, abs=1e-10)
    assert d.grad(g, [a])[0].item() == pytest.approx(2.0, abs=1e-9)


@pytest.mark.parametrize("y0", [-3.0, 0.0, 2.5])
def test_linear_root_is_zero(y0):
    assert rootfinder(lambda y: y * 1.0, y0).item() == pytest.approx(0.0, abs=1e-12)


def test_initial_guess_gets_no_gradient(tight):
    a = d.tensor(2.0, requires_grad=True)
    y0 = d.tensor(0.1, requires_grad=True)
    x = rootfinder(sqrt_minus, y0, (a,), tight)
    assert d.grad(x, [y0])[0].item() == 0.0


def test_vector_root_residual_postcondition():
    cfg = SolverConfig(tol=1e-11)
    theta = d.tensor([1.0, 2.0, -0.5])

    def f(y, t):
        return y ** 3 + y - t

    y = rootfinder(f, d.zeros(3), (theta,), cfg)
    assert np.max(np.abs(f(y, theta).numpy())) <= cfg.tol


def test_gradient_independent_of_iteration_cap():
    grads = []
    for cap in (50, 500):
        a = d.tensor(1.7, requires_grad=True)
        x = rootfinder(lambda x, a: d.exp(x) + x - a, 0.0, (a,), SolverConfig(tol=1e-12, max_iter=cap))
        grads.append(d.grad(x, [a])[0].item())
    assert abs(grads[0] - grads[1]) <= 1e-9


def test_non_convergence_reports_residual():
    with pytest.raises(ConvergenceError) as exc:
        rootfinder(lambda y: y * y + 1.0, 0.5, cfg=SolverConfig(max_iter=5))
    assert exc.value.residual is not None and exc.value.residual > 0


def test_singular_jacobian_in_backward():
    a = d.tensor(0.0, requires_grad=True)
    y = rootfinder(lambda y, a: y ** 3 - a, 0.0, (a,))
    with pytest.raises(SolverError):
        d.grad(y, [a])


# -- equilibrium ----------------------------------------------------------------
def test_equilibrium_half():
    assert equilibrium(lambda y: 0.5 * y, 3.0).item() == pytest.approx(0.0, abs=1e-12)


def test_equilibrium_constant():
    a = d.tensor(1.5, requires_grad=True)
    y = equilibrium(lambda y, a: 0.0 * y + a, 0.0, (a,))
    assert y.item() == pytest.approx(1.5)
    assert d.grad(y, [a])[0].item() == pytest.approx(1.0, abs=1e-12)


def test_equilibrium_cosine(tight):
    assert equilibrium(d.cos, 0.5, cfg=tight).item() == pytest.approx(DOTTIE, abs=1e-12)


def test_equilibrium_cosine_gradient(tight):
    a = d.tensor(1.0, requires_grad=True)
    y = equilibrium(lambda y, a: a * d.cos(y), 0.5, (a,), tight)
    # y = a cos y  =>  dy/da = cos y / (1 + a sin y)
    expected = np.cos(DOTTIE) / (1.0 + np.sin(DOTTIE))
    assert d.grad(y, [a])[0].item() == pytest.approx(expected, rel=1e-10)


# -- minimize ---------------------------------------------------------------------
def test_minimize_square(tight):
    theta = d.tensor(3.0, requires_grad=True)
    y = minimize(lambda y, t: (y - t) ** 2, 0.0, (theta,), tight)
    assert y.item() == pytest.approx(3.0, abs=1e-12)
    assert d.grad(y, [theta])[0].item() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("method", ["newton", "gd"])
def test_minimize_quadratic_closed_form(method):
    cfg = SolverConfig(tol=1e-10, method=method, max_iter=5000)
    diag, lin = d.tensor([1.0, 2.0]), d.tensor([2.0, 2.0])
    y = minimize(lambda y: d.sum(diag * y * y) - d.dot(lin, y), d.zeros(2), cfg=cfg)
    np.testing.assert_allclose(y.numpy(), [1.0, 0.5], atol=1e-8)


def test_minimize_cosh(tight):
    theta = d.tensor(1.5, requires_grad=True)
    y = minimize(lambda y, t: d.exp(y - t) + d.exp(t - y), 0.0, (theta,), tight)
    assert y.item() == pytest.approx(1.5, abs=1e-12)
    assert d.grad(y, [theta])[0].item() == pytest.approx(1.0, abs=1e-10)


def test_minimize_gradient_postcondition():
    cfg = SolverConfig(tol=1e-9)
    y = minimize(lambda y: d.sum(d.exp(y) - 2.0 * y) + y[0] * y[1] * 0.1, d.zeros(2), cfg=cfg)
    (g,) = d.grad(d.sum(d.exp(y) - 2.0 * y) + y[0] * y[1] * 0.1, [y])
    assert np.max(np.abs(g.numpy())) <= cfg.tol * 10


def test_minimize_unknown_method():
    with pytest.raises(ValueError):
        minimize(lambda y: y * y, 1.0, cfg=SolverConfig(method="simplex"))


def test_minimize_non_scalar_objective():
    with pytest.raises(ValueError):
        minimize(lambda y: y * y, d.ones(2))


def test_minimize_non_convergence():
    with pytest.raises(SolverError):
        minimize(lambda y: -y * y * y, 1.0, cfg=SolverConfig(max_iter=3))


# -- adam -----------------------------------------------------------------------
def test_adam_zero_gradient_keeps_params():
    p = d.tensor([1.0, -2.0])
    (out,), _ = adam_step([p], [np.zeros(2)], lr=0.1)
    np.testing.assert_array_equal(out.numpy(), p.numpy())


def test_adam_first_step_is_lr():
    (out,), state = adam_step([d.tensor(1.0)], [1.0], lr=0.1)
    assert out.item() == pytest.approx(0.9, abs=1e-8)
    assert state.step == 1 and out.requires_grad


def test_adam_is_deterministic():
    p, g = d.tensor([0.3, 0.7]), np.array([0.5, -1.0])
    (a,), s1 = adam_step([p], [g])
    (b,), s2 = adam_step([p], [g])
    np.testing.assert_array_equal(a.numpy(), b.numpy())
    np.testing.assert_array_equal(s1.v[0], s2.v[0])


def test_adam_rejects_non_finite():
    with pytest.raises(ValueError):
        adam_step([d.tensor(1.0)], [np.nan])
    with pytest.raises(ValueError):
        adam_step([d.tensor(1.0)], [])
