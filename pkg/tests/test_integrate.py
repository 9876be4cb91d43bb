import numpy as np
import pytest

import difunc as d
from difunc import ConvergenceError, ShapeError, SolverConfig, SolverError, mcquad, quad, solve_ivp, squad
from difunc.demos.gradcheck_suite import ivp_cases
from difunc.demos.md import MDConfig, dynamics, energy, make_scene
from difunc.integrate import _gl_rule
from oracles import E_INV


def batch_se(x, batches=50):
    """Standard error of the mean of a correlated chain by batch means."""
    means = np.asarray(x)[: len(x) // batches * batches].reshape(batches, -1).mean(axis=1)
    return means.std(ddof=1) / np.sqrt(batches)


# -- quad -----------------------------------------------------------------------
def test_quad_linear():
    assert quad(lambda t: t, 0.0, 1.0).item() == pytest.approx(0.5, abs=1e-14)


def test_quad_sine():
    assert quad(d.sin, 0.0, np.pi).item() == pytest.approx(2.0, abs=1e-12)


def test_quad_parameter_gradient():
    theta = d.tensor(1.0, requires_grad=True)
    y = quad(lambda t, th: th * t * t, 0.0, 1.0, (theta,))
    assert d.grad(y, [theta])[0].item() == pytest.approx(1.0 / 3.0, abs=1e-14)


def test_quad_bound_gradients():
    t0 = d.tensor(0.2, requires_grad=True)
    t1 = d.tensor(1.1, requires_grad=True)
    g0, g1 = d.grad(quad(d.exp, t0, t1), [t0, t1])
    assert g0.item() == pytest.approx(-np.exp(0.2), rel=1e-14)
    assert g1.item() == pytest.approx(np.exp(1.1), rel=1e-14)


def test_quad_vjp_matches_discretized_sum():
    # loose tolerance: the first bisection is accepted, so the nodes are GL8 on each half
    cfg = SolverConfig(rtol=1e-3, atol=1e-3)
    f = lambda t, a, b: d.exp(a * t) * d.sin(b * t)
    a = d.tensor(0.7, requires_grad=True)
    b = d.tensor(2.3, requires_grad=True)
    ga, gb = d.grad(quad(f, 0.0, 1.0, (a, b), cfg), [a, b])

    halves = [_gl_rule(0.0, 0.5), _gl_rule(0.5, 1.0)]
    u = np.concatenate([h[0] for h in halves])
    w = np.concatenate([h[1] for h in halves])
    discrete = d.sum(d.tensor(w) * f(d.tensor(u), a, b))
    ra, rb = d.grad(discrete, [a, b])
    assert ga.item() == pytest.approx(ra.item(), rel=1e-7)
    assert gb.item() == pytest.approx(rb.item(), rel=1e-7)


def test_quad_vector_integrand():
    out = quad(lambda t: d.stack([t, t * t]), 0.0, 2.0).numpy()
    np.testing.assert_allclose(out, [2.0, 8.0 / 3.0], rtol=1e-14)


def test_quad_reversed_bounds():
    assert quad(lambda t: t, 1.0, 0.0).item() == pytest.approx(-0.5, abs=1e-14)


def test_quad_subdivision_cap():
    with pytest.raises(ConvergenceError):
        quad(lambda t: d.sqrt(d.abs(t - 0.3)), 0.0, 1.0, cfg=SolverConfig(rtol=1e-14, atol=0.0, max_iter=3))


def test_quad_rejects_bad_bounds():
    with pytest.raises(ShapeError):
        quad(lambda t: t, d.zeros(2), 1.0)
    with pytest.raises(ValueError):
        quad(lambda t: t, 0.0, np.inf)


# -- solve_ivp ------------------------------------------------------------------
def test_ivp_constant_state():
    y0 = d.tensor([1.0, -2.0], requires_grad=True)
    y1 = solve_ivp(lambda t, y: y * 0.0, 0.0, 1.0, y0)
    np.testing.assert_array_equal(y1.numpy(), y0.numpy())
    np.testing.assert_allclose(d.jacobian(lambda y: solve_ivp(lambda t, y: y * 0.0, 0.0, 1.0, y), [y0]),
                               np.eye(2), atol=1e-12)


def test_ivp_exponential_decay():
    y0 = d.tensor(1.0, requires_grad=True)
    y1 = solve_ivp(lambda t, y: -y, 0.0, 1.0, y0)
    assert abs(y1.item() - E_INV) <= 1e-6
    assert abs(d.grad(y1, [y0])[0].item() - E_INV) <= 1e-5


def test_ivp_parameter_gradient():
    theta = d.tensor(0.8, requires_grad=True)
    y1 = solve_ivp(lambda t, y, th: th + 0.0 * y, 0.0, 1.0, 0.0, (theta,))
    assert y1.item() == pytest.approx(0.8, abs=1e-12)
    assert d.grad(y1, [theta])[0].item() == pytest.approx(1.0, abs=1e-10)


def test_ivp_bound_gradients(tight):
    t0 = d.tensor(0.0, requires_grad=True)
    t1 = d.tensor(1.0, requires_grad=True)
    y1 = solve_ivp(lambda t, y: -y, t0, t1, 1.0, cfg=tight)
    g0, g1 = d.grad(y1, [t0, t1])
    # y1 = exp(-(t1 - t0))
    assert g0.item() == pytest.approx(E_INV, rel=1e-8)
    assert g1.item() == pytest.approx(-E_INV, rel=1e-8)


def test_ivp_t_eval_stacks_states(tight):
    out = solve_ivp(lambda t, y: -y, 0.0, 1.0, 1.0, t_eval=[0.25, 0.5, 1.0], cfg=tight).numpy()
    np.testing.assert_allclose(out, np.exp(-np.array([0.25, 0.5, 1.0])), rtol=1e-9)


def test_ivp_t_eval_validation():
    with pytest.raises(ValueError):
        solve_ivp(lambda t, y: -y, 0.0, 1.0, 1.0, t_eval=[])
    with pytest.raises(ValueError):
        solve_ivp(lambda t, y: -y, 0.0, 1.0, 1.0, t_eval=[0.5, 0.2])
    with pytest.raises(ValueError):
        solve_ivp(lambda t, y: -y, 0.0, 1.0, 1.0, t_eval=[1.5])


@pytest.mark.parametrize("case", ivp_cases(), ids=lambda c: c.name)
def test_ivp_adjoint_matches_finite_differences(case):
    rep = d.gradcheck(case.fn, list(case.inputs), eps=1e-6, rtol=1e-4, atol=1e-7)
    assert rep.passed, rep


def test_ivp_energy_drift():
    cfg = MDConfig()
    x0, targets = make_scene(cfg)
    y0 = np.stack([x0, targets - x0])
    y1 = solve_ivp(dynamics(cfg), 0.0, 1.0, y0, cfg=SolverConfig()).numpy()
    e0, e1 = energy(y0, cfg.a), energy(y1, cfg.a)
    assert abs(e1 - e0) <= 1e-4 * abs(e0)


def test_ivp_reversibility():
    cfg = MDConfig()
    x0, targets = make_scene(cfg)
    y0 = np.stack([x0, 0.5 * (targets - x0)])
    y1 = solve_ivp(dynamics(cfg), 0.0, 1.0, y0)
    back = solve_ivp(dynamics(cfg), 1.0, 0.0, y1).numpy()
    np.testing.assert_allclose(back, y0, atol=1e-6)


def test_ivp_step_underflow():
    # y' = y^2 blows up at t = 1
    with pytest.raises(SolverError):
        solve_ivp(lambda t, y: y * y, 0.0, 2.0, 1.0)


def test_ivp_step_cap():
    with pytest.raises(SolverError):
        solve_ivp(lambda t, y: -50.0 * y, 0.0, 10.0, 1.0, cfg=SolverConfig(max_steps=5))


def test_ivp_shape_mismatch():
    with pytest.raises(ShapeError):
        solve_ivp(lambda t, y: d.ones(3), 0.0, 1.0, d.ones(2))


# -- mcquad ---------------------------------------------------------------------
def normal_logp(x, mu):
    return -0.5 * (x - mu) ** 2


def test_mcquad_normal_mean_and_score_gradient():
    mu = d.tensor(2.0, requires_grad=True)
    y = mcquad(lambda x: x, normal_logp, 2.0, pparams=(mu,), n_samples=10_000, n_burnin=1000,
               step_size=2.4, seed=0)
    (g,) = d.grad(y, [mu])

    from difunc.integrate import _metropolis
    xs = _metropolis(lambda x: float(-0.5 * (x - 2.0) ** 2), np.array(2.0), 10_000, 1000, 2.4, 0)
    assert y.item() == pytest.approx(np.mean(xs), abs=1e-12)
    # per-sample contributions to the score estimator: (x - y) * (x - mu)
    score = (xs - np.mean(xs)) * (xs - 2.0)
    assert abs(y.item() - 2.0) <= 5 * batch_se(xs)
    assert abs(g.item() - 1.0) <= 5 * batch_se(score)
    assert g.item() == pytest.approx(np.mean(score), rel=1e-10)


def test_mcquad_constant_integrand():
    mu = d.tensor(0.5, requires_grad=True)
    c = 3.25
    y = mcquad(lambda x: 0.0 * x + c, normal_logp, 0.0, pparams=(mu,), n_samples=500, n_burnin=50)
    assert y.item() == c
    assert d.grad(y, [mu])[0].item() == 0.0


def test_mcquad_integrand_parameter_gradient():
    theta = d.tensor(1.5, requires_grad=True)
    y = mcquad(lambda x, th: th * x * x, lambda x: -0.5 * x * x, 0.0, fparams=(theta,),
               n_samples=2000, n_burnin=200, step_size=2.4)
    (g,) = d.grad(y, [theta])
    assert g.item() == pytest.approx(y.item() / 1.5, rel=1e-12)


def test_mcquad_is_deterministic():
    run = lambda: mcquad(lambda x: d.sin(x), lambda x: -0.5 * x * x, 0.0, n_samples=300, seed=7).item()
    assert run() == run()


def test_mcquad_errors():
    with pytest.raises(SolverError), np.errstate(invalid="ignore"):
        mcquad(lambda x: x, lambda x: d.log(x - 1.0), 0.0)
    with pytest.raises(SolverError):
        mcquad(lambda x: x, lambda x: -1e6 * (x - 0.0) ** 2, 0.0, step_size=100.0, n_burnin=20)
    with pytest.raises(ValueError):
        mcquad(lambda x: x, normal_logp, 0.0, pparams=(0.0,), n_samples=0)


# -- squad ----------------------------------------------------------------------
def test_squad_linear_and_quadratic_exact():
    x = np.linspace(0.0, 1.0, 11)
    assert squad(d.tensor(x), x).item() == pytest.approx(0.5, abs=1e-15)
    assert squad(d.tensor(x * x), x).item() == pytest.approx(1.0 / 3.0, abs=1e-15)


def test_squad_two_nodes_is_trapezoid():
    assert squad(d.tensor([1.0, 3.0]), np.array([0.0, 2.0])).item() == 4.0


def test_squad_even_interval_tail():
    # 4 intervals + tail: Simpson on the first 8, trapezoid on the last one
    x = np.linspace(0.0, 1.0, 10)
    assert squad(d.tensor(x * x), x).item() == pytest.approx(1.0 / 3.0, abs=1e-2)


def test_squad_cumulative():
    x = np.array([0.0, 0.5, 1.5, 2.0])
    out = squad(d.tensor(2.0 * x), x, cumulative=True).numpy()
    np.testing.assert_allclose(out, x * x, atol=1e-14)


def test_squad_axis():
    x = np.linspace(0.0, 1.0, 5)
    y = np.stack([x, 2 * x, 3 * x])
    np.testing.assert_allclose(squad(d.tensor(y), x, axis=1).numpy(), [0.5, 1.0, 1.5])
    np.testing.assert_allclose(squad(d.tensor(y.T), x, axis=0).numpy(), [0.5, 1.0, 1.5])


def test_squad_node_errors():
    with pytest.raises(ValueError):
        squad(d.ones(3), np.array([0.0, 2.0, 1.0]))
    with pytest.raises(ValueError):
        squad(d.ones(3), np.array([0.0, 1.0, 1.0]))
    with pytest.raises(ValueError):
        squad(d.ones(1), np.array([0.0]))
    with pytest.raises(ShapeError):
        squad(d.ones(4), np.array([0.0, 1.0, 2.0]))
