import math

import numpy as np
import pytest

from driftcast.blocks import init_gnn, init_mlp
from driftcast.dde import (
    EvolutionParams,
    HistoryBuffer,
    HistoryUnderflowError,
    SolverDivergenceError,
    evolution_f,
    evolution_rhs,
    rk4_solve,
    rk4_step,
    solve_dde,
)
from driftcast.gradcheck import fd_check_params
from driftcast.graphs import Graph
from driftcast.tensor import Tensor, mean, mul, scale, square


def scalar(v):
    return Tensor(np.asarray([[float(v)]]))


# ---------------------------------------------------------------------------
# history buffer


def test_query_at_knot_returns_exact_state():
    states = [scalar(1.0), scalar(5.0), scalar(-2.0)]
    buf = HistoryBuffer([0.0, 1.0, 2.0], states)
    for t, s in zip([0.0, 1.0, 2.0], states):
        assert buf.query(t) is s


def test_constant_between_knots_with_zero_derivatives():
    buf = HistoryBuffer(
        [0.0, 1.0],
        [scalar(3.0), scalar(3.0)],
        [scalar(0.0), scalar(0.0)],
    )
    for t in np.linspace(0.0, 1.0, 11):
        assert buf.query(t).data[0, 0] == pytest.approx(3.0, abs=1e-15)


def test_cubic_hermite_reproduces_cubic_exactly():
    # knots sampled from t^3 with derivative 3 t^2: midpoint error 0
    times = [0.0, 1.0, 2.0]
    buf = HistoryBuffer(
        times,
        [scalar(t**3) for t in times],
        [scalar(3 * t**2) for t in times],
    )
    for t in (0.25, 0.5, 1.5, 1.75):
        assert buf.query(t).data[0, 0] == pytest.approx(t**3, abs=1e-13)


def test_linear_interpolation_without_derivatives():
    buf = HistoryBuffer([0.0, 2.0], [scalar(0.0), scalar(4.0)])
    assert buf.query(1.0).data[0, 0] == pytest.approx(2.0, abs=1e-15)


def test_query_outside_span_raises():
    buf = HistoryBuffer([0.0, 1.0], [scalar(0.0), scalar(1.0)])
    with pytest.raises(HistoryUnderflowError, match="outside recorded span"):
        buf.query(-0.5)
    with pytest.raises(HistoryUnderflowError):
        buf.query(1.5)


def test_appends_never_change_previous_query_results():
    buf = HistoryBuffer([0.0, 1.0], [scalar(0.0), scalar(2.0)])
    before = [buf.query(t).data.copy() for t in (0.25, 0.5, 0.9)]
    buf.append(2.0, scalar(10.0), scalar(1.0))
    buf.append(3.5, scalar(-4.0), scalar(0.5))
    after = [buf.query(t).data.copy() for t in (0.25, 0.5, 0.9)]
    for b, a in zip(before, after):
        assert np.array_equal(b, a)


def test_append_requires_increasing_time():
    buf = HistoryBuffer([0.0, 1.0], [scalar(0.0), scalar(1.0)])
    with pytest.raises(ValueError, match="not after"):
        buf.append(0.5, scalar(9.0))


# ---------------------------------------------------------------------------
# RK4 stepping


def test_rk4_zero_dynamics_is_identity():
    f = lambda t, y, hist, p=0: scale(y, 0.0)
    y0 = Tensor(np.random.default_rng(0).normal(size=(3, 2)))
    out = rk4_step(f, 0.0, y0, 0.25, None)
    assert np.array_equal(out.data, y0.data)


def test_rk4_exponential_ten_steps():
    f = lambda t, y, hist, p=0: y
    y = scalar(1.0)
    for k in range(10):
        y = rk4_step(f, k * 0.1, y, 0.1, None)
    # exact discrete solution: the classical one-step growth factor, powered
    z = 0.1
    growth = 1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24
    assert y.data[0, 0] == pytest.approx(growth**10, abs=1e-12)
    assert y.data[0, 0] == pytest.approx(math.e, abs=3e-6)


def test_rk4_fourth_order_error_ratio():
    f = lambda t, y, hist, p=0: y

    def global_error(n_steps):
        y = scalar(1.0)
        dt = 1.0 / n_steps
        for k in range(n_steps):
            y = rk4_step(f, k * dt, y, dt, None)
        return abs(y.data[0, 0] - math.e)

    ratio = global_error(10) / global_error(20)
    assert 12.0 <= ratio <= 20.0


def test_rk4_rejects_nonpositive_dt():
    with pytest.raises(ValueError, match="dt"):
        rk4_step(lambda t, y, h, p=0: y, 0.0, scalar(1.0), 0.0, None)


# ---------------------------------------------------------------------------
# method-of-steps solving


def delayed_negative_feedback(t, y, hist, interval):
    return scale(hist.query(t - 1.0), -1.0)


def unit_history():
    return HistoryBuffer([-1.0, 0.0], [scalar(1.0), scalar(1.0)])


def test_solve_dde_zero_rhs_keeps_initial():
    f = lambda t, y, hist, p: scale(y, 0.0)
    init = Tensor(np.random.default_rng(1).normal(size=(4, 2)))
    hist = HistoryBuffer([-1.0, 0.0], [Tensor(init.data.copy()), init])
    out = solve_dde(f, init, hist, horizon=3, dt_out=1.0, substeps=4)
    for state in out:
        assert np.array_equal(state.data, init.data)


def test_solve_dde_analytic_delayed_feedback():
    # dy/dt = -y(t-1), y == 1 on [-1, 0]:
    # y(t) = 1 - t on [0, 1], then t^2/2 - 2t + 3/2 on [1, 2]
    out = solve_dde(delayed_negative_feedback, scalar(1.0), unit_history(),
                    horizon=2, dt_out=1.0, substeps=8)
    assert out[0].data[0, 0] == pytest.approx(0.0, abs=1e-6)
    assert out[1].data[0, 0] == pytest.approx(-0.5, abs=1e-6)


def test_solve_dde_matches_dense_quadrature_of_known_solution():
    # third interval of the same problem, from the piecewise closed form:
    # y(3) = y(2) - int_1^2 (u^2/2 - 2u + 3/2) du  (u = t - 1)
    out = solve_dde(delayed_negative_feedback, scalar(1.0), unit_history(),
                    horizon=3, dt_out=1.0, substeps=8)
    integral = (8.0 / 6.0 - 4.0 + 3.0) - (1.0 / 6.0 - 1.0 + 1.5)
    y3 = -0.5 - integral
    assert out[2].data[0, 0] == pytest.approx(y3, abs=1e-6)


def test_solve_dde_convergence_at_least_fourth_order():
    # smooth nonlinear delayed rhs; self-convergence against substeps=64
    def f(t, y, hist, p):
        delayed = hist.query(t - 1.0)
        return scale(mul(delayed, scale(square(y), 0.1) + 1.0), -1.0)

    def run(substeps):
        out = solve_dde(f, scalar(1.0), unit_history(), horizon=2,
                        dt_out=1.0, substeps=substeps)
        return out[-1].data[0, 0]

    reference = run(64)
    errors = [abs(run(s) - reference) for s in (2, 4, 8)]
    assert errors[0] / errors[1] > 10.0
    assert errors[1] / errors[2] > 10.0


def test_solve_dde_underflow_when_history_too_short():
    f = lambda t, y, hist, p: scale(hist.query(t - 5.0), -1.0)
    with pytest.raises(HistoryUnderflowError):
        solve_dde(f, scalar(1.0), unit_history(), horizon=1, dt_out=1.0, substeps=2)


def test_solve_dde_reports_divergence_time():
    f = lambda t, y, hist, p: scale(square(y), 1e6)
    with pytest.raises(SolverDivergenceError) as exc:
        solve_dde(f, scalar(10.0), unit_history(), horizon=5, dt_out=1.0, substeps=4)
    assert exc.value.time > 0.0


def test_solve_dde_validates_arguments():
    with pytest.raises(ValueError, match="horizon"):
        solve_dde(delayed_negative_feedback, scalar(1.0), unit_history(),
                  horizon=0, dt_out=1.0)
    with pytest.raises(ValueError, match="substeps"):
        solve_dde(delayed_negative_feedback, scalar(1.0), unit_history(),
                  horizon=1, dt_out=1.0, substeps=0)
    with pytest.raises(ValueError, match="initial state"):
        solve_dde(delayed_negative_feedback, scalar(9.0), unit_history(),
                  horizon=1, dt_out=1.0)


# ---------------------------------------------------------------------------
# reduction to a plain ODE solve


def make_evolution(rng, n, d, zero_advection=False):
    params = EvolutionParams(
        diffusion_coeff=0.1,
        tau=1.0,
        gnn_diff=init_gnn(rng, 2, d, d),
        gnn_adv=init_gnn(rng, 2, d, d),
        source_mlp=init_mlp(rng, [d + 2, d, d]),
    )
    if zero_advection:
        for w in params.gnn_adv.hop_weights:
            w.data = np.zeros_like(w.data)
        params.gnn_adv.bias.data = np.zeros_like(params.gnn_adv.bias.data)
    return params


def test_node_reduction_bit_for_bit():
    rng = np.random.default_rng(3)
    n, d, horizon, substeps = 4, 3, 3, 4
    params = make_evolution(rng, n, d, zero_advection=True)
    a_diff = Tensor(rng.random((n, n)) * 0.4)
    a_adv = Tensor((rng.random((n, n)) < 0.4).astype(float))
    m = Tensor(rng.normal(size=(n, 2)))
    init = Tensor(rng.normal(size=(n, d)))

    def f_dde(t, y, hist, p):
        return evolution_f(t, y, hist, a_diff, a_adv, m, params)

    def f_ode(t, y, hist, p):
        # delay-free: the (zeroed) advection term sees the current state
        return evolution_rhs(y, y, a_diff, a_adv, m, params)

    hist = HistoryBuffer([-1.0, 0.0], [Tensor(init.data.copy()), init])
    dde_states = solve_dde(f_dde, init, hist, horizon, 1.0, substeps)
    ode_states = rk4_solve(f_ode, init, 0.0, 1.0 / substeps, horizon * substeps)
    for p in range(horizon):
        a = dde_states[p].data
        b = ode_states[(p + 1) * substeps - 1].data
        assert np.array_equal(a, b), f"interval {p} differs"


def test_evolution_f_term_by_term():
    rng = np.random.default_rng(4)
    n, d = 4, 3
    params = make_evolution(rng, n, d)
    a_diff = rng.random((n, n)) * 0.5
    a_adv = (rng.random((n, n)) < 0.5).astype(float)
    m = rng.normal(size=(n, 2))
    h_now = rng.normal(size=(n, d))
    h_delay = rng.normal(size=(n, d))
    hist = HistoryBuffer([-1.0, 0.0], [Tensor(h_delay), Tensor(h_now)])

    out = evolution_f(0.0, Tensor(h_now), hist, Tensor(a_diff), Tensor(a_adv),
                      Tensor(m), params)

    def np_gnn(adj, h, p):
        acc = h @ p.hop_weights[0].data
        prop = h
        for w in p.hop_weights[1:]:
            prop = adj @ prop
            acc += prop @ w.data
        return acc + p.bias.data

    diff = 0.1 * np_gnn(a_diff, h_now, params.gnn_diff)
    adv = np_gnn(a_adv, h_delay, params.gnn_adv)
    cat = np.concatenate([h_now, m], axis=1)
    hidden = np.maximum(cat @ params.source_mlp.weights[0].data
                        + params.source_mlp.biases[0].data, 0.0)
    src = hidden @ params.source_mlp.weights[1].data + params.source_mlp.biases[1].data
    assert np.allclose(out.data, diff + adv + src, atol=1e-12)


def test_evolution_ablations():
    rng = np.random.default_rng(5)
    n, d = 3, 2
    params = make_evolution(rng, n, d, zero_advection=True)
    # zero the source network too: rhs reduces to pure scaled diffusion
    for w, b in zip(params.source_mlp.weights, params.source_mlp.biases):
        w.data = np.zeros_like(w.data)
        b.data = np.zeros_like(b.data)
    a_diff = rng.random((n, n))
    h = rng.normal(size=(n, d))
    hist = HistoryBuffer([-1.0, 0.0], [Tensor(h.copy()), Tensor(h.copy())])
    out = evolution_f(0.0, Tensor(h), hist, Tensor(a_diff), Tensor(np.zeros((n, n))),
                      Tensor(rng.normal(size=(n, 2))), params)

    def np_gnn(adj, hh, p):
        acc = hh @ p.hop_weights[0].data
        prop = hh
        for w in p.hop_weights[1:]:
            prop = adj @ prop
            acc += prop @ w.data
        return acc + p.bias.data

    assert np.allclose(out.data, 0.1 * np_gnn(a_diff, h, params.gnn_diff), atol=1e-14)

    # constant source network: rhs == that constant everywhere
    params2 = make_evolution(rng, n, d, zero_advection=True)
    for w in params2.gnn_diff.hop_weights:
        w.data = np.zeros_like(w.data)
    params2.gnn_diff.bias.data = np.zeros_like(params2.gnn_diff.bias.data)
    for w in params2.source_mlp.weights:
        w.data = np.zeros_like(w.data)
    params2.source_mlp.biases[0].data = np.zeros_like(params2.source_mlp.biases[0].data)
    c = rng.normal(size=d)
    params2.source_mlp.biases[1].data = c.copy()
    out2 = evolution_f(0.0, Tensor(h), hist, Tensor(a_diff), Tensor(np.zeros((n, n))),
                       Tensor(rng.normal(size=(n, 2))), params2)
    assert np.allclose(out2.data, np.tile(c, (n, 1)), atol=1e-14)


def test_solver_gradients_through_unrolled_solve():
    rng = np.random.default_rng(6)
    n, d = 4, 2
    params = make_evolution(rng, n, d)
    a_diff = Tensor(rng.random((n, n)) * 0.4)
    a_adv = Tensor((rng.random((n, n)) < 0.5).astype(float))
    m = Tensor(rng.normal(size=(n, 2)))
    init_arr = rng.normal(size=(n, d))
    hist_arr = rng.normal(size=(n, d))

    def loss_fn():
        init = Tensor(init_arr)
        hist = HistoryBuffer([-1.0, 0.0], [Tensor(hist_arr), init])

        def f(t, y, h, p):
            return evolution_f(t, y, h, a_diff, a_adv, m, params)

        out = solve_dde(f, init, hist, horizon=2, dt_out=1.0, substeps=2)
        return mean(square(out[-1]))

    errs = fd_check_params(loss_fn, list(params.named("evolution")), eps=1e-5)
    assert max(errs.values()) < 1e-4, errs
