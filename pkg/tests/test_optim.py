import math

import numpy as np
import pytest
import scipy.linalg
from scipy.optimize import rosen, rosen_der

from lgnet.optim import (
    FALLBACK_STEP,
    LBFGSState,
    OptimizerConfig,
    adam_step,
    lbfgs_step,
    minimize_lbfgs,
    strong_wolfe,
    two_loop,
)


def quadratic(A, b):
    def fun(x):
        return 0.5 * x @ A @ x - b @ x, A @ x - b
    return fun


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(kind="sgd")
    with pytest.raises(ValueError):
        OptimizerConfig(history=0)
    with pytest.raises(ValueError):
        OptimizerConfig(kind="adam", lr=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig(epochs=-1)


def test_two_loop_matches_dense_bfgs_recursion():
    rng = np.random.default_rng(0)
    n = 6
    A = rng.standard_normal((n, n))
    A = A @ A.T + n * np.eye(n)
    s_hist = [rng.standard_normal(n) for _ in range(4)]
    y_hist = [A @ s for s in s_hist]
    g = rng.standard_normal(n)
    s, y = s_hist[-1], y_hist[-1]
    H = (s @ y) / (y @ y) * np.eye(n)
    for s, y in zip(s_hist, y_hist):
        rho = 1.0 / (y @ s)
        V = np.eye(n) - rho * np.outer(y, s)
        H = V.T @ H @ V + rho * np.outer(s, s)
    assert np.allclose(two_loop(g, s_hist, y_hist), H @ g, atol=1e-14)
    assert np.array_equal(two_loop(g, [], []), g)


def iterations_to(fun, x, tol, limit, config=None):
    state = None
    for it in range(1, limit + 1):
        x, state = lbfgs_step(x, fun, state, config)
        if np.linalg.norm(state.g) <= tol:
            return it, x, state
    return None, x, state


@pytest.mark.parametrize("b", [np.ones(5), np.arange(1.0, 6.0), np.array([0.3, -1.2, 2.0, 0.05, -0.7])])
def test_five_dim_quadratic_converges_in_ten_iterations(b):
    A = np.eye(5) + scipy.linalg.hilbert(5)
    it, x, state = iterations_to(quadratic(A, b), np.zeros(5), 1e-10, 10)
    assert it is not None and it <= 10
    assert np.allclose(x, np.linalg.solve(A, b), atol=1e-10)


def test_random_spd_quadratics_converge():
    # inexact Wolfe steps mean no finite termination; moderate conditioning needs a few more iterations
    rng = np.random.default_rng(1)
    for _ in range(20):
        Q = np.linalg.qr(rng.standard_normal((5, 5)))[0]
        A = Q @ np.diag(rng.uniform(0.5, 5.0, 5)) @ Q.T
        b = rng.standard_normal(5)
        it, x, state = iterations_to(quadratic(A, b), np.zeros(5), 1e-10, 25)
        assert it is not None
        assert state.fallbacks == 0


def test_absolute_curvature_rule_drops_small_pairs():
    A = np.eye(5) + scipy.linalg.hilbert(5)
    b = np.arange(1.0, 6.0)
    fun = quadratic(A, b)
    x, state = np.zeros(5), None
    cfg = OptimizerConfig(curvature_relative=False)
    while state is None or np.linalg.norm(state.g) > 1e-4:
        x, state = lbfgs_step(x, fun, state, cfg)
    kept = len(state.s_hist)
    # steps now have |s| ~ 1e-5, so s.y ~ 1e-10 and pairs stop being stored
    for _ in range(4):
        x, state = lbfgs_step(x, fun, state, cfg)
    assert all(s @ y > 1e-10 for s, y in zip(state.s_hist, state.y_hist))
    assert len(state.s_hist) <= kept + 4


def test_stationary_point_leaves_parameters_unchanged():
    A = np.diag([1.0, 2.0])
    b = np.array([1.0, 2.0])
    x0 = np.linalg.solve(A, b)
    x, state = lbfgs_step(x0, quadratic(A, b))
    assert np.array_equal(x, x0) and state.status == "converged"


def test_rosenbrock():
    fun = lambda x: (rosen(x), rosen_der(x))
    x, state = minimize_lbfgs(fun, np.array([-1.2, 1.0]), max_iter=200, gtol=0.0)
    assert rosen(x) <= 1e-8
    assert state.n_iter <= 200


def test_loss_is_non_increasing():
    fun = lambda x: (rosen(x), rosen_der(x))
    x, state = np.array([-1.2, 1.0]), None
    f_prev = math.inf
    for _ in range(40):
        x, state = lbfgs_step(x, fun, state)
        assert state.f <= f_prev
        f_prev = state.f


def test_strong_wolfe_conditions_hold():
    fun = lambda x: (rosen(x), rosen_der(x))
    x = np.array([-1.2, 1.0])
    f0, g0 = fun(x)
    d = -g0
    t, f, g, evals, ok = strong_wolfe(fun, x, d, 1.0, f0, g0)
    assert ok and evals <= 25
    assert f <= f0 + 1e-4 * t * (g0 @ d)
    assert abs(g @ d) <= 0.9 * abs(g0 @ d)


def test_line_search_failure_falls_back_to_small_gradient_step():
    # every trial point off the start is non-finite, so no acceptable step exists
    x0 = np.array([1.0, -2.0])

    def fun(x):
        if np.array_equal(x, x0) or np.allclose(x, x0 - FALLBACK_STEP * 2 * x0, rtol=0, atol=1e-15):
            return float(x @ x), 2 * x
        return math.inf, np.full(2, np.nan)

    state = LBFGSState(s_hist=[np.ones(2)], y_hist=[np.ones(2)])
    x, state = lbfgs_step(x0, fun, state, OptimizerConfig(max_linesearch=5))
    assert state.status == "fallback" and state.fallbacks == 1
    assert np.allclose(x, x0 - FALLBACK_STEP * 2 * x0)
    assert state.s_hist == [] and state.y_hist == []


def test_small_curvature_pairs_are_skipped():
    # a linear function has zero curvature, so no (s, y) pair may be stored
    c = np.array([1.0, -1.0])
    fun = lambda x: (float(c @ x), c.copy())
    x, state = np.zeros(2), None
    for _ in range(3):
        x, state = lbfgs_step(x, fun, state, OptimizerConfig(max_linesearch=3))
    assert state.s_hist == []


def test_adam_zero_gradient():
    x = np.array([1.0, -3.0])
    x1, _ = adam_step(x, np.zeros(2), None, OptimizerConfig(kind="adam"))
    assert np.array_equal(x1, x)


def test_adam_first_step_is_lr_times_sign():
    cfg = OptimizerConfig(kind="adam", lr=0.01)
    g = np.array([3.0, -0.2, 1e-3])
    x1, state = adam_step(np.zeros(3), g, None, cfg)
    assert np.allclose(x1, -0.01 * np.sign(g), rtol=1e-4)
    assert state.t == 1


def test_adam_deterministic():
    cfg = OptimizerConfig(kind="adam")
    runs = []
    for _ in range(2):
        x, state = np.ones(4), None
        for k in range(5):
            x, state = adam_step(x, np.sin(x + k), state, cfg)
        runs.append(x.tobytes())
    assert runs[0] == runs[1]


def test_adam_minimizes_quadratic():
    A = np.diag([1.0, 4.0])
    b = np.array([1.0, 1.0])
    cfg = OptimizerConfig(kind="adam", lr=0.05)
    x, state = np.zeros(2), None
    for _ in range(2000):
        x, state = adam_step(x, A @ x - b, state, cfg)
    assert np.allclose(x, [1.0, 0.25], atol=1e-3)
