"""scikit-learn style wrappers: a trainable LGNet regressor and the Galerkin solver as a transformer.

Both operate on nodal arrays sampled at the Gauss-Lobatto points, one row
per forcing, so ``X`` has ``P`` columns.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, validate_data

from .data import NormStats, dataset_from_forcings
from .nn import NetworkConfig, build_network
from .optim import OptimizerConfig
from .solvers import BURGERS, CDE, HELMHOLTZ, ProblemSpec
from .spectral import gauss_lobatto, modal_basis
from .training import WeakFormConfig, fit_arrays


def _problem(kind, epsilon, k_u) -> ProblemSpec:
    if kind == HELMHOLTZ:
        return ProblemSpec.helmholtz(k_u)
    if kind in (CDE, BURGERS):
        return ProblemSpec(kind, epsilon=epsilon)
    raise ValueError(f"unknown problem {kind!r}")


def _grid(P, n_modes, problem):
    n_modes = P - 2 if n_modes is None else int(n_modes)
    rule = gauss_lobatto(P)
    return rule, modal_basis(problem.bc, n_modes, rule)


class LGNetRegressor(RegressorMixin, BaseEstimator):
    """Convolutional network that predicts Legendre-Galerkin coefficients from a forcing.

    ``fit(X, y)`` takes physical forcings ``X`` and nodal solutions ``y``,
    both ``(n, P)``. ``predict`` returns reconstructed nodal solutions;
    :meth:`predict_coefficients` returns the raw network output.

    Parameters
    ----------
    problem : {"cde", "helmholtz", "burgers"}
    epsilon, k_u : float
        Diffusion parameter (CDE, Burgers) or Helmholtz coefficient.
    arch : {"linear", "neta", "netb", "netc"}
    normalize : bool
        Standardize network inputs with the global mean/std of ``X``.
    restore_best : bool
        After training, keep the epoch with the lowest validation error
        instead of the last iterate. Validation data come from
        ``fit(..., X_val=, y_val=)`` or default to the training set.
    """

    def __init__(
        self,
        problem="cde",
        epsilon=0.1,
        k_u=3.5,
        n_modes=None,
        arch="linear",
        blocks=0,
        filters=32,
        kernel_size=5,
        num_test_functions=None,
        wf_weight=1.0,
        normalize=False,
        optimizer="lbfgs",
        epochs=100,
        history=10,
        lr=1e-3,
        batch_size=None,
        restore_best=False,
        random_state=0,
    ):
        self.problem = problem
        self.epsilon = epsilon
        self.k_u = k_u
        self.n_modes = n_modes
        self.arch = arch
        self.blocks = blocks
        self.filters = filters
        self.kernel_size = kernel_size
        self.num_test_functions = num_test_functions
        self.wf_weight = wf_weight
        self.normalize = normalize
        self.optimizer = optimizer
        self.epochs = epochs
        self.history = history
        self.lr = lr
        self.batch_size = batch_size
        self.restore_best = restore_best
        self.random_state = random_state

    def _seed(self) -> int:
        rs = self.random_state
        if rs is None:
            return 0
        if isinstance(rs, np.random.Generator):
            return int(rs.integers(2**63))
        return int(rs)

    def fit(self, X, y, X_val=None, y_val=None, callback=None):
        X, y = validate_data(self, X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        if y.ndim != 2 or y.shape != X.shape:
            raise ValueError(f"y must match X's shape {X.shape}, got {y.shape}")
        P = X.shape[1]
        problem = _problem(self.problem, self.epsilon, self.k_u)
        rule, basis = _grid(P, self.n_modes, problem)
        seed = self._seed()
        net = build_network(NetworkConfig(
            self.arch, P, basis.num_modes, blocks=self.blocks, filters=self.filters,
            kernel_size=self.kernel_size, init_seed=seed,
        ))
        cfg = WeakFormConfig(problem, basis, rule, self.num_test_functions, weight=self.wf_weight)
        opt = OptimizerConfig(kind=self.optimizer, epochs=self.epochs, history=self.history, lr=self.lr,
                              batch_size=self.batch_size, shuffle_seed=seed)
        if X_val is not None:
            X_val = check_array(X_val, dtype=np.float64)
            y_val = check_array(y_val, dtype=np.float64)
            if X_val.shape[1] != P or y_val.shape != X_val.shape:
                raise ValueError("validation arrays must have the training width")
        stats = NormStats.of(X) if self.normalize else None
        trace = fit_arrays(net, X, y, cfg, opt, input_norm=stats,
                           val_forcings=X_val, val_solutions=y_val, callback=callback)
        if self.restore_best and trace.best_params is not None:
            net.set_flat(trace.best_params)
        self.network_ = net
        self.trace_ = trace
        self.problem_ = problem
        self.basis_ = basis
        self.rule_ = rule
        self.n_modes_ = basis.num_modes
        return self

    def predict_coefficients(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        return self.network_.predict(X)

    def predict(self, X) -> np.ndarray:
        return self.predict_coefficients(X) @ self.basis_.phi.T

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.target_tags.multi_output = True
        tags.target_tags.single_output = False
        return tags


class GalerkinSolver(TransformerMixin, BaseEstimator):
    """Map nodal forcings to nodal Galerkin solutions.

    Nothing is learned; ``fit`` only records the grid width and builds the
    basis. ``transform`` solves every row.
    """

    def __init__(self, problem="cde", epsilon=0.1, k_u=3.5, n_modes=None, tol=1e-9, max_iter=500):
        self.problem = problem
        self.epsilon = epsilon
        self.k_u = k_u
        self.n_modes = n_modes
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = validate_data(self, X, dtype=np.float64)
        self.problem_ = _problem(self.problem, self.epsilon, self.k_u)
        self.rule_, self.basis_ = _grid(X.shape[1], self.n_modes, self.problem_)
        self.n_modes_ = self.basis_.num_modes
        return self

    def _solve(self, X):
        check_is_fitted(self, "basis_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        kwargs = {"tol": self.tol, "max_iter": self.max_iter} if self.problem_.kind == BURGERS else {}
        return dataset_from_forcings(self.problem_, X, X.shape[1], self.n_modes_, **kwargs)

    def transform(self, X) -> np.ndarray:
        return self._solve(X).solutions

    def coefficients(self, X) -> np.ndarray:
        return self._solve(X).coefficients
