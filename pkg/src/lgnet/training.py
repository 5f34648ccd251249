"""Solution-MSE plus weak-form residual loss, training loop and evaluation metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, NormStats
from .nn import Network
from .optim import ADAM, OptimizerConfig, adam_step, lbfgs_step
from .solvers import CDE, HELMHOLTZ, ProblemSpec
from .spectral import ModalBasis, QuadratureRule, diff_matrix

TRACE_HEADER = ("epoch", "train_total", "train_u", "train_wf", "test_total", "test_mean_rel_l2")


class TrainingError(RuntimeError):
    code = "non_finite_loss"

    def __init__(self, message, epoch, trace):
        super().__init__(message)
        self.epoch = epoch
        self.trace = trace


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


@dataclass
class WeakFormConfig:
    """Test space and problem data for the weak-form residual.

    ``num_test_functions`` defaults to every basis function. ``norm_stats``
    is set when the forcings passed to the loss are normalized; they are
    mapped back to physical values before the right-hand side is formed.
    ``weight`` scales the weak-form term in the total loss.
    """

    problem: ProblemSpec
    basis: ModalBasis
    rule: QuadratureRule
    num_test_functions: int | None = None
    norm_stats: NormStats | None = None
    weight: float = 1.0
    derivative: str = "modal"

    def __post_init__(self):
        m = self.basis.num_modes if self.num_test_functions is None else int(self.num_test_functions)
        if not 1 <= m <= self.basis.num_modes:
            raise ValueError(f"num_test_functions must be in [1, {self.basis.num_modes}], got {m}")
        if self.basis.bc_kind != self.problem.bc:
            raise ValueError(f"{self.problem.kind} needs a {self.problem.bc} basis")
        if self.derivative not in ("modal", "collocation"):
            raise ValueError("derivative must be 'modal' or 'collocation'")
        self.num_test_functions = m
        w = self.rule.weights[:, None]
        self._T = w * self.basis.phi[:, :m]
        self._dT = w * self.basis.dphi[:, :m]
        self._D = diff_matrix(self.rule) if self.derivative == "collocation" else None

    @property
    def m(self) -> int:
        return self.num_test_functions


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    loss_u: float
    loss_wf: float


def _nodal(alpha, cfg):
    u = alpha @ cfg.basis.phi.T
    ux = u @ cfg._D.T if cfg._D is not None else alpha @ cfg.basis.dphi.T
    return u, ux


def _physical(f_nodal, cfg):
    f = np.asarray(f_nodal, dtype=np.float64)
    return cfg.norm_stats.invert(f) if cfg.norm_stats is not None else f


def _lhs(u, ux, cfg):
    p = cfg.problem
    if p.kind == CDE:
        return p.epsilon * (ux @ cfg._dT) - ux @ cfg._T
    if p.kind == HELMHOLTZ:
        return -(ux @ cfg._dT) + p.k_u * (u @ cfg._T)
    return p.epsilon * (ux @ cfg._dT) - 0.5 * ((u * u) @ cfg._dT)


def weak_residual(u_hat_coeffs, f_nodal, cfg: WeakFormConfig):
    """Per-sample, per-test-function weak-form sides ``(LHS, RHS)``, each ``n x m``.

    CDE: ``eps (u', phi_j') - (u', phi_j)``; Helmholtz: ``-(u', phi_j') + k_u (u, phi_j)``;
    Burgers: ``eps (u', phi_j') - 1/2 (u^2, phi_j')``; RHS is ``(f, phi_j)``.
    Inner products use the Gauss-Lobatto rule.
    """
    alpha = np.atleast_2d(np.asarray(u_hat_coeffs, dtype=np.float64))
    f = np.atleast_2d(_physical(f_nodal, cfg))
    if alpha.shape[1] != cfg.basis.num_modes:
        raise ValueError(f"expected {cfg.basis.num_modes} coefficients per sample, got {alpha.shape[1]}")
    if f.shape != (alpha.shape[0], cfg.rule.num_points):
        raise ValueError(f"forcing shape {f.shape} does not match ({alpha.shape[0]}, {cfg.rule.num_points})")
    u, ux = _nodal(alpha, cfg)
    return _lhs(u, ux, cfg), f @ cfg._T


def compute_loss(net_output, targets_u, f_nodal, cfg: WeakFormConfig):
    """Loss ``MSE(u, u_hat) + weight * MSE(LHS, RHS)`` and its gradient wrt the coefficients."""
    alpha = np.asarray(net_output, dtype=np.float64)
    targets = np.asarray(targets_u, dtype=np.float64)
    if alpha.ndim != 2 or alpha.shape[1] != cfg.basis.num_modes:
        raise ValueError(f"net output must be (n, {cfg.basis.num_modes}), got {alpha.shape}")
    n = alpha.shape[0]
    if targets.shape != (n, cfg.rule.num_points):
        raise ValueError(f"targets must be ({n}, {cfg.rule.num_points}), got {targets.shape}")
    f = _physical(f_nodal, cfg)
    if f.shape != targets.shape:
        raise ValueError(f"forcing must be {targets.shape}, got {f.shape}")

    u, ux = _nodal(alpha, cfg)
    du_err = u - targets
    loss_u = float(np.mean(du_err**2))
    R = _lhs(u, ux, cfg) - f @ cfg._T
    loss_wf = float(np.mean(R**2))
    total = loss_u + cfg.weight * loss_wf

    # backprop through the residual to nodal u and u_x
    dR = (2.0 * cfg.weight / R.size) * R
    p = cfg.problem
    g_u = (2.0 / du_err.size) * du_err
    if p.kind == CDE:
        g_ux = p.epsilon * (dR @ cfg._dT.T) - dR @ cfg._T.T
    elif p.kind == HELMHOLTZ:
        g_ux = -(dR @ cfg._dT.T)
        g_u = g_u + p.k_u * (dR @ cfg._T.T)
    else:
        back = dR @ cfg._dT.T
        g_ux = p.epsilon * back
        g_u = g_u - u * back
    if cfg._D is not None:
        grad = (g_u + g_ux @ cfg._D) @ cfg.basis.phi
    else:
        grad = g_u @ cfg.basis.phi + g_ux @ cfg.basis.dphi
    return LossBreakdown(total, loss_u, loss_wf), grad


def relative_l2(u, u_hat):
    """Row-wise ``||u - u_hat||_2 / ||u||_2``; rows with ``u = 0`` give NaN."""
    u, u_hat = _pair(u, u_hat)
    u, u_hat = np.atleast_2d(u), np.atleast_2d(u_hat)
    num = np.linalg.norm(u - u_hat, axis=1)
    den = np.linalg.norm(u, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


@dataclass
class Metrics:
    per_sample_rel_l2: np.ndarray
    mean_rel_l2: float
    median_rel_l2: float
    max_rel_l2: float
    mean_mae: float
    pointwise_errors: np.ndarray
    excluded: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_samples": int(self.per_sample_rel_l2.size),
            "n_excluded": len(self.excluded),
            "excluded": [int(i) for i in self.excluded],
            "mean_rel_l2": self.mean_rel_l2,
            "median_rel_l2": self.median_rel_l2,
            "max_rel_l2": self.max_rel_l2,
            "mean_mae": self.mean_mae,
        }


def prediction_metrics(u, u_hat, pointwise_samples: int = 4) -> Metrics:
    u, u_hat = _pair(u, u_hat)
    rel = relative_l2(u, u_hat)
    keep = np.isfinite(rel)
    excluded = np.flatnonzero(~keep).tolist()
    kept = rel[keep]
    if kept.size == 0:
        raise ValueError("every sample has a zero reference solution")
    abs_err = np.abs(u - u_hat)
    return Metrics(
        per_sample_rel_l2=kept,
        mean_rel_l2=float(np.mean(kept)),
        median_rel_l2=float(np.median(kept)),
        max_rel_l2=float(np.max(kept)),
        mean_mae=float(np.mean(abs_err)),
        pointwise_errors=abs_err[:pointwise_samples],
        excluded=excluded,
    )


def evaluate(net: Network, ds: Dataset, basis: ModalBasis | None = None, pointwise_samples: int = 4) -> Metrics:
    """Relative l2 and MAE of the network's reconstructed solutions on ``ds``."""
    basis = basis or ds.basis()
    alpha = net.predict(ds.physical_forcings())
    return prediction_metrics(ds.solutions, alpha @ basis.phi.T, pointwise_samples)


@dataclass
class TrainingTrace:
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    best_test_rel_l2: float = math.inf
    best_params: np.ndarray | None = None
    fallback_epochs: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        i = TRACE_HEADER.index(name)
        return np.array([r[i] for r in self.rows])

    def to_csv(self) -> str:
        lines = [",".join(TRACE_HEADER)]
        for epoch, *vals in self.rows:
            lines.append(",".join([str(int(epoch))] + [format(v, ".17g") for v in vals]))
        return "\n".join(lines) + "\n"

    def save_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path


class _Objective:
    """Full-batch loss and parameter gradient, remembering the last breakdown."""

    def __init__(self, net, inputs, targets, forcings, cfg):
        self.net, self.inputs, self.targets, self.forcings, self.cfg = net, inputs, targets, forcings, cfg
        self.last_x = None
        self.last = None

    def __call__(self, theta):
        net = self.net
        net.set_flat(theta)
        net.zero_grad()
        out = net.forward(self.inputs)
        lb, g = compute_loss(out, self.targets, self.forcings, self.cfg)
        net.backward(g)
        self.last_x, self.last = theta.copy(), lb
        if not math.isfinite(lb.total):
            return math.inf, net.grad_flat()
        return lb.total, net.grad_flat()

    def breakdown(self, theta):
        if self.last_x is not None and np.array_equal(self.last_x, theta):
            return self.last
        self.net.set_flat(theta)
        out = self.net.forward(self.inputs)
        self.net._clear()
        return compute_loss(out, self.targets, self.forcings, self.cfg)[0]


def _physical_cfg(cfg: WeakFormConfig) -> WeakFormConfig:
    if cfg.norm_stats is None:
        return cfg
    return WeakFormConfig(cfg.problem, cfg.basis, cfg.rule, cfg.num_test_functions, None, cfg.weight, cfg.derivative)


def fit_arrays(
    net: Network,
    forcings,
    solutions,
    cfg: WeakFormConfig,
    opt: OptimizerConfig,
    input_norm: NormStats | None = None,
    val_forcings=None,
    val_solutions=None,
    callback=None,
) -> TrainingTrace:
    """Train ``net`` on physical forcing/solution arrays.

    The network sees ``input_norm.apply(forcings)``; the weak-form term
    always sees physical forcings. One epoch is one full-batch L-BFGS
    iteration, or one pass over shuffled mini-batches for Adam. The
    parameters with the lowest validation mean relative l2 error are kept
    in ``trace.best_params``; ``net`` is left at the final iterate.
    """
    cfg = _physical_cfg(cfg)
    F = np.ascontiguousarray(forcings, dtype=np.float64)
    U = np.ascontiguousarray(solutions, dtype=np.float64)
    net.input_norm = input_norm
    X = input_norm.apply(F) if input_norm is not None else F
    if val_forcings is None:
        val_forcings, val_solutions = F, U
    VF = np.ascontiguousarray(val_forcings, dtype=np.float64)
    VU = np.ascontiguousarray(val_solutions, dtype=np.float64)
    VX = input_norm.apply(VF) if input_norm is not None else VF

    objective = _Objective(net, X, U, F, cfg)
    theta = net.get_flat()
    trace = TrainingTrace(best_params=theta.copy())

    def val_metrics():
        out = net.forward(VX)
        net._clear()
        lb, _ = compute_loss(out, VU, VF, cfg)
        rel = relative_l2(VU, out @ cfg.basis.phi.T)
        return lb.total, float(np.nanmean(rel))

    state = None
    rng = np.random.default_rng(opt.shuffle_seed)
    for epoch in range(1, opt.epochs + 1):
        if opt.kind == ADAM:
            n = len(X)
            bs = n if opt.batch_size is None else min(opt.batch_size, n)
            order = rng.permutation(n) if bs < n else np.arange(n)
            for start in range(0, n, bs):
                idx = order[start : start + bs]
                net.set_flat(theta)
                net.zero_grad()
                out = net.forward(X[idx])
                _, g = compute_loss(out, U[idx], F[idx], cfg)
                net.backward(g)
                theta, state = adam_step(theta, net.grad_flat(), state, opt)
            lb = objective.breakdown(theta)
        else:
            theta, state = lbfgs_step(theta, objective, state, opt)
            if state.status == "fallback":
                trace.fallback_epochs.append(epoch)
            lb = objective.breakdown(theta)
        net.set_flat(theta)
        test_total, test_rel = val_metrics()
        if not all(math.isfinite(v) for v in (lb.total, test_total)):
            raise TrainingError(f"non-finite loss at epoch {epoch}", epoch, trace)
        trace.rows.append((epoch, lb.total, lb.loss_u, lb.loss_wf, test_total, test_rel))
        if test_rel < trace.best_test_rel_l2:
            trace.best_test_rel_l2 = test_rel
            trace.best_epoch = epoch
            trace.best_params = theta.copy()
        if callback is not None:
            callback(epoch, trace)
    net.set_flat(theta)
    return trace


def train(net: Network, train_ds: Dataset, test_ds: Dataset, opt: OptimizerConfig, cfg: WeakFormConfig,
          callback=None) -> TrainingTrace:
    """Train on ``train_ds`` and track test-set metrics every epoch.

    If ``train_ds`` is normalized, its statistics become the network's
    input normalization and are applied to the test forcings as well.
    """
    if (train_ds.P, train_ds.n_modes, train_ds.problem) != (test_ds.P, test_ds.n_modes, test_ds.problem):
        raise ValueError("train and test datasets must share P, n_modes and problem")
    if cfg.basis.num_modes != train_ds.n_modes or cfg.rule.num_points != train_ds.P:
        raise ValueError("weak-form config does not match the dataset grid")
    return fit_arrays(net, train_ds.physical_forcings(), train_ds.solutions, cfg, opt,
                      input_norm=train_ds.norm_stats,
                      val_forcings=test_ds.physical_forcings(), val_solutions=test_ds.solutions,
                      callback=callback)
