"""Legendre-Galerkin solvers for the convection-diffusion, Helmholtz and Burgers problems.

All Galerkin matrices are assembled by Gauss-Lobatto quadrature over the
basis tables ``phi``/``dphi``, so the same discrete inner products are used
here and in the weak-form loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .spectral import DIRICHLET, NEUMANN, ModalBasis, QuadratureRule

CDE = "cde"
HELMHOLTZ = "helmholtz"
BURGERS = "burgers"
PROBLEM_KINDS = (CDE, HELMHOLTZ, BURGERS)

# condition numbers above this are treated as singular
MAX_CONDITION = 1e12


class SolverError(RuntimeError):
    code = "solver_failure"


class ConvergenceError(SolverError):
    """Picard iteration failed to reach the increment tolerance."""

    code = "picard_nonconvergence"

    def __init__(self, message, increments):
        super().__init__(message)
        self.increments = list(increments)


@dataclass(frozen=True)
class ProblemSpec:
    """Which equation to solve and its physical parameter.

    Use the :meth:`cde`, :meth:`helmholtz` and :meth:`burgers` constructors.
    """

    kind: str
    epsilon: float | None = None
    k_u: float | None = None

    def __post_init__(self):
        if self.kind not in PROBLEM_KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}; expected one of {PROBLEM_KINDS}")
        if self.kind in (CDE, BURGERS):
            if self.epsilon is None or not self.epsilon > 0:
                raise ValueError(f"{self.kind} needs epsilon > 0, got {self.epsilon}")
        else:
            if self.k_u is None or not math.isfinite(self.k_u):
                raise ValueError(f"helmholtz needs a finite k_u, got {self.k_u}")
            n = round(2 * math.sqrt(max(self.k_u, 0.0)) / math.pi)
            eig = (n * math.pi / 2) ** 2
            if abs(self.k_u - eig) <= 1e-14 * max(1.0, eig):
                raise ValueError(
                    f"k_u={self.k_u} is the Neumann eigenvalue (n pi/2)^2 with n={n}; "
                    "the Helmholtz problem is singular"
                )

    @classmethod
    def cde(cls, epsilon: float) -> "ProblemSpec":
        return cls(CDE, epsilon=float(epsilon))

    @classmethod
    def helmholtz(cls, k_u: float) -> "ProblemSpec":
        return cls(HELMHOLTZ, k_u=float(k_u))

    @classmethod
    def burgers(cls, epsilon: float) -> "ProblemSpec":
        return cls(BURGERS, epsilon=float(epsilon))

    @property
    def bc(self) -> str:
        return NEUMANN if self.kind == HELMHOLTZ else DIRICHLET

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.epsilon is not None:
            d["epsilon"] = self.epsilon
        if self.k_u is not None:
            d["k_u"] = self.k_u
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemSpec":
        return cls(d["kind"], epsilon=d.get("epsilon"), k_u=d.get("k_u"))


@dataclass(frozen=True)
class SpectralSolution:
    coefficients: np.ndarray
    nodal_values: np.ndarray
    residual_norm: float
    increments: tuple = field(default=())

    @property
    def iterations(self) -> int:
        return max(len(self.increments), 1)


def _check_inputs(spec, f_nodal, basis, rule, kind):
    if spec.kind != kind:
        raise ValueError(f"expected a {kind} problem, got {spec.kind}")
    if basis.bc_kind != spec.bc:
        raise ValueError(f"{kind} needs a {spec.bc} basis, got {basis.bc_kind}")
    f = np.asarray(f_nodal, dtype=np.float64)
    if f.shape != (rule.num_points,):
        raise ValueError(f"forcing must have shape ({rule.num_points},), got {f.shape}")
    if basis.phi.shape[0] != rule.num_points:
        raise ValueError("basis was not built on this quadrature rule")
    return f


def load_vector(f, basis: ModalBasis, rule: QuadratureRule) -> np.ndarray:
    """``b_j = sum_i w_i f(x_i) phi_j(x_i)``; ``f`` may carry leading batch axes."""
    return (np.asarray(f) * rule.weights) @ basis.phi


def stiffness(basis, rule):
    """``S[j, k] = (phi_k', phi_j')`` by quadrature."""
    return basis.dphi.T @ (rule.weights[:, None] * basis.dphi)


def mass(basis, rule):
    return basis.phi.T @ (rule.weights[:, None] * basis.phi)


def advection(basis, rule):
    """``C[j, k] = (phi_k', phi_j)``."""
    return basis.phi.T @ (rule.weights[:, None] * basis.dphi)


def galerkin_matrix(spec: ProblemSpec, basis: ModalBasis, rule: QuadratureRule) -> np.ndarray:
    """Linear part of the weak form as a matrix acting on coefficients.

    Row ``j`` is the test function, column ``k`` the trial function. For
    Burgers only the diffusion term is linear.
    """
    if spec.kind == CDE:
        return spec.epsilon * stiffness(basis, rule) - advection(basis, rule)
    if spec.kind == HELMHOLTZ:
        return -stiffness(basis, rule) + spec.k_u * mass(basis, rule)
    return spec.epsilon * stiffness(basis, rule)


def _solve_dense(A, rhs, what):
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SolverError(f"{what}: Galerkin system is singular or ill-conditioned (cond ~ {cond:.3e})")
    lu = scipy.linalg.lu_factor(A, check_finite=True)
    return scipy.linalg.lu_solve(lu, rhs)


def _linear_solve(spec, f, basis, rule):
    A = galerkin_matrix(spec, basis, rule)
    rhs = load_vector(f, basis, rule)
    alpha = _solve_dense(A, rhs, spec.kind)
    residual = float(np.linalg.norm(A @ alpha - rhs))
    return SpectralSolution(alpha, basis.phi @ alpha, residual)


def solve_cde(spec: ProblemSpec, f_nodal, basis: ModalBasis, rule: QuadratureRule) -> SpectralSolution:
    """Solve ``-eps u'' - u' = f`` with ``u(+-1) = 0``."""
    f = _check_inputs(spec, f_nodal, basis, rule, CDE)
    return _linear_solve(spec, f, basis, rule)


def solve_helmholtz(spec: ProblemSpec, f_nodal, basis: ModalBasis, rule: QuadratureRule) -> SpectralSolution:
    """Solve ``u'' + k_u u = f`` with ``u'(+-1) = 0``."""
    f = _check_inputs(spec, f_nodal, basis, rule, HELMHOLTZ)
    return _linear_solve(spec, f, basis, rule)


def burgers_residual(alpha, f, spec, basis, rule) -> np.ndarray:
    """Nonlinear weak-form residual ``eps (u', phi_j') - 1/2 (u^2, phi_j') - (f, phi_j)``."""
    u = basis.phi @ alpha
    du = basis.dphi @ alpha
    w = rule.weights
    lhs = spec.epsilon * ((w * du) @ basis.dphi) - 0.5 * ((w * u * u) @ basis.dphi)
    return lhs - load_vector(f, basis, rule)


def solve_burgers(
    spec: ProblemSpec,
    f_nodal,
    basis: ModalBasis,
    rule: QuadratureRule,
    tol: float = 1e-9,
    max_iter: int = 500,
    divergence_window: int = 5,
) -> SpectralSolution:
    """Solve ``-eps u'' + u u' = f``, ``u(+-1) = 0`` by Picard iteration.

    Each step freezes one factor of the convective term at the previous
    iterate, ``eps (u_n', phi') - 1/2 (u_{n-1} u_n, phi') = (f, phi)``,
    starting from ``u_0 = 0``. Iteration stops once the max-norm nodal
    increment is at most ``tol``.

    Raises
    ------
    ConvergenceError
        If ``max_iter`` is reached, or the increment grows for
        ``divergence_window`` consecutive steps.
    """
    f = _check_inputs(spec, f_nodal, basis, rule, BURGERS)
    A0 = galerkin_matrix(spec, basis, rule)
    rhs = load_vector(f, basis, rule)
    # G[i, j] = w_i phi_j'(x_i); the lagged term is phi^T diag(u_prev) G
    G = rule.weights[:, None] * basis.dphi
    u_prev = np.zeros(rule.num_points)
    increments = []
    growth = 0
    for it in range(1, max_iter + 1):
        A = A0 - 0.5 * (G.T @ (u_prev[:, None] * basis.phi))
        alpha = _solve_dense(A, rhs, f"burgers Picard step {it}")
        u = basis.phi @ alpha
        inc = float(np.max(np.abs(u - u_prev)))
        if increments and inc > increments[-1]:
            growth += 1
        else:
            growth = 0
        increments.append(inc)
        if not np.isfinite(inc):
            raise ConvergenceError(f"Picard iterate became non-finite at step {it}", increments)
        if inc <= tol:
            res = float(np.linalg.norm(burgers_residual(alpha, f, spec, basis, rule)))
            return SpectralSolution(alpha, u, res, tuple(increments))
        if growth >= divergence_window:
            raise ConvergenceError(
                f"Picard iteration diverging: increment grew for {growth} consecutive steps "
                f"(last increment {inc:.3e} at step {it})",
                increments,
            )
        u_prev = u
    raise ConvergenceError(
        f"Picard iteration did not reach tol={tol:g} in {max_iter} steps "
        f"(last increment {increments[-1]:.3e})",
        increments,
    )


def solve(spec: ProblemSpec, f_nodal, basis: ModalBasis, rule: QuadratureRule, **kwargs) -> SpectralSolution:
    """Dispatch to the solver for ``spec.kind``."""
    if spec.kind == CDE:
        return solve_cde(spec, f_nodal, basis, rule)
    if spec.kind == HELMHOLTZ:
        return solve_helmholtz(spec, f_nodal, basis, rule)
    return solve_burgers(spec, f_nodal, basis, rule, **kwargs)


def reconstruct(coefficients, basis: ModalBasis) -> np.ndarray:
    """Nodal values ``phi @ alpha``; accepts a single vector or a batch of rows."""
    c = np.asarray(coefficients, dtype=np.float64)
    if c.shape[-1] != basis.num_modes:
        raise ValueError(f"expected {basis.num_modes} coefficients, got {c.shape[-1]}")
    return c @ basis.phi.T


def manufactured_forcing(problem: ProblemSpec, u_exact, du_exact, d2u_exact, rule: QuadratureRule) -> np.ndarray:
    """Nodal forcing for which ``u_exact`` solves the strong form of ``problem``."""
    x = rule.nodes
    u, du, d2u = (np.broadcast_to(np.asarray(g(x), dtype=np.float64), x.shape) for g in (u_exact, du_exact, d2u_exact))
    if problem.kind == CDE:
        return -problem.epsilon * d2u - du
    if problem.kind == HELMHOLTZ:
        return d2u + problem.k_u * u
    return -problem.epsilon * d2u + u * du
