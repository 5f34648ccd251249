"""Legendre polynomials, Gauss-Lobatto quadrature and boundary-adapted modal bases."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DIRICHLET = "dirichlet"
NEUMANN = "neumann"
BC_KINDS = (DIRICHLET, NEUMANN)

_NEWTON_TOL = 1e-15
_NEWTON_MAXITER = 100


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def legendre_eval(k: int, x):
    """Evaluate the Legendre polynomial L_k at ``x`` by three-term recurrence."""
    if k < 0:
        raise ValueError(f"degree must be non-negative, got {k}")
    x = np.asarray(x, dtype=np.float64)
    prev = np.ones_like(x)
    if k == 0:
        return prev if prev.ndim else float(prev)
    cur = x.copy()
    for n in range(1, k):
        prev, cur = cur, ((2 * n + 1) * x * cur - n * prev) / (n + 1)
    return cur if cur.ndim else float(cur)


def legendre_deriv(k: int, x):
    """Evaluate L_k'(x) using L'_{n+1} = (2n+1) L_n + L'_{n-1}."""
    if k < 0:
        raise ValueError(f"degree must be non-negative, got {k}")
    _, dvals = legendre_table(k, x)
    out = dvals[..., k]
    return out if out.ndim else float(out)


def legendre_table(kmax: int, x):
    """Return ``(L, dL)`` with ``L[..., k] = L_k(x)`` for ``k = 0..kmax``."""
    x = np.asarray(x, dtype=np.float64)
    L = np.empty(x.shape + (kmax + 1,))
    dL = np.empty_like(L)
    L[..., 0] = 1.0
    dL[..., 0] = 0.0
    if kmax >= 1:
        L[..., 1] = x
        dL[..., 1] = 1.0
    for n in range(1, kmax):
        L[..., n + 1] = ((2 * n + 1) * x * L[..., n] - n * L[..., n - 1]) / (n + 1)
        dL[..., n + 1] = (2 * n + 1) * L[..., n] + dL[..., n - 1]
    return L, dL


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Lobatto rule on [-1, 1] with ascending nodes."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def num_points(self) -> int:
        return len(self.nodes)

    def integrate(self, values, axis=-1):
        """Quadrature sum of nodal ``values`` along ``axis``."""
        values = np.asarray(values, dtype=np.float64)
        return np.tensordot(values, self.weights, axes=([axis], [0]))


class QuadratureError(RuntimeError):
    code = "quadrature_nonconvergence"


def gauss_lobatto(P: int) -> QuadratureRule:
    """Gauss-Lobatto nodes and weights with ``P`` points.

    Interior nodes are the roots of L'_{P-1}, found by Newton iteration
    seeded with Chebyshev-Lobatto points. Weights follow
    ``w_i = 2 / (P (P-1) L_{P-1}(x_i)^2)``.
    """
    if P < 2:
        raise ValueError(f"Gauss-Lobatto rule needs at least 2 points, got {P}")
    N = P - 1
    x = -np.cos(np.pi * np.arange(P) / N)
    interior = x[1:-1].copy()
    if interior.size:
        residual = np.inf
        for _ in range(_NEWTON_MAXITER):
            L, dL = legendre_table(N, interior)
            d1 = dL[:, N]
            # Legendre ODE: (1 - x^2) L'' = 2x L' - N(N+1) L
            d2 = (2 * interior * d1 - N * (N + 1) * L[:, N]) / (1 - interior**2)
            step = d1 / d2
            interior -= step
            residual = np.max(np.abs(step))
            if residual <= _NEWTON_TOL:
                break
        else:
            # round-off can stall the step just above the tolerance
            if residual > 1e3 * _NEWTON_TOL:
                raise QuadratureError(
                    f"Gauss-Lobatto Newton iteration did not converge for P={P} "
                    f"(last step {residual:.3e})"
                )
    x[1:-1] = interior
    x = 0.5 * (x - x[::-1])
    x[0], x[-1] = -1.0, 1.0
    if P % 2:
        x[N // 2] = 0.0
    LN = legendre_eval(N, x)
    w = 2.0 / (N * (N + 1) * LN**2)
    w = 0.5 * (w + w[::-1])
    return QuadratureRule(_frozen(x), _frozen(w))


def diff_matrix(rule: QuadratureRule) -> np.ndarray:
    """Collocation differentiation matrix on the Gauss-Lobatto nodes.

    ``D @ v`` gives the derivative of the degree ``P-1`` interpolant of ``v``
    at the nodes. Diagonal entries are set to the negative off-diagonal row
    sum so that constants are differentiated to exactly zero.
    """
    x = rule.nodes
    P = len(x)
    LN = legendre_eval(P - 1, x)
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    D = (LN[:, None] / LN[None, :]) / diff
    np.fill_diagonal(D, 0.0)
    np.fill_diagonal(D, -D.sum(axis=1))
    return _frozen(D)


def basis_coefficients(bc: str, num_modes: int):
    """Return ``(a, b)`` so that ``phi_k = L_k + a_k L_{k+1} + b_k L_{k+2}``."""
    k = np.arange(num_modes, dtype=np.float64)
    a = np.zeros(num_modes)
    if bc == DIRICHLET:
        b = -np.ones(num_modes)
    elif bc == NEUMANN:
        b = -k * (k + 1) / ((k + 2) * (k + 3))
    else:
        raise ValueError(f"unknown boundary condition {bc!r}; expected one of {BC_KINDS}")
    return a, b


@dataclass(frozen=True)
class ModalBasis:
    """Boundary-adapted Legendre basis sampled on a quadrature grid.

    ``phi[i, k]`` and ``dphi[i, k]`` hold phi_k and its derivative at node i.
    """

    bc_kind: str
    a: np.ndarray
    b: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray

    @property
    def num_modes(self) -> int:
        return len(self.b)

    def evaluate(self, x, deriv: bool = False) -> np.ndarray:
        """Values (or derivatives) of every basis function at points ``x``."""
        return _basis_matrix(self.a, self.b, np.atleast_1d(x), deriv)


def _basis_matrix(a, b, x, deriv):
    n = len(b)
    L, dL = legendre_table(n + 1, x)
    T = dL if deriv else L
    return T[:, :n] + a * T[:, 1 : n + 1] + b * T[:, 2 : n + 2]


def modal_basis(bc: str, num_modes: int, rule: QuadratureRule) -> ModalBasis:
    """Assemble the Dirichlet or Neumann modal basis on ``rule``'s nodes."""
    if num_modes < 1:
        raise ValueError(f"num_modes must be >= 1, got {num_modes}")
    if num_modes + 2 > rule.num_points:
        raise ValueError(
            f"{num_modes} modes need polynomials of degree {num_modes + 1}; "
            f"the quadrature rule needs at least P={num_modes + 2} points "
            f"(got {rule.num_points})"
        )
    a, b = basis_coefficients(bc, num_modes)
    phi = _basis_matrix(a, b, rule.nodes, deriv=False)
    dphi = _basis_matrix(a, b, rule.nodes, deriv=True)
    return ModalBasis(bc, _frozen(a), _frozen(b), _frozen(phi), _frozen(dphi))
