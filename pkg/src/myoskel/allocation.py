"""Muscle tension allocation by quadratic programming.

``allocate_exact`` realises a joint torque exactly with minimum weighted
tension; ``allocate_relaxed`` trades torque error against tension when no
exact solution exists.  Both run on :func:`solve_qp`, a primal active-set
method for box bounds plus optional equality constraints.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import InvalidInputError

DEFAULT_W2 = 1e4


@dataclass
class QPResult:
    x: np.ndarray
    status: str  # "optimal", "infeasible", "max_iter"
    iterations: int = 0
    eq_multipliers: np.ndarray = None

    @property
    def ok(self):
        return self.status == "optimal"


def _independent_rows(A, b, tol=1e-10):
    """Replace A x = b by an equivalent system with full row rank."""
    if A.shape[0] == 0:
        return A, b
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    r = int(np.sum(s > tol * max(s[0], 1.0)))
    return s[:r, None] * Vt[:r], U[:, :r].T @ b


def _kkt_solve(H, g, A, free):
    """Step p on the free variables minimising 0.5 p'Hp + g'p with A p = 0."""
    n = H.shape[0]
    F = np.flatnonzero(free)
    Af = A[:, F]
    m = Af.shape[0]
    K = np.zeros((len(F) + m, len(F) + m))
    K[: len(F), : len(F)] = H[np.ix_(F, F)]
    K[: len(F), len(F):] = Af.T
    K[len(F):, : len(F)] = Af
    rhs = np.concatenate([-g[F], np.zeros(m)])
    try:
        sol = np.linalg.solve(K, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    p = np.zeros(n)
    p[F] = sol[: len(F)]
    return p, sol[len(F):]


def solve_qp(H, c, lb, ub, A=None, b=None, x0=None, max_iter=None, tol=1e-12):
    """Minimise 0.5 x'Hx + c'x subject to lb <= x <= ub and A x = b.

    H must be positive definite on the null space of the equality and active
    bound constraints.  ``x0`` must be feasible; without equalities the
    default start is the projection of 0 onto the box.  Pivoting is by lowest
    index, both when dropping a bound with a negative multiplier and when
    several bounds block a step at once.
    """
    H = np.asarray(H, dtype=float)
    c = np.asarray(c, dtype=float)
    n = H.shape[0]
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    if A is None:
        A = np.zeros((0, n))
        b = np.zeros(0)
    A, b = _independent_rows(np.asarray(A, dtype=float), np.asarray(b, dtype=float))
    x = np.clip(np.zeros(n), lb, ub) if x0 is None else np.asarray(x0, dtype=float).copy()
    # working set: 0 free, -1 at lower bound, +1 at upper bound
    W = np.zeros(n, dtype=int)
    max_iter = max_iter or 50 * (n + A.shape[0]) + 100
    scale = max(1.0, np.abs(H).max(initial=0.0), np.abs(c).max(initial=0.0))
    nu = np.zeros(A.shape[0])
    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        g = H @ x + c
        p, nu = _kkt_solve(H, g, A, W == 0)
        if np.max(np.abs(p), initial=0.0) <= tol * max(1.0, np.abs(x).max(initial=0.0)):
            # multipliers of active bounds: lower needs (g + A'nu)_i >= 0, upper <= 0
            r = g + A.T @ nu
            mu = np.where(W == -1, r, np.where(W == 1, -r, 0.0))
            neg = np.flatnonzero((W != 0) & (mu < -1e-10 * scale))
            if neg.size == 0:
                status = "optimal"
                break
            W[neg[0]] = 0
            continue
        alpha = 1.0
        block = -1
        for i in np.flatnonzero(W == 0):
            if p[i] < 0 and np.isfinite(lb[i]):
                a = (lb[i] - x[i]) / p[i]
            elif p[i] > 0 and np.isfinite(ub[i]):
                a = (ub[i] - x[i]) / p[i]
            else:
                continue
            if a < alpha:
                alpha, block = max(a, 0.0), i
        x = x + alpha * p
        if block >= 0:
            if p[block] < 0:
                x[block], W[block] = lb[block], -1
            else:
                x[block], W[block] = ub[block], 1
    x = _polish(H, c, A, b, lb, ub, x, W)
    return QPResult(x, status, it, nu)


def _polish(H, c, A, b, lb, ub, x, W):
    """Re-solve the final equality-constrained subproblem directly for x."""
    fixed = W != 0
    xf = np.where(W == -1, lb, np.where(W == 1, ub, x))
    F = np.flatnonzero(~fixed)
    if F.size == 0:
        return xf
    Af = A[:, F]
    rhs_b = b - A[:, fixed] @ xf[fixed]
    m = A.shape[0]
    K = np.zeros((F.size + m, F.size + m))
    K[: F.size, : F.size] = H[np.ix_(F, F)]
    K[: F.size, F.size:] = Af.T
    K[F.size:, : F.size] = Af
    rhs = np.concatenate([-(c[F] + H[np.ix_(F, np.flatnonzero(fixed))] @ xf[fixed]), rhs_b])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return xf
    out = xf.copy()
    out[F] = sol[: F.size]
    if not np.all(np.isfinite(out)) or np.any(out < lb - 1e-9) or np.any(out > ub + 1e-9):
        return xf
    return np.clip(out, lb, ub)


@dataclass
class AllocationProblem:
    """Tension allocation data: torque = -G' f with box bounds on f."""

    G: np.ndarray
    tau: np.ndarray
    f_min: np.ndarray
    f_max: np.ndarray
    W1: np.ndarray = None
    W2: np.ndarray = None

    def __post_init__(self):
        self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        M, N = self.G.shape
        self.tau = np.atleast_1d(np.asarray(self.tau, dtype=float))
        self.f_min = np.broadcast_to(np.asarray(self.f_min, dtype=float), (M,)).copy()
        self.f_max = np.broadcast_to(np.asarray(self.f_max, dtype=float), (M,)).copy()
        self.W1 = np.eye(M) if self.W1 is None else _as_diag(self.W1, M)
        self.W2 = DEFAULT_W2 * np.eye(N) if self.W2 is None else _as_diag(self.W2, N)
        if self.tau.shape != (N,):
            raise InvalidInputError(f"tau has shape {self.tau.shape}, expected ({N},)")
        if np.any(self.f_min > self.f_max):
            raise InvalidInputError("f_min must not exceed f_max")
        if np.any(np.diag(self.W1) <= 0):
            raise InvalidInputError("W1 diagonal entries must be positive")
        if np.any(np.diag(self.W2) < 0):
            raise InvalidInputError("W2 diagonal entries must be non-negative")

    def to_dict(self):
        return {"G": self.G.tolist(), "tau": self.tau.tolist(), "f_min": self.f_min.tolist(),
                "f_max": self.f_max.tolist(), "W1": np.diag(self.W1).tolist(), "W2": np.diag(self.W2).tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v) for k, v in d.items()})

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


def _as_diag(W, n):
    W = np.asarray(W, dtype=float)
    if W.ndim <= 1:
        W = np.diag(np.broadcast_to(W, (n,)))
    if W.shape != (n, n):
        raise InvalidInputError(f"weight matrix has shape {W.shape}, expected ({n}, {n})")
    if np.any(W != np.diag(np.diag(W))):
        raise InvalidInputError("weight matrices must be diagonal")
    return W


@dataclass
class Allocation:
    f: np.ndarray
    feasible: bool
    status: str

    @property
    def ok(self):
        return self.feasible


def _phase1(A, b, lb, ub):
    res = linprog(np.zeros(A.shape[1]), A_eq=A, b_eq=b, bounds=list(zip(lb, ub)), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10})
    if res.status != 0:
        return None
    return np.clip(res.x, lb, ub)


def allocate_exact(problem):
    """Minimise f'W1 f subject to tau = -G' f and f_min <= f <= f_max."""
    P = problem
    A = P.G.T
    b = -P.tau
    x0 = _phase1(A, b, P.f_min, P.f_max)
    if x0 is None:
        return Allocation(np.clip(np.zeros_like(P.f_min), P.f_min, P.f_max), False, "infeasible")
    res = solve_qp(2 * P.W1, np.zeros(len(x0)), P.f_min, P.f_max, A, b, x0=x0)
    return Allocation(res.x, True, res.status)


def relaxed_objective(problem, f):
    P = problem
    r = P.G.T @ f + P.tau
    return float(f @ P.W1 @ f + r @ P.W2 @ r)


def allocate_relaxed(problem):
    """Minimise f'W1 f + (G'f + tau)' W2 (G'f + tau) over the tension box."""
    P = problem
    H = 2 * (P.W1 + P.G @ P.W2 @ P.G.T)
    c = 2 * P.G @ P.W2 @ P.tau
    res = solve_qp(H, c, P.f_min, P.f_max)
    return Allocation(res.x, True, res.status)


def projected_gradient(H, c, lb, ub, x):
    """Norm of the gradient projected onto the feasible directions of the box."""
    g = H @ x + c
    pg = np.where((x <= lb) & (g > 0), 0.0, g)
    pg = np.where((x >= ub) & (pg < 0), 0.0, pg)
    return float(np.linalg.norm(pg))
