"""Small dense strictly convex QP with labelled affine rows, solved by a primal active set.

Decision vector z = (x, s): trades x and nonnegative slacks s.  The objective is

    1/2 x'Hx + f'x + rho_soft * ||s||^2

subject to rows a'z <= b (or a'z = b).  Iterates start from the origin when it is
feasible, which is the case for every controller-generated problem.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

TOL_INTERNAL = 1e-10
TOL_REPORT = 1e-8
MAX_ITER = 200
_TIE = 1e-14

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible-reported"
STATUS_FAILED = "numerical-failure"


@dataclass(frozen=True, eq=False)
class Constraint:
    """a'z <= b, or a'z = b when ``equality``; ``coeffs`` spans trades then slacks."""

    label: str
    coeffs: np.ndarray
    bound: float
    equality: bool = False

    def __post_init__(self):
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=float))
        object.__setattr__(self, "bound", float(self.bound))


@dataclass(frozen=True, eq=False)
class QpProblem:
    hessian_H: np.ndarray
    linear_f: np.ndarray
    constraints: tuple[Constraint, ...] = ()
    slack_penalty_rho: float = 1.0
    n_slack: int = 0

    def __post_init__(self):
        H = np.asarray(self.hessian_H, dtype=float)
        f = np.asarray(self.linear_f, dtype=float)
        if H.ndim != 2 or H.shape[0] != H.shape[1] or f.shape != (H.shape[0],):
            raise ValueError("hessian_H must be square and match linear_f")
        if not np.allclose(H, H.T, rtol=0, atol=1e-12):
            raise ValueError("hessian_H must be symmetric")
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError as exc:
            raise ValueError("hessian_H must be positive definite") from exc
        if not self.slack_penalty_rho > 0:
            raise ValueError("slack_penalty_rho must be > 0")
        cons = tuple(self.constraints)
        labels = [c.label for c in cons]
        if len(set(labels)) != len(labels):
            raise ValueError("constraint labels must be unique")
        n_z = H.shape[0] + int(self.n_slack)
        for c in cons:
            if c.coeffs.shape != (n_z,):
                raise ValueError(f"row {c.label!r} must have {n_z} coefficients")
        object.__setattr__(self, "hessian_H", H)
        object.__setattr__(self, "linear_f", f)
        object.__setattr__(self, "constraints", cons)

    @property
    def n_x(self) -> int:
        return self.hessian_H.shape[0]

    @property
    def n_z(self) -> int:
        return self.n_x + self.n_slack

    @property
    def full_hessian(self) -> np.ndarray:
        G = np.zeros((self.n_z, self.n_z))
        G[: self.n_x, : self.n_x] = self.hessian_H
        G[self.n_x:, self.n_x:] = 2.0 * self.slack_penalty_rho * np.eye(self.n_slack)
        return G

    @property
    def full_linear(self) -> np.ndarray:
        return np.concatenate([self.linear_f, np.zeros(self.n_slack)])

    def all_rows(self) -> list[Constraint]:
        """User rows plus the generated slack nonnegativity rows."""
        rows = list(self.constraints)
        for i in range(self.n_slack):
            a = np.zeros(self.n_z)
            a[self.n_x + i] = -1.0
            rows.append(Constraint(f"slack_{i + 1}_nonneg", a, 0.0))
        return rows

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.full_hessian @ z + self.full_linear @ z)

    def max_violation(self, z) -> float:
        z = np.asarray(z, dtype=float)
        worst = 0.0
        for c in self.all_rows():
            r = c.coeffs @ z - c.bound
            worst = max(worst, abs(r) if c.equality else r)
        return worst

    def origin_feasible(self, tol: float = TOL_INTERNAL) -> bool:
        return self.max_violation(np.zeros(self.n_z)) <= tol

    def permuted(self, order) -> "QpProblem":
        cons = [self.constraints[i] for i in order]
        return QpProblem(self.hessian_H, self.linear_f, tuple(cons), self.slack_penalty_rho, self.n_slack)


@dataclass
class QpSolution:
    x_star: np.ndarray
    s_star: np.ndarray
    multipliers: dict[str, float]
    active_set: list[str]
    kkt_residual: float
    status: str
    solve_time: float
    iterations: int = 0
    objective: float = float("nan")

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.x_star, self.s_star])


@dataclass
class KktReport:
    stationarity: float
    primal_feasibility: float
    dual_feasibility: float
    complementarity: float
    tol: float = TOL_REPORT

    @property
    def max_residual(self) -> float:
        return max(self.stationarity, self.primal_feasibility, self.dual_feasibility, self.complementarity)

    @property
    def passed(self) -> bool:
        return self.max_residual <= self.tol


def _phase_one(problem: QpProblem):
    """A feasible point via an LP, used only when the origin is infeasible."""
    from scipy.optimize import linprog

    rows = problem.all_rows()
    ineq = [c for c in rows if not c.equality]
    eq = [c for c in rows if c.equality]
    res = linprog(
        np.zeros(problem.n_z),
        A_ub=np.array([c.coeffs for c in ineq]) if ineq else None,
        b_ub=np.array([c.bound for c in ineq]) if ineq else None,
        A_eq=np.array([c.coeffs for c in eq]) if eq else None,
        b_eq=np.array([c.bound for c in eq]) if eq else None,
        bounds=[(None, None)] * problem.n_z, method="highs",
    )
    return res.x if res.status == 0 else None


def _solve_eqp(G, g, A_w):
    """Step p and multipliers for min 1/2 p'Gp + g'p s.t. A_w p = 0."""
    n, m = G.shape[0], A_w.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = G
    K[:n, n:] = A_w.T
    K[n:, :n] = A_w
    rhs = np.concatenate([-g, np.zeros(m)])
    sol = np.linalg.solve(K, rhs)
    return sol[:n], sol[n:]


def _kkt_residuals(problem: QpProblem, z, lam, rows) -> KktReport:
    G, c = problem.full_hessian, problem.full_linear
    grad = G @ z + c
    for li, row in zip(lam, rows):
        grad = grad + li * row.coeffs
    stat = float(np.max(np.abs(grad))) if grad.size else 0.0
    prim = dual = comp = 0.0
    for li, row in zip(lam, rows):
        r = row.coeffs @ z - row.bound
        if row.equality:
            prim = max(prim, abs(r))
        else:
            prim = max(prim, r)
            dual = max(dual, -li)
            comp = max(comp, abs(li * r))
    return KktReport(stat, max(prim, 0.0), max(dual, 0.0), comp)


def verify_kkt(problem: QpProblem, solution: QpSolution, tol: float = TOL_REPORT) -> KktReport:
    rows = problem.all_rows()
    lam = np.array([solution.multipliers.get(r.label, 0.0) for r in rows])
    rep = _kkt_residuals(problem, solution.z, lam, rows)
    rep.tol = tol
    return rep


def _pick(candidates: list[tuple[float, str, int]]) -> int:
    """Index with the smallest key; near-ties broken by the lowest label."""
    best = min(v for v, _, _ in candidates)
    tied = [(lab, i) for v, lab, i in candidates if v <= best + _TIE * max(1.0, abs(best))]
    return min(tied)[1]


def solve(problem: QpProblem, *, tol: float = TOL_INTERNAL, max_iter: int = MAX_ITER) -> QpSolution:
    t0 = time.perf_counter()
    rows = problem.all_rows()
    n = problem.n_z
    G, c = problem.full_hessian, problem.full_linear
    A = np.array([r.coeffs for r in rows]).reshape(len(rows), n)
    b = np.array([r.bound for r in rows])
    labels = [r.label for r in rows]
    eq_idx = [i for i, r in enumerate(rows) if r.equality]

    z = np.zeros(n)
    if problem.max_violation(z) > tol:
        z0 = _phase_one(problem)
        if z0 is None:
            return QpSolution(np.zeros(problem.n_x), np.zeros(problem.n_slack), {}, [], float("inf"),
                              STATUS_INFEASIBLE, time.perf_counter() - t0)
        z = np.asarray(z0, dtype=float)

    working = sorted(eq_idx, key=lambda i: labels[i])
    lam_w = np.zeros(len(working))
    status = STATUS_FAILED
    it = 0
    for it in range(1, max_iter + 1):
        A_w = A[working] if working else np.zeros((0, n))
        try:
            p, lam_w = _solve_eqp(G, G @ z + c, A_w)
        except np.linalg.LinAlgError:
            logger.warning("singular KKT matrix in active-set iteration %d", it)
            break
        if np.max(np.abs(p)) <= 1e-12 * (1.0 + np.max(np.abs(z))):
            ineq_pos = [(lam_w[k], labels[i], k) for k, i in enumerate(working) if i not in eq_idx]
            negative = [t for t in ineq_pos if t[0] < -tol]
            if not negative:
                status = STATUS_OPTIMAL
                break
            working.pop(_pick(negative))
            continue
        step, block = 1.0, None
        Ap = A @ p
        cands = []
        for i in range(len(rows)):
            if i in working or Ap[i] <= 1e-14:
                continue
            slack = max(b[i] - A[i] @ z, 0.0)
            cands.append((slack / Ap[i], labels[i], i))
        if cands:
            alpha_min = min(v for v, _, _ in cands)
            if alpha_min < 1.0:
                step, block = alpha_min, _pick(cands)
        z = z + step * p
        if block is not None:
            working.append(block)

    lam = np.zeros(len(rows))
    for k, i in enumerate(working):
        lam[i] = lam_w[k] if k < lam_w.size else 0.0
    rep = _kkt_residuals(problem, z, lam, rows)
    if status == STATUS_OPTIMAL and rep.max_residual > TOL_REPORT:
        status = STATUS_FAILED
    if status != STATUS_OPTIMAL:
        logger.warning("QP did not converge: iterations=%d residual=%.3g", it, rep.max_residual)
    resid = A @ z - b
    active = sorted(lab for i, lab in enumerate(labels)
                    if lam[i] > tol or abs(resid[i]) <= tol)
    return QpSolution(
        x_star=z[: problem.n_x].copy(), s_star=z[problem.n_x:].copy(),
        multipliers={lab: float(lam[i]) for i, lab in enumerate(labels)},
        active_set=active, kkt_residual=rep.max_residual, status=status,
        solve_time=time.perf_counter() - t0, iterations=it, objective=problem.objective(z),
    )
