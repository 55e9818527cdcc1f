"""Per-step hedging decision: no-trade band, descent gate, boxed QP, churn filters.

Risk and cost are

    R(e) = 1/2 (a_D e_D^2 + a_V e_V^2 + 2 a_x rho e_D e_V)
    C(x) = eta_S dS^2 + eta_V dV^2 + gamma ||x - x_prev||^2

and the QP minimises 1/2 x'Hx + f'x + rho_soft ||s||^2, which equals
R_move(e - x) + C(x)/2 up to a constant when the VIX-leg weight is w_VIX.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import qp_core
from .qp_core import Constraint, QpProblem, QpSolution

logger = logging.getLogger(__name__)

NTB_INACTION = "ntb_inaction"
GATE_BLOCKED = "gate_blocked"
TRADED = "traded"
COOLDOWN_HOLD = "cooldown_hold"
DECISIONS = (NTB_INACTION, GATE_BLOCKED, TRADED, COOLDOWN_HOLD)

DESCENT_TOL = 1e-10
RHO_DEGENERATE_VAR = 1e-16


class ParameterError(ValueError):
    """Controller parameters violate a structural requirement."""


class ContractViolation(RuntimeError):
    """An operation was called outside its precondition."""


@dataclass(frozen=True)
class Boxes:
    err_s: float = 1.0
    err_v: float = 1.0
    inv_s: float = 1.5
    inv_v: float = 4.0
    rate_s: float = 0.25
    rate_v: float = 0.5
    cvar_s: float = 0.2
    cvar_v: float = 0.5

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ParameterError(f"box {k} must be > 0")


@dataclass(frozen=True)
class ControllerParams:
    alpha_delta: float = 1.0
    alpha_v: float = 1.0
    alpha_cross: float | None = None
    eta_s: float = 0.05
    eta_v: float = 0.05
    gamma_smooth: float = 0.01
    w_vix_base: float = 1.0
    lambda_rho: float = 1.5
    band_radii: tuple[float, float] = (0.05, 0.1)
    guards: tuple[float, float, float] = (0.5, 0.25, 0.3)
    gate: tuple[float, float] = (0.6, 0.4)
    lambda_c: float = 0.5
    boxes: Boxes = field(default_factory=Boxes)
    rho_soft: float = 10.0
    thresholds: tuple[float, float] = (0.01, 0.02)
    cooldown_steps: int = 3
    ewma_lambda: float = 0.94
    T0: float = 60.0 / 365.0
    cbf_alpha: tuple[float, float] = (0.5, 0.5)
    cbf_sigma: tuple[float, float] = (0.0, 0.0)
    use_guards: bool = True
    dynamic_weight: bool = True
    use_thresholds: bool = True
    use_cooldown: bool = True

    def __post_init__(self):
        if self.alpha_cross is None:
            object.__setattr__(self, "alpha_cross", 0.1 * math.sqrt(self.alpha_delta * self.alpha_v))
        object.__setattr__(self, "band_radii", tuple(float(b) for b in self.band_radii))
        object.__setattr__(self, "guards", tuple(float(g) for g in self.guards))
        object.__setattr__(self, "gate", tuple(float(g) for g in self.gate))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "cbf_alpha", tuple(float(a) for a in self.cbf_alpha))
        object.__setattr__(self, "cbf_sigma", tuple(float(s) for s in self.cbf_sigma))
        if isinstance(self.boxes, dict):
            object.__setattr__(self, "boxes", Boxes(**self.boxes))
        if self.alpha_delta < 0 or self.alpha_v < 0:
            raise ParameterError("risk weights must be nonnegative")
        if self.alpha_cross ** 2 > self.alpha_delta * self.alpha_v + 1e-15:
            raise ParameterError("risk matrix not PSD: need alpha_cross^2 <= alpha_delta * alpha_v")
        if not (self.eta_s > 0 and self.eta_v > 0):
            raise ParameterError("impact coefficients must be > 0")
        if self.gamma_smooth < 0:
            raise ParameterError("gamma_smooth must be >= 0")
        if not (self.w_vix_base > 0 and self.lambda_rho > 0):
            raise ParameterError("w_vix_base and lambda_rho must be > 0")
        if min(self.band_radii) <= 0:
            raise ParameterError("band radii must be > 0")
        if min(self.guards) < 0:
            raise ParameterError("guard gains must be >= 0")
        tau0, tau1 = self.gate
        if not tau0 > 0 or tau1 < 0:
            raise ParameterError("gate needs tau0 > 0 and tau1 >= 0")
        if not 0 < self.lambda_c < tau0:
            raise ParameterError(f"need 0 < lambda_c < tau0, got lambda_c={self.lambda_c}, tau0={tau0}")
        if not self.rho_soft > 0:
            raise ParameterError("rho_soft must be > 0")
        if min(self.thresholds) <= 0:
            raise ParameterError("micro-threshold bases must be > 0")
        if int(self.cooldown_steps) < 1:
            raise ParameterError("cooldown_steps must be >= 1")
        if not 0 < self.ewma_lambda < 1:
            raise ParameterError("ewma_lambda must lie in (0, 1)")
        if not self.T0 > 0:
            raise ParameterError("T0 must be > 0")
        if any(not 0 <= a < 1 for a in self.cbf_alpha) or min(self.cbf_sigma) < 0:
            raise ParameterError("CBF rates need alpha in [0, 1) and sigma >= 0")

    @property
    def tau_min(self) -> float:
        return self.gate[0]

    def tau(self, w: float) -> float:
        return self.gate[0] + self.gate[1] * (1.0 - w)

    def threshold_s(self, w: float) -> float:
        return self.thresholds[0] * (1.0 + (1.0 - w))

    def threshold_v(self, w: float) -> float:
        return self.thresholds[1] * (1.0 + (1.0 - w))


def baseline_params(p: ControllerParams) -> ControllerParams:
    """Guards, dynamic weight, micro-thresholds and cooldown off; gate and boxes kept."""
    return replace(p, use_guards=False, dynamic_weight=False, use_thresholds=False, use_cooldown=False)


@dataclass
class ControllerState:
    h_s: float = 0.0
    h_v: float = 0.0
    prev_trade: tuple[float, float] = (0.0, 0.0)
    cooldown_v: int = 0
    ewma: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rho_hat: float = 0.0
    kappa_eff_prev: float | None = None

    def __post_init__(self):
        if self.cooldown_v < 0:
            raise ValueError("cooldown_v must be >= 0")
        if abs(self.rho_hat) > 1:
            raise ValueError("rho_hat must lie in [-1, 1]")


@dataclass(frozen=True)
class CbfChannel:
    """Discrete barrier h(z+) >= (1 - alpha) h(z) - sigma with h(z+) = h(z) + grad_x . x."""

    label: str
    barrier_h: Callable[[ControllerState], float]
    grad_x: tuple[float, float]
    alpha_i: float
    sigma_i: float = 0.0

    def __post_init__(self):
        if not 0 <= self.alpha_i < 1:
            raise ParameterError("alpha_i must lie in [0, 1)")
        if self.sigma_i < 0:
            raise ParameterError("sigma_i must be >= 0")

    def row(self, state: ControllerState, n_slack: int = 2) -> Constraint:
        """-grad_x . x <= alpha h(z) + sigma; the bound is clamped at 0 so x = 0 stays feasible."""
        h = self.barrier_h(state)
        bound = max(self.alpha_i * h + self.sigma_i, 0.0)
        a = np.zeros(2 + n_slack)
        a[:2] = -np.asarray(self.grad_x, dtype=float)
        return Constraint(self.label, a, bound)


def inventory_channels(params: ControllerParams) -> list[CbfChannel]:
    bx = params.boxes
    (a_s, a_v), (s_s, s_v) = params.cbf_alpha, params.cbf_sigma
    return [
        CbfChannel("invS_upper", lambda st: bx.inv_s - st.h_s, (-1.0, 0.0), a_s, s_s),
        CbfChannel("invS_lower", lambda st: bx.inv_s + st.h_s, (1.0, 0.0), a_s, s_s),
        CbfChannel("invV_upper", lambda st: bx.inv_v - st.h_v, (0.0, -1.0), a_v, s_v),
        CbfChannel("invV_lower", lambda st: bx.inv_v + st.h_v, (0.0, 1.0), a_v, s_v),
    ]


@dataclass
class TelemetryRecord:
    step_index: int
    decision: str
    trade: tuple[float, float]
    risk_before: float
    risk_after: float
    cost: float
    active_set: list[str]
    tightest_label: str
    rate_util: float
    slack_sum: float
    solver_status: str
    solve_time: float
    seed: int = 0
    path: int = 0
    w: float = 1.0
    tau_w: float = 0.0
    lambda_c: float = 0.0
    rho_hat: float = 0.0
    w_vix_eff: float = 0.0
    errors: tuple[float, float] = (0.0, 0.0)
    b_v_eff: float = 0.0
    candidate: tuple[float, float] = (0.0, 0.0)
    qp_trade: tuple[float, float] = (0.0, 0.0)
    qp_risk_after: float = float("nan")
    qp_cost: float = float("nan")
    veto_reason: str = ""
    h_s: float = 0.0
    h_v: float = 0.0
    inv_bounds: tuple[float, float] = (0.0, 0.0)
    rate_caps: tuple[float, float] = (0.0, 0.0)
    cooldown_v: int = 0
    cooldown_steps: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("trade", "errors", "candidate", "qp_trade", "inv_bounds", "rate_caps"):
            d[k] = [float(v) for v in d[k]]
        return d


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def risk(e, params: ControllerParams, rho_hat: float) -> float:
    eD, eV = float(e[0]), float(e[1])
    return 0.5 * (params.alpha_delta * eD * eD + params.alpha_v * eV * eV
                  + 2.0 * params.alpha_cross * rho_hat * eD * eV)


def cost(x, params: ControllerParams, prev_trade=(0.0, 0.0)) -> float:
    x = np.asarray(x, dtype=float)
    d = x - np.asarray(prev_trade, dtype=float)
    return float(params.eta_s * x[0] ** 2 + params.eta_v * x[1] ** 2 + params.gamma_smooth * d @ d)


def update_ewma(state: ControllerState, dS_ret: float, dV_ret: float, lam: float) -> ControllerState:
    if not 0 < lam < 1:
        raise ParameterError("ewma lambda must lie in (0, 1)")
    cov, vs, vv = state.ewma
    cov = lam * cov + (1 - lam) * dS_ret * dV_ret
    vs = lam * vs + (1 - lam) * dS_ret * dS_ret
    vv = lam * vv + (1 - lam) * dV_ret * dV_ret
    if vs < RHO_DEGENERATE_VAR or vv < RHO_DEGENERATE_VAR:
        rho = 0.0
    else:
        rho = float(np.clip(cov / math.sqrt(vs * vv), -1.0, 1.0))
    return replace(state, ewma=(cov, vs, vv), rho_hat=rho)


def dynamic_vix_weight(params: ControllerParams, w: float, rho_hat: float) -> float:
    if not 0 <= w <= 1:
        raise ValueError("w must lie in [0, 1]")
    return params.w_vix_base / (1.0 + params.lambda_rho * (1.0 - w) * abs(rho_hat))


@dataclass(frozen=True)
class NtbResult:
    inside: bool
    b_v_eff: float
    radius: float


def ntb_check(errors, params: ControllerParams, w: float, rho_hat: float, dkappa: float) -> NtbResult:
    b_d, b_v = params.band_radii
    tail, trho, tpred = params.guards if params.use_guards else (0.0, 0.0, 0.0)
    eV = float(errors[1])
    pred = 1.0 + tpred if np.sign(eV) != np.sign(dkappa) else 1.0
    b_v_eff = b_v * (1.0 + tail * (1.0 - w)) * (1.0 + trho * abs(rho_hat)) * pred
    r2 = (float(errors[0]) / b_d) ** 2 + (eV / b_v_eff) ** 2
    return NtbResult(bool(r2 <= 1.0), float(b_v_eff), math.sqrt(r2))


def project_to_band(errors, b_d: float, b_v_eff: float) -> np.ndarray:
    """x = e - p with p the radial projection of e onto the ellipse boundary."""
    e = np.asarray(errors, dtype=float)
    r = math.hypot(e[0] / b_d, e[1] / b_v_eff)
    if r <= 1.0:
        raise ContractViolation("project_to_band called with errors inside the band")
    return e - e / r


@dataclass(frozen=True)
class GateResult:
    accept: bool
    risk_drop: float
    cost: float
    tau_w: float


def gate_check(errors, candidate, params: ControllerParams, w: float, rho_hat: float = 0.0,
               prev_trade=(0.0, 0.0)) -> GateResult:
    e = np.asarray(errors, dtype=float)
    x = np.asarray(candidate, dtype=float)
    drop = risk(e, params, rho_hat) - risk(e - x, params, rho_hat)
    c = cost(x, params, prev_trade)
    tau_w = params.tau(w)
    return GateResult(bool(drop > tau_w * c), float(drop), c, tau_w)


def build_step_qp(state: ControllerState, errors, params: ControllerParams, w: float,
                  rho_hat: float, w_vix_eff: float) -> QpProblem:
    """Boxed tracking QP in z = (dS, dV, s1, s2).

    Error and CVaR boxes use max(bound, |e|) so the origin is always feasible; the
    inventory rows are discrete barrier rows.
    """
    e = np.asarray(errors, dtype=float)
    a_x = params.alpha_cross * rho_hat
    W = np.array([[params.alpha_delta, a_x], [a_x, w_vix_eff]])
    if np.min(np.linalg.eigvalsh(W)) < -1e-12:
        raise ParameterError(f"risk matrix not PSD at rho_hat={rho_hat:.4f}, w_vix_eff={w_vix_eff:.4f}")
    x_prev = np.asarray(state.prev_trade, dtype=float)
    H = W + np.diag([params.eta_s, params.eta_v]) + params.gamma_smooth * np.eye(2)
    f = -W @ e - params.gamma_smooth * x_prev
    bx = params.boxes
    rows: list[Constraint] = []

    def pair(base, coeffs, center, bound):
        # |center - coeffs . z| <= bound  ->  two rows
        c = np.asarray(coeffs, dtype=float)
        rows.append(Constraint(f"{base}_upper", -c, bound - center))
        rows.append(Constraint(f"{base}_lower", c, bound + center))

    pair("errS", [1, 0, 0, 0], e[0], max(bx.err_s, abs(e[0])))
    pair("errV", [0, 1, 0, 0], e[1], max(bx.err_v, abs(e[1])))
    rows.extend(ch.row(state) for ch in inventory_channels(params))
    pair("rate_S", [1, 0, 0, 0], 0.0, bx.rate_s)
    pair("rate_V", [0, 1, 0, 0], 0.0, bx.rate_v)
    cs, cv = max(bx.cvar_s, abs(e[0])), max(bx.cvar_v, abs(e[1]))
    # soft rows: |e - x| <= bound + s
    rows.append(Constraint("cvarS_upper", [-1, 0, -1, 0], cs - e[0]))
    rows.append(Constraint("cvarS_lower", [1, 0, -1, 0], cs + e[0]))
    rows.append(Constraint("cvarV_upper", [0, -1, 0, -1], cv - e[1]))
    rows.append(Constraint("cvarV_lower", [0, 1, 0, -1], cv + e[1]))
    if params.use_cooldown and state.cooldown_v > 0:
        rows.append(Constraint("cooldown_V", [0, 1, 0, 0], 0.0, equality=True))
    return QpProblem(H, f, tuple(rows), params.rho_soft, n_slack=2)


def apply_micro_thresholds(x_star, w: float, params: ControllerParams) -> np.ndarray:
    x = np.array(x_star, dtype=float)
    if abs(x[0]) < params.threshold_s(w):
        x[0] = 0.0
    if abs(x[1]) < params.threshold_v(w):
        x[1] = 0.0
    return x


def sufficient_descent(e, x, params: ControllerParams, rho_hat: float, tau_w: float,
                       prev_trade) -> tuple[bool, float, float]:
    r_after = risk(np.asarray(e) - np.asarray(x), params, rho_hat)
    c = cost(x, params, prev_trade)
    ok = r_after <= risk(e, params, rho_hat) - (tau_w - params.lambda_c) * c + DESCENT_TOL
    return ok, r_after, c


def _tightest(sol: QpSolution) -> str:
    pos = [(v, k) for k, v in sol.multipliers.items() if v > qp_core.TOL_INTERNAL]
    if not pos:
        return ""
    best = max(v for v, _ in pos)
    return min(k for v, k in pos if v >= best * (1 - 1e-12))


def controller_step(state: ControllerState, targets, market, params: ControllerParams, T_rem: float,
                    step_index: int = 0, *, seed: int = 0, path: int = 0):
    """One decision. Returns (executed trade, new state, telemetry record)."""
    if T_rem < 0:
        raise ValueError("T_rem must be >= 0")
    delta_star, kappa_eff = (float(v) for v in targets)
    st = update_ewma(state, float(market[0]), float(market[1]), params.ewma_lambda)
    rho = st.rho_hat
    w = min(max(T_rem / params.T0, 0.0), 1.0)
    w_eff = dynamic_vix_weight(params, w, rho) if params.dynamic_weight else params.w_vix_base
    e = np.array([delta_star - st.h_s, kappa_eff - st.h_v])
    dkappa = 0.0 if st.kappa_eff_prev is None else kappa_eff - st.kappa_eff_prev
    x_prev = np.asarray(st.prev_trade, dtype=float)
    r0 = risk(e, params, rho)
    tau_w = params.tau(w)
    bx = params.boxes
    rec = TelemetryRecord(
        step_index=step_index, decision=NTB_INACTION, trade=(0.0, 0.0), risk_before=r0,
        risk_after=r0, cost=0.0, active_set=[], tightest_label="", rate_util=0.0, slack_sum=0.0,
        solver_status="skipped", solve_time=0.0, seed=seed, path=path, w=w, tau_w=tau_w,
        lambda_c=params.lambda_c, rho_hat=rho, w_vix_eff=w_eff, errors=(float(e[0]), float(e[1])),
        inv_bounds=(bx.inv_s, bx.inv_v), rate_caps=(bx.rate_s, bx.rate_v),
        cooldown_steps=params.cooldown_steps if params.use_cooldown else 0,
    )
    x = np.zeros(2)
    band = ntb_check(e, params, w, rho, dkappa)
    rec.b_v_eff = band.b_v_eff
    if not band.inside:
        cand = project_to_band(e, params.band_radii[0], band.b_v_eff)
        rec.candidate = (float(cand[0]), float(cand[1]))
        g = gate_check(e, cand, params, w, rho, x_prev)
        if not g.accept:
            rec.decision, rec.veto_reason = GATE_BLOCKED, "gate"
        else:
            x = _qp_stage(st, e, params, w, rho, w_eff, tau_w, g, rec)
    # cooldown bookkeeping and state update
    if params.use_cooldown and x[1] != 0.0:
        cooldown = int(params.cooldown_steps)
    else:
        cooldown = max(st.cooldown_v - 1, 0)
    if rec.decision == TRADED and not np.any(x):
        rec.decision = COOLDOWN_HOLD if st.cooldown_v > 0 else GATE_BLOCKED
    new = replace(st, h_s=st.h_s + x[0], h_v=st.h_v + x[1], prev_trade=(float(x[0]), float(x[1])),
                  cooldown_v=cooldown, kappa_eff_prev=kappa_eff)
    rec.trade = (float(x[0]), float(x[1]))
    rec.risk_after = risk(e - x, params, rho)
    rec.cost = cost(x, params, x_prev) if np.any(x) else 0.0
    rec.rate_util = float(np.linalg.norm(x - x_prev) / max(bx.rate_s, bx.rate_v))
    rec.h_s, rec.h_v, rec.cooldown_v = new.h_s, new.h_v, cooldown
    return x, new, rec


def _qp_stage(st, e, params, w, rho, w_eff, tau_w, g: GateResult, rec: TelemetryRecord) -> np.ndarray:
    x_prev = np.asarray(st.prev_trade, dtype=float)
    problem = build_step_qp(st, e, params, w, rho, w_eff)
    sol = qp_core.solve(problem)
    rec.solver_status, rec.solve_time = sol.status, sol.solve_time
    rec.active_set, rec.tightest_label = sol.active_set, _tightest(sol)
    rec.slack_sum = float(np.sum(np.abs(sol.s_star)))
    rec.decision = TRADED
    if sol.status != qp_core.STATUS_OPTIMAL:
        rec.veto_reason = "numerical"
        return np.zeros(2)
    x_qp = sol.x_star.copy()
    if params.use_cooldown and st.cooldown_v > 0:
        x_qp[1] = 0.0  # exact zero on the equality row
    ok, r_qp, c_qp = sufficient_descent(e, x_qp, params, rho, tau_w, x_prev)
    rec.qp_trade = (float(x_qp[0]), float(x_qp[1]))
    rec.qp_risk_after, rec.qp_cost = r_qp, c_qp
    if c_qp > g.cost * (1 + 1e-12) + 1e-15:
        logger.debug("executed cost %.3g exceeds candidate cost %.3g", c_qp, g.cost)
    if not ok:
        rec.veto_reason = "descent"
        return np.zeros(2)
    x = apply_micro_thresholds(x_qp, w, params) if params.use_thresholds else x_qp
    if np.any(x != x_qp) and np.any(x):
        ok_f, _, _ = sufficient_descent(e, x, params, rho, tau_w, x_prev)
        if not ok_f:
            rec.veto_reason = "micro_threshold"
            return np.zeros(2)
    if not np.any(x):
        rec.veto_reason = "cooldown" if (params.use_cooldown and st.cooldown_v > 0) else "micro_threshold"
    return x
