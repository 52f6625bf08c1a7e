"""Convex trust-region subproblem over ball-and-box with penalized voltage limits.

After eliminating the predicted voltage through the linear model, the
subproblem is a convex quadratic in the injection over {ball} ∩ {box}, plus
hinge penalties on the linearized voltage box. Solution tiers:

  1. unconstrained stationary point, accepted when strictly feasible;
  2. accelerated projected gradient with exact ball-box projection;
  3. a damped-Newton barrier solve of the hinge epigraph form, used when the
     voltage-box penalties are active (they rarely are at feeder scale).

Every accepted point is KKT-verified against the requested tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError, ParameterError, SolverError
from .penalty import PenaltySpec, QuadraticCost

DEFAULT_TOL = 1e-8
TRUST_EDGE_TOL = 1e-8


@dataclass(frozen=True)
class TrustRegionSpec:
    """One linearized step problem: center, sensitivity, radius and boxes."""

    radius: float
    center_u: np.ndarray
    center_y: np.ndarray
    matrix: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    y_lo: np.ndarray | None = None
    y_hi: np.ndarray | None = None

    def __post_init__(self):
        for name in ("center_u", "center_y", "matrix", "u_lo", "u_hi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        for name in ("y_lo", "y_hi"):
            if getattr(self, name) is not None:
                object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.radius <= 0.0:
            raise ParameterError("trust radius must be positive")
        if np.any(self.center_u < self.u_lo - 1e-12) or np.any(self.center_u > self.u_hi + 1e-12):
            raise ParameterError("center_u must lie inside the injection box")


@dataclass(frozen=True)
class SubproblemSolution:
    u_next: np.ndarray
    y_pred: np.ndarray
    objective: float
    active_trust: bool
    kkt_residual: float
    hinge_violation: float  # max positive linearized voltage-box violation


def project_ball_box(
    point: np.ndarray,
    center: np.ndarray,
    radius: float,
    lo: np.ndarray,
    hi: np.ndarray,
    tol: float = 1e-12,
) -> np.ndarray:
    """Exact Euclidean projection onto {||q - center|| <= radius} ∩ [lo, hi].

    The ball multiplier is the only coupling; q(theta) = clip((point + theta
    center) / (1 + theta)) is monotone in theta, so a one-dimensional
    bisection locates the multiplier at which the ball constraint holds.
    Requires center inside the box, which makes the intersection nonempty.
    """
    point = np.asarray(point, dtype=float)
    q0 = np.clip(point, lo, hi)
    if np.linalg.norm(q0 - center) <= radius:
        return q0

    def q_of(theta: float) -> np.ndarray:
        return np.clip((point + theta * center) / (1.0 + theta), lo, hi)

    theta_hi = 1.0
    while np.linalg.norm(q_of(theta_hi) - center) > radius:
        theta_hi *= 4.0
        if theta_hi > 1e18:
            raise SolverError("ball-box projection failed; is the center inside the box?")
    theta_lo = 0.0
    for _ in range(200):
        mid = 0.5 * (theta_lo + theta_hi)
        if np.linalg.norm(q_of(mid) - center) > radius:
            theta_lo = mid
        else:
            theta_hi = mid
        if theta_hi - theta_lo <= tol * (1.0 + theta_hi):
            break
    return q_of(theta_hi)


class _Reduced:
    """Quadratic data of the reduced subproblem plus the hinge rows."""

    def __init__(self, cost: QuadraticCost, spec: TrustRegionSpec, eta_y: np.ndarray | None):
        m_sens = spec.matrix
        self.nu = spec.center_u.size
        y0 = spec.center_y - m_sens @ spec.center_u - cost.y_ref
        self.H = 2.0 * cost.w_v * m_sens.T @ m_sens + 2.0 * cost.w_u * np.eye(self.nu)
        self.glin = 2.0 * cost.w_v * m_sens.T @ y0
        self.const = float(cost.w_v * y0 @ y0)
        self.center = spec.center_u
        self.radius = float(spec.radius)
        self.lo = spec.u_lo
        self.hi = spec.u_hi
        self.lip = float(np.linalg.eigvalsh(self.H)[-1])
        self.sigma = float(np.linalg.eigvalsh(self.H)[0])

        rows, offs, etas = [], [], []
        n = spec.center_y.size
        if eta_y is None:
            eta_y = np.zeros(2 * n)
        if spec.y_hi is not None:
            for i in range(n):
                if np.isfinite(spec.y_hi[i]) and eta_y[i] > 0.0:
                    rows.append(m_sens[i])
                    offs.append(spec.y_hi[i] - spec.center_y[i] + m_sens[i] @ spec.center_u)
                    etas.append(eta_y[i])
        if spec.y_lo is not None:
            for i in range(n):
                if np.isfinite(spec.y_lo[i]) and eta_y[n + i] > 0.0:
                    rows.append(-m_sens[i])
                    offs.append(spec.center_y[i] - m_sens[i] @ spec.center_u - spec.y_lo[i])
                    etas.append(eta_y[n + i])
        self.A = np.array(rows) if rows else np.zeros((0, self.nu))
        self.b = np.array(offs)
        self.eta = np.array(etas)
        self.mh = self.A.shape[0]

    def quad(self, u: np.ndarray) -> float:
        return 0.5 * float(u @ self.H @ u) + float(self.glin @ u) + self.const

    def grad_quad(self, u: np.ndarray) -> np.ndarray:
        return self.H @ u + self.glin

    def slacks(self, u: np.ndarray) -> np.ndarray:
        """Hinge arguments s(u) = A u - b; feasible when <= 0."""
        return self.A @ u - self.b if self.mh else np.zeros(0)

    def penalized(self, u: np.ndarray) -> float:
        val = self.quad(u)
        if self.mh:
            val += float(self.eta @ np.maximum(self.slacks(u), 0.0))
        return val

    def project(self, point: np.ndarray) -> np.ndarray:
        return project_ball_box(point, self.center, self.radius, self.lo, self.hi)

    def min_norm_subgrad(self, u: np.ndarray, mu_hint: np.ndarray | None, kink_tol: float = 1e-9) -> np.ndarray:
        g = self.grad_quad(u)
        if not self.mh:
            return g
        s = self.slacks(u)
        mu = np.zeros(self.mh)
        for i in range(self.mh):
            if s[i] > kink_tol:
                mu[i] = self.eta[i]
            elif abs(s[i]) <= kink_tol:
                mu[i] = np.clip(mu_hint[i], 0.0, self.eta[i]) if mu_hint is not None else 0.0
        return g + self.A.T @ mu

    def kkt_residual(self, u: np.ndarray, mu_hint: np.ndarray | None = None) -> float:
        g = self.min_norm_subgrad(u, mu_hint)
        res = np.linalg.norm(u - self.project(u - g))
        return float(res / max(1.0, np.linalg.norm(g)))


def _ball_constrained(red: _Reduced) -> np.ndarray | None:
    """Exact minimizer of the quadratic over the trust ball alone.

    Solves the secular equation in the ball multiplier by bisection; the
    caller checks box and hinge feasibility before accepting it.
    """
    center = red.center

    def u_of(theta: float) -> np.ndarray:
        h_shift = red.H + 2.0 * theta * np.eye(red.nu)
        return np.linalg.solve(h_shift, -red.glin + 2.0 * theta * center)

    u0 = u_of(0.0)
    if np.linalg.norm(u0 - center) <= red.radius:
        return u0
    lo_t, hi_t = 0.0, 1.0
    for _ in range(120):
        if np.linalg.norm(u_of(hi_t) - center) <= red.radius:
            break
        hi_t *= 4.0
    else:
        return None
    for _ in range(120):
        mid = 0.5 * (lo_t + hi_t)
        if np.linalg.norm(u_of(mid) - center) > red.radius:
            lo_t = mid
        else:
            hi_t = mid
        if hi_t - lo_t <= 1e-14 * (1.0 + hi_t):
            break
    return u_of(hi_t)


def _fista(red: _Reduced, u0: np.ndarray, tol: float, max_iter: int = 20000) -> np.ndarray:
    """Accelerated projected gradient on the smooth quadratic over ball-box."""
    u = red.project(u0)
    v = u.copy()
    tk = 1.0
    step = 1.0 / max(red.lip, 1e-30)
    best_u = u
    best_f = red.quad(u)
    for it in range(max_iter):
        g = red.grad_quad(v)
        u_new = red.project(v - step * g)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        v = u_new + ((tk - 1.0) / t_next) * (u_new - u)
        f_new = red.quad(u_new)
        if f_new > best_f:  # restart the momentum when it overshoots
            v = u_new.copy()
            t_next = 1.0
        if f_new < best_f:
            best_f, best_u = f_new, u_new
        u, tk = u_new, t_next
        if it % 10 == 0:
            g_here = red.grad_quad(best_u)
            res = np.linalg.norm(best_u - red.project(best_u - g_here))
            if res <= 0.25 * tol * max(1.0, np.linalg.norm(g_here)):
                break
    return best_u


def _barrier_epigraph(red: _Reduced, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Damped-Newton barrier solve of min quad(u) + eta' t, t >= 0, t >= s(u), u in ball-box.

    Returns (u, hinge multipliers). Used only when hinge rows exist.
    """
    nu, mh = red.nu, red.mh
    width = red.hi - red.lo
    u = np.clip(red.center, red.lo + 0.01 * width, red.hi - 0.01 * width)
    gap_to_center = np.linalg.norm(u - red.center)
    if gap_to_center >= red.radius:
        u = red.center + (0.45 * red.radius / gap_to_center) * (u - red.center)
    t = np.maximum(red.slacks(u), 0.0) + 1.0
    m_logs = 2 * mh + 1 + int(np.sum(np.isfinite(red.lo))) + int(np.sum(np.isfinite(red.hi)))

    def slack_pack(uv, tv):
        ball = red.radius**2 - float((uv - red.center) @ (uv - red.center))
        return tv, tv - red.slacks(uv), ball, uv - red.lo, red.hi - uv

    def strictly_feasible(uv, tv) -> bool:
        s_t, s_ts, ball, s_lo, s_hi = slack_pack(uv, tv)
        return bool(ball > 0 and np.all(s_t > 0) and np.all(s_ts > 0) and np.all(s_lo > 0) and np.all(s_hi > 0))

    def merit(uv, tv, tau) -> float:
        s_t, s_ts, ball, s_lo, s_hi = slack_pack(uv, tv)
        val = tau * (red.quad(uv) + float(red.eta @ tv))
        val -= np.sum(np.log(s_t)) + np.sum(np.log(s_ts)) + math.log(ball)
        val -= np.sum(np.log(s_lo[np.isfinite(red.lo)])) + np.sum(np.log(s_hi[np.isfinite(red.hi)]))
        return float(val)

    tau = 1.0
    target = max(1e-2 * tol, 1e-13)
    while True:
        for _ in range(200):
            s_t, s_ts, ball, s_lo, s_hi = slack_pack(u, t)
            du_ball = 2.0 * (u - red.center)
            # Gradient blocks.
            gu = tau * red.grad_quad(u)
            gu += du_ball / ball
            with np.errstate(divide="ignore"):
                inv_lo = np.where(np.isfinite(red.lo), 1.0 / s_lo, 0.0)
                inv_hi = np.where(np.isfinite(red.hi), 1.0 / s_hi, 0.0)
            gu += -inv_lo + inv_hi
            gt = tau * red.eta - 1.0 / s_t
            if mh:
                gu += red.A.T @ (1.0 / s_ts)
                gt -= 1.0 / s_ts
            # Hessian blocks.
            huu = tau * red.H + (2.0 / ball) * np.eye(nu) + np.outer(du_ball, du_ball) / ball**2
            huu += np.diag(inv_lo**2 + inv_hi**2)
            if mh:
                w_ts = 1.0 / s_ts**2
                huu += (red.A * w_ts[:, None]).T @ red.A
                hut = -(red.A * w_ts[:, None]).T
                htt = np.diag(1.0 / s_t**2 + w_ts)
                kkt = np.block([[huu, hut], [hut.T, htt]])
                rhs = -np.concatenate((gu, gt))
            else:
                kkt = huu
                rhs = -gu
            try:
                dw = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                dw = np.linalg.solve(kkt + 1e-12 * np.eye(kkt.shape[0]), rhs)
            decrement_sq = float(rhs @ dw)  # rhs = -grad
            du, dt = dw[:nu], dw[nu:]
            if decrement_sq / 2.0 <= 1e-12:
                break
            alpha = 1.0
            m0 = merit(u, t, tau)
            for _ in range(80):
                u_try, t_try = u + alpha * du, t + alpha * dt
                if strictly_feasible(u_try, t_try) and merit(u_try, t_try, tau) < m0 - 1e-13 * alpha:
                    break
                alpha *= 0.5
            else:
                break
            u, t = u + alpha * du, t + alpha * dt
        if m_logs / tau <= target:
            break
        tau *= 20.0
        if tau > 1e18:
            raise SolverError("barrier continuation exceeded its parameter cap")
    s_t, s_ts, *_ = slack_pack(u, t)
    mu = (1.0 / s_ts) / tau if mh else np.zeros(0)
    return u, np.clip(mu, 0.0, red.eta)


def solve_trust_region(
    cost: QuadraticCost,
    spec: TrustRegionSpec,
    pen: PenaltySpec | None = None,
    tol: float = DEFAULT_TOL,
    y_box_mode: str = "penalty",
    warm_start: np.ndarray | None = None,
) -> SubproblemSolution:
    """Minimize the linearized cost over trust ball, injection box and voltage box.

    The voltage box enters as an exact penalty with the weights of `pen`
    ("penalty" mode, the default); in "hard" mode the weights are escalated
    and InfeasibleError is raised if a violation persists, which signals an
    empty intersection for the current linearization.
    """
    n = spec.center_y.size
    eta_y = pen.eta_y(n) if pen is not None else None
    red = _Reduced(cost, spec, eta_y)

    mu_hint: np.ndarray | None = None
    u_best: np.ndarray | None = None

    # Tier 1: unconstrained stationary point of the quadratic.
    if red.sigma > 1e-14:
        u_unc = np.linalg.solve(red.H, -red.glin)
        inside = (
            np.linalg.norm(u_unc - red.center) <= red.radius - 1e-12
            and np.all(u_unc >= red.lo + 1e-12)
            and np.all(u_unc <= red.hi - 1e-12)
            and (red.mh == 0 or np.all(red.slacks(u_unc) < -1e-12))
        )
        if inside:
            u_best = u_unc

    # Tier 1b: exact trust-region step when only the ball can be active.
    if u_best is None and red.sigma > 1e-14:
        u_ball = _ball_constrained(red)
        if u_ball is not None:
            inside_box = np.all(u_ball >= red.lo + 1e-12) and np.all(u_ball <= red.hi - 1e-12)
            if inside_box and (red.mh == 0 or np.all(red.slacks(u_ball) < -1e-12)):
                u_best = u_ball

    # Tier 2: projected accelerated gradient, valid while hinges stay inactive.
    if u_best is None:
        u_pg = _fista(red, warm_start if warm_start is not None else red.center, tol)
        if red.mh == 0 or np.all(red.slacks(u_pg) <= 1e-12):
            if red.kkt_residual(u_pg) <= tol:
                u_best = u_pg

    # Tier 3: barrier solve with the hinge epigraph (also the smooth fallback).
    if u_best is None:
        u_bar, mu_hint = _barrier_epigraph(red, tol)
        u_best = red.project(u_bar)

    # Zero step is always feasible; never return anything worse.
    if red.penalized(u_best) > red.penalized(red.center):
        u_best = red.center.copy()
        mu_hint = None

    kkt = red.kkt_residual(u_best, mu_hint)
    slacks = red.slacks(u_best)
    violation = float(np.max(slacks, initial=0.0))

    if y_box_mode == "hard" and violation > 1e-8:
        for boost in (1e2, 1e4, 1e6):
            red_hard = _Reduced(cost, spec, (eta_y if eta_y is not None else np.ones(2 * n)) * boost)
            u_hard, mu_h = _barrier_epigraph(red_hard, tol)
            u_hard = red_hard.project(u_hard)
            if float(np.max(red_hard.slacks(u_hard), initial=0.0)) <= 1e-8:
                u_best, mu_hint = u_hard, mu_h
                kkt = red_hard.kkt_residual(u_best, mu_hint)
                violation = float(np.max(red_hard.slacks(u_best), initial=0.0))
                break
        else:
            raise InfeasibleError(
                "voltage box cuts off the whole trust ball for this linearization"
            )

    step_norm = float(np.linalg.norm(u_best - spec.center_u))
    y_pred = spec.center_y + spec.matrix @ (u_best - spec.center_u)
    return SubproblemSolution(
        u_next=u_best,
        y_pred=y_pred,
        objective=red.penalized(u_best),
        active_trust=bool(abs(step_norm - spec.radius) <= TRUST_EDGE_TOL),
        kkt_residual=kkt,
        hinge_violation=violation,
    )
