"""Exact-penalty objective, its linearized surrogates, and decrease diagnostics.

The penalized objective augments the quadratic cost with weighted absolute
violations of the plant equation and hinge violations of the box constraints.
Its linearization around an operating point replaces the plant by a sensitivity
matrix; the gap between the two is what the trust-region diagnostics measure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDecrease, DimensionError, ParameterError

DECREASE_EPS = 1e-12


@dataclass(frozen=True)
class QuadraticCost:
    """cost(y, u) = w_v * ||y - y_ref||^2 + w_u * ||u||^2."""

    w_v: float
    w_u: float
    y_ref: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y_ref", np.asarray(self.y_ref, dtype=float))
        if self.w_v <= 0.0 or self.w_u < 0.0:
            raise ParameterError("need w_v > 0 and w_u >= 0")

    def voltage_cost(self, y: np.ndarray) -> float:
        d = np.asarray(y) - self.y_ref
        return float(self.w_v * d @ d)

    def control_cost(self, u: np.ndarray) -> float:
        u = np.asarray(u)
        return float(self.w_u * u @ u)

    def total(self, y: np.ndarray, u: np.ndarray) -> float:
        return self.voltage_cost(y) + self.control_cost(u)

    def grad_y(self, y: np.ndarray) -> np.ndarray:
        return 2.0 * self.w_v * (np.asarray(y) - self.y_ref)

    def grad_u(self, u: np.ndarray) -> np.ndarray:
        return 2.0 * self.w_u * np.asarray(u)


@dataclass(frozen=True)
class BoxSet:
    """Per-component bounds on the controllable injection and the voltage."""

    u_lo: np.ndarray
    u_hi: np.ndarray
    y_lo: np.ndarray
    y_hi: np.ndarray

    def __post_init__(self):
        for name in ("u_lo", "u_hi", "y_lo", "y_hi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @staticmethod
    def from_network(net) -> "BoxSet":
        u_lo, u_hi = net.u_bounds()
        y_lo, y_hi = net.y_bounds()
        return BoxSet(u_lo, u_hi, y_lo, y_hi)

    def h_values(self, y: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Stacked inequality values [y - y_hi, y_lo - y, u - u_hi, u_lo - u]; feasible <= 0."""
        y = np.asarray(y)
        u = np.asarray(u)
        return np.concatenate((y - self.y_hi, self.y_lo - y, u - self.u_hi, self.u_lo - u))


@dataclass(frozen=True)
class PenaltySpec:
    """Weights of the exact-penalty objective: lambda on |y - g(u)|, eta on hinge terms."""

    lambda_pen: np.ndarray  # one weight per bus voltage residual
    eta_pen: np.ndarray  # one weight per stacked inequality row

    def __post_init__(self):
        object.__setattr__(self, "lambda_pen", np.asarray(self.lambda_pen, dtype=float))
        object.__setattr__(self, "eta_pen", np.asarray(self.eta_pen, dtype=float))
        if np.any(self.lambda_pen < 0.0) or np.any(self.eta_pen < 0.0):
            raise ParameterError("penalty weights must be nonnegative")

    def eta_y(self, n: int) -> np.ndarray:
        """Hinge weights of the two voltage-box blocks, stacked [upper, lower]."""
        return self.eta_pen[: 2 * n]


def default_penalty_weights(cost: QuadraticCost, boxes: BoxSet, factor: float = 10.0) -> PenaltySpec:
    """Weights sized from a computable bound on the cost gradient over the boxes.

    Exact-penalty theory asks for weights dominating the constraint
    multipliers. The multiplier of each voltage-equation row is bounded by
    that component's cost gradient over the voltage box, and the box-row
    multipliers by the corresponding component gradients, so the weights are
    per-component bounds times a safety factor.
    """
    gy = 2.0 * cost.w_v * np.maximum(np.abs(boxes.y_lo - cost.y_ref), np.abs(boxes.y_hi - cost.y_ref))
    gu = 2.0 * cost.w_u * np.maximum(np.abs(boxes.u_lo), np.abs(boxes.u_hi))
    lam = factor * gy
    eta = factor * np.concatenate((gy, gy, gu, gu))
    return PenaltySpec(lambda_pen=lam, eta_pen=np.maximum(eta, 1e-3 * factor))


def penalty_objective(
    cost: QuadraticCost,
    pen: PenaltySpec,
    boxes: BoxSet,
    y: np.ndarray,
    u: np.ndarray,
    g_u: np.ndarray,
) -> float:
    """Penalized objective at z = (y, u), with g_u the plant voltage at u."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    g_u = np.asarray(g_u, dtype=float)
    if y.shape != g_u.shape:
        raise DimensionError("y and g(u) must share one length")
    j = cost.total(y, u)
    j += float(pen.lambda_pen @ np.abs(y - g_u))
    j += float(pen.eta_pen @ np.maximum(boxes.h_values(y, u), 0.0))
    return j


def linearized_penalty(
    cost: QuadraticCost,
    pen: PenaltySpec,
    boxes: BoxSet,
    y_k: np.ndarray,
    u_k: np.ndarray,
    matrix: np.ndarray,
    d_y: np.ndarray,
    d_u: np.ndarray,
) -> float:
    """Linearized penalized objective at step d = (d_y, d_u) around (y_k, u_k).

    The plant-equation penalty becomes lambda' |d_y - matrix d_u|; with the
    finite-difference sensitivity this is the exact-model surrogate, with the
    WLS estimate it is the data-driven one. At d = 0 it equals the penalized
    objective whenever (y_k, u_k) is plant-consistent.
    """
    y_k = np.asarray(y_k, dtype=float)
    u_k = np.asarray(u_k, dtype=float)
    d_y = np.asarray(d_y, dtype=float)
    d_u = np.asarray(d_u, dtype=float)
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape != (y_k.size, u_k.size):
        raise DimensionError("sensitivity matrix shape must match (len(y), len(u))")
    if d_y.shape != y_k.shape or d_u.shape != u_k.shape:
        raise DimensionError("step blocks must match the center blocks")
    y = y_k + d_y
    u = u_k + d_u
    val = cost.total(y, u)
    val += float(pen.lambda_pen @ np.abs(d_y - matrix @ d_u))
    val += float(pen.eta_pen @ np.maximum(boxes.h_values(y, u), 0.0))
    return val


def predicted_decrease(j_at_center: float, lin_at_step: float) -> float:
    """Drop of the linearized surrogate from the zero step to the solver step."""
    return float(j_at_center) - float(lin_at_step)


def decrease_ratio(j_at_center: float, j_at_step: float, lin_at_step: float) -> float:
    """Actual over predicted decrease; undefined when the prediction is degenerate."""
    denom = predicted_decrease(j_at_center, lin_at_step)
    if denom <= DECREASE_EPS:
        raise DegenerateDecrease(f"predicted decrease {denom:.3e} is below {DECREASE_EPS:.0e}")
    return (float(j_at_center) - float(j_at_step)) / denom


def stationarity_distance(
    cost: QuadraticCost,
    pen: PenaltySpec,
    boxes: BoxSet,
    y_k: np.ndarray,
    u_k: np.ndarray,
    matrix: np.ndarray,
    active_tol: float = 1e-9,
    iters: int = 4000,
) -> float:
    """Distance from zero to the generalized differential of the penalized objective.

    Valid at plant-consistent points, where the differential is the cost
    gradient plus (xi, -matrix' xi) over |xi| <= lambda plus hinge
    contributions of active or violated box rows. The minimal-norm element is
    found by accelerated projected gradient over the multiplier boxes.
    """
    y_k = np.asarray(y_k, dtype=float)
    u_k = np.asarray(u_k, dtype=float)
    n = y_k.size
    g0 = np.concatenate((cost.grad_y(y_k), cost.grad_u(u_k)))

    h = boxes.h_values(y_k, u_k)
    # Gradient rows of the stacked inequalities in (y, u) coordinates.
    rows: list[np.ndarray] = []
    lo: list[float] = []
    hi: list[float] = []
    eye = np.eye(2 * n)
    signs = (1.0, -1.0, 1.0, -1.0)
    offsets = (0, 0, n, n)
    for block in range(4):
        for i in range(n):
            idx = block * n + i
            if h[idx] < -active_tol:
                continue
            grad = signs[block] * eye[offsets[block] + i]
            rows.append(grad)
            if h[idx] > active_tol:  # violated: multiplier pinned at eta
                lo.append(pen.eta_pen[idx])
                hi.append(pen.eta_pen[idx])
            else:  # active: multiplier free in [0, eta]
                lo.append(0.0)
                hi.append(pen.eta_pen[idx])
    A_h = np.array(rows) if rows else np.zeros((0, 2 * n))
    m = A_h.shape[0]

    # Variables: xi in [-lambda, lambda]^n, mu in [lo, hi]^m.
    lam = pen.lambda_pen
    lower = np.concatenate((-lam, np.array(lo)))
    upper = np.concatenate((lam, np.array(hi)))

    def vector(zvar: np.ndarray) -> np.ndarray:
        xi = zvar[:n]
        mu = zvar[n:]
        vec = g0.copy()
        vec[:n] += xi
        vec[n:] -= matrix.T @ xi
        if m:
            vec += A_h.T @ mu
        return vec

    def grad(zvar: np.ndarray) -> np.ndarray:
        vec = vector(zvar)
        gxi = vec[:n] - matrix @ vec[n:]
        gmu = A_h @ vec if m else np.zeros(0)
        return 2.0 * np.concatenate((gxi, gmu))

    lip = 2.0 * (1.0 + np.linalg.norm(matrix, 2) ** 2 + m)
    z = np.clip(np.zeros(n + m), lower, upper)
    zp = z.copy()
    tk = 1.0
    best = float(np.linalg.norm(vector(z)))
    for _ in range(iters):
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        w = np.clip(z + ((tk - 1.0) / t_next) * (z - zp), lower, upper)
        z_new = np.clip(w - grad(w) / lip, lower, upper)
        zp, z, tk = z, z_new, t_next
        best = min(best, float(np.linalg.norm(vector(z))))
    return best
