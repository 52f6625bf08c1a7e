"""Nonlinear DistFlow solver for radial feeders and a finite-difference sensitivity oracle.

The solver iterates a backward-forward sweep with loss update, working on
squared voltage magnitudes internally (the voltage-drop equation is affine in
them). The exposed voltage vector is the magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DimensionError, StepError
from .network import NetworkModel, traversal_order

SOLVER_TOL = 1e-10
MAX_SWEEPS = 200
FD_STEP = 1e-5


@dataclass(frozen=True)
class InjectionProfile:
    """Net injections at non-root buses, p.u., generation positive."""

    p: np.ndarray
    u: np.ndarray
    q_base: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))
        object.__setattr__(self, "q_base", np.asarray(self.q_base, dtype=float))
        if not (self.p.shape == self.u.shape == self.q_base.shape):
            raise DimensionError("injection vectors must share one length")

    @property
    def q(self) -> np.ndarray:
        return self.q_base + self.u

    @staticmethod
    def from_loads(net: NetworkModel, u: np.ndarray | None = None) -> "InjectionProfile":
        """Injections implied by the model's bus loads (consumption enters negatively)."""
        p_load, q_load = net.load_vectors()
        if u is None:
            u = np.zeros(net.n_control)
        return InjectionProfile(p=-p_load, u=np.asarray(u, dtype=float), q_base=-q_load)


@dataclass(frozen=True)
class PowerFlowSolution:
    """Voltages, sending-end line flows and squared currents satisfying DistFlow."""

    y: np.ndarray  # magnitudes at non-root buses
    P: np.ndarray  # per line, indexed by child bus - 1
    Q: np.ndarray
    l: np.ndarray
    residual: float
    iterations: int


def _check_sized(net: NetworkModel, inj: InjectionProfile) -> None:
    if inj.p.shape != (net.n_control,):
        raise DimensionError(f"injections sized {inj.p.shape}, network has {net.n_control} non-root buses")


def equation_residual(net: NetworkModel, inj: InjectionProfile, y: np.ndarray, P: np.ndarray, Q: np.ndarray, l: np.ndarray) -> float:
    """Max absolute violation of the four DistFlow equations at (y, P, Q, l)."""
    v = np.concatenate(([net.slack_voltage**2], np.asarray(y) ** 2))
    parent = net.parent_of()
    q = inj.q
    worst = 0.0
    for j in range(1, net.n_bus):
        k = j - 1
        ln = net.line_to(j)
        i = parent[k]
        drop = v[j] - v[i] + 2.0 * ln.r * P[k] + 2.0 * ln.x * Q[k] - ln.z_sq * l[k]
        kids = [c - 1 for c in net.children.get(j, ())]
        bal_p = sum(P[c] for c in kids) - (P[k] - ln.r * l[k] + inj.p[k])
        bal_q = sum(Q[c] for c in kids) - (Q[k] - ln.x * l[k] + q[k])
        cur = l[k] - (P[k] ** 2 + Q[k] ** 2) / v[i]
        worst = max(worst, abs(drop), abs(bal_p), abs(bal_q), abs(cur))
    return worst


def solve_distflow(
    net: NetworkModel,
    inj: InjectionProfile,
    warm_start: PowerFlowSolution | None = None,
    tol: float = SOLVER_TOL,
    max_sweeps: int = MAX_SWEEPS,
) -> PowerFlowSolution:
    """Solve the DistFlow equations for a radial feeder.

    Backward sweep aggregates line flows for the current loss estimate,
    forward sweep updates squared voltages, and the loss term is refreshed
    from the new state; repeat until both the voltage update and the
    equation residual fall below `tol`.
    """
    _check_sized(net, inj)
    n = net.n_bus
    order = traversal_order(net)
    reverse = order[::-1]
    parent_full = np.zeros(n, dtype=int)
    r = np.zeros(n)
    x = np.zeros(n)
    z_sq = np.zeros(n)
    for ln in net.lines:
        parent_full[ln.to_bus] = ln.from_bus
        r[ln.to_bus] = ln.r
        x[ln.to_bus] = ln.x
        z_sq[ln.to_bus] = ln.z_sq

    # Arrays indexed by bus; entry 0 unused for line quantities.
    p = np.concatenate(([0.0], inj.p))
    q = np.concatenate(([0.0], inj.q))
    v0 = net.slack_voltage**2
    if warm_start is not None:
        v = np.concatenate(([v0], np.asarray(warm_start.y) ** 2))
        l = np.concatenate(([0.0], np.asarray(warm_start.l)))
    else:
        v = np.full(n, v0)
        l = np.zeros(n)
    P = np.zeros(n)
    Q = np.zeros(n)

    for sweep in range(1, max_sweeps + 1):
        for j in reverse:
            if j == 0:
                continue
            kids = net.children.get(j, ())
            P[j] = sum(P[c] for c in kids) + r[j] * l[j] - p[j]
            Q[j] = sum(Q[c] for c in kids) + x[j] * l[j] - q[j]
        v_prev = v.copy()
        for j in order:
            if j == 0:
                continue
            i = parent_full[j]
            v[j] = v[i] - 2.0 * (r[j] * P[j] + x[j] * Q[j]) + z_sq[j] * l[j]
        if np.any(v[1:] <= 0.0):
            raise ConvergenceError("squared voltage dropped below zero; operating point near collapse")
        for j in order:
            if j == 0:
                continue
            l[j] = (P[j] ** 2 + Q[j] ** 2) / v[parent_full[j]]
        delta = float(np.max(np.abs(v - v_prev)))
        if delta <= tol:
            y = np.sqrt(v[1:])
            res = equation_residual(net, inj, y, P[1:], Q[1:], l[1:])
            if res <= tol:
                return PowerFlowSolution(y=y, P=P[1:].copy(), Q=Q[1:].copy(), l=l[1:].copy(), residual=res, iterations=sweep)
    raise ConvergenceError(f"no convergence within {max_sweeps} sweeps (last voltage update {delta:.3e})")


def voltage_map(net: NetworkModel, inj_base: InjectionProfile, u: np.ndarray, warm_start: PowerFlowSolution | None = None) -> np.ndarray:
    """Voltage magnitudes as a pure function of the controllable injection."""
    inj = InjectionProfile(p=inj_base.p, u=np.asarray(u, dtype=float), q_base=inj_base.q_base)
    return solve_distflow(net, inj, warm_start=warm_start).y


class DistFlowPlant:
    """The plant y = g(u): measured voltages under one fixed base-load profile.

    Warm-starts successive solves from the previous solution; results agree
    with cold solves to the solver tolerance.
    """

    def __init__(self, net: NetworkModel, inj_base: InjectionProfile):
        _check_sized(net, inj_base)
        self.net = net
        self.inj_base = inj_base
        self._last: PowerFlowSolution | None = None

    @property
    def dim(self) -> int:
        return self.net.n_control

    def solve(self, u: np.ndarray) -> PowerFlowSolution:
        inj = InjectionProfile(p=self.inj_base.p, u=np.asarray(u, dtype=float), q_base=self.inj_base.q_base)
        sol = solve_distflow(self.net, inj, warm_start=self._last)
        self._last = sol
        return sol

    def measure(self, u: np.ndarray) -> np.ndarray:
        return self.solve(u).y

    @staticmethod
    def from_network(net: NetworkModel, u: np.ndarray | None = None) -> "DistFlowPlant":
        return DistFlowPlant(net, InjectionProfile.from_loads(net, u))


def true_jacobian(plant, u: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference sensitivity of measured voltages to each injection.

    `plant` is anything with `dim` and `measure(u)`; column j holds
    (g(u + h e_j) - g(u - h e_j)) / 2h.
    """
    if h <= 0.0:
        raise StepError("finite-difference step must be positive")
    u = np.asarray(u, dtype=float)
    n = plant.dim
    if u.shape != (n,):
        raise DimensionError(f"u sized {u.shape}, plant dimension {n}")
    cols = []
    for j in range(n):
        step = np.zeros(n)
        step[j] = h
        cols.append((plant.measure(u + step) - plant.measure(u - step)) / (2.0 * h))
    return np.column_stack(cols)
