"""Control loops: successive linearization from data, and the comparison baselines.

All controllers consume a plant series (one plant per step, so load changes
between decisions) and emit one ControlStepRecord per step. The successive
linearization loop and feedback optimization share the same trajectory window
and WLS estimator; droop is memoryless.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import BootstrapError, ConvergenceError, PlantError
from .penalty import (
    BoxSet,
    PenaltySpec,
    QuadraticCost,
    default_penalty_weights,
    linearized_penalty,
    penalty_objective,
    predicted_decrease,
)
from .sensitivity import SensitivityEstimate, TrajectoryWindow, estimate_from_window
from .subproblem import TrustRegionSpec, solve_trust_region

PlantSeries = Callable[[int], object]  # step index -> plant with .dim / .measure

RHO_DENOM_EPS = 1e-12


@dataclass(frozen=True)
class DdslConfig:
    radius: float = 0.015  # initial trust radius, also the cap when adapting
    tau: int | None = None  # defaults to plant dimension + 2
    lambda_ff: float = 0.9
    stall_tol: float = 1e-5
    perturb_scale: float = 1e-5
    max_steps: int = 20
    seed: int = 0
    stop_on_stall: bool = False
    # Radius adaptation from the measured decrease ratio. The ratio prices a
    # step's model fidelity; shrinking on poor ratios is what lets the loop
    # park on strongly nonlinear plants where any fixed radius keeps cycling.
    adapt_radius: bool = True
    radius_min: float = 1e-6
    rho_low: float = 0.1
    shrink: float = 0.6
    grow: float = 1.4
    # A stall is trusted as a stationarity certificate only when the window is
    # excited at the current scale: conditioning of the increments above
    # excitation_ratio and all samples within the cap radius of the newest
    # one. A stall on a stale window instead starts a re-excitation pass of
    # tau+1 probe steps that rebuilds the window around the stall point; the
    # pass aborts if measured voltages drift by more than drift_tol (a load
    # change), falling back to the running window.
    excitation_ratio: float = 3e-3
    drift_tol: float = 2e-3
    # Disturbance detection: a measured voltage change larger than this bound
    # times the own control step (plus drift_tol) cannot be the plant's
    # response to the step, so a load event re-arms the trust radius.
    response_bound: float = 60.0
    # Smallest control increment admitted into the estimation window. Under
    # drifting loads, increments below the process-noise floor would teach
    # the estimator noise-over-step slopes; skipping them retains the last
    # informative rows instead. Zero admits everything.
    min_push: float = 0.0
    # Probe count of a re-excitation episode. None rebuilds the whole window
    # (tau+1 probes, swapped in when complete); an integer injects that many
    # probes into the running window and resumes, which suits drifting loads
    # where a full rebuild cannot finish between disturbances. Episodes also
    # fire when the radius is pinned at its floor with the model still
    # failing, at most once per cooldown window.
    reexcite_probes: int | None = None

    def for_time_varying(self) -> "DdslConfig":
        """Preset for drifting loads: excitation above the noise floor."""
        return replace(
            self,
            perturb_scale=5e-4,
            radius_min=1e-4,
            min_push=1e-3,
            rho_low=0.0,
            reexcite_probes=6,
        )


@dataclass(frozen=True)
class FoConfig:
    gamma: float = 1e-3
    tau: int | None = None
    lambda_ff: float = 0.9
    perturb_scale: float = 1e-3  # bootstrap probe scale; FO itself never perturbs
    max_steps: int = 20
    seed: int = 0


@dataclass(frozen=True)
class DroopConfig:
    phi: float | np.ndarray = -0.02  # per-bus gain, broadcast when scalar
    max_steps: int = 20


@dataclass
class ControlStepRecord:
    k: int
    u: np.ndarray
    y: np.ndarray
    cost: float
    predicted_decrease: float | None = None
    rho: float | None = None
    excited: bool = False  # excited at the controller's locality scale
    rank_excited: bool = False  # full-column-rank test alone
    perturbed: bool = False  # the action applied at this step was a probe
    trust_active: bool = False
    kkt_residual: float | None = None
    stall_certificate: bool = False  # stalled while locally excited: stationarity point
    radius: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "k": self.k,
            "u": [float(v) for v in self.u],
            "y": [float(v) for v in self.y],
            "cost": self.cost,
            "predicted_decrease": self.predicted_decrease,
            "rho": self.rho,
            "excited": self.excited,
            "rank_excited": self.rank_excited,
            "perturbed": self.perturbed,
            "trust_active": self.trust_active,
            "kkt_residual": self.kkt_residual,
            "stall_certificate": self.stall_certificate,
            "radius": self.radius,
        }


def _measure(plant, u: np.ndarray) -> np.ndarray:
    try:
        return plant.measure(u)
    except ConvergenceError as exc:
        raise PlantError(f"power flow diverged at u with norm {np.linalg.norm(u):.3g}: {exc}") from exc


def probe_sequence(u_center: np.ndarray, scale: float, count: int, rng: np.random.Generator, boxes: BoxSet) -> list[np.ndarray]:
    """Probes along seeded random orthogonal directions around a center.

    Orthogonal designs keep the increment matrix well conditioned where
    independent Gaussian draws at tau ~ n would leave it nearly singular.
    """
    n = u_center.size
    basis, _ = np.linalg.qr(rng.standard_normal((n, n)))
    probes = []
    for i in range(count):
        direction = basis[:, i % n] * (1.0 if (i // n) % 2 == 0 else -1.0)
        probes.append(np.clip(u_center + scale * direction, boxes.u_lo, boxes.u_hi))
    return probes


def bootstrap_window(
    plant,
    u_init: np.ndarray,
    tau: int,
    scale: float,
    lambda_ff: float,
    rng: np.random.Generator,
    boxes: BoxSet,
    retries: int = 3,
) -> TrajectoryWindow:
    """Fill a window with tau+1 probed samples around u_init before step one.

    The probe scale doubles on each retry if the resulting window is not
    excited (probes clipped onto a box face can lose rank).
    """
    n = plant.dim
    for attempt in range(retries + 1):
        s = scale * (2.0**attempt)
        window = TrajectoryWindow(n, tau, lambda_ff)
        window.push(u_init, _measure(plant, u_init))
        for probe in probe_sequence(u_init, s, tau, rng, boxes):
            window.push(probe, _measure(plant, probe))
        if estimate_from_window(window).excited:
            return window
    raise BootstrapError(f"window not excited after {retries + 1} probe rounds (scale {scale:g})")


def ddsl_run(
    plants: PlantSeries,
    cost: QuadraticCost,
    cfg: DdslConfig,
    boxes: BoxSet,
    u_init: np.ndarray | None = None,
    pen: PenaltySpec | None = None,
    n_steps: int | None = None,
) -> list[ControlStepRecord]:
    """Successive linearization with a trust region, driven by WLS estimates.

    Each step estimates the sensitivity from the rolling window, solves the
    linearized trust-region subproblem to optimality, applies the step to
    the plant and measures the response. A stalled step with an excited
    window is a stationarity certificate; a stalled step without excitation
    triggers a seeded zero-mean perturbation to restore excitation.
    """
    plant0 = plants(0)
    n = plant0.dim
    steps = cfg.max_steps if n_steps is None else n_steps
    tau = cfg.tau if cfg.tau is not None else n + 2
    rng = np.random.default_rng(cfg.seed)
    if pen is None:
        pen = default_penalty_weights(cost, boxes)
    u0 = np.zeros(n) if u_init is None else np.asarray(u_init, dtype=float)
    window = bootstrap_window(plant0, u0, tau, cfg.perturb_scale, cfg.lambda_ff, rng, boxes)
    u, y = window.snapshot()[-1]
    radius = cfg.radius

    mode = "optimize"  # or "reexcite" / "hold"
    probes: list[np.ndarray] = []
    fresh: TrajectoryWindow | None = None
    y_anchor = y  # drift reference for the current pass or hold
    last_solution: np.ndarray | None = None
    steps_since_refresh = 0

    records: list[ControlStepRecord] = []
    for k in range(steps):
        pd = rho = kkt = None
        perturbed = certificate = trust_active = False
        rank_excited = local_excited = False
        u_apply = u

        if mode == "hold":
            if float(np.max(np.abs(y - y_anchor))) > cfg.drift_tol:
                mode, radius = "optimize", cfg.radius  # conditions moved; re-arm
                window.shift_history(y - window.snapshot()[-1][1])
                window.push(u, y)
        if mode == "reexcite":
            if float(np.max(np.abs(y - y_anchor))) > cfg.drift_tol:
                mode, probes, fresh = "optimize", [], None  # abort the pass

        if mode == "optimize":
            est = estimate_from_window(window)
            rank_excited = est.excited
            local_excited = bool(
                est.excited
                and est.sigma_ratio >= cfg.excitation_ratio
                and est.window_radius <= cfg.radius
            )
            spec = TrustRegionSpec(
                radius=radius,
                center_u=u,
                center_y=y,
                matrix=est.matrix,
                u_lo=boxes.u_lo,
                u_hi=boxes.u_hi,
                y_lo=boxes.y_lo,
                y_hi=boxes.y_hi,
            )
            sol = solve_trust_region(cost, spec, pen=pen, warm_start=last_solution)
            last_solution = sol.u_next
            d_u = sol.u_next - u
            step_norm = float(np.linalg.norm(d_u))
            trust_active, kkt = sol.active_trust, sol.kkt_residual

            j_here = penalty_objective(cost, pen, boxes, y, u, g_u=y)  # measured point is plant-consistent
            l_tilde = linearized_penalty(cost, pen, boxes, y, u, est.matrix, sol.y_pred - y, d_u)
            pd = predicted_decrease(j_here, l_tilde)
            g_next = _measure(plants(k), sol.u_next)
            j_next = penalty_objective(cost, pen, boxes, sol.y_pred, sol.u_next, g_next)
            rho = (j_here - j_next) / pd if pd > RHO_DENOM_EPS else None
            if cfg.adapt_radius and rho is not None:
                if rho < cfg.rho_low:
                    radius = max(cfg.radius_min, radius * cfg.shrink)
                else:
                    radius = min(cfg.radius, radius * cfg.grow)

            stalled = step_norm < cfg.stall_tol
            refresh_due = (
                cfg.refresh_period is not None
                and steps_since_refresh >= cfg.refresh_period
                and cfg.perturb_scale > 0.0
            )
            if stalled and local_excited:
                certificate = True
                mode, y_anchor = "hold", y
            elif (stalled or refresh_due) and cfg.perturb_scale > 0.0:
                # Restore excitation around this point, one probe step per
                # control period: at stalls because the window went stale, or
                # on the refresh clock under drifting loads.
                mode, y_anchor = "reexcite", y
                steps_since_refresh = 0
                if cfg.reexcite_probes is None:
                    fresh = TrajectoryWindow(n, tau, cfg.lambda_ff)
                    fresh.push(u, y)
                    probes = probe_sequence(u, cfg.perturb_scale, tau, rng, boxes)
                else:
                    fresh = None
                    probes = probe_sequence(u, cfg.perturb_scale, cfg.reexcite_probes, rng, boxes)
            else:
                u_apply = sol.u_next
                steps_since_refresh += 1

        if mode == "reexcite" and probes:
            u_apply = probes.pop(0)
            perturbed = True

        records.append(
            ControlStepRecord(
                k=k,
                u=u.copy(),
                y=y.copy(),
                cost=cost.total(y, u),
                predicted_decrease=pd,
                rho=rho,
                excited=local_excited,
                rank_excited=rank_excited,
                perturbed=perturbed,
                trust_active=trust_active,
                kkt_residual=kkt,
                stall_certificate=certificate,
                radius=radius,
            )
        )
        if certificate and cfg.stop_on_stall:
            break
        if k + 1 >= steps:
            break

        y_prev, u_prev = y, u
        u = u_apply
        y = _measure(plants(k + 1), u)
        if mode == "reexcite":
            window.push(u, y)
            if fresh is not None:
                fresh.push(u, y)
            if not probes:
                if fresh is not None:
                    window, fresh = fresh, None
                    radius = cfg.radius  # full rebuild restores full trust
                else:
                    radius = max(radius, cfg.radius / 8.0)  # burst: modest re-arm
                mode = "optimize"
        elif mode == "optimize":
            # A voltage change beyond what the own step could cause signals a
            # load event: re-arm the trust radius to chase the new optimum and
            # shift the stored history by the unmodeled jump, so the event is
            # not read as a response to the control step.
            moved = float(np.max(np.abs(y - y_prev)))
            own_step = float(np.linalg.norm(u - u_prev))
            if moved > cfg.drift_tol + cfg.response_bound * own_step:
                radius = cfg.radius
                window.shift_history(y - y_prev - est.matrix @ (u - u_prev))
            if own_step >= cfg.min_push:
                window.push(u, y)
        # hold mode keeps the window frozen so it stays locally excited
    return records


def feedback_optimization_run(
    plants: PlantSeries,
    cost: QuadraticCost,
    cfg: FoConfig,
    boxes: BoxSet,
    u_init: np.ndarray | None = None,
    n_steps: int | None = None,
) -> list[ControlStepRecord]:
    """Projected-gradient baseline fed by the same window and WLS estimator."""
    plant0 = plants(0)
    n = plant0.dim
    steps = cfg.max_steps if n_steps is None else n_steps
    tau = cfg.tau if cfg.tau is not None else 2 * n + 4
    rng = np.random.default_rng(cfg.seed)
    u0 = np.zeros(n) if u_init is None else np.asarray(u_init, dtype=float)
    window = bootstrap_window(plant0, u0, tau, cfg.perturb_scale, cfg.lambda_ff, rng, boxes)
    u, y = window.snapshot()[-1]

    records: list[ControlStepRecord] = []
    for k in range(steps):
        est = estimate_from_window(window)
        grad = est.matrix.T @ cost.grad_y(y) + cost.grad_u(u)
        u_next = np.clip(u - cfg.gamma * grad, boxes.u_lo, boxes.u_hi)
        records.append(
            ControlStepRecord(
                k=k, u=u.copy(), y=y.copy(), cost=cost.total(y, u), excited=est.excited
            )
        )
        if k + 1 >= steps:
            break
        u = u_next
        y = _measure(plants(k + 1), u)
        window.push(u, y)
    return records


def droop_run(
    plants: PlantSeries,
    cost: QuadraticCost,
    cfg: DroopConfig,
    boxes: BoxSet,
    u_init: np.ndarray | None = None,
    n_steps: int | None = None,
) -> list[ControlStepRecord]:
    """Memoryless linear law u = phi * (y - 1), clipped to the injection box."""
    plant0 = plants(0)
    n = plant0.dim
    steps = cfg.max_steps if n_steps is None else n_steps
    phi = np.broadcast_to(np.asarray(cfg.phi, dtype=float), (n,))
    u = np.zeros(n) if u_init is None else np.asarray(u_init, dtype=float)
    y = _measure(plant0, u)
    records: list[ControlStepRecord] = []
    for k in range(steps):
        records.append(ControlStepRecord(k=k, u=u.copy(), y=y.copy(), cost=cost.total(y, u)))
        if k + 1 >= steps:
            break
        u = np.clip(phi * (y - 1.0), boxes.u_lo, boxes.u_hi)
        y = _measure(plants(k + 1), u)
    return records


def _tail_mean_cost(records: list[ControlStepRecord], tail: int = 5) -> float:
    costs = [r.cost for r in records[-tail:]]
    return float(np.mean(costs))


def tune_droop_gains(
    plants_factory: Callable[[], PlantSeries],
    cost: QuadraticCost,
    boxes: BoxSet,
    grid: list[float],
    n_steps: int = 20,
) -> DroopConfig:
    """Pick the uniform gain minimizing tail-5 mean cost; ties go to smaller |phi|.

    Gains that drive the plant into collapse score as infinite cost.
    """
    best: tuple[float, float] | None = None
    best_phi = grid[0]
    for phi in grid:
        try:
            recs = droop_run(plants_factory(), cost, DroopConfig(phi=phi, max_steps=n_steps), boxes)
            metric = _tail_mean_cost(recs)
        except PlantError:
            metric = float("inf")
        key = (metric, abs(phi))
        if best is None or key < best:
            best, best_phi = key, phi
    return DroopConfig(phi=best_phi, max_steps=n_steps)


def tune_fo_gamma(
    plants_factory: Callable[[], PlantSeries],
    cost: QuadraticCost,
    boxes: BoxSet,
    grid: list[float],
    template: FoConfig = FoConfig(),
    n_steps: int = 20,
) -> FoConfig:
    """Grid-search the learning rate on a tuning scenario; ties go to smaller gamma."""
    best: tuple[float, float] | None = None
    best_gamma = grid[0]
    for gamma in grid:
        cfg = replace(template, gamma=gamma, max_steps=n_steps)
        try:
            metric = _tail_mean_cost(feedback_optimization_run(plants_factory(), cost, cfg, boxes))
        except PlantError:
            metric = float("inf")
        key = (metric, gamma)
        if best is None or key < best:
            best, best_gamma = key, gamma
    return replace(template, gamma=best_gamma)
