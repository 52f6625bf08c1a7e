"""Scenario generation, trial execution, aggregation and result persistence."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .controllers import (
    ControlStepRecord,
    DdslConfig,
    DroopConfig,
    FoConfig,
    ddsl_run,
    droop_run,
    feedback_optimization_run,
)
from .errors import EmptyInput, IoError, ParameterError, PlantError
from .network import NetworkModel, serialize
from .penalty import BoxSet, QuadraticCost
from .powerflow import DistFlowPlant, InjectionProfile
from .socp import solve_relaxation

SCHEMA_VERSION = "voltbench-results-v1"
CONTROLLERS = ("ddsl", "fo", "droop", "socp")
TAIL_STEPS = 5


@dataclass(frozen=True)
class Scenario:
    """Per-step load series (consumption, p.u.) for one trial."""

    scenario_id: str
    kind: str  # "static" or "time-varying"
    horizon: int
    p_series: np.ndarray  # horizon x n
    q_series: np.ndarray
    seed: int = 0
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "p_series", np.asarray(self.p_series, dtype=float))
        object.__setattr__(self, "q_series", np.asarray(self.q_series, dtype=float))
        if self.p_series.shape != (self.horizon, self.p_series.shape[1]) or self.p_series.shape != self.q_series.shape:
            raise ParameterError("load series must be horizon x n and consistent")
        if self.kind == "static" and self.horizon > 1:
            if not (np.all(self.p_series == self.p_series[0]) and np.all(self.q_series == self.q_series[0])):
                raise ParameterError("static scenarios carry a constant load series")

    def injections(self, t: int) -> InjectionProfile:
        t = min(t, self.horizon - 1)
        n = self.p_series.shape[1]
        return InjectionProfile(p=-self.p_series[t], u=np.zeros(n), q_base=-self.q_series[t])


@dataclass
class RunResult:
    scenario_id: str
    controller_id: str
    records: list[ControlStepRecord]
    final5_mean_cost: float
    total_cost: float
    horizon_mean_cost: float
    extras: dict = field(default_factory=dict)
    failed: bool = False
    failure: str = ""

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario_id": self.scenario_id,
            "controller_id": self.controller_id,
            "final5_mean_cost": self.final5_mean_cost,
            "total_cost": self.total_cost,
            "horizon_mean_cost": self.horizon_mean_cost,
            "failed": self.failed,
            "failure": self.failure,
            "extras": self.extras,
            "records": [r.to_json_dict() for r in self.records],
        }


def base_scenario(net: NetworkModel, horizon: int = 20, kind: str = "static") -> Scenario:
    p, q = net.load_vectors()
    return Scenario(
        scenario_id="nominal",
        kind=kind,
        horizon=horizon,
        p_series=np.tile(p, (horizon, 1)),
        q_series=np.tile(q, (horizon, 1)),
    )


def make_static_trials(base: Scenario, n_trials: int, perturb_frac: float, seed: int) -> list[Scenario]:
    """Independent per-bus uniform load scalings in [1-f, 1+f], one trial each."""
    if n_trials < 1:
        raise ParameterError("need at least one trial")
    if not (0.0 <= perturb_frac < 1.0):
        raise ParameterError("perturb_frac must lie in [0, 1)")
    n = base.p_series.shape[1]
    trials = []
    for i in range(n_trials):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        factors = rng.uniform(1.0 - perturb_frac, 1.0 + perturb_frac, n)
        trials.append(
            Scenario(
                scenario_id=f"static-{i:03d}",
                kind="static",
                horizon=base.horizon,
                p_series=base.p_series * factors,
                q_series=base.q_series * factors,
                seed=int(rng.integers(0, 2**31 - 1)),
                description=f"static trial {i}, +-{perturb_frac:.0%} per-bus scaling",
            )
        )
    return trials


def make_time_varying(
    base: Scenario,
    horizon: int = 50,
    n_step_changes: int = 2,
    magnitude: float = 0.4,
    seed: int = 0,
    walk_std: float = 0.01,
    change_times: list[int] | None = None,
) -> Scenario:
    """Smooth seeded random-walk modulation plus persistent step changes."""
    if horizon < 10:
        raise ParameterError("time-varying scenarios need horizon >= 10")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(9,)))
    mod = np.ones(horizon)
    for t in range(1, horizon):
        mod[t] = float(np.clip(mod[t - 1] + rng.normal(0.0, walk_std), 0.5, 1.5))
    if change_times is None:
        lo, hi = max(2, horizon // 10), horizon - max(2, horizon // 10)
        change_times = sorted(rng.choice(np.arange(lo, hi), size=n_step_changes, replace=False).tolist())
    for t_change in change_times:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        mod[t_change:] *= 1.0 + sign * magnitude
    p0, q0 = base.p_series[0], base.q_series[0]
    return Scenario(
        scenario_id=f"tv-{seed:03d}",
        kind="time-varying",
        horizon=horizon,
        p_series=np.outer(mod, p0),
        q_series=np.outer(mod, q0),
        seed=seed,
        description=f"random walk (std {walk_std}) with {len(change_times)} step changes of {magnitude:+.0%}",
    )


def make_time_varying_trials(base: Scenario, n_trials: int, horizon: int, n_step_changes: int, magnitude: float, seed: int) -> list[Scenario]:
    return [
        replace(
            make_time_varying(base, horizon, n_step_changes, magnitude, seed=int(np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i, 1))).integers(0, 2**31 - 1))),
            scenario_id=f"tv-{i:03d}",
        )
        for i in range(n_trials)
    ]


def _plants_factory(net: NetworkModel, scenario: Scenario):
    """Fresh per-run plant series; each run gets its own warm-start chain."""

    def make():
        cache: dict[int, DistFlowPlant] = {}

        def at(t: int) -> DistFlowPlant:
            t = min(t, scenario.horizon - 1)
            if scenario.kind == "static":
                t = 0
            if t not in cache:
                cache[t] = DistFlowPlant(net, scenario.injections(t))
            return cache[t]

        return at

    return make


def _socp_records(net: NetworkModel, scenario: Scenario, cost: QuadraticCost, tol: float) -> tuple[list[ControlStepRecord], dict]:
    """The relaxation benchmark as a constant-action controller."""
    res = solve_relaxation(net, scenario.injections(0), cost, tol=tol)
    records = []
    plants = _plants_factory(net, scenario)()
    for t in range(scenario.horizon):
        y = plants(t).measure(res.u_star)
        records.append(ControlStepRecord(k=t, u=res.u_star.copy(), y=y, cost=cost.total(y, res.u_star)))
    extras = {
        "relaxed_objective": res.relaxed_objective,
        "exactness_residual": res.exactness_residual,
        "duality_gap": res.duality_gap,
    }
    return records, extras


def run_trial(
    net: NetworkModel,
    scenario: Scenario,
    controller_id: str,
    cost: QuadraticCost,
    ddsl_cfg: DdslConfig | None = None,
    fo_cfg: FoConfig | None = None,
    droop_cfg: DroopConfig | None = None,
    socp_tol: float = 1e-9,
) -> RunResult:
    """Run one controller over one scenario against the nonlinear plant.

    When no explicit config is given, time-varying scenarios use the
    drifting-load preset of the successive-linearization controller.
    """
    boxes = BoxSet.from_network(net)
    if ddsl_cfg is None:
        ddsl_cfg = DdslConfig().for_time_varying() if scenario.kind == "time-varying" else DdslConfig()
    if fo_cfg is None:
        fo_cfg = FoConfig()
    if droop_cfg is None:
        droop_cfg = DroopConfig()
    extras: dict = {}
    try:
        if controller_id == "ddsl":
            cfg = replace(ddsl_cfg, seed=scenario.seed, max_steps=scenario.horizon)
            records = ddsl_run(_plants_factory(net, scenario)(), cost, cfg, boxes)
        elif controller_id == "fo":
            cfg = replace(fo_cfg, seed=scenario.seed, max_steps=scenario.horizon)
            records = feedback_optimization_run(_plants_factory(net, scenario)(), cost, cfg, boxes)
        elif controller_id == "droop":
            cfg = replace(droop_cfg, max_steps=scenario.horizon)
            records = droop_run(_plants_factory(net, scenario)(), cost, cfg, boxes)
        elif controller_id == "socp":
            records, extras = _socp_records(net, scenario, cost, socp_tol)
        else:
            raise ParameterError(f"unknown controller {controller_id!r}")
    except ParameterError:
        raise
    except Exception as exc:  # per-trial failures are recorded, the suite continues
        return RunResult(
            scenario_id=scenario.scenario_id,
            controller_id=controller_id,
            records=[],
            final5_mean_cost=float("nan"),
            total_cost=float("nan"),
            horizon_mean_cost=float("nan"),
            failed=True,
            failure=f"{type(exc).__name__}: {exc}",
        )
    costs = [r.cost for r in records]
    return RunResult(
        scenario_id=scenario.scenario_id,
        controller_id=controller_id,
        records=records,
        final5_mean_cost=float(np.mean(costs[-TAIL_STEPS:])),
        total_cost=float(np.sum(costs)),
        horizon_mean_cost=float(np.mean(costs)),
        extras=extras,
    )


def _trial_task(args) -> tuple[int, str, RunResult]:
    idx, controller_id, net_text, scenario, cost, ddsl_cfg, fo_cfg, droop_cfg = args
    from .network import parse_network

    net = parse_network(net_text)
    return idx, controller_id, run_trial(net, scenario, controller_id, cost, ddsl_cfg, fo_cfg, droop_cfg)


def run_suite(
    net: NetworkModel,
    scenarios: list[Scenario],
    controllers: tuple[str, ...],
    cost: QuadraticCost,
    ddsl_cfg: DdslConfig | None = None,
    fo_cfg: FoConfig | None = None,
    droop_cfg: DroopConfig | None = None,
    jobs: int = 1,
) -> list[RunResult]:
    """All (scenario, controller) pairs; deterministic result order at any job count."""
    tasks = [
        (i, cid, serialize(net), sc, cost, ddsl_cfg, fo_cfg, droop_cfg)
        for i, sc in enumerate(scenarios)
        for cid in controllers
    ]
    if jobs <= 1:
        done = [_trial_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_trial_task, tasks, chunksize=4))
    done.sort(key=lambda item: (item[0], CONTROLLERS.index(item[1]) if item[1] in CONTROLLERS else 99))
    return [r for _, _, r in done]


@dataclass
class SummaryStats:
    metric: str  # "final5_mean_cost" or "horizon_mean_cost"
    basis: float
    per_controller: dict
    reductions: dict

    def to_json_dict(self) -> dict:
        return {
            "metric": self.metric,
            "normalization_basis": self.basis,
            "per_controller": self.per_controller,
            "reductions_percent": self.reductions,
        }


def aggregate(results: list[RunResult], normalization_basis: float | None = None) -> SummaryStats:
    """Distribution stats per controller plus pairwise reduction percentages.

    Static suites are summarized by the tail-5 mean cost, time-varying ones
    by the horizon mean. Normalization defaults to the largest controller
    mean so that every normalized value lies in (0, 1].
    """
    live = [r for r in results if not r.failed]
    if not live:
        raise EmptyInput("no successful results to aggregate")
    kind_metric = "final5_mean_cost" if "tv" not in live[0].scenario_id else "horizon_mean_cost"
    by_ctrl: dict[str, list[float]] = {}
    by_trial: dict[str, dict[str, float]] = {}
    for r in live:
        val = getattr(r, kind_metric)
        by_ctrl.setdefault(r.controller_id, []).append(val)
        by_trial.setdefault(r.scenario_id, {})[r.controller_id] = val

    means = {c: float(np.mean(v)) for c, v in by_ctrl.items()}
    basis = float(normalization_basis) if normalization_basis else max(means.values())
    per_controller = {}
    for c, vals in sorted(by_ctrl.items()):
        arr = np.asarray(vals)
        per_controller[c] = {
            "trials": len(vals),
            "mean": float(arr.mean()),
            "median": float(np.median(arr)),
            "min": float(arr.min()),
            "max": float(arr.max()),
            "normalized_mean": float(arr.mean() / basis),
            "log10_normalized_mean": float(np.log10(arr.mean() / basis)),
        }

    reductions = {}
    if "ddsl" in by_ctrl:
        for other in sorted(by_ctrl):
            if other == "ddsl":
                continue
            reductions[f"ddsl_vs_{other}_mean"] = 100.0 * (1.0 - means["ddsl"] / means[other])
            paired = [
                1.0 - vals["ddsl"] / vals[other]
                for vals in by_trial.values()
                if "ddsl" in vals and other in vals and vals[other] > 0
            ]
            if paired:
                reductions[f"ddsl_vs_{other}_median_paired"] = 100.0 * float(np.median(paired))
                reductions[f"ddsl_vs_{other}_wins"] = int(sum(p > 0 for p in paired))
    return SummaryStats(metric=kind_metric, basis=basis, per_controller=per_controller, reductions=reductions)


def _fmt(x) -> str:
    return format(float(x), ".17g")


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def persist(
    results: list[RunResult],
    stats: SummaryStats | None,
    out_dir: str | Path,
    config: dict | None = None,
    master_seed: int = 0,
    fixture_hash: str = "",
) -> dict:
    """Write results.jsonl, summary.json and the figure CSVs; return the manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files_written = []

        lines = [json.dumps(r.to_json_dict(), sort_keys=True) for r in results]
        (out / "results.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
        files_written.append("results.jsonl")

        summary = {
            "schema_version": SCHEMA_VERSION,
            "provenance": {
                "master_seed": master_seed,
                "config_hash": config_hash(config or {}),
                "fixture_hash": fixture_hash,
            },
            "summary": stats.to_json_dict() if stats else None,
        }
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
        files_written.append("summary.json")

        files_written += emit_figures(results, stats, out)
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "files": sorted(set(files_written)),
            "master_seed": master_seed,
            "config_hash": config_hash(config or {}),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        return manifest
    except OSError as exc:
        raise IoError(f"cannot persist results into {out}: {exc}") from exc


def emit_figures(results: list[RunResult], stats: SummaryStats | None, out_dir: str | Path) -> list[str]:
    """Figure CSVs (step trajectories, cost curves, tail-cost distribution)."""
    out = Path(out_dir)
    written: list[str] = []
    static = [r for r in results if not r.failed and not r.scenario_id.startswith("tv")]
    tv = [r for r in results if not r.failed and r.scenario_id.startswith("tv")]

    def traj_rows(rr: list[RunResult]):
        rows = ["controller,step,bus,voltage,action"]
        first_id = rr[0].scenario_id
        for r in rr:
            if r.scenario_id != first_id:
                continue
            for rec in r.records:
                for b, (v, a) in enumerate(zip(rec.y, rec.u), start=1):
                    rows.append(f"{r.controller_id},{rec.k},{b},{_fmt(v)},{_fmt(a)}")
        return rows

    def cost_rows(rr: list[RunResult]):
        rows = ["controller,step,cost"]
        first_id = rr[0].scenario_id
        for r in rr:
            if r.scenario_id != first_id:
                continue
            for rec in r.records:
                rows.append(f"{r.controller_id},{rec.k},{_fmt(rec.cost)}")
        return rows

    if static:
        (out / "fig_static_traj.csv").write_text("\n".join(traj_rows(static)) + "\n")
        (out / "fig_cost.csv").write_text("\n".join(cost_rows(static)) + "\n")
        written += ["fig_static_traj.csv", "fig_cost.csv"]
        basis = stats.basis if stats and static else 1.0
        rows = ["controller,trial,final5_mean_cost,normalized,log10_normalized"]
        for r in static:
            norm = r.final5_mean_cost / basis if basis else float("nan")
            rows.append(
                f"{r.controller_id},{r.scenario_id},{_fmt(r.final5_mean_cost)},{_fmt(norm)},{_fmt(np.log10(norm)) if norm > 0 else 'nan'}"
            )
        (out / "fig_box.csv").write_text("\n".join(rows) + "\n")
        written.append("fig_box.csv")
    if tv:
        (out / "fig_tv.csv").write_text("\n".join(cost_rows(tv)) + "\n")
        (out / "fig_tv_traj.csv").write_text("\n".join(traj_rows(tv)) + "\n")
        written += ["fig_tv.csv", "fig_tv_traj.csv"]
    if stats:
        rows = ["comparison,value"]
        for name, val in sorted(stats.reductions.items()):
            rows.append(f"{name},{_fmt(val)}")
        (out / "fig_reductions.csv").write_text("\n".join(rows) + "\n")
        written.append("fig_reductions.csv")
    return written


def load_results(path: str | Path) -> list[dict]:
    """Parse results.jsonl, checking the schema version."""
    docs = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise IoError(
                f"results schema {doc.get('schema_version')!r} does not match {SCHEMA_VERSION!r}; regenerate with bench"
            )
        docs.append(doc)
    return docs
