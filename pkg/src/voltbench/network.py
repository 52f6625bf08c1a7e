"""Feeder data model: per-unit radial network loaded from buses.csv / lines.csv / header.json."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ParseError, TopologyError, UnitError

DEFAULT_U_MIN = -0.05
DEFAULT_U_MAX = 0.05
DEFAULT_Y_MIN = 0.90
DEFAULT_Y_MAX = 1.10

SERIAL_SCHEMA = "voltbench-network-v1"


@dataclass(frozen=True)
class Bus:
    """One bus; loads in p.u. consumption, bounds on injection u and voltage y."""

    id: int
    p_load: float = 0.0
    q_load: float = 0.0
    u_min: float = DEFAULT_U_MIN
    u_max: float = DEFAULT_U_MAX
    y_min: float = DEFAULT_Y_MIN
    y_max: float = DEFAULT_Y_MAX

    def __post_init__(self):
        if not (self.u_min <= 0.0 <= self.u_max):
            raise UnitError(f"bus {self.id}: injection bounds must bracket zero")
        if not (0.0 < self.y_min < self.y_max):
            raise UnitError(f"bus {self.id}: voltage bounds must satisfy 0 < y_min < y_max")


@dataclass(frozen=True)
class Line:
    """Directed line from parent to child with per-unit series impedance."""

    from_bus: int
    to_bus: int
    r: float
    x: float

    def __post_init__(self):
        if self.r < 0.0 or self.x < 0.0 or self.r + self.x <= 0.0:
            raise UnitError(f"line {self.from_bus}->{self.to_bus}: need r, x >= 0 and r + x > 0")

    @property
    def z_sq(self) -> float:
        return self.r * self.r + self.x * self.x


@dataclass(frozen=True)
class NetworkModel:
    """Immutable radial feeder in per-unit; bus 0 is the substation slack at 1.0 p.u."""

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    base_mva: float
    base_kv: float
    y_ref: np.ndarray  # one entry per non-root bus
    slack_voltage: float = 1.0
    children: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "y_ref", np.asarray(self.y_ref, dtype=float))
        self.y_ref.setflags(write=False)
        if not self.children:
            object.__setattr__(self, "children", _children_map(self.lines, len(self.buses)))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_control(self) -> int:
        return len(self.buses) - 1

    def parent_of(self) -> np.ndarray:
        """parent[j] for every non-root bus j (index j-1)."""
        parent = np.full(self.n_bus, -1, dtype=int)
        for ln in self.lines:
            parent[ln.to_bus] = ln.from_bus
        return parent[1:]

    def line_to(self, bus: int) -> Line:
        for ln in self.lines:
            if ln.to_bus == bus:
                return ln
        raise KeyError(bus)

    def u_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([b.u_min for b in self.buses[1:]])
        hi = np.array([b.u_max for b in self.buses[1:]])
        return lo, hi

    def y_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([b.y_min for b in self.buses[1:]])
        hi = np.array([b.y_max for b in self.buses[1:]])
        return lo, hi

    def load_vectors(self) -> tuple[np.ndarray, np.ndarray]:
        """(p_load, q_load) for non-root buses, p.u., positive = consumption."""
        p = np.array([b.p_load for b in self.buses[1:]])
        q = np.array([b.q_load for b in self.buses[1:]])
        return p, q

    def depth_of(self) -> np.ndarray:
        depth = np.zeros(self.n_bus, dtype=int)
        for j in traversal_order(self):
            if j != 0:
                depth[j] = depth[self.line_to(j).from_bus] + 1
        return depth


@dataclass(frozen=True)
class TopologyReport:
    ok: bool
    n_bus: int
    n_line: int
    max_depth: int
    reason: str = ""


def _children_map(lines, n_bus: int) -> dict[int, tuple[int, ...]]:
    kids: dict[int, list[int]] = {i: [] for i in range(n_bus)}
    for ln in lines:
        kids[ln.from_bus].append(ln.to_bus)
    return {i: tuple(v) for i, v in kids.items()}


def traversal_order(net: NetworkModel) -> list[int]:
    """Root-first order in which every parent precedes its children."""
    order: list[int] = []
    stack = [0]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(net.children.get(j, ())))
    return order


def validate_radial(net: NetworkModel) -> TopologyReport:
    """Check the spanning-tree invariants; failures are reported, never raised."""
    n, m = net.n_bus, len(net.lines)
    if n == 0:
        return TopologyReport(False, 0, 0, 0, "empty model")
    if m != n - 1:
        return TopologyReport(False, n, m, 0, f"expected {n - 1} lines for a tree, got {m}")
    seen_child: set[int] = set()
    for ln in net.lines:
        if ln.to_bus == 0:
            return TopologyReport(False, n, m, 0, "root bus listed as a child")
        if ln.to_bus in seen_child:
            return TopologyReport(False, n, m, 0, f"bus {ln.to_bus} has multiple parents")
        if not (0 <= ln.from_bus < n and 0 <= ln.to_bus < n):
            return TopologyReport(False, n, m, 0, "line endpoint outside bus range")
        seen_child.add(ln.to_bus)
    for j, kids in net.children.items():
        for c in kids:
            if net.line_to(c).from_bus != j:
                return TopologyReport(False, n, m, 0, "children map disagrees with lines")
    order = traversal_order(net)
    if len(order) != n or len(set(order)) != n:
        return TopologyReport(False, n, m, 0, "cycle" if len(order) > n else "disconnected bus")
    depth = net.depth_of()
    return TopologyReport(True, n, m, int(depth.max(initial=0)))


def _require_radial(net: NetworkModel) -> NetworkModel:
    report = validate_radial(net)
    if not report.ok:
        raise TopologyError(report.reason)
    return net


def _float_or(value: str, default: float) -> float:
    text = value.strip() if value is not None else ""
    if text == "":
        return default
    try:
        return float(text)
    except ValueError as exc:
        raise ParseError(f"bad numeric field {value!r}") from exc


def load_network(feeder_dir: str | Path) -> NetworkModel:
    """Load buses.csv, lines.csv and header.json from a feeder directory.

    Loads come in MW / MVAr and line impedances in ohms; everything is
    normalized to per-unit on (base_mva, base_kv) here, so the returned
    model is always per-unit. Bus order follows file order.
    """
    feeder_dir = Path(feeder_dir)
    try:
        header = json.loads((feeder_dir / "header.json").read_text())
        buses_text = (feeder_dir / "buses.csv").read_text()
        lines_text = (feeder_dir / "lines.csv").read_text()
    except OSError as exc:
        raise ParseError(f"cannot read feeder files in {feeder_dir}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"header.json is not valid JSON: {exc}") from exc
    return network_from_texts(header, buses_text, lines_text)


def network_from_texts(header: dict, buses_text: str, lines_text: str) -> NetworkModel:
    base_mva = float(header.get("base_mva", 0.0))
    base_kv = float(header.get("base_kv", 0.0))
    if base_mva <= 0.0 or base_kv <= 0.0:
        raise UnitError("base_mva and base_kv must be positive")
    z_base = base_kv * base_kv / base_mva
    slack = float(header.get("slack_voltage", 1.0))

    buses: list[Bus] = []
    reader = csv.DictReader(io.StringIO(buses_text))
    required = {"id", "p_load", "q_load", "u_min", "u_max", "y_min", "y_max"}
    if reader.fieldnames is None or not required.issubset(set(reader.fieldnames)):
        raise ParseError(f"buses.csv must have columns {sorted(required)}")
    for row in reader:
        try:
            bus_id = int(row["id"])
        except (TypeError, ValueError) as exc:
            raise ParseError(f"bad bus id {row.get('id')!r}") from exc
        buses.append(
            Bus(
                id=bus_id,
                p_load=_float_or(row["p_load"], 0.0) / base_mva,
                q_load=_float_or(row["q_load"], 0.0) / base_mva,
                u_min=_float_or(row["u_min"], DEFAULT_U_MIN),
                u_max=_float_or(row["u_max"], DEFAULT_U_MAX),
                y_min=_float_or(row["y_min"], DEFAULT_Y_MIN),
                y_max=_float_or(row["y_max"], DEFAULT_Y_MAX),
            )
        )
    if not buses:
        raise ParseError("buses.csv holds no buses")
    if [b.id for b in buses] != list(range(len(buses))):
        raise ParseError("bus ids must be 0..n-1 in file order (0 = substation)")

    lines: list[Line] = []
    reader = csv.DictReader(io.StringIO(lines_text))
    required = {"from", "to", "r_ohm", "x_ohm"}
    if reader.fieldnames is None or not required.issubset(set(reader.fieldnames)):
        raise ParseError(f"lines.csv must have columns {sorted(required)}")
    for row in reader:
        try:
            lines.append(
                Line(
                    from_bus=int(row["from"]),
                    to_bus=int(row["to"]),
                    r=float(row["r_ohm"]) / z_base,
                    x=float(row["x_ohm"]) / z_base,
                )
            )
        except (TypeError, ValueError) as exc:
            raise ParseError(f"bad line row {row!r}") from exc

    y_ref_raw = header.get("y_ref", 1.0)
    n_ctrl = len(buses) - 1
    if np.isscalar(y_ref_raw):
        y_ref = np.full(n_ctrl, float(y_ref_raw))
    else:
        y_ref = np.asarray(y_ref_raw, dtype=float)
        if y_ref.shape != (n_ctrl,):
            raise ParseError(f"y_ref must be scalar or length {n_ctrl}")

    net = NetworkModel(
        buses=tuple(buses),
        lines=tuple(lines),
        base_mva=base_mva,
        base_kv=base_kv,
        y_ref=y_ref,
        slack_voltage=slack,
    )
    return _require_radial(net)


def normalize(net: NetworkModel) -> NetworkModel:
    """Per-unit normalization of an already per-unit model is the identity."""
    return net


def serialize(net: NetworkModel) -> str:
    doc = {
        "schema": SERIAL_SCHEMA,
        "base_mva": net.base_mva,
        "base_kv": net.base_kv,
        "slack_voltage": net.slack_voltage,
        "y_ref": list(net.y_ref),
        "buses": [
            [b.id, b.p_load, b.q_load, b.u_min, b.u_max, b.y_min, b.y_max] for b in net.buses
        ],
        "lines": [[ln.from_bus, ln.to_bus, ln.r, ln.x] for ln in net.lines],
    }
    return json.dumps(doc, sort_keys=True)


def parse_network(text: str) -> NetworkModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc)) from exc
    if doc.get("schema") != SERIAL_SCHEMA:
        raise ParseError(f"unknown schema {doc.get('schema')!r}")
    buses = tuple(Bus(int(b[0]), *map(float, b[1:])) for b in doc["buses"])
    lines = tuple(Line(int(f), int(t), float(r), float(x)) for f, t, r, x in doc["lines"])
    net = NetworkModel(
        buses=buses,
        lines=lines,
        base_mva=float(doc["base_mva"]),
        base_kv=float(doc["base_kv"]),
        y_ref=np.asarray(doc["y_ref"], dtype=float),
        slack_voltage=float(doc["slack_voltage"]),
    )
    return _require_radial(net)


def scale_loads(net: NetworkModel, p_factor: np.ndarray | float, q_factor: np.ndarray | float | None = None) -> NetworkModel:
    """New model with per-bus load multipliers (q_factor defaults to p_factor)."""
    if q_factor is None:
        q_factor = p_factor
    pf = np.broadcast_to(np.asarray(p_factor, dtype=float), (net.n_control,))
    qf = np.broadcast_to(np.asarray(q_factor, dtype=float), (net.n_control,))
    new_buses = [net.buses[0]]
    for k, b in enumerate(net.buses[1:]):
        new_buses.append(replace(b, p_load=b.p_load * pf[k], q_load=b.q_load * qf[k]))
    return replace(net, buses=tuple(new_buses))
