"""Microgrid domain model: buses, lines, devices, forecasts and scenario files.

Scenario files are JSON documents with five sections::

    {
      "name": "case12da",
      "network":  {"slack_bus": 1, "base_mva": 1.0},
      "buses":    [{"id": 1, "kind": "load"}, ...],
      "lines":    [{"from": 1, "to": 2, "r": 0.009, "x": 0.004, "l_max": 0.25}, ...],
      "devices":  {"mt": [...], "ess": [...], "res": [...], "loads": [...]},
      "horizon":  {"T": 8, "dt": 1.0, "v_min": 0.95, "v_max": 1.05, ...}
    }

All powers are in MW / MVAr on a 1 MVA base, so per-unit and MW values
coincide. Squared voltages and squared currents are in p.u.^2.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import os
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping

import numpy as np

SCENARIO_DIR_ENV = "MGRESTORE_SCENARIO_DIR"
_DATA_DIR = Path(__file__).resolve().parent / "data"


class ScenarioError(ValueError):
    """Raised when a scenario file cannot be parsed or fails validation."""


class BusKind(str, enum.Enum):
    LOAD = "load"
    MT = "mt"
    RES = "res"
    ESS = "ess"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float
    l_max: float


@dataclass(frozen=True)
class MtParams:
    p_min: float
    p_max: float
    ramp_up_max: float
    ramp_down_min: float
    tau: float
    fuel_init: float
    cost_coeff: float
    q_max: float


@dataclass(frozen=True)
class EssParams:
    p_ch_max: float
    p_dis_max: float
    soc_min: float
    soc_max: float
    soc_init: float
    eta_ch: float
    eta_dis: float
    q_max: float


@dataclass(frozen=True)
class ResParams:
    forecast_mean: float
    forecast_sd: float
    q_max: float


@dataclass(frozen=True)
class LoadParams:
    p_demand: tuple[float, ...]
    q_demand: tuple[float, ...]
    priority: float


@dataclass(frozen=True)
class Network:
    """Radial network. Lines are directed away from the slack bus."""

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    slack_bus: int

    @cached_property
    def index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @cached_property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses)

    @cached_property
    def line_from(self) -> np.ndarray:
        return np.array([self.index[ln.from_bus] for ln in self.lines], dtype=int)

    @cached_property
    def line_to(self) -> np.ndarray:
        return np.array([self.index[ln.to_bus] for ln in self.lines], dtype=int)

    @cached_property
    def r(self) -> np.ndarray:
        return np.array([ln.r for ln in self.lines], dtype=float)

    @cached_property
    def x(self) -> np.ndarray:
        return np.array([ln.x for ln in self.lines], dtype=float)

    @cached_property
    def l_max(self) -> np.ndarray:
        return np.array([ln.l_max for ln in self.lines], dtype=float)

    @cached_property
    def slack_index(self) -> int:
        return self.index[self.slack_bus]

    @cached_property
    def incoming_line(self) -> np.ndarray:
        """Index of the line feeding each bus (-1 for the slack)."""
        inc = np.full(self.n_bus, -1, dtype=int)
        for e, j in enumerate(self.line_to):
            inc[j] = e
        return inc

    @cached_property
    def line_order(self) -> tuple[int, ...]:
        """Line indices in breadth-first order from the slack bus."""
        children: dict[int, list[int]] = {i: [] for i in range(self.n_bus)}
        for e, i in enumerate(self.line_from):
            children[int(i)].append(e)
        order: list[int] = []
        queue = deque([self.slack_index])
        while queue:
            i = queue.popleft()
            for e in children[i]:
                order.append(e)
                queue.append(int(self.line_to[e]))
        return tuple(order)

    @cached_property
    def child_lines(self) -> tuple[tuple[int, ...], ...]:
        """Outgoing line indices of every bus."""
        out: list[list[int]] = [[] for _ in range(self.n_bus)]
        for e, i in enumerate(self.line_from):
            out[int(i)].append(e)
        return tuple(tuple(c) for c in out)

    def kind_of(self, bus_id: int) -> BusKind:
        return self.buses[self.index[bus_id]].kind

    def buses_of(self, kind: BusKind) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses if b.kind is kind)


@dataclass(frozen=True)
class Scenario:
    name: str
    network: Network
    mt: Mapping[int, MtParams]
    ess: Mapping[int, EssParams]
    res: Mapping[int, ResParams]
    loads: Mapping[int, LoadParams]
    T: int
    dt: float
    v_min: float
    v_max: float
    epsilon: float
    mpc_lookahead: int
    cpo_lookahead: int
    polygon_sides: int
    rng_seed: int
    polygon_pairing: str = "independent"
    notes: str = ""
    base_mva: float = 1.0
    extra: Mapping[str, object] = field(default_factory=dict)

    @property
    def max_lookahead(self) -> int:
        return max(self.mpc_lookahead, self.cpo_lookahead)

    @property
    def series_length(self) -> int:
        """Number of forecast steps every series must cover (steps 1..T+max look-ahead)."""
        return self.T + self.max_lookahead

    @cached_property
    def mt_buses(self) -> tuple[int, ...]:
        return self.network.buses_of(BusKind.MT)

    @cached_property
    def ess_buses(self) -> tuple[int, ...]:
        return self.network.buses_of(BusKind.ESS)

    @cached_property
    def res_buses(self) -> tuple[int, ...]:
        return self.network.buses_of(BusKind.RES)

    @cached_property
    def load_buses(self) -> tuple[int, ...]:
        return self.network.buses_of(BusKind.LOAD)

    def demand(self, bus: int, t: int) -> tuple[float, float]:
        """Forecast (P, Q) demand of a load bus at 1-based step ``t``."""
        lp = self.loads[bus]
        return lp.p_demand[t - 1], lp.q_demand[t - 1]

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# validation


def _tree_violations(net: Network) -> list[str]:
    out: list[str] = []
    ids = [b.id for b in net.buses]
    if len(set(ids)) != len(ids):
        out.append("network: duplicate bus ids")
        return out
    known = set(ids)
    if net.slack_bus not in known:
        out.append(f"network: slack bus {net.slack_bus} not declared")
        return out
    bad = False
    for k, ln in enumerate(net.lines):
        for end in (ln.from_bus, ln.to_bus):
            if end not in known:
                out.append(f"line {k}: unknown bus {end}")
                bad = True
    if bad:
        return out
    if len(net.lines) != len(ids) - 1:
        out.append(
            f"network: not radial (|E|={len(net.lines)} but |N|-1={len(ids) - 1})"
        )
    incoming: dict[int, int] = {}
    for ln in net.lines:
        incoming[ln.to_bus] = incoming.get(ln.to_bus, 0) + 1
    if incoming.get(net.slack_bus, 0):
        out.append(f"network: slack bus {net.slack_bus} has an incoming line")
    for b, cnt in incoming.items():
        if cnt > 1:
            out.append(f"bus {b}: not radial ({cnt} incoming lines)")
    children: dict[int, list[int]] = {b: [] for b in ids}
    for ln in net.lines:
        children[ln.from_bus].append(ln.to_bus)
    seen = {net.slack_bus}
    queue = deque([net.slack_bus])
    while queue:
        i = queue.popleft()
        for j in children[i]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    missing = sorted(known - seen)
    if missing:
        out.append(f"network: not radial, buses {missing} unreachable from slack")
    return out


def validate(scenario: Scenario) -> list[str]:
    """Return every invariant violation; an empty list means the scenario is valid."""
    v: list[str] = []
    net = scenario.network
    v.extend(_tree_violations(net))

    for k, ln in enumerate(net.lines):
        tag = f"line {ln.from_bus}->{ln.to_bus}"
        if ln.r < 0:
            v.append(f"{tag}: r negative")
        if ln.x < 0:
            v.append(f"{tag}: x negative")
        if not ln.l_max > 0:
            v.append(f"{tag}: l_max not positive")

    kinds = {b.id: b.kind for b in net.buses}
    for kind, table, label in (
        (BusKind.MT, scenario.mt, "mt"),
        (BusKind.ESS, scenario.ess, "ess"),
        (BusKind.RES, scenario.res, "res"),
        (BusKind.LOAD, scenario.loads, "load"),
    ):
        for b, k in kinds.items():
            if k is kind and b not in table:
                v.append(f"bus {b}: {label} bus without {label} parameters")
        for b in table:
            if kinds.get(b) is not kind:
                v.append(f"bus {b}: {label} parameters on a non-{label} bus")

    for b, p in scenario.mt.items():
        if p.p_min > p.p_max:
            v.append(f"bus {b}: p_min above p_max")
        if p.ramp_down_min > p.ramp_up_max:
            v.append(f"bus {b}: ramp_down_min above ramp_up_max")
        if not p.tau > 0:
            v.append(f"bus {b}: tau not positive")
        if p.fuel_init < 0:
            v.append(f"bus {b}: fuel_init negative")
        if p.q_max < 0:
            v.append(f"bus {b}: q_max negative")

    for b, p in scenario.ess.items():
        if not p.p_ch_max > 0:
            v.append(f"bus {b}: p_ch_max not positive")
        if not p.p_dis_max > 0:
            v.append(f"bus {b}: p_dis_max not positive")
        if not 0 < p.eta_ch <= 1:
            v.append(f"bus {b}: eta_ch out of (0,1]")
        if not 0 < p.eta_dis <= 1:
            v.append(f"bus {b}: eta_dis out of (0,1]")
        if p.soc_min > p.soc_max:
            v.append(f"bus {b}: soc_min above soc_max")
        if p.soc_init > p.soc_max:
            v.append(f"bus {b}: soc_init above soc_max")
        if p.soc_init < p.soc_min:
            v.append(f"bus {b}: soc_init below soc_min")
        if p.q_max < 0:
            v.append(f"bus {b}: q_max negative")

    for b, p in scenario.res.items():
        if p.forecast_sd < 0:
            v.append(f"bus {b}: forecast_sd negative")
        if p.q_max < 0:
            v.append(f"bus {b}: q_max negative")

    need = scenario.series_length
    for b, p in scenario.loads.items():
        if any(x < 0 for x in p.p_demand):
            v.append(f"bus {b}: p_demand negative")
        if len(p.p_demand) < need:
            v.append(f"bus {b}: p_demand series shorter than T + look-ahead ({need})")
        if len(p.q_demand) != len(p.p_demand):
            v.append(f"bus {b}: q_demand length differs from p_demand")

    if scenario.T < 1:
        v.append("horizon: T must be at least 1")
    if not scenario.dt > 0:
        v.append("horizon: dt not positive")
    if not 0 < scenario.v_min <= 1 <= scenario.v_max:
        v.append("horizon: voltage bounds must satisfy 0 < v_min <= 1 <= v_max")
    if scenario.epsilon < 0:
        v.append("horizon: epsilon negative")
    if scenario.mpc_lookahead < 0 or scenario.mpc_lookahead > scenario.T:
        v.append("horizon: mpc_lookahead outside [0, T]")
    if scenario.cpo_lookahead < 0:
        v.append("horizon: cpo_lookahead negative")
    if scenario.polygon_sides < 1:
        v.append("horizon: polygon_sides below 1")
    if scenario.polygon_pairing not in ("independent", "shared"):
        v.append("horizon: polygon_pairing must be 'independent' or 'shared'")
    return v


# ---------------------------------------------------------------------------
# (de)serialisation


def _series(value, length: int, what: str) -> tuple[float, ...]:
    if isinstance(value, (int, float)):
        return (float(value),) * length
    if isinstance(value, list):
        return tuple(float(x) for x in value)
    raise ScenarioError(f"{what}: expected a number or a list")


def _get(d: Mapping, key: str, where: str):
    try:
        return d[key]
    except (KeyError, TypeError):
        raise ScenarioError(f"{where}: missing field '{key}'") from None


def scenario_from_dict(doc: Mapping) -> Scenario:
    """Build a Scenario from a parsed document; raises ScenarioError on bad input."""
    try:
        net_doc = _get(doc, "network", "scenario")
        horizon = _get(doc, "horizon", "scenario")
        T = int(_get(horizon, "T", "horizon"))
        mpc_h = int(_get(horizon, "mpc_lookahead", "horizon"))
        cpo_h = int(_get(horizon, "cpo_lookahead", "horizon"))
        length = T + max(mpc_h, cpo_h)

        buses = tuple(
            Bus(int(_get(b, "id", "buses")), BusKind(_get(b, "kind", "buses")))
            for b in _get(doc, "buses", "scenario")
        )
        lines = tuple(
            Line(
                int(_get(ln, "from", "lines")),
                int(_get(ln, "to", "lines")),
                float(_get(ln, "r", "lines")),
                float(_get(ln, "x", "lines")),
                float(_get(ln, "l_max", "lines")),
            )
            for ln in _get(doc, "lines", "scenario")
        )
        network = Network(buses, lines, int(_get(net_doc, "slack_bus", "network")))

        devices = doc.get("devices", {})
        mt = {
            int(_get(d, "bus", "devices.mt")): MtParams(
                **{f.name: float(_get(d, f.name, "devices.mt")) for f in dataclasses.fields(MtParams)}
            )
            for d in devices.get("mt", [])
        }
        ess = {
            int(_get(d, "bus", "devices.ess")): EssParams(
                **{f.name: float(_get(d, f.name, "devices.ess")) for f in dataclasses.fields(EssParams)}
            )
            for d in devices.get("ess", [])
        }
        res = {
            int(_get(d, "bus", "devices.res")): ResParams(
                **{f.name: float(_get(d, f.name, "devices.res")) for f in dataclasses.fields(ResParams)}
            )
            for d in devices.get("res", [])
        }
        loads = {}
        for d in devices.get("loads", []):
            b = int(_get(d, "bus", "devices.loads"))
            loads[b] = LoadParams(
                _series(_get(d, "p_demand", "devices.loads"), length, f"load {b} p_demand"),
                _series(_get(d, "q_demand", "devices.loads"), length, f"load {b} q_demand"),
                float(d.get("priority", 1.0)),
            )

        scenario = Scenario(
            name=str(doc.get("name", "")),
            network=network,
            mt=mt,
            ess=ess,
            res=res,
            loads=loads,
            T=T,
            dt=float(_get(horizon, "dt", "horizon")),
            v_min=float(_get(horizon, "v_min", "horizon")),
            v_max=float(_get(horizon, "v_max", "horizon")),
            epsilon=float(_get(horizon, "epsilon", "horizon")),
            mpc_lookahead=mpc_h,
            cpo_lookahead=cpo_h,
            polygon_sides=int(_get(horizon, "polygon_sides", "horizon")),
            rng_seed=int(_get(horizon, "rng_seed", "horizon")),
            polygon_pairing=str(horizon.get("polygon_pairing", "independent")),
            notes=str(doc.get("notes", "")),
            base_mva=float(net_doc.get("base_mva", 1.0)),
        )
    except ScenarioError:
        raise
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from exc

    problems = validate(scenario)
    if problems:
        raise ScenarioError("invalid scenario: " + "; ".join(problems))
    return scenario


def scenario_to_dict(scenario: Scenario) -> dict:
    net = scenario.network

    def params(table):
        return [{"bus": b, **dataclasses.asdict(p)} for b, p in sorted(table.items())]

    loads = [
        {
            "bus": b,
            "p_demand": list(p.p_demand),
            "q_demand": list(p.q_demand),
            "priority": p.priority,
        }
        for b, p in sorted(scenario.loads.items())
    ]
    return {
        "name": scenario.name,
        "notes": scenario.notes,
        "network": {"slack_bus": net.slack_bus, "base_mva": scenario.base_mva},
        "buses": [{"id": b.id, "kind": b.kind.value} for b in net.buses],
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x, "l_max": ln.l_max}
            for ln in net.lines
        ],
        "devices": {
            "mt": params(scenario.mt),
            "ess": params(scenario.ess),
            "res": params(scenario.res),
            "loads": loads,
        },
        "horizon": {
            "T": scenario.T,
            "dt": scenario.dt,
            "v_min": scenario.v_min,
            "v_max": scenario.v_max,
            "epsilon": scenario.epsilon,
            "mpc_lookahead": scenario.mpc_lookahead,
            "cpo_lookahead": scenario.cpo_lookahead,
            "polygon_sides": scenario.polygon_sides,
            "polygon_pairing": scenario.polygon_pairing,
            "rng_seed": scenario.rng_seed,
        },
    }


def load_scenario(path: str | os.PathLike) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: parse error: {exc}") from exc
    return scenario_from_dict(doc)


def dump_scenario(scenario: Scenario, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scenario), indent=2) + "\n")


def resolve_scenario(name_or_path: str | os.PathLike) -> Path:
    """Map a bundled scenario name (e.g. ``case12da``) or a file path to a file."""
    p = Path(name_or_path)
    if p.is_file():
        return p
    candidates = []
    env_dir = os.environ.get(SCENARIO_DIR_ENV)
    if env_dir:
        candidates.append(Path(env_dir))
    candidates.append(_DATA_DIR)
    for d in candidates:
        for cand in (d / str(name_or_path), d / f"{name_or_path}.json"):
            if cand.is_file():
                return cand
    raise FileNotFoundError(f"scenario not found: {name_or_path}")


def bundled_scenario(name: str = "case12da") -> Scenario:
    return load_scenario(_DATA_DIR / f"{name}.json")


# ---------------------------------------------------------------------------
# forecasts


def sample_res_forecast(
    scenario: Scenario, t: int, horizon: int, rng: np.random.Generator
) -> dict[int, np.ndarray]:
    """Draw ``horizon + 1`` RES forecast values per RES bus for steps t..t+horizon.

    Draws are i.i.d. Gaussian and truncated at zero. Buses are drawn in
    network order so a seeded generator gives a reproducible series.
    """
    if t < 1 or horizon < 0 or t + horizon > scenario.series_length:
        raise ValueError(
            f"forecast window [{t}, {t + horizon}] exceeds scenario length {scenario.series_length}"
        )
    out = {}
    for b in scenario.res_buses:
        p = scenario.res[b]
        draw = rng.normal(p.forecast_mean, p.forecast_sd, size=horizon + 1)
        out[b] = np.maximum(draw, 0.0)
    return out


def episode_res_forecast(scenario: Scenario, rng: np.random.Generator) -> dict[int, np.ndarray]:
    """One forecast realisation covering every step an episode can look at.

    Index ``k`` of each array holds the forecast for step ``k + 1``.
    """
    return sample_res_forecast(scenario, 1, scenario.series_length - 1, rng)


def constant_res_forecast(scenario: Scenario) -> dict[int, np.ndarray]:
    """Forecast fixed at the RES means (no noise)."""
    n = scenario.series_length
    return {b: np.full(n, max(scenario.res[b].forecast_mean, 0.0)) for b in scenario.res_buses}

