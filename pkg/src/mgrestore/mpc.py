"""Receding-horizon restoration controller built on the relaxed linear program.

Every step ``t`` a window ``[t, min(t + H, T)]`` is optimised with the
DistFlow balance and voltage rows, tangent-polygon current rows and the ESS
hull in place of the two nonconvex constraints. The first step of the plan
is applied, fuel and state of charge advance, the realised flows are
recomputed with the exact sweep, and the window moves on.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .lp import INF, LpProblem, LpSolution, LpStatus, solve_lp
from .netmodel import Scenario, constant_res_forecast
from .powerflow import FlowState, solve_distflow
from .relaxations import EssHull, build_polygon, line_range_bound, polygon_constraints

TIE_BREAK = 1e-6
CHECK_TOL = 1e-7


class MpcInfeasible(RuntimeError):
    def __init__(self, t: int, status: LpStatus):
        super().__init__(f"MPC problem at step {t} is {status.value}")
        self.t = t
        self.status = status


def vname(q: str, elem, k: int) -> str:
    return f"{q}[{elem},{k}]"


def add_network(
    lp: LpProblem, scenario: Scenario, k: int, pairing: str | None = None, lifted: bool = True
) -> None:
    """Bus/line variables of step ``k`` with the linear DistFlow rows.

    Adds ``P, Q, v`` per bus and ``Pl, Ql, l`` per line, the active and
    reactive balance rows, the voltage-drop rows, the tangent-polygon rows
    replacing the current identity (with v taken as 1), voltage and current
    limits and the slack reference.

    With independent pairing and ``lifted=True`` the ``|C|^2`` pair rows are
    written through two auxiliary variables, ``zP >= h_c(Pl)``,
    ``zQ >= h_c(Ql)`` and ``l >= zP + zQ``; the projection onto
    ``(Pl, Ql, l)`` is the same set with ``2|C| + 1`` rows.
    """
    net = scenario.network
    pairing = pairing or scenario.polygon_pairing
    for b in net.bus_ids:
        lp.add_var(vname("P", b, k), -INF, INF)
        lp.add_var(vname("Q", b, k), -INF, INF)
        lo, up = (1.0, 1.0) if b == net.slack_bus else (scenario.v_min, scenario.v_max)
        lp.add_var(vname("v", b, k), lo, up)
    for e in range(net.n_line):
        lp.add_var(vname("Pl", e, k), -INF, INF)
        lp.add_var(vname("Ql", e, k), -INF, INF)
        lp.add_var(vname("l", e, k), 0.0, float(net.l_max[e]))
    bus_ids = net.bus_ids
    for j, b in enumerate(bus_ids):
        for qty, line_qty, imp in (("P", "Pl", net.r), ("Q", "Ql", net.x)):
            row = {vname(qty, b, k): 1.0}
            for e in net.child_lines[j]:
                row[vname(line_qty, e, k)] = -1.0
            e_in = int(net.incoming_line[j])
            if e_in >= 0:
                row[vname(line_qty, e_in, k)] = 1.0
                row[vname("l", e_in, k)] = -float(imp[e_in])
            lp.add_row(row, "=", 0.0, f"bal{qty}[{b},{k}]")
    for e in range(net.n_line):
        i, j = bus_ids[net.line_from[e]], bus_ids[net.line_to[e]]
        r, x = float(net.r[e]), float(net.x[e])
        lp.add_row(
            {
                vname("v", j, k): 1.0,
                vname("v", i, k): -1.0,
                vname("Pl", e, k): 2 * r,
                vname("Ql", e, k): 2 * x,
                vname("l", e, k): -(r * r + x * x),
            },
            "=",
            0.0,
            f"vdrop[{e},{k}]",
        )
        poly = build_polygon(scenario.polygon_sides, line_range_bound(float(net.l_max[e]), scenario.v_max))
        if lifted and pairing == "independent" and len(poly) > 1:
            zp, zq = vname("zP", e, k), vname("zQ", e, k)
            lp.add_var(zp, -INF, INF)
            lp.add_var(zq, -INF, INF)
            for c, (g, psi) in enumerate(poly.sides):
                lp.add_row({zp: 1.0, vname("Pl", e, k): -g}, ">=", psi, f"polyP[{e},{k},{c}]")
                lp.add_row({zq: 1.0, vname("Ql", e, k): -g}, ">=", psi, f"polyQ[{e},{k},{c}]")
            lp.add_row({vname("l", e, k): 1.0, zp: -1.0, zq: -1.0}, ">=", 0.0, f"poly[{e},{k}]")
            continue
        for row in polygon_constraints(
            poly, vname("Pl", e, k), vname("Ql", e, k), vname("l", e, k), pairing, f"[{e},{k}]"
        ):
            lp.add_row(row.coeffs, row.relation, row.rhs, row.label)


def add_load(lp: LpProblem, scenario: Scenario, b: int, k: int, t_abs: int, rho_bounds=(0.0, 1.0)) -> None:
    """Pickup ratio and constant power factor withdrawal of load ``b`` at 1-based step ``t_abs``."""
    p_d, q_d = scenario.demand(b, t_abs)
    lo, up = rho_bounds
    if p_d == 0 and q_d == 0:
        lo = up = 1.0
    lp.add_var(vname("rho", b, k), lo, up)
    lp.add_row({vname("P", b, k): 1.0, vname("rho", b, k): p_d}, "=", 0.0, f"loadP[{b},{k}]")
    lp.add_row({vname("Q", b, k): 1.0, vname("rho", b, k): q_d}, "=", 0.0, f"loadQ[{b},{k}]")


@dataclass
class MpcPlan:
    """Solved window LP together with its window bookkeeping."""

    problem: LpProblem
    solution: LpSolution
    t: int
    steps: list[int]  # absolute 1-based steps in the window

    def value(self, q: str, elem, t_abs: int) -> float:
        return self.solution[vname(q, elem, t_abs - self.t)]


def window(scenario: Scenario, t: int, lookahead: int | None = None) -> list[int]:
    h = scenario.mpc_lookahead if lookahead is None else lookahead
    return list(range(t, min(t + h, scenario.T) + 1))


def build_mpc_lp(
    scenario: Scenario,
    soc: Mapping[int, float],
    fuel: Mapping[int, float],
    prev_power: Mapping[int, float] | None,
    prev_pickup: Mapping[int, float] | None,
    t: int,
    res_forecast: Mapping[int, np.ndarray] | None = None,
    lookahead: int | None = None,
    tie_break: float = TIE_BREAK,
    lifted: bool = True,
) -> LpProblem:
    """Window LP at 1-based step ``t``.

    ``soc``/``fuel`` are the state at the start of step ``t``; ``prev_power``
    (MT output) and ``prev_pickup`` are the values applied at ``t - 1`` and
    are ignored at ``t = 1``. ``res_forecast[b][t-1]`` is the RES forecast at
    step ``t``. ``tie_break`` rewards earlier ESS discharge by a vanishing
    amount so that equal-value plans resolve to front-loaded discharge.
    ``lifted`` selects the compact polygon rows (see ``add_network``).
    """
    if not 1 <= t <= scenario.T:
        raise ValueError(f"step {t} outside 1..{scenario.T}")
    missing = [b for b in scenario.ess_buses if b not in soc] + [b for b in scenario.mt_buses if b not in fuel]
    if t > 1:
        missing += [b for b in scenario.mt_buses if prev_power is None or b not in prev_power]
        missing += [b for b in scenario.load_buses if prev_pickup is None or b not in prev_pickup]
    if missing:
        raise ValueError(f"state missing for buses {sorted(set(missing))}")
    forecast = constant_res_forecast(scenario) if res_forecast is None else res_forecast
    steps = window(scenario, t, lookahead)
    lp = LpProblem()
    objective: dict[str, float] = {}

    for k, ta in enumerate(steps):
        add_network(lp, scenario, k, lifted=lifted)
        for b in scenario.load_buses:
            add_load(lp, scenario, b, k, ta)
            p_d = scenario.demand(b, ta)[0]
            objective[vname("rho", b, k)] = scenario.loads[b].priority * p_d
            if k > 0:
                lp.add_row({vname("rho", b, k): 1.0, vname("rho", b, k - 1): -1.0}, ">=", -scenario.epsilon, f"mono[{b},{k}]")
            elif t > 1:
                lp.add_row({vname("rho", b, k): 1.0}, ">=", prev_pickup[b] - scenario.epsilon, f"mono[{b},{k}]")

        for b, p in scenario.mt.items():
            P = vname("P", b, k)
            lp.set_bounds(P, p.p_min, p.p_max)
            lp.set_bounds(vname("Q", b, k), -p.q_max, p.q_max)
            objective[P] = objective.get(P, 0.0) - p.cost_coeff
            if k > 0:
                prevP = vname("P", b, k - 1)
                lp.add_row({P: 1.0, prevP: -1.0}, "<=", p.ramp_up_max, f"rampU[{b},{k}]")
                lp.add_row({P: 1.0, prevP: -1.0}, ">=", p.ramp_down_min, f"rampD[{b},{k}]")
            elif t > 1:
                lp.add_row({P: 1.0}, "<=", prev_power[b] + p.ramp_up_max, f"rampU[{b},{k}]")
                lp.add_row({P: 1.0}, ">=", prev_power[b] + p.ramp_down_min, f"rampD[{b},{k}]")
            else:
                lp.add_row({P: 1.0}, "<=", p.ramp_up_max, f"rampU[{b},{k}]")
            f0 = (fuel[b], fuel[b]) if k == 0 else (0.0, INF)
            lp.add_var(vname("fuel", b, k), *f0)

        for b, p in scenario.ess.items():
            ch, dis, P = vname("ch", b, k), vname("dis", b, k), vname("P", b, k)
            lp.add_var(ch, 0.0, p.p_ch_max)
            lp.add_var(dis, 0.0, p.p_dis_max)
            if tie_break:
                objective[dis] = tie_break * (len(steps) - k)
            lp.set_bounds(vname("Q", b, k), -p.q_max, p.q_max)
            lp.add_row({P: 1.0, dis: -1.0, ch: 1.0}, "=", 0.0, f"essP[{b},{k}]")
            hull = EssHull(p.p_ch_max, p.p_dis_max).row(ch, dis, f"hull[{b},{k}]")
            lp.add_row(hull.coeffs, hull.relation, hull.rhs, hull.label)
            s0 = (soc[b], soc[b]) if k == 0 else (p.soc_min, p.soc_max)
            lp.add_var(vname("S", b, k), *s0)

        for b, p in scenario.res.items():
            p_hat = float(forecast[b][ta - 1])
            kappa = vname("kappa", b, k)
            lp.add_var(kappa, 0.0, 1.0)
            lp.add_row({vname("P", b, k): 1.0, kappa: p_hat}, "=", p_hat, f"res[{b},{k}]")
            lp.set_bounds(vname("Q", b, k), -p.q_max, p.q_max)

    # state recursions, including the state after the last window step when it is still inside the horizon
    for k, ta in enumerate(steps):
        if ta >= scenario.T:
            continue
        nxt = k + 1
        for b, p in scenario.mt.items():
            if nxt == len(steps):
                lp.add_var(vname("fuel", b, nxt), 0.0, INF)
            lp.add_row(
                {vname("fuel", b, nxt): 1.0, vname("fuel", b, k): -1.0, vname("P", b, k): p.tau},
                "=",
                0.0,
                f"fuel[{b},{k}]",
            )
        for b, p in scenario.ess.items():
            if nxt == len(steps):
                lp.add_var(vname("S", b, nxt), p.soc_min, p.soc_max)
            lp.add_row(
                {
                    vname("S", b, nxt): 1.0,
                    vname("S", b, k): -1.0,
                    vname("ch", b, k): -p.eta_ch * scenario.dt,
                    vname("dis", b, k): scenario.dt / p.eta_dis,
                },
                "=",
                0.0,
                f"soc[{b},{k}]",
            )
    lp.set_objective(objective)
    return lp


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class StepRecord:
    t: int
    decisions: dict[str, float]  # first-step values keyed by "q[elem]"
    flow: FlowState
    soc: dict[int, float]  # at the start of the step
    fuel: dict[int, float]
    objective: float  # first-step contribution to the restoration objective
    solve_time: float
    lp_voltage: dict[int, float] = field(default_factory=dict)


@dataclass
class RestorationLog:
    """Applied decisions and realised flows of a closed-loop run."""

    scenario: Scenario
    steps: list[StepRecord] = field(default_factory=list)
    final_soc: dict[int, float] = field(default_factory=dict)
    final_fuel: dict[int, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.steps)

    def series(self, q: str, elem) -> np.ndarray:
        return np.array([s.decisions[f"{q}[{elem}]"] for s in self.steps])

    def soc_series(self, b: int) -> np.ndarray:
        return np.array([s.soc[b] for s in self.steps])

    def fuel_series(self, b: int) -> np.ndarray:
        return np.array([s.fuel[b] for s in self.steps])

    def voltages(self) -> np.ndarray:
        """Realised squared voltages, shape (T, n_bus)."""
        return np.array([s.flow.v for s in self.steps])

    def lp_voltages(self) -> np.ndarray:
        ids = self.scenario.network.bus_ids
        return np.array([[s.lp_voltage[b] for b in ids] for s in self.steps])

    def total_objective(self) -> float:
        return float(sum(s.objective for s in self.steps))

    def rows(self) -> list[tuple[int, str, float]]:
        """Long-format (t, quantity, value) rows in a fixed order."""
        net = self.scenario.network
        out = []
        for s in self.steps:
            for key in sorted(s.decisions):
                out.append((s.t, key, s.decisions[key]))
            for b in sorted(s.soc):
                out.append((s.t, f"soc[{b}]", s.soc[b]))
            for b in sorted(s.fuel):
                out.append((s.t, f"fuel[{b}]", s.fuel[b]))
            for i, b in enumerate(net.bus_ids):
                out.append((s.t, f"v_realised[{b}]", float(s.flow.v[i])))
            for b in sorted(s.lp_voltage):
                out.append((s.t, f"v_plan[{b}]", s.lp_voltage[b]))
            out.append((s.t, "slack_p_realised", float(s.flow.p_inj[net.slack_index])))
            out.append((s.t, "objective", s.objective))
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "quantity", "value"])
        for t, q, v in self.rows():
            w.writerow([t, q, repr(float(v))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    def check(self, tol: float = CHECK_TOL) -> list[str]:
        """Post-hoc invariant violations (empty when the run is consistent)."""
        sc = self.scenario
        net = sc.network
        bad = []
        prev_rho = None
        for s in self.steps:
            v = np.array([s.lp_voltage[b] for b in net.bus_ids])
            if np.any(v < sc.v_min - tol) or np.any(v > sc.v_max + tol):
                bad.append(f"t={s.t}: planned voltage out of bounds")
            if abs(s.lp_voltage[net.slack_bus] - 1.0) > 0:
                bad.append(f"t={s.t}: slack voltage {s.lp_voltage[net.slack_bus]}")
            if abs(s.flow.v[net.slack_index] - 1.0) > 0:
                bad.append(f"t={s.t}: realised slack voltage not 1")
            for e in range(net.n_line):
                if s.decisions[f"l[{e}]"] > net.l_max[e] + tol:
                    bad.append(f"t={s.t}: line {e} current above limit")
            for b, p in sc.mt.items():
                P = s.decisions[f"P[{b}]"]
                if not p.p_min - tol <= P <= p.p_max + tol:
                    bad.append(f"t={s.t}: MT {b} output {P} out of bounds")
                if s.t == 1:
                    if P > p.ramp_up_max + tol:
                        bad.append(f"t=1: MT {b} initial ramp")
                else:
                    dP = P - self.steps[s.t - 2].decisions[f"P[{b}]"]
                    if not p.ramp_down_min - tol <= dP <= p.ramp_up_max + tol:
                        bad.append(f"t={s.t}: MT {b} ramp {dP}")
                if s.fuel[b] < -tol:
                    bad.append(f"t={s.t}: MT {b} fuel negative")
                if s.t > 1 and s.fuel[b] > self.steps[s.t - 2].fuel[b] + tol:
                    bad.append(f"t={s.t}: MT {b} fuel increased")
            for b, p in sc.ess.items():
                if not p.soc_min - tol <= s.soc[b] <= p.soc_max + tol:
                    bad.append(f"t={s.t}: ESS {b} SoC {s.soc[b]} out of bounds")
            rho = {b: s.decisions[f"rho[{b}]"] for b in sc.load_buses}
            if prev_rho is not None:
                for b in rho:
                    if rho[b] - prev_rho[b] < -sc.epsilon - tol:
                        bad.append(f"t={s.t}: load {b} pickup dropped by more than epsilon")
            prev_rho = rho
        return bad

    def cc_violations(self) -> dict[tuple[int, int], float]:
        out = {}
        for s in self.steps:
            for b in self.scenario.ess_buses:
                prod = s.decisions[f"ch[{b}]"] * s.decisions[f"dis[{b}]"]
                if prod > 0:
                    out[(s.t, b)] = prod
        return out


def _first_step(plan: MpcPlan, scenario: Scenario) -> dict[str, float]:
    sol = plan.solution
    out = {}
    for name, val in zip(plan.problem.names, sol.x):
        base, _, rest = name.partition("[")
        elem, _, k = rest.rstrip("]").rpartition(",")
        if k == "0" and base not in ("S", "fuel"):
            out[f"{base}[{elem}]"] = float(val)
    return out


def realised_flow(scenario: Scenario, decisions: Mapping[str, float]) -> FlowState:
    """Exact DistFlow under the applied injections; the slack bus closes the balance."""
    net = scenario.network
    p = np.array([decisions[f"P[{b}]"] for b in net.bus_ids])
    q = np.array([decisions[f"Q[{b}]"] for b in net.bus_ids])
    return solve_distflow(net, (p, q))


def run_mpc(
    scenario: Scenario,
    res_forecast: Mapping[int, np.ndarray] | None = None,
    lookahead: int | None = None,
    tie_break: float = TIE_BREAK,
) -> RestorationLog:
    """Closed-loop MPC over steps 1..T; raises MpcInfeasible if a window LP has no solution."""
    forecast = constant_res_forecast(scenario) if res_forecast is None else res_forecast
    soc = {b: p.soc_init for b, p in scenario.ess.items()}
    fuel = {b: p.fuel_init for b, p in scenario.mt.items()}
    prev_power: dict[int, float] | None = None
    prev_pickup: dict[int, float] | None = None
    log = RestorationLog(scenario)
    for t in range(1, scenario.T + 1):
        start = time.perf_counter()
        lp = build_mpc_lp(scenario, soc, fuel, prev_power, prev_pickup, t, forecast, lookahead, tie_break)
        sol = solve_lp(lp)
        elapsed = time.perf_counter() - start
        if not sol.optimal:
            raise MpcInfeasible(t, sol.status)
        plan = MpcPlan(lp, sol, t, window(scenario, t, lookahead))
        dec = _first_step(plan, scenario)
        flow = realised_flow(scenario, dec)
        obj = sum(scenario.loads[b].priority * -dec[f"P[{b}]"] for b in scenario.load_buses)
        obj -= sum(p.cost_coeff * dec[f"P[{b}]"] for b, p in scenario.mt.items())
        lp_v = {b: dec[f"v[{b}]"] for b in scenario.network.bus_ids}
        log.steps.append(StepRecord(t, dec, flow, dict(soc), dict(fuel), float(obj), elapsed, lp_v))
        for b, p in scenario.ess.items():
            soc[b] = soc[b] + p.eta_ch * dec[f"ch[{b}]"] * scenario.dt - dec[f"dis[{b}]"] * scenario.dt / p.eta_dis
        for b, p in scenario.mt.items():
            fuel[b] = fuel[b] - p.tau * dec[f"P[{b}]"]
        prev_power = {b: dec[f"P[{b}]"] for b in scenario.mt_buses}
        prev_pickup = {b: dec[f"rho[{b}]"] for b in scenario.load_buses}
    log.final_soc = soc
    log.final_fuel = fuel
    return log
