"""Constrained MDP view of the restoration problem.

The state holds the storage and fuel levels, the pickups and MT outputs
applied at the previous step, and the forecasts over the window
``[t, t + H]``. An action sets every generator injection (RES, MT and ESS)
for each window step. Given those injections the load pickups are chosen by
a small inner LP per window step that maximises priority-weighted restored
load under the relaxed network model; the slack bus may only spill active
power and balances reactive power freely. The first window step is applied:
storage and fuel advance, the realised flow is recomputed with the exact
sweep and the forecast window rolls forward.

Action flattening, per window step ``k``: every RES bus ``(P, Q)``, every MT
bus ``(P, Q)``, every ESS bus ``(ch, dis, Q)``, buses in network order.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .lp import INF, LpProblem, LpStatus, solve_lp
from .mpc import RestorationLog, StepRecord, add_network, vname
from .netmodel import Scenario
from .powerflow import (
    FlowState,
    Key,
    PowerFlowError,
    SensitivityError,
    action_jacobian,
    action_keys_for,
    build_sensitivity_system,
    solve_distflow,
)

SPILL_WEIGHT = 1e-3  # objective weight on slack spill and reactive balancing
PIN_TOL = 1e-9


# ---------------------------------------------------------------------------
# layout and state


@dataclass(frozen=True)
class ActionLayout:
    """Flattening of the window action into a vector."""

    keys: tuple[Key, ...]
    steps: int

    @classmethod
    def for_scenario(cls, scenario: Scenario, lookahead: int | None = None) -> "ActionLayout":
        h = scenario.cpo_lookahead if lookahead is None else lookahead
        return cls(tuple(action_keys_for(scenario, h + 1)), h + 1)

    @property
    def dim(self) -> int:
        return len(self.keys)

    def index(self, key: Key) -> int:
        return self.keys.index(key)

    def per_step(self) -> int:
        return self.dim // self.steps

    def ranges(self, scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
        """Static device limits per action coordinate (lower, upper)."""
        lo = np.zeros(self.dim)
        up = np.zeros(self.dim)
        for i, (q, b, _) in enumerate(self.keys):
            if b in scenario.mt:
                p = scenario.mt[b]
                lo[i], up[i] = (p.p_min, p.p_max) if q == "P" else (-p.q_max, p.q_max)
            elif b in scenario.ess:
                p = scenario.ess[b]
                lo[i], up[i] = {"ch": (0.0, p.p_ch_max), "dis": (0.0, p.p_dis_max), "Q": (-p.q_max, p.q_max)}[q]
            else:
                p = scenario.res[b]
                if q == "P":
                    lo[i], up[i] = 0.0, p.forecast_mean + 3 * p.forecast_sd
                else:
                    lo[i], up[i] = -p.q_max, p.q_max
        return lo, up


@dataclass
class SystemState:
    """State at the start of 1-based step ``t``.

    ``soc``, ``fuel``, ``pickup`` and ``mt_power`` hold the values left by
    step ``t - 1``; ``res_window[b][k]`` is the RES forecast for step
    ``t + k``. Load forecasts come from the scenario.
    """

    t: int
    soc: dict[int, float]
    fuel: dict[int, float]
    pickup: dict[int, float]
    mt_power: dict[int, float]
    res_window: dict[int, np.ndarray]

    def copy(self) -> "SystemState":
        return SystemState(
            self.t,
            dict(self.soc),
            dict(self.fuel),
            dict(self.pickup),
            dict(self.mt_power),
            {b: np.array(v) for b, v in self.res_window.items()},
        )

    @property
    def lookahead(self) -> int:
        return len(next(iter(self.res_window.values()))) - 1 if self.res_window else 0

    def load_window(self, scenario: Scenario, steps: int) -> dict[int, np.ndarray]:
        """Load forecasts ``(steps, 2)`` of P and Q demand per load bus."""
        return {
            b: np.array([scenario.demand(b, self.t + k) for k in range(steps)]) for b in scenario.load_buses
        }


def initial_state(
    scenario: Scenario,
    res_forecast: Mapping[int, np.ndarray],
    lookahead: int | None = None,
    soc_init: Mapping[int, float] | None = None,
    fuel_init: Mapping[int, float] | None = None,
) -> SystemState:
    """State at t = 1 with nothing picked up. ``res_forecast[b][k]`` is the forecast for step k+1."""
    h = scenario.cpo_lookahead if lookahead is None else lookahead
    soc = {b: p.soc_init for b, p in scenario.ess.items()} if soc_init is None else dict(soc_init)
    fuel = {b: p.fuel_init for b, p in scenario.mt.items()} if fuel_init is None else dict(fuel_init)
    res = {b: np.array(res_forecast[b][: h + 1], dtype=float) for b in scenario.res_buses}
    for b, v in res.items():
        if len(v) != h + 1:
            raise ValueError(f"RES forecast for bus {b} shorter than the window")
    return SystemState(
        1,
        soc,
        fuel,
        {b: 0.0 for b in scenario.load_buses},
        {b: 0.0 for b in scenario.mt_buses},
        res,
    )


def state_vector(scenario: Scenario, state: SystemState) -> np.ndarray:
    """State features scaled to roughly [-1, 1] with the scenario limits."""
    parts = []
    for b, p in scenario.ess.items():
        parts.append(2 * (state.soc[b] - p.soc_min) / (p.soc_max - p.soc_min) - 1)
    for b, p in scenario.mt.items():
        parts.append(2 * state.fuel[b] / max(p.fuel_init, 1e-9) - 1)
    for b in scenario.load_buses:
        parts.append(2 * state.pickup[b] - 1)
    for b, p in scenario.mt.items():
        parts.append(2 * state.mt_power[b] / max(p.p_max, 1e-9) - 1)
    steps = state.lookahead + 1
    for b, series in state.load_window(scenario, steps).items():
        scale = max(max(scenario.loads[b].p_demand), max(scenario.loads[b].q_demand), 1e-9)
        parts.extend((2 * series.ravel() / scale - 1).tolist())
    for b, p in scenario.res.items():
        parts.extend(((state.res_window[b] - p.forecast_mean) / max(3 * p.forecast_sd, 1e-9)).tolist())
    return np.array(parts, dtype=float)


def state_dim(scenario: Scenario, lookahead: int | None = None) -> int:
    h = scenario.cpo_lookahead if lookahead is None else lookahead
    n = len(scenario.ess) + 2 * len(scenario.mt) + len(scenario.load_buses)
    return n + (h + 1) * (2 * len(scenario.load_buses) + len(scenario.res))


# ---------------------------------------------------------------------------
# applying an action


@dataclass
class AppliedAction:
    """Device set points after saturation, with the Jacobian of the clip map."""

    values: np.ndarray
    jacobian: np.ndarray  # d applied / d raw
    clipped: np.ndarray  # bool per coordinate
    soc: np.ndarray  # (steps + 1, n_ess) storage trajectory
    fuel: np.ndarray  # (steps + 1, n_mt)


def _clip(val, grad, lo, lo_grad, up, up_grad):
    """Clip a value with known gradient into [lo, up]; returns value, gradient and flag."""
    if up < lo:
        up, up_grad = lo, lo_grad
    if val < lo:
        return lo, lo_grad, True
    if val > up:
        return up, up_grad, True
    return val, grad, False


def apply_limits(
    scenario: Scenario, state: SystemState, layout: ActionLayout, raw: np.ndarray
) -> AppliedAction:
    """Saturate a raw action to the device limits, ramp limits, fuel and storage range.

    Limits are applied sequentially over the window so that storage and fuel
    stay inside their ranges; the gradient of every clipped value with
    respect to the raw action is carried along (forward mode).
    """
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (layout.dim,):
        raise ValueError(f"action has shape {raw.shape}, expected ({layout.dim},)")
    d = layout.dim
    out = raw.copy()
    J = np.eye(d)
    clipped = np.zeros(d, dtype=bool)
    zero = np.zeros(d)
    dt = scenario.dt
    ess = list(scenario.ess_buses)
    mts = list(scenario.mt_buses)
    soc = np.zeros((layout.steps + 1, len(ess)))
    fuel = np.zeros((layout.steps + 1, len(mts)))
    soc_g = {b: zero.copy() for b in ess}
    fuel_g = {b: zero.copy() for b in mts}
    s_now = {b: state.soc[b] for b in ess}
    f_now = {b: state.fuel[b] for b in mts}
    p_prev = {b: state.mt_power[b] for b in mts}
    p_prev_g = {b: zero.copy() for b in mts}
    soc[0] = [s_now[b] for b in ess]
    fuel[0] = [f_now[b] for b in mts]

    def put(i, lo, lo_g, up, up_g):
        v, g, c = _clip(out[i], J[i].copy(), lo, lo_g, up, up_g)
        out[i], J[i], clipped[i] = v, g, c

    for k in range(layout.steps):
        for b in scenario.res_buses:
            p = scenario.res[b]
            i, j = layout.index(("P", b, k)), layout.index(("Q", b, k))
            put(i, 0.0, zero, float(state.res_window[b][k]), zero)
            put(j, -p.q_max, zero, p.q_max, zero)
        for b in mts:
            p = scenario.mt[b]
            i, j = layout.index(("P", b, k)), layout.index(("Q", b, k))
            lo, lo_g = p.p_min, zero
            up, up_g = p.p_max, zero
            ramp_lo = p_prev[b] + p.ramp_down_min
            ramp_up = p_prev[b] + p.ramp_up_max
            if ramp_lo > lo:
                lo, lo_g = ramp_lo, p_prev_g[b]
            if ramp_up < up:
                up, up_g = ramp_up, p_prev_g[b]
            fuel_cap = f_now[b] / p.tau if p.tau > 0 else INF
            if fuel_cap < up:
                up, up_g = fuel_cap, fuel_g[b] / p.tau
            put(i, lo, lo_g, up, up_g)
            put(j, -p.q_max, zero, p.q_max, zero)
            p_prev[b], p_prev_g[b] = out[i], J[i].copy()
            f_now[b] = f_now[b] - p.tau * out[i]
            fuel_g[b] = fuel_g[b] - p.tau * J[i]
        for b in ess:
            p = scenario.ess[b]
            ic, idis, iq = layout.index(("ch", b, k)), layout.index(("dis", b, k)), layout.index(("Q", b, k))
            head = (p.soc_max - s_now[b]) / (p.eta_ch * dt)
            if head < p.p_ch_max:
                put(ic, 0.0, zero, max(head, 0.0), -soc_g[b] / (p.eta_ch * dt) if head > 0 else zero)
            else:
                put(ic, 0.0, zero, p.p_ch_max, zero)
            # energy above the floor once the charge of this step is stored
            room = (s_now[b] + p.eta_ch * out[ic] * dt - p.soc_min) * p.eta_dis / dt
            room_g = (soc_g[b] + p.eta_ch * J[ic] * dt) * p.eta_dis / dt
            if room < p.p_dis_max:
                put(idis, 0.0, zero, max(room, 0.0), room_g if room > 0 else zero)
            else:
                put(idis, 0.0, zero, p.p_dis_max, zero)
            put(iq, -p.q_max, zero, p.q_max, zero)
            s_now[b] = s_now[b] + p.eta_ch * out[ic] * dt - out[idis] * dt / p.eta_dis
            soc_g[b] = soc_g[b] + p.eta_ch * J[ic] * dt - J[idis] * dt / p.eta_dis
        soc[k + 1] = [s_now[b] for b in ess]
        fuel[k + 1] = [f_now[b] for b in mts]
    return AppliedAction(out, J, clipped, soc, fuel)


# ---------------------------------------------------------------------------
# inner pickup LP


@dataclass
class PickupResult:
    rho: dict[int, float]
    spill: float  # active power withdrawn at the slack bus (<= 0)
    q_balance: float  # reactive power injected at the slack bus
    feasible: bool
    lower: dict[int, float]  # lower pickup bound imposed by the monotone row
    values: dict[str, float] = field(default_factory=dict)  # inner LP solution by variable name


def generation_injections(
    scenario: Scenario, layout: ActionLayout, applied: np.ndarray, k: int
) -> tuple[dict[int, float], dict[int, float]]:
    p, q = {}, {}
    for b in scenario.res_buses + scenario.mt_buses:
        p[b] = float(applied[layout.index(("P", b, k))])
        q[b] = float(applied[layout.index(("Q", b, k))])
    for b in scenario.ess_buses:
        p[b] = float(applied[layout.index(("dis", b, k))] - applied[layout.index(("ch", b, k))])
        q[b] = float(applied[layout.index(("Q", b, k))])
    return p, q


def pickup_lp(
    scenario: Scenario,
    t_abs: int,
    gen_p: Mapping[int, float],
    gen_q: Mapping[int, float],
    prev_pickup: Mapping[int, float] | None,
) -> tuple[LpProblem, dict[int, float]]:
    """Single-step LP choosing pickups for fixed generator injections."""
    net = scenario.network
    lp = LpProblem()
    add_network(lp, scenario, 0)
    objective: dict[str, float] = {}
    lower = {}
    for b in scenario.load_buses:
        p_d, q_d = scenario.demand(b, t_abs)
        lo = 0.0
        if prev_pickup is not None:
            lo = min(max(prev_pickup[b] - scenario.epsilon, 0.0), 1.0)
        if p_d == 0 and q_d == 0:
            lo, up = 0.0, 0.0
        else:
            up = 1.0
        lower[b] = lo
        rho = vname("rho", b, 0)
        lp.add_var(rho, lo, up)
        lp.add_row({vname("P", b, 0): 1.0, rho: p_d}, "=", 0.0, f"loadP[{b},0]")
        lp.add_row({vname("Q", b, 0): 1.0, rho: q_d}, "=", 0.0, f"loadQ[{b},0]")
        objective[rho] = scenario.loads[b].priority * p_d
    for b, val in gen_p.items():
        lp.set_bounds(vname("P", b, 0), val, val)
        lp.set_bounds(vname("Q", b, 0), gen_q[b], gen_q[b])
    s = net.slack_bus
    lp.add_var("spill", -INF, 0.0, SPILL_WEIGHT)
    lp.add_var("qpos", 0.0, INF, -SPILL_WEIGHT)
    lp.add_var("qneg", 0.0, INF, -SPILL_WEIGHT)
    lp.add_coeff(lp.row_index(f"balP[{s},0]"), "spill", 1.0)
    lp.add_coeff(lp.row_index(f"balQ[{s},0]"), "qpos", -1.0)
    lp.add_coeff(lp.row_index(f"balQ[{s},0]"), "qneg", 1.0)
    lp.add_objective(objective)
    return lp, lower


def solve_pickup(
    scenario: Scenario,
    t_abs: int,
    gen_p: Mapping[int, float],
    gen_q: Mapping[int, float],
    prev_pickup: Mapping[int, float] | None,
) -> PickupResult:
    """Pickups for fixed injections; an infeasible LP yields zero pickup, flagged."""
    lp, lower = pickup_lp(scenario, t_abs, gen_p, gen_q, prev_pickup)
    sol = solve_lp(lp)
    if sol.status is not LpStatus.OPTIMAL:
        return PickupResult({b: 0.0 for b in scenario.load_buses}, 0.0, 0.0, False, lower)
    rho = {b: float(np.clip(sol[vname("rho", b, 0)], 0.0, 1.0)) for b in scenario.load_buses}
    return PickupResult(
        rho,
        float(sol["spill"]),
        float(sol["qpos"] - sol["qneg"]),
        True,
        lower,
        sol.values,
    )


# ---------------------------------------------------------------------------
# window rollout, reward and constraints


@dataclass
class WindowOutcome:
    applied: AppliedAction
    pickups: list[PickupResult]
    flows: list[FlowState | None]
    load_p: np.ndarray  # (steps, n_load) load injections, negative when served
    feasible: bool
    t: int  # absolute step of window step 0

    @property
    def flow(self) -> FlowState | None:
        return self.flows[0]


def bus_injections(
    scenario: Scenario, gen_p: Mapping[int, float], gen_q: Mapping[int, float], rho: Mapping[int, float], t_abs: int
) -> tuple[np.ndarray, np.ndarray]:
    net = scenario.network
    p = np.zeros(net.n_bus)
    q = np.zeros(net.n_bus)
    for b, val in gen_p.items():
        p[net.index[b]] = val
        q[net.index[b]] = gen_q[b]
    for b in scenario.load_buses:
        p_d, q_d = scenario.demand(b, t_abs)
        p[net.index[b]] = -rho[b] * p_d
        q[net.index[b]] = -rho[b] * q_d
    return p, q


def rollout_window(
    scenario: Scenario, state: SystemState, layout: ActionLayout, raw: np.ndarray, flows: bool = True
) -> WindowOutcome:
    """Apply the action over the whole window with forecast-based pickups."""
    applied = apply_limits(scenario, state, layout, raw)
    pickups: list[PickupResult] = []
    out_flows: list[FlowState | None] = []
    loads = scenario.load_buses
    load_p = np.zeros((layout.steps, len(loads)))
    prev = state.pickup if state.t > 1 else None
    ok = True
    for k in range(layout.steps):
        t_abs = state.t + k
        gp, gq = generation_injections(scenario, layout, applied.values, k)
        res = solve_pickup(scenario, t_abs, gp, gq, prev)
        ok &= res.feasible
        pickups.append(res)
        load_p[k] = [-res.rho[b] * scenario.demand(b, t_abs)[0] for b in loads]
        if flows or k == 0:
            try:
                out_flows.append(solve_distflow(scenario.network, bus_injections(scenario, gp, gq, res.rho, t_abs)))
            except PowerFlowError:
                out_flows.append(None)
                ok = False
        prev = res.rho
    return WindowOutcome(applied, pickups, out_flows, load_p, ok, state.t)


def window_reward(
    scenario: Scenario, layout: ActionLayout, outcome: WindowOutcome, gamma: float
) -> float:
    """Discounted restored load minus MT cost over the window."""
    total = 0.0
    for k in range(layout.steps):
        step = 0.0
        for i, b in enumerate(scenario.load_buses):
            step += scenario.loads[b].priority * outcome.load_p[k, i]
        for b, p in scenario.mt.items():
            step += p.cost_coeff * outcome.applied.values[layout.index(("P", b, k))]
        total -= gamma**k * step
    return float(total)


def reward(
    scenario: Scenario,
    load_p: Mapping[int, np.ndarray],
    mt_p: Mapping[int, np.ndarray],
    gamma: float,
) -> float:
    """R = -sum_k gamma^k (sum xi_L P_load + sum xi_MT P_MT) from per-step injection series."""
    total = 0.0
    for b, series in load_p.items():
        w = gamma ** np.arange(len(series))
        total -= scenario.loads[b].priority * float(np.dot(w, series))
    for b, series in mt_p.items():
        w = gamma ** np.arange(len(series))
        total -= scenario.mt[b].cost_coeff * float(np.dot(w, series))
    return float(total)


def _closure(scenario: Scenario, outcome: WindowOutcome, k: int, t_abs: int) -> tuple[list[Key], list[dict]]:
    """Differentials held at zero and extra rows for window step ``k``.

    Loads strictly between their bounds move along their power factor. If
    none is marginal and nothing is spilled, the highest-priority load that
    can still grow is taken as the marginal one (the load the LP would pick
    up next). The slack active injection moves only when power is spilled or
    no load can absorb a change; its reactive injection always moves.
    """
    res = outcome.pickups[k]
    slack = scenario.network.slack_bus
    demand = {b: scenario.demand(b, t_abs) for b in scenario.load_buses if b != slack}
    candidates = [b for b, (p_d, q_d) in demand.items() if p_d > 0 or q_d > 0]
    marginal = [b for b in candidates if res.lower[b] + PIN_TOL < res.rho[b] < 1.0 - PIN_TOL]
    spilling = res.spill < -PIN_TOL
    if not marginal and not spilling and res.feasible:
        room = [b for b in candidates if res.rho[b] < 1.0 - PIN_TOL]
        if room:
            top = max(scenario.loads[b].priority for b in room)
            marginal = [b for b in room if scenario.loads[b].priority >= top - 1e-12]
    fixed: list[Key] = []
    rows: list[dict] = []
    for b, (p_d, q_d) in demand.items():
        if b in marginal and p_d > 0:
            rows.append({("Q", b, k): 1.0, ("P", b, k): -q_d / p_d})
        elif b not in marginal:
            fixed += [("P", b, k), ("Q", b, k)]
        else:
            fixed.append(("P", b, k))
    if marginal and not spilling:
        fixed.append(("P", slack, k))
    return fixed, rows


def reward_gradient(
    scenario: Scenario, layout: ActionLayout, outcome: WindowOutcome, gamma: float
) -> np.ndarray:
    """dR/d(raw action) through the load sensitivities and the clip map."""
    if any(f is None for f in outcome.flows):
        raise SensitivityError("window flow missing; cannot linearise")
    system = build_sensitivity_system(scenario, outcome.flows)
    t0 = outcome.t
    fixed: list[Key] = []
    rows: list[dict] = []
    for k in range(layout.steps):
        f, r = _closure(scenario, outcome, k, t0 + k)
        fixed += f
        rows += r
    slack = scenario.network.slack_bus
    targets = [("P", b, k) for k in range(layout.steps) for b in scenario.load_buses if b != slack]
    jac = action_jacobian(system, fixed, rows, targets=targets)
    if tuple(jac.action_keys) != layout.keys:
        raise SensitivityError("action layout does not match the sensitivity system")
    values = np.where(jac.consistent[None, :], jac.values, 0.0)
    g = np.zeros(layout.dim)
    for row, (_, b, k) in zip(values, targets):
        g -= gamma**k * scenario.loads[b].priority * row
    for b, p in scenario.mt.items():
        for k in range(layout.steps):
            g[layout.index(("P", b, k))] -= gamma**k * p.cost_coeff
    return g @ outcome.applied.jacobian


@dataclass
class ConstraintModel:
    """C(s, a) = A a + b, except bilinear rows where C = a_i a_j."""

    A: np.ndarray
    b: np.ndarray
    bilinear: list[tuple[int, int, int]]  # (row, i, j)
    labels: list[str]

    @property
    def size(self) -> int:
        return len(self.b)

    def evaluate(self, a: np.ndarray) -> np.ndarray:
        out = self.A @ a + self.b
        for r, i, j in self.bilinear:
            out[r] = a[i] * a[j]
        return out

    def jacobian(self, a: np.ndarray) -> np.ndarray:
        J = self.A.copy()
        for r, i, j in self.bilinear:
            J[r] = 0.0
            J[r, i] = a[j]
            J[r, j] = a[i]
        return J

    def expectation(self, mu: np.ndarray, cov: np.ndarray) -> np.ndarray:
        """E[C(s, a)] for a ~ N(mu, cov), exact."""
        out = self.evaluate(mu)
        for r, i, j in self.bilinear:
            out[r] += cov[i, j]
        return out


def constraint_model(scenario: Scenario, state: SystemState, layout: ActionLayout) -> ConstraintModel:
    """Ordered constraint entries g_m(s, a) <= 0 over the window.

    Per window step: for each MT the output bounds, the ramp pair, fuel
    sufficiency and the two reactive bounds; for each ESS the charge and
    discharge bounds, the complementarity product, the storage range after
    the step and the reactive bounds; for each RES the availability bounds
    and the reactive bounds.
    """
    d = layout.dim
    rows: list[np.ndarray] = []
    rhs: list[float] = []
    labels: list[str] = []
    bilinear: list[tuple[int, int, int]] = []
    dt = scenario.dt

    def add(coeffs: Mapping[int, float], const: float, label: str):
        row = np.zeros(d)
        for i, v in coeffs.items():
            row[i] += v
        rows.append(row)
        rhs.append(const)
        labels.append(label)

    for k in range(layout.steps):
        for b, p in scenario.mt.items():
            i, j = layout.index(("P", b, k)), layout.index(("Q", b, k))
            add({i: 1.0}, -p.p_max, f"mt_pmax[{b},{k}]")
            add({i: -1.0}, p.p_min, f"mt_pmin[{b},{k}]")
            if k == 0:
                prev, prev_c = {}, state.mt_power[b]
            else:
                prev, prev_c = {layout.index(("P", b, k - 1)): 1.0}, 0.0
            up = {i: 1.0, **{c: -v for c, v in prev.items()}}
            add(up, -prev_c - p.ramp_up_max, f"mt_ramp_up[{b},{k}]")
            add({c: -v for c, v in up.items()}, prev_c + p.ramp_down_min, f"mt_ramp_down[{b},{k}]")
            fuel = {layout.index(("P", b, j2)): p.tau for j2 in range(k + 1)}
            add(fuel, -state.fuel[b], f"mt_fuel[{b},{k}]")
            add({j: 1.0}, -p.q_max, f"mt_qmax[{b},{k}]")
            add({j: -1.0}, -p.q_max, f"mt_qmin[{b},{k}]")
        for b, p in scenario.ess.items():
            ic, idis, iq = layout.index(("ch", b, k)), layout.index(("dis", b, k)), layout.index(("Q", b, k))
            add({ic: 1.0}, -p.p_ch_max, f"ess_chmax[{b},{k}]")
            add({ic: -1.0}, 0.0, f"ess_chmin[{b},{k}]")
            add({idis: 1.0}, -p.p_dis_max, f"ess_dismax[{b},{k}]")
            add({idis: -1.0}, 0.0, f"ess_dismin[{b},{k}]")
            add({}, 0.0, f"ess_cc[{b},{k}]")
            bilinear.append((len(rows) - 1, ic, idis))
            soc = {}
            for j2 in range(k + 1):
                soc[layout.index(("ch", b, j2))] = p.eta_ch * dt
                soc[layout.index(("dis", b, j2))] = -dt / p.eta_dis
            add(soc, state.soc[b] - p.soc_max, f"ess_socmax[{b},{k}]")
            add({c: -v for c, v in soc.items()}, p.soc_min - state.soc[b], f"ess_socmin[{b},{k}]")
            add({iq: 1.0}, -p.q_max, f"ess_qmax[{b},{k}]")
            add({iq: -1.0}, -p.q_max, f"ess_qmin[{b},{k}]")
        for b, p in scenario.res.items():
            i, j = layout.index(("P", b, k)), layout.index(("Q", b, k))
            add({i: 1.0}, -float(state.res_window[b][k]), f"res_pmax[{b},{k}]")
            add({i: -1.0}, 0.0, f"res_pmin[{b},{k}]")
            add({j: 1.0}, -p.q_max, f"res_qmax[{b},{k}]")
            add({j: -1.0}, -p.q_max, f"res_qmin[{b},{k}]")
    return ConstraintModel(np.array(rows), np.array(rhs), bilinear, labels)


def constraints(scenario: Scenario, state: SystemState, layout: ActionLayout, action: np.ndarray) -> np.ndarray:
    return constraint_model(scenario, state, layout).evaluate(np.asarray(action, dtype=float))


# ---------------------------------------------------------------------------
# transition


@dataclass
class Transition:
    state: SystemState
    flow: FlowState
    outcome: WindowOutcome
    reward: float
    flags: list[str]


def draw_res(scenario: Scenario, rng: np.random.Generator) -> dict[int, float]:
    out = {}
    for b in scenario.res_buses:
        p = scenario.res[b]
        out[b] = max(float(rng.normal(p.forecast_mean, p.forecast_sd)), 0.0)
    return out


def advance(
    scenario: Scenario,
    state: SystemState,
    layout: ActionLayout,
    outcome: WindowOutcome,
    new_res: Mapping[int, float],
) -> tuple[SystemState, list[str]]:
    """Next state from the first window step of an evaluated action."""
    flags = []
    applied = outcome.applied
    if not outcome.pickups[0].feasible:
        flags.append("inner LP infeasible, zero pickup")
    for i in np.flatnonzero(applied.clipped[: layout.per_step()]):
        flags.append(f"clamped {layout.keys[i]}")
    soc = {b: float(applied.soc[1, n]) for n, b in enumerate(scenario.ess_buses)}
    fuel = {b: float(applied.fuel[1, n]) for n, b in enumerate(scenario.mt_buses)}
    mt = {b: float(applied.values[layout.index(("P", b, 0))]) for b in scenario.mt_buses}
    res = {b: np.append(state.res_window[b][1:], new_res[b]) for b in scenario.res_buses}
    nxt = SystemState(state.t + 1, soc, fuel, dict(outcome.pickups[0].rho), mt, res)
    return nxt, flags


def transition(
    scenario: Scenario,
    state: SystemState,
    action: np.ndarray,
    rng: np.random.Generator,
    layout: ActionLayout | None = None,
    gamma: float = 0.9,
) -> Transition:
    """Apply an action; deterministic given the generator state."""
    layout = layout or ActionLayout.for_scenario(scenario, state.lookahead)
    outcome = rollout_window(scenario, state, layout, action, flows=False)
    if outcome.flow is None:
        raise PowerFlowError("realised flow did not converge")
    nxt, flags = advance(scenario, state, layout, outcome, draw_res(scenario, rng))
    r = window_reward(scenario, layout, outcome, gamma)
    return Transition(nxt, outcome.flow, outcome, r, flags)


def step_record(scenario: Scenario, state: SystemState, layout: ActionLayout, tr: Transition) -> StepRecord:
    """Log entry of an applied step in the closed-loop log format."""
    net = scenario.network
    res = tr.outcome.pickups[0]
    applied = tr.outcome.applied.values
    dec: dict[str, float] = {}
    p_inj, q_inj = tr.flow.p_inj, tr.flow.q_inj
    for i, b in enumerate(net.bus_ids):
        dec[f"P[{b}]"] = float(p_inj[i])
        dec[f"Q[{b}]"] = float(q_inj[i])
    for e in range(net.n_line):
        dec[f"Pl[{e}]"] = float(tr.flow.p_line[e])
        dec[f"Ql[{e}]"] = float(tr.flow.q_line[e])
        dec[f"l[{e}]"] = float(tr.flow.l_line[e])
    for b in scenario.load_buses:
        dec[f"rho[{b}]"] = res.rho[b]
    for b in scenario.ess_buses:
        dec[f"ch[{b}]"] = float(applied[layout.index(("ch", b, 0))])
        dec[f"dis[{b}]"] = float(applied[layout.index(("dis", b, 0))])
    obj = sum(scenario.loads[b].priority * -dec[f"P[{b}]"] for b in scenario.load_buses)
    obj -= sum(p.cost_coeff * dec[f"P[{b}]"] for b, p in scenario.mt.items())
    v_plan = {b: float(tr.flow.v[i]) for i, b in enumerate(net.bus_ids)}
    if res.values:
        v_plan = {b: res.values[vname("v", b, 0)] for b in net.bus_ids}
    return StepRecord(state.t, dec, tr.flow, dict(state.soc), dict(state.fuel), float(obj), 0.0, v_plan)


class RestorationEnv:
    """Episode driver around :func:`transition`. Not thread safe."""

    def __init__(self, scenario: Scenario, gamma: float = 0.9, lookahead: int | None = None):
        self.scenario = scenario
        self.gamma = gamma
        self.layout = ActionLayout.for_scenario(scenario, lookahead)
        self.state: SystemState | None = None
        self.log: RestorationLog | None = None
        self.rng: np.random.Generator | None = None

    def reset(self, rng: np.random.Generator, perturb: float = 0.0) -> SystemState:
        """New episode. ``perturb`` scales initial storage and fuel by U(1 - p, 1 + p)."""
        sc = self.scenario
        self.rng = rng
        soc = {b: p.soc_init for b, p in sc.ess.items()}
        fuel = {b: p.fuel_init for b, p in sc.mt.items()}
        if perturb:
            for b, p in sc.ess.items():
                soc[b] = float(np.clip(soc[b] * rng.uniform(1 - perturb, 1 + perturb), p.soc_min, p.soc_max))
            for b in fuel:
                fuel[b] = fuel[b] * float(rng.uniform(1 - perturb, 1 + perturb))
        window = {b: np.array([v for v in draw_res_series(sc, rng, self.layout.steps)[b]]) for b in sc.res_buses}
        self.state = initial_state(sc, window, self.layout.steps - 1, soc, fuel)
        self.log = RestorationLog(sc)
        return self.state

    @property
    def done(self) -> bool:
        return self.state is not None and self.state.t > self.scenario.T

    def step(self, action: np.ndarray) -> Transition:
        if self.state is None or self.rng is None:
            raise RuntimeError("reset() must be called first")
        if self.done:
            raise RuntimeError("episode finished")
        tr = transition(self.scenario, self.state, action, self.rng, self.layout, self.gamma)
        self.log.steps.append(step_record(self.scenario, self.state, self.layout, tr))
        self.state = tr.state
        if self.done:
            self.log.final_soc = dict(self.state.soc)
            self.log.final_fuel = dict(self.state.fuel)
        return tr


def draw_res_series(scenario: Scenario, rng: np.random.Generator, n: int) -> dict[int, np.ndarray]:
    """``n`` successive RES draws per bus, drawn step by step in bus order."""
    out = {b: np.zeros(n) for b in scenario.res_buses}
    for k in range(n):
        for b, v in draw_res(scenario, rng).items():
            out[b][k] = v
    return out


def trace_csv(log: RestorationLog, rewards: list[float], path=None) -> str:
    """Closed-loop log rows plus the per-step window reward, long format."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "quantity", "value"])
    for t, q, v in log.rows():
        w.writerow([t, q, repr(float(v))])
    for t, r in enumerate(rewards, start=1):
        w.writerow([t, "reward", repr(float(r))])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text
