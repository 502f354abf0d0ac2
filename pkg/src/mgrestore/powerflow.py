"""DistFlow power flow on radial networks and its linear sensitivity system.

The branch-flow equations solved here, for every bus j and line (i, j)::

    p_j = sum_{j->k} P_jk - (P_ij - r_ij l_ij)          (active balance)
    q_j = sum_{j->k} Q_jk - (Q_ij - x_ij l_ij)          (reactive balance)
    v_j = v_i - 2 (r_ij P_ij + x_ij Q_ij) + (r^2 + x^2) l_ij
    l_ij v_i = P_ij^2 + Q_ij^2

Injections are positive into the network. The slack bus has v = 1 and its
injection is whatever closes the balance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .netmodel import Network, Scenario

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200


class PowerFlowError(RuntimeError):
    """Non-convergence or voltage collapse in the sweep solver."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class SensitivityError(RuntimeError):
    """Differential system is missing data or cannot be satisfied."""


@dataclass(frozen=True)
class InjectionSet:
    """Net bus injections for every non-slack bus (MW / MVAr)."""

    p: Mapping[int, float]
    q: Mapping[int, float]

    def arrays(self, network: Network) -> tuple[np.ndarray, np.ndarray]:
        missing = [
            b for b in network.bus_ids if b != network.slack_bus and (b not in self.p or b not in self.q)
        ]
        if missing:
            raise ValueError(f"injections missing for buses {missing}")
        p = np.zeros(network.n_bus)
        q = np.zeros(network.n_bus)
        for b, i in network.index.items():
            if b == network.slack_bus:
                continue
            p[i] = self.p[b]
            q[i] = self.q[b]
        return p, q


@dataclass
class FlowState:
    """Solved DistFlow quantities, indexed in network bus / line order.

    ``p_inj`` and ``q_inj`` hold the net injection of every bus, including the
    balancing injection the slack bus ends up supplying.
    """

    v: np.ndarray
    p_line: np.ndarray
    q_line: np.ndarray
    l_line: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    iterations: int = 0

    @classmethod
    def flat(cls, network: Network) -> "FlowState":
        nb, nl = network.n_bus, network.n_line
        return cls(np.ones(nb), np.zeros(nl), np.zeros(nl), np.zeros(nl), np.zeros(nb), np.zeros(nb))

    def copy(self) -> "FlowState":
        return FlowState(
            self.v.copy(),
            self.p_line.copy(),
            self.q_line.copy(),
            self.l_line.copy(),
            self.p_inj.copy(),
            self.q_inj.copy(),
            self.iterations,
        )

    def voltage(self, network: Network, bus: int) -> float:
        return float(self.v[network.index[bus]])


def _as_arrays(network: Network, injections) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(injections, InjectionSet):
        return injections.arrays(network)
    p, q = injections
    return np.asarray(p, dtype=float), np.asarray(q, dtype=float)


def solve_distflow(
    network: Network,
    injections: InjectionSet | tuple[np.ndarray, np.ndarray],
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> FlowState:
    """Backward/forward sweep from a flat start.

    ``injections`` is an InjectionSet or a pair of arrays in bus order (the
    slack entries are ignored). Raises PowerFlowError on voltage collapse or
    when the residual is still above ``tol`` after ``max_iter`` sweeps.
    """
    p, q = _as_arrays(network, injections)
    nb, nl = network.n_bus, network.n_line
    r, x = network.r, network.x
    z2 = r * r + x * x
    frm, to = network.line_from, network.line_to
    order = network.line_order
    children = network.child_lines
    s = network.slack_index

    v = np.ones(nb)
    P = np.zeros(nl)
    Q = np.zeros(nl)
    l = np.zeros(nl)
    it = 0
    for it in range(1, max_iter + 1):
        P_old, Q_old, v_old = P.copy(), Q.copy(), v.copy()
        for e in reversed(order):
            j = to[e]
            P[e] = -p[j] + r[e] * l[e] + sum(P[c] for c in children[j])
            Q[e] = -q[j] + x[e] * l[e] + sum(Q[c] for c in children[j])
        v[s] = 1.0
        for e in order:
            i, j = frm[e], to[e]
            v[j] = v[i] - 2.0 * (r[e] * P[e] + x[e] * Q[e]) + z2[e] * l[e]
            if not v[j] > 0:
                raise PowerFlowError(f"voltage collapse at bus {network.buses[j].id}")
        l = (P * P + Q * Q) / v[frm]
        change = max(
            np.max(np.abs(P - P_old), initial=0.0),
            np.max(np.abs(Q - Q_old), initial=0.0),
            np.max(np.abs(v - v_old), initial=0.0),
        )
        if change < 1e-14:
            break
    # one more backward pass makes the balance equations exact for the final l
    for e in reversed(order):
        j = to[e]
        P[e] = -p[j] + r[e] * l[e] + sum(P[c] for c in children[j])
        Q[e] = -q[j] + x[e] * l[e] + sum(Q[c] for c in children[j])
    p_inj = p.copy()
    q_inj = q.copy()
    p_inj[s] = sum(P[c] for c in children[s])
    q_inj[s] = sum(Q[c] for c in children[s])
    flow = FlowState(v, P, Q, l, p_inj, q_inj, it)
    res = residual(network, flow, (p, q))
    if res > tol:
        raise PowerFlowError(f"DistFlow sweep did not converge (residual {res:.3e})", res)
    return flow


def residuals(network: Network, flow: FlowState, injections) -> dict[str, np.ndarray]:
    """Per-equation residuals of the four DistFlow equation families."""
    p, q = _as_arrays(network, injections)
    p = p.copy()
    q = q.copy()
    s = network.slack_index
    p[s] = flow.p_inj[s]
    q[s] = flow.q_inj[s]
    frm, to = network.line_from, network.line_to
    r, x = network.r, network.x
    out_p = np.zeros(network.n_bus)
    out_q = np.zeros(network.n_bus)
    np.add.at(out_p, frm, flow.p_line)
    np.add.at(out_q, frm, flow.q_line)
    np.add.at(out_p, to, -(flow.p_line - r * flow.l_line))
    np.add.at(out_q, to, -(flow.q_line - x * flow.l_line))
    v = flow.v
    drop = v[to] - v[frm] + 2 * (r * flow.p_line + x * flow.q_line) - (r * r + x * x) * flow.l_line
    cur = flow.l_line * v[frm] - flow.p_line**2 - flow.q_line**2
    return {"p_balance": p - out_p, "q_balance": q - out_q, "voltage": drop, "current": cur}


def residual(network: Network, flow: FlowState, injections) -> float:
    """Largest absolute DistFlow residual over all equations."""
    return max(float(np.max(np.abs(a), initial=0.0)) for a in residuals(network, flow, injections).values())


# ---------------------------------------------------------------------------
# sensitivity system


Key = tuple  # (quantity, element, window step)


@dataclass
class SensitivitySystem:
    """Homogeneous linear system in the differentials of the window variables.

    Columns are keyed by ``(quantity, element, step)`` where quantity is one of
    ``Pl, Ql, l`` (line, element = line index), ``P, Q, v`` (bus id),
    ``ch, dis, S`` (ESS bus) or ``fuel`` (MT bus); ``step`` counts window
    steps from 0. Rows are the linearised balance, voltage, current, ESS
    injection, state-of-charge and fuel relations.
    """

    matrix: np.ndarray
    columns: dict[Key, int]
    keys: list[Key]
    row_labels: list[tuple]
    fixed: frozenset[int]
    action_keys: list[Key]
    load_keys: list[Key]
    n_steps: int
    slack_bus: int

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_cols(self) -> int:
        return self.matrix.shape[1]

    def free_columns(self) -> int:
        """Columns allowed to move when a single action differential is nonzero."""
        return self.n_cols - len(self.fixed) - (len(self.action_keys) - 1)

    def surplus(self) -> int:
        return self.free_columns() - self.n_rows


def action_keys_for(scenario: Scenario, n_steps: int) -> list[Key]:
    """Action differentials in the flattening order of the policy output."""
    keys: list[Key] = []
    for k in range(n_steps):
        for b in scenario.res_buses:
            keys += [("P", b, k), ("Q", b, k)]
        for b in scenario.mt_buses:
            keys += [("P", b, k), ("Q", b, k)]
        for b in scenario.ess_buses:
            keys += [("ch", b, k), ("dis", b, k), ("Q", b, k)]
    return keys


def build_sensitivity_system(
    scenario: Scenario, flows: Sequence[FlowState | None], lookahead: int | None = None
) -> SensitivitySystem:
    """Linearise DistFlow, ESS injection, SoC and fuel relations over a window.

    ``flows`` holds the solved flow of every window step (the linearisation
    point). ``lookahead`` defaults to ``len(flows)`` and is the number of
    window steps covered.
    """
    n = len(flows) if lookahead is None else lookahead
    if len(flows) < n or any(f is None for f in flows[:n]):
        missing = [k for k in range(n) if k >= len(flows) or flows[k] is None]
        raise SensitivityError(f"flow state missing for window steps {missing}")
    net = scenario.network
    bus_ids = net.bus_ids
    E = net.n_line

    keys: list[Key] = []
    for k in range(n):
        for e in range(E):
            keys += [("Pl", e, k), ("Ql", e, k), ("l", e, k)]
        for b in bus_ids:
            keys += [("P", b, k), ("Q", b, k), ("v", b, k)]
        for b in scenario.ess_buses:
            keys += [("ch", b, k), ("dis", b, k), ("S", b, k)]
        for b in scenario.mt_buses:
            keys.append(("fuel", b, k))
    col = {key: i for i, key in enumerate(keys)}

    rows: list[dict[int, float]] = []
    labels: list[tuple] = []
    r, x = net.r, net.x
    for k in range(n):
        f = flows[k]
        for j, b in enumerate(bus_ids):
            for qty, line_qty, imp in (("P", "Pl", r), ("Q", "Ql", x)):
                row = {col[(qty, b, k)]: 1.0}
                for e in net.child_lines[j]:
                    row[col[(line_qty, e, k)]] = row.get(col[(line_qty, e, k)], 0.0) - 1.0
                e_in = net.incoming_line[j]
                if e_in >= 0:
                    row[col[(line_qty, e_in, k)]] = 1.0
                    row[col[("l", e_in, k)]] = -imp[e_in]
                rows.append(row)
                labels.append(("balance_" + qty, b, k))
        for e in range(E):
            i, j = net.line_from[e], net.line_to[e]
            bi, bj = bus_ids[i], bus_ids[j]
            rows.append(
                {
                    col[("v", bj, k)]: 1.0,
                    col[("v", bi, k)]: -1.0,
                    col[("Pl", e, k)]: 2 * r[e],
                    col[("Ql", e, k)]: 2 * x[e],
                    col[("l", e, k)]: -(r[e] ** 2 + x[e] ** 2),
                }
            )
            labels.append(("voltage", e, k))
            # d(l v_i) = v_i dl + l dv_i
            rows.append(
                {
                    col[("l", e, k)]: f.v[i],
                    col[("v", bi, k)]: f.l_line[e],
                    col[("Pl", e, k)]: -2 * f.p_line[e],
                    col[("Ql", e, k)]: -2 * f.q_line[e],
                }
            )
            labels.append(("current", e, k))
        for b in scenario.ess_buses:
            rows.append({col[("P", b, k)]: 1.0, col[("dis", b, k)]: -1.0, col[("ch", b, k)]: 1.0})
            labels.append(("ess_injection", b, k))
    for k in range(n - 1):
        for b in scenario.ess_buses:
            p = scenario.ess[b]
            rows.append(
                {
                    col[("S", b, k + 1)]: 1.0,
                    col[("S", b, k)]: -1.0,
                    col[("ch", b, k)]: -p.eta_ch * scenario.dt,
                    col[("dis", b, k)]: scenario.dt / p.eta_dis,
                }
            )
            labels.append(("soc", b, k))
        for b in scenario.mt_buses:
            rows.append(
                {
                    col[("fuel", b, k + 1)]: 1.0,
                    col[("fuel", b, k)]: -1.0,
                    col[("P", b, k)]: scenario.mt[b].tau,
                }
            )
            labels.append(("fuel", b, k))

    A = np.zeros((len(rows), len(keys)))
    for i, row in enumerate(rows):
        for c, val in row.items():
            A[i, c] = val
    fixed = frozenset(col[(q, b, 0)] for b in scenario.ess_buses for q in ("S",)) | frozenset(
        col[("fuel", b, 0)] for b in scenario.mt_buses
    )
    load_keys = [("P", b, k) for k in range(n) for b in scenario.load_buses]
    return SensitivitySystem(
        matrix=A,
        columns=col,
        keys=keys,
        row_labels=labels,
        fixed=fixed,
        action_keys=action_keys_for(scenario, n),
        load_keys=load_keys,
        n_steps=n,
        slack_bus=net.slack_bus,
    )


@dataclass
class ActionJacobian:
    """Derivatives of the load injections with respect to every action variable."""

    values: np.ndarray  # (len(load_keys), len(action_keys))
    consistent: np.ndarray  # bool per action
    residual: np.ndarray  # least-squares residual norm per action
    load_keys: list[Key] = field(default_factory=list)
    action_keys: list[Key] = field(default_factory=list)


def action_jacobian(
    system: SensitivitySystem,
    fixed: Iterable[Key] = (),
    extra_rows: Iterable[Mapping[Key, float]] = (),
    fix_slack_voltage: bool = True,
    targets: Sequence[Key] | None = None,
    rtol: float = 1e-8,
) -> ActionJacobian:
    """Solve the differential system once per action variable.

    For each action variable its differential is set to 1, every other action
    differential to 0, and the remaining free differentials are found as the
    minimum-norm least-squares solution. ``fixed`` pins further differentials
    to zero, ``extra_rows`` adds homogeneous closure relations and
    ``fix_slack_voltage`` keeps the slack reference voltage constant.
    Columns whose system cannot be satisfied are flagged in ``consistent``.
    """
    col = system.columns
    targets = list(system.load_keys if targets is None else targets)
    act_cols = [col[k] for k in system.action_keys]
    zero = set(system.fixed) | set(act_cols)
    zero |= {col[k] for k in fixed if k in col}
    if fix_slack_voltage:
        zero |= {col[("v", system.slack_bus, k)] for k in range(system.n_steps)}
    free = [c for c in range(system.n_cols) if c not in zero]
    pos = {c: i for i, c in enumerate(free)}

    M = system.matrix
    extra = list(extra_rows)
    if extra:
        E = np.zeros((len(extra), system.n_cols))
        for i, row in enumerate(extra):
            for k, val in row.items():
                E[i, col[k]] += val
        M = np.vstack([M, E])
    A_free = M[:, free]
    rhs = -M[:, act_cols]
    sol, *_ = np.linalg.lstsq(A_free, rhs, rcond=None)
    res = np.linalg.norm(A_free @ sol - rhs, axis=0)
    scale = np.maximum(1.0, np.linalg.norm(rhs, axis=0))
    consistent = res <= rtol * scale

    out = np.zeros((len(targets), len(act_cols)))
    act_pos = {k: a for a, k in enumerate(system.action_keys)}
    for t_i, key in enumerate(targets):
        if key in act_pos:
            out[t_i, act_pos[key]] = 1.0
            continue
        c = col[key]
        if c in pos:
            out[t_i] = sol[pos[c]]
    return ActionJacobian(out, consistent, res, targets, list(system.action_keys))


def partial_load_wrt_action(
    system: SensitivitySystem,
    load_var: tuple[int, int],
    action_var: Key,
    fixed: Iterable[Key] = (),
    extra_rows: Iterable[Mapping[Key, float]] = (),
    fix_slack_voltage: bool = True,
) -> float:
    """d P_{bus,step} / d action_var from the differential system.

    ``load_var`` is ``(bus, step)``. If the bus injection is itself the action
    variable the derivative is 1; other action variables give 0.
    """
    bus, step = load_var
    key = ("P", bus, step)
    if action_var not in system.columns or action_var not in system.action_keys:
        raise SensitivityError(f"{action_var} is not an action variable")
    if key in system.action_keys:
        return 1.0 if key == action_var else 0.0
    sub = SensitivitySystem(
        system.matrix,
        system.columns,
        system.keys,
        system.row_labels,
        system.fixed,
        system.action_keys,
        system.load_keys,
        system.n_steps,
        system.slack_bus,
    )
    jac = action_jacobian(sub, fixed, extra_rows, fix_slack_voltage, targets=[key])
    a = system.action_keys.index(action_var)
    if not jac.consistent[a]:
        raise SensitivityError(
            f"normalising d{action_var} = 1 leaves the system inconsistent "
            f"(residual {jac.residual[a]:.3e}); the action cannot move independently"
        )
    return float(jac.values[0, a])


def homogeneous_solution_ok(system: SensitivitySystem) -> bool:
    """The all-zero differential vector satisfies the unnormalised system."""
    return bool(np.allclose(system.matrix @ np.zeros(system.n_cols), 0.0))
