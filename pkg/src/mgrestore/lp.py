"""Bounded-variable linear programs and a dense revised simplex solver.

Problems are stated as maximisation::

    max  c^T x
    s.t. a_i^T x  (<= | = | >=)  b_i
         lo <= x <= up            (either bound may be infinite)

Each row gets a logical (slack) column so that ``A x + s = b`` with the
slack bounds encoding the relation. Phase 1 adds artificial columns for
rows whose slack cannot absorb the starting residual and drives their sum
to zero. Pricing is Dantzig (largest reduced cost, lowest index on ties);
after a run of degenerate pivots the solver switches to Bland's rule for
good, which guarantees termination.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.linalg.blas import dger as _dger

PIVOT_TOL = 1e-10
FEAS_TOL = 1e-9
OPT_TOL = 1e-9
REFACTOR_EVERY = 100
DEGENERATE_STREAK = 25
INF = math.inf


class LpError(ValueError):
    """Malformed problem (undeclared variable, inverted bounds, bad relation)."""


class LpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITERATION_LIMIT = "IterationLimit"


_RELATIONS = ("<=", "=", ">=")


@dataclass
class LpProblem:
    """Variables, a maximisation objective and linear rows."""

    names: list[str] = field(default_factory=list)
    lower: list[float] = field(default_factory=list)
    upper: list[float] = field(default_factory=list)
    objective: dict[int, float] = field(default_factory=dict)
    rows: list[tuple[dict[int, float], str, float]] = field(default_factory=list)
    row_names: list[str] = field(default_factory=list)
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    @property
    def n_vars(self) -> int:
        return len(self.names)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def add_var(self, name: str, lower: float = 0.0, upper: float = INF, obj: float = 0.0) -> int:
        if name in self._index:
            raise LpError(f"variable {name!r} declared twice")
        if lower > upper:
            raise LpError(f"variable {name!r} has lower bound {lower} above upper bound {upper}")
        j = len(self.names)
        self.names.append(name)
        self.lower.append(float(lower))
        self.upper.append(float(upper))
        self._index[name] = j
        if obj:
            self.objective[j] = float(obj)
        return j

    def var(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise LpError(f"undeclared variable {name!r}") from None

    def _resolve(self, coeffs: Mapping) -> dict[int, float]:
        out: dict[int, float] = {}
        for k, v in coeffs.items():
            j = self.var(k) if isinstance(k, str) else int(k)
            if not 0 <= j < self.n_vars:
                raise LpError(f"undeclared variable index {j}")
            out[j] = out.get(j, 0.0) + float(v)
        return out

    def set_objective(self, coeffs: Mapping) -> None:
        self.objective = self._resolve(coeffs)

    def add_objective(self, coeffs: Mapping) -> None:
        for j, v in self._resolve(coeffs).items():
            self.objective[j] = self.objective.get(j, 0.0) + v

    def add_row(self, coeffs: Mapping, relation: str, rhs: float, name: str = "") -> int:
        if relation not in _RELATIONS:
            raise LpError(f"unknown relation {relation!r}")
        self.rows.append((self._resolve(coeffs), relation, float(rhs)))
        self.row_names.append(name or f"r{len(self.rows) - 1}")
        return len(self.rows) - 1

    def add_coeff(self, row: int, name_or_index, value: float) -> None:
        """Add ``value`` to the coefficient of a variable in an existing row."""
        j = self.var(name_or_index) if isinstance(name_or_index, str) else int(name_or_index)
        coeffs = self.rows[row][0]
        coeffs[j] = coeffs.get(j, 0.0) + float(value)

    def row_index(self, name: str) -> int:
        try:
            return self.row_names.index(name)
        except ValueError:
            raise LpError(f"no row named {name!r}") from None

    def set_bounds(self, name_or_index, lower: float, upper: float) -> None:
        j = self.var(name_or_index) if isinstance(name_or_index, str) else int(name_or_index)
        if lower > upper:
            raise LpError(f"variable {self.names[j]!r} has lower bound {lower} above upper bound {upper}")
        self.lower[j] = float(lower)
        self.upper[j] = float(upper)

    def dense(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[str], np.ndarray, np.ndarray]:
        """(A, b, c, relations, lower, upper) as arrays."""
        A = np.zeros((self.n_rows, self.n_vars))
        b = np.zeros(self.n_rows)
        rel = []
        for i, (coeffs, r, rhs) in enumerate(self.rows):
            for j, v in coeffs.items():
                A[i, j] = v
            b[i] = rhs
            rel.append(r)
        c = np.zeros(self.n_vars)
        for j, v in self.objective.items():
            c[j] = v
        return A, b, c, rel, np.array(self.lower, dtype=float), np.array(self.upper, dtype=float)

    def check(self) -> None:
        for j, (lo, up) in enumerate(zip(self.lower, self.upper)):
            if lo > up:
                raise LpError(f"variable {self.names[j]!r} has inverted bounds")
            if lo == INF or up == -INF:
                raise LpError(f"variable {self.names[j]!r} has an empty bound range")


@dataclass
class LpSolution:
    status: LpStatus
    x: np.ndarray
    objective_value: float
    duals: np.ndarray  # one multiplier per row (zero unless Optimal)
    iterations: int = 0
    names: list[str] = field(default_factory=list, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL

    @property
    def values(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.x)}

    def __getitem__(self, name: str) -> float:
        return float(self.x[self.names.index(name)])


# ---------------------------------------------------------------------------
# simplex core


class _Simplex:
    """Bounded revised simplex on ``[A | I | E] x = b``, ``lo <= x <= up``, maximising ``c x``.

    Columns ``0..n-1`` are structural (``A``), ``n..n+m-1`` are the row
    slacks (unit columns) and the remaining ones are phase-1 artificials,
    each a signed unit column on its row. Logical columns are never stored.
    """

    def __init__(self, A, b, lo, up, basis, x, art_rows, art_sign, max_iter):
        self.A = A
        self.b = b
        self.lo = lo
        self.up = up
        self.m, self.n_struct = A.shape
        self.art_rows = np.asarray(art_rows, dtype=int)
        self.art_sign = np.asarray(art_sign, dtype=float)
        self.n = self.n_struct + self.m + len(self.art_rows)
        self.logical_row = np.concatenate([np.arange(self.m), self.art_rows]).astype(int)
        self.logical_sign = np.concatenate([np.ones(self.m), self.art_sign])
        self.basis = np.array(basis, dtype=int)
        self.is_basic = np.zeros(self.n, dtype=bool)
        self.is_basic[self.basis] = True
        self.x = x
        self.max_iter = max_iter
        self.iterations = 0
        self.bland = False
        self.degenerate = 0
        self.refactor()

    def column(self, j: int) -> np.ndarray:
        n, m = self.n_struct, self.m
        if j < n:
            return self.A[:, j]
        col = np.zeros(m)
        if j < n + m:
            col[j - n] = 1.0
        else:
            a = j - n - m
            col[self.art_rows[a]] = self.art_sign[a]
        return col

    def times(self, v: np.ndarray) -> np.ndarray:
        """Full constraint matrix times a full-length vector."""
        n, m = self.n_struct, self.m
        out = self.A @ v[:n] + v[n : n + m]
        if len(self.art_rows):
            np.add.at(out, self.art_rows, self.art_sign * v[n + m :])
        return out

    def price(self, y: np.ndarray) -> np.ndarray:
        """``y^T`` times the full constraint matrix."""
        parts = [y @ self.A, y]
        if len(self.art_rows):
            parts.append(self.art_sign * y[self.art_rows])
        return np.concatenate(parts)

    def refactor(self):
        """Rebuild ``B^-1`` from the kernel of structural basic columns.

        Basic logical columns are signed unit vectors, so after ordering the
        rows the basis is block lower-triangular and only the square block of
        structural columns on the rows without a basic logical needs inverting.
        """
        n, m = self.n_struct, self.m
        logical = self.basis >= n
        pos_s = np.flatnonzero(logical)
        pos_k = np.flatnonzero(~logical)
        cols_s = self.basis[pos_s]
        rows_s = self.logical_row[cols_s - n]
        sign_s = self.logical_sign[cols_s - n]
        free_rows = np.ones(m, dtype=bool)
        free_rows[rows_s] = False
        rows_r = np.flatnonzero(free_rows)
        if len(rows_r) != len(pos_k):
            raise np.linalg.LinAlgError("singular basis")
        Binv = np.zeros((m, m), order="F")
        if len(pos_k):
            Ak = self.A[:, self.basis[pos_k]]
            inv_k = np.linalg.inv(Ak[rows_r])
            Binv[np.ix_(pos_k, rows_r)] = inv_k
            Binv[np.ix_(pos_s, rows_r)] = -sign_s[:, None] * (Ak[rows_s] @ inv_k)
        Binv[pos_s, rows_s] = sign_s
        self.Binv = Binv
        xn = np.where(self.is_basic, 0.0, self.x)
        self.x[self.basis] = self.Binv @ (self.b - self.times(xn))
        self.since_refactor = 0

    def duals(self, c):
        return c[self.basis] @ self.Binv

    def run(self, c) -> LpStatus:
        lo, up = self.lo, self.up
        movable = lo < up
        while True:
            if self.iterations >= self.max_iter:
                return LpStatus.ITERATION_LIMIT
            y = self.duals(c)
            d = c - self.price(y)
            d[self.is_basic] = 0.0
            d[~movable] = 0.0
            at_lo = self.x <= lo + FEAS_TOL
            at_up = self.x >= up - FEAS_TOL
            can_up = (d > OPT_TOL) & ~at_up
            can_down = (d < -OPT_TOL) & ~at_lo
            cand = np.flatnonzero(can_up | can_down)
            if cand.size == 0:
                return LpStatus.OPTIMAL
            if self.bland:
                j = int(cand[0])
            else:
                j = int(cand[np.argmax(np.abs(d[cand]))])  # argmax returns the lowest index on ties
            direction = 1.0 if d[j] > 0 else -1.0
            alpha = self.Binv @ self.column(j)
            delta = -direction * alpha  # change of x_B per unit step

            theta = up[j] - lo[j]
            leave = -1
            xb = self.x[self.basis]
            lob = lo[self.basis]
            upb = up[self.basis]
            dec = delta < -PIVOT_TOL
            inc = delta > PIVOT_TOL
            ratios = np.full(self.m, INF)
            ratios[dec] = (xb[dec] - lob[dec]) / -delta[dec]
            ratios[inc] = (upb[inc] - xb[inc]) / delta[inc]
            np.maximum(ratios, 0.0, out=ratios)
            if self.m:
                rmin = ratios.min()
                if rmin < theta:  # on a tie the bound flip wins and the basis is kept
                    ties = np.flatnonzero(ratios <= rmin + 1e-12 * max(1.0, rmin))
                    if self.bland:
                        leave = int(ties[np.argmin(self.basis[ties])])
                    else:
                        # prefer the largest pivot among ties for stability
                        leave = int(ties[np.argmax(np.abs(alpha[ties]))])
                    theta = ratios[leave]
            if theta == INF:
                return LpStatus.UNBOUNDED

            self.iterations += 1
            if theta <= FEAS_TOL:
                self.degenerate += 1
                if self.degenerate >= DEGENERATE_STREAK:
                    self.bland = True
            else:
                self.degenerate = 0

            self.x[self.basis] = xb + theta * delta
            self.x[j] += direction * theta
            if leave < 0:
                # bound flip, basis unchanged
                self.x[j] = up[j] if direction > 0 else lo[j]
                continue
            out = self.basis[leave]
            self.x[out] = lob[leave] if delta[leave] < 0 else upb[leave]
            self.basis[leave] = j
            self.is_basic[out] = False
            self.is_basic[j] = True
            row = self.Binv[leave] / alpha[leave]
            alpha[leave] -= 1.0  # so the rank-one update below leaves ``row`` in place of the pivot row
            self.Binv = _rank_one_update(self.Binv, alpha, row)
            self.since_refactor += 1
            if self.since_refactor >= REFACTOR_EVERY:
                self.refactor()


def _rank_one_update(M: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``M - u v^T`` in place (BLAS ger on a Fortran-ordered array)."""
    return _dger(-1.0, u, v, a=M, overwrite_a=True)


def _start_value(lo: float, up: float) -> float:
    if math.isfinite(lo):
        return lo
    if math.isfinite(up):
        return up
    return 0.0


def solve_lp(problem: LpProblem, max_iter: int = 50_000) -> LpSolution:
    """Solve ``problem``; deterministic for identical input."""
    problem.check()
    A0, b, c0, rel, lo0, up0 = problem.dense()
    m, n = A0.shape
    empty_duals = np.zeros(m)

    # logical columns: A x + s = b
    s_lo = np.array([0.0 if r == "<=" else (-INF if r == ">=" else 0.0) for r in rel])
    s_up = np.array([INF if r == "<=" else 0.0 for r in rel])
    x0 = np.array([_start_value(l, u) for l, u in zip(lo0, up0)])
    resid = b - A0 @ x0 if m else np.zeros(0)

    art_rows = []
    s_val = np.zeros(m)
    for i in range(m):
        if s_lo[i] - FEAS_TOL <= resid[i] <= s_up[i] + FEAS_TOL:
            s_val[i] = min(max(resid[i], s_lo[i]), s_up[i])
        else:
            s_val[i] = 0.0
            art_rows.append(i)
    k = len(art_rows)
    lo = np.concatenate([lo0, s_lo, np.zeros(k)])
    up = np.concatenate([up0, s_up, np.full(k, INF)])
    x = np.concatenate([x0, s_val, np.zeros(k)])
    art_sign = np.array([1.0 if resid[i] >= 0 else -1.0 for i in art_rows])
    for a, i in enumerate(art_rows):
        x[n + m + a] = abs(resid[i])
    # basis position i holds the column that is basic in row i
    row_basis = np.arange(n, n + m)
    for a, i in enumerate(art_rows):
        row_basis[i] = n + m + a

    names = list(problem.names)
    if m == 0:
        # bounds only
        x = x0.copy()
        for j in range(n):
            if c0[j] > 0:
                x[j] = up0[j]
            elif c0[j] < 0:
                x[j] = lo0[j]
        if not np.all(np.isfinite(x)):
            return LpSolution(LpStatus.UNBOUNDED, x, INF, empty_duals, 0, names)
        return LpSolution(LpStatus.OPTIMAL, x, float(c0 @ x), empty_duals, 0, names)

    simplex = _Simplex(A0, b, lo, up, row_basis, x, art_rows, art_sign, max_iter)
    if k:
        c1 = np.zeros(simplex.n)
        c1[n + m :] = -1.0
        status = simplex.run(c1)
        if status is LpStatus.ITERATION_LIMIT:
            return LpSolution(status, simplex.x[:n].copy(), float("nan"), empty_duals, simplex.iterations, names)
        infeas = float(np.sum(simplex.x[n + m :]))
        if infeas > FEAS_TOL * max(1.0, float(np.max(np.abs(b)))):
            xs = simplex.x[:n].copy()
            return LpSolution(LpStatus.INFEASIBLE, xs, float("nan"), empty_duals, simplex.iterations, names)
        # artificials may stay basic at zero but can never move again
        simplex.up[n + m :] = 0.0
        simplex.x[n + m :] = np.clip(simplex.x[n + m :], 0.0, 0.0)
        simplex.refactor()
    c = np.zeros(simplex.n)
    c[:n] = c0
    status = simplex.run(c)
    xs = simplex.x[:n].copy()
    if status is not LpStatus.OPTIMAL:
        value = INF if status is LpStatus.UNBOUNDED else float("nan")
        return LpSolution(status, xs, value, empty_duals, simplex.iterations, names)
    return LpSolution(status, xs, float(c0 @ xs), simplex.duals(c), simplex.iterations, names)


# ---------------------------------------------------------------------------
# certificates


def max_violation(problem: LpProblem, x: np.ndarray) -> tuple[float, float]:
    """(largest row violation, largest bound violation) of ``x``, computed from the problem data."""
    A, b, _, rel, lo, up = problem.dense()
    ax = A @ x
    row = 0.0
    for i, r in enumerate(rel):
        if r == "<=":
            row = max(row, ax[i] - b[i])
        elif r == ">=":
            row = max(row, b[i] - ax[i])
        else:
            row = max(row, abs(ax[i] - b[i]))
    bound = float(np.max(np.concatenate([lo - x, x - up, [0.0]])))
    return float(row), bound


def dual_bound(problem: LpProblem, y: np.ndarray) -> float:
    """Upper bound on the optimum implied by row multipliers ``y`` (weak duality).

    Returns +inf when ``y`` has the wrong sign for some row or leaves an
    unbounded direction in the box.
    """
    A, b, c, rel, lo, up = problem.dense()
    for yi, r in zip(y, rel):
        if r == "<=" and yi < -OPT_TOL:
            return INF
        if r == ">=" and yi > OPT_TOL:
            return INF
    d = c - y @ A
    total = float(y @ b)
    for dj, l, u in zip(d, lo, up):
        if dj > OPT_TOL:
            if not math.isfinite(u):
                return INF
            total += dj * u
        elif dj < -OPT_TOL:
            if not math.isfinite(l):
                return INF
            total += dj * l
        elif math.isfinite(u) and math.isfinite(l):
            total += max(dj * u, dj * l)
    return total


# ---------------------------------------------------------------------------
# interchange dump


_BAD = re.compile(r"[^A-Za-z0-9_.]")


def _lp_name(name: str) -> str:
    s = _BAD.sub("_", name)
    return s if s and not s[0].isdigit() and s[0] != "." else "v" + s


def _terms(coeffs: Mapping[int, float], names: list[str]) -> str:
    parts = [f"{'-' if coeffs[j] < 0 else '+'} {abs(coeffs[j]):.17g} {names[j]}" for j in sorted(coeffs) if coeffs[j]]
    if not parts:
        return f"0 {names[0]}" if names else "0"
    text = " ".join(parts)
    return text[2:] if text.startswith("+ ") else text


def to_lp_format(problem: LpProblem) -> str:
    """CPLEX LP text of the problem, for cross-checking with external solvers."""
    names = [_lp_name(n) for n in problem.names]
    lines = ["\\ generated by mgrestore.lp", "Maximize", " obj: " + _terms(problem.objective, names), "Subject To"]
    for (coeffs, rel, rhs), rname in zip(problem.rows, problem.row_names):
        lines.append(f" {_lp_name(rname)}: {_terms(coeffs, names)} {rel} {rhs:.17g}")
    lines.append("Bounds")
    for nm, lo, up in zip(names, problem.lower, problem.upper):
        if lo == -INF and up == INF:
            lines.append(f" {nm} free")
        else:
            lo_s = "-inf" if lo == -INF else f"{lo:.17g}"
            up_s = "+inf" if up == INF else f"{up:.17g}"
            lines.append(f" {lo_s} <= {nm} <= {up_s}")
    lines.append("End")
    return "\n".join(lines) + "\n"


def dump_lp(problem: LpProblem, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_lp_format(problem))
