"""Convex stand-ins for the two nonconvex pieces of the restoration model.

The quadratic current relation ``l v = P^2 + Q^2`` is replaced by a set of
tangent cuts ``l >= h_c(P) + h_c'(Q)``, and the charge/discharge
complementarity of an ESS is replaced by the triangle spanned by
``(0, 0)``, ``(p_ch_max, 0)`` and ``(0, p_dis_max)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

HULL_TOL = 1e-12


@dataclass(frozen=True)
class PolygonApprox:
    """Tangent lines ``y = gamma * f + psi`` under ``y = f^2`` on ``[-range_bound, range_bound]``."""

    gamma: tuple[float, ...]
    psi: tuple[float, ...]
    range_bound: float

    @property
    def sides(self) -> list[tuple[float, float]]:
        return list(zip(self.gamma, self.psi))

    def __len__(self) -> int:
        return len(self.gamma)

    def evaluate(self, f) -> np.ndarray:
        """Pointwise max of the tangents, the polygon's approximation of ``f^2``."""
        f = np.asarray(f, dtype=float)
        g = np.asarray(self.gamma)
        s = np.asarray(self.psi)
        return np.max(np.multiply.outer(f, g) + s, axis=-1)

    def max_error(self) -> float:
        """Worst-case ``f^2 - max_c h_c(f)`` over the covered range (closed form)."""
        if len(self) == 1:
            return self.range_bound**2
        spacing = 2 * self.range_bound / (len(self) - 1)
        return (spacing / 2) ** 2


def build_polygon(num_sides: int, range_bound: float) -> PolygonApprox:
    """Tangents to ``f^2`` at ``num_sides`` equally spaced breakpoints.

    A single side is the tangent at 0, i.e. ``y >= 0``.
    """
    if num_sides < 1:
        raise ValueError("num_sides must be at least 1")
    if not range_bound > 0:
        raise ValueError("range_bound must be positive")
    if num_sides == 1:
        xs = np.zeros(1)
    else:
        xs = np.linspace(-range_bound, range_bound, num_sides)
    return PolygonApprox(tuple(float(v) for v in 2 * xs), tuple(float(v) for v in -(xs * xs)), float(range_bound))


def line_range_bound(l_max: float, v_max: float) -> float:
    """Largest |P| or |Q| allowed by the current limit at the highest voltage (v_max in p.u.)."""
    return math.sqrt(l_max) * v_max


@dataclass(frozen=True)
class LinearRow:
    """``sum(coeffs[name] * var) <relation> rhs`` with relation one of ``<=``, ``=``, ``>=``."""

    coeffs: dict[str, float]
    relation: str
    rhs: float
    label: str = ""


def polygon_constraints(
    approx: PolygonApprox,
    p_var: str,
    q_var: str,
    l_var: str,
    pairing: str = "independent",
    label: str = "",
) -> list[LinearRow]:
    """Rows ``l - gamma_c P - gamma_c' Q >= psi_c + psi_c'``.

    ``pairing="independent"`` gives all ``|C|^2`` side pairs; ``"shared"``
    uses the same side for both terms (``|C|`` rows).
    """
    n = len(approx)
    if pairing == "independent":
        pairs = [(c, d) for c in range(n) for d in range(n)]
    elif pairing == "shared":
        pairs = [(c, c) for c in range(n)]
    else:
        raise ValueError(f"unknown polygon pairing {pairing!r}")
    rows = []
    for c, d in pairs:
        coeffs = {l_var: 1.0}
        if approx.gamma[c] != 0.0:
            coeffs[p_var] = -approx.gamma[c]
        if approx.gamma[d] != 0.0:
            coeffs[q_var] = coeffs.get(q_var, 0.0) - approx.gamma[d]
        rows.append(LinearRow(coeffs, ">=", approx.psi[c] + approx.psi[d], f"{label}poly[{c},{d}]"))
    return rows


def row_satisfied(row: LinearRow, values: dict[str, float], tol: float = 1e-12) -> bool:
    lhs = sum(c * values[k] for k, c in row.coeffs.items())
    if row.relation == "<=":
        return lhs <= row.rhs + tol
    if row.relation == ">=":
        return lhs >= row.rhs - tol
    return abs(lhs - row.rhs) <= tol


@dataclass(frozen=True)
class EssHull:
    p_ch_max: float
    p_dis_max: float

    def __post_init__(self):
        if not (self.p_ch_max > 0 and self.p_dis_max > 0):
            raise ValueError("ESS hull bounds must be strictly positive")

    def row(self, ch_var: str, dis_var: str, label: str = "") -> LinearRow:
        return LinearRow({ch_var: 1.0 / self.p_ch_max, dis_var: 1.0 / self.p_dis_max}, "<=", 1.0, label)

    def vertices(self) -> np.ndarray:
        return np.array([[0.0, 0.0], [self.p_ch_max, 0.0], [0.0, self.p_dis_max]])


def hull_contains(hull: EssHull, p_ch: float, p_dis: float) -> bool:
    return bool(
        p_ch >= 0 and p_dis >= 0 and p_ch / hull.p_ch_max + p_dis / hull.p_dis_max <= 1 + HULL_TOL
    )


def cc_violation(p_ch, p_dis):
    """Charge/discharge product; zero when the complementarity condition holds."""
    return p_ch * p_dis
