"""Small scenario builders shared by the test modules."""

from __future__ import annotations

from mgrestore.netmodel import Scenario, scenario_from_dict


def make_scenario(
    kinds: dict[int, str],
    lines: list[tuple[int, int, float, float]],
    slack: int = 1,
    demand: dict[int, tuple[float, float]] | None = None,
    T: int = 4,
    lookahead: int = 1,
    l_max: float = 1.0,
    priority: dict[int, float] | None = None,
    **horizon,
) -> Scenario:
    """Build a valid scenario from bus kinds and (from, to, r, x) lines.

    Device parameters default to the bundled 12-bus values; loads get constant
    demand (default 0.05, 0.02) and priority 1 unless given.
    """
    demand = demand or {}
    priority = priority or {}
    length = T + lookahead
    devices = {"mt": [], "ess": [], "res": [], "loads": []}
    for b, kind in kinds.items():
        if kind == "mt":
            devices["mt"].append(
                dict(bus=b, p_min=0.0, p_max=0.3, ramp_up_max=0.15, ramp_down_min=-0.1,
                     tau=0.8, fuel_init=2.0, cost_coeff=0.1, q_max=0.3)
            )
        elif kind == "ess":
            devices["ess"].append(
                dict(bus=b, p_ch_max=0.2, p_dis_max=0.15, soc_min=1.0, soc_max=5.0,
                     soc_init=2.0, eta_ch=0.8, eta_dis=0.8, q_max=0.2)
            )
        elif kind == "res":
            devices["res"].append(dict(bus=b, forecast_mean=0.07, forecast_sd=0.01, q_max=0.1))
        else:
            p, q = demand.get(b, (0.05, 0.02))
            devices["loads"].append(
                dict(bus=b, p_demand=[p] * length, q_demand=[q] * length, priority=priority.get(b, 1.0))
            )
    h = dict(T=T, dt=1.0, v_min=0.95, v_max=1.05, epsilon=0.02, mpc_lookahead=lookahead,
             cpo_lookahead=lookahead, polygon_sides=5, rng_seed=0)
    h.update(horizon)
    doc = {
        "name": "test",
        "network": {"slack_bus": slack},
        "buses": [{"id": b, "kind": k} for b, k in kinds.items()],
        "lines": [{"from": f, "to": t, "r": r, "x": x, "l_max": l_max} for f, t, r, x in lines],
        "devices": devices,
        "horizon": h,
    }
    return scenario_from_dict(doc)
