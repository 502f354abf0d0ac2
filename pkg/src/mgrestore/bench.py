"""Command line harness: MPC and CPO runs, comparison tables, plot-ready series.

Every output is a CSV with a fixed column order and full-precision values
(``repr`` of the float), so equal seeds give byte-identical files.

Files written per subcommand (all into ``--out``):

* ``run-mpc``: ``mpc_log.csv`` (long format: t, quantity, value)
* ``run-cpo``: ``train_report.csv`` / ``fig1.csv`` (episode, reward),
  ``policy.json`` and, with ``--checkpoint-every k``, ``policy_ep{n}.json``
* ``eval-cpo``: ``cpo_trace.csv`` (long format, exploration off)
* ``compare``: ``compare.csv`` (one row per step, all figure columns) and
  ``fig2.csv`` .. ``fig6.csv``; the voltage series is split into
  ``fig5_mpc.csv`` and ``fig5_cpo.csv`` (one column per bus each)

Exit codes: 0 success, 2 configuration error, 3 infeasible optimisation,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cmdp import ActionLayout, state_dim, trace_csv
from .cpo import CpoConfig, evaluate, train
from .mpc import MpcInfeasible, RestorationLog, run_mpc
from .netmodel import Scenario, ScenarioError, load_scenario, resolve_scenario
from .policy import load_checkpoint, save_checkpoint
from .powerflow import PowerFlowError, SensitivityError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERIC = 4

FIGURES = ("fig1", "fig2", "fig3", "fig4", "fig5", "fig6")

Trace = dict[int, dict[str, float]]  # t -> quantity -> value


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: str
    mode: str  # "mpc", "cpo-train", "cpo-eval", "compare"
    out: Path
    seed: int = 0
    overrides: dict = field(default_factory=dict)
    checkpoint: Path | None = None
    mpc_log: Path | None = None
    cpo_log: Path | None = None
    checkpoint_every: int = 0


# ---------------------------------------------------------------------------
# traces and series


def trace_from_rows(rows) -> Trace:
    out: Trace = {}
    for t, q, v in rows:
        out.setdefault(int(t), {})[q] = float(v)
    return out


def trace_from_log(log: RestorationLog, rewards: list[float] | None = None) -> Trace:
    tr = trace_from_rows(log.rows())
    for t, r in enumerate(rewards or [], start=1):
        tr.setdefault(t, {})["reward"] = float(r)
    return tr


def load_trace(path) -> Trace:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["t", "quantity", "value"]:
        raise ConfigError(f"{path}: not a long-format trace (t,quantity,value)")
    return trace_from_rows(rows[1:])


def _steps(trace: Trace, what: str) -> list[int]:
    if not trace:
        raise ValueError(f"{what}: empty log")
    return sorted(trace)


def _need(trace: Trace, t: int, key: str, what: str) -> float:
    try:
        return trace[t][key]
    except KeyError:
        raise ValueError(f"{what}: quantity {key} missing at t = {t}") from None


def _table(header: list[str], rows: list[list], comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([c if isinstance(c, (int, str)) else repr(float(c)) for c in r])
    return buf.getvalue()


def reward_scale(gamma: float, lookahead: int) -> float:
    """Sum of gamma^k over a CPO action window of ``lookahead + 1`` steps."""
    return float(sum(gamma**k for k in range(lookahead + 1)))


def series_columns(
    scenario: Scenario,
    which: str,
    mpc: Trace | None = None,
    cpo: Trace | None = None,
    report: list[float] | None = None,
    gamma: float = 0.9,
    lookahead: int | None = None,
) -> tuple[list[str], list[list], str | None]:
    """Header, rows and header comment of one figure series."""
    h = scenario.cpo_lookahead if lookahead is None else lookahead
    if which == "fig1":
        if not report:
            raise ValueError("fig1: empty training report")
        return ["episode", "reward"], [[i, r] for i, r in enumerate(report, start=1)], None
    if which == "fig5":
        # one controller per call
        src, name = (mpc, "mpc") if mpc is not None else (cpo, "cpo")
        if src is None:
            raise ValueError("fig5: empty log")
        ids = scenario.network.bus_ids
        header = ["t"] + [f"v[{b}]" for b in ids]
        rows = [[t] + [_need(src, t, f"v_plan[{b}]", name) for b in ids] for t in _steps(src, name)]
        return header, rows, f"{name} squared bus voltages (p.u.) of the applied step"
    if mpc is None or cpo is None:
        raise ValueError(f"{which}: needs both an MPC and a CPO log")
    steps = _steps(mpc, "mpc")
    if _steps(cpo, "cpo") != steps:
        raise ValueError(f"{which}: MPC and CPO logs cover different steps")
    if which == "fig2":
        scale = reward_scale(gamma, h)
        header = ["t", "mpc_cost", "cpo_cost", "cpo_reward", "cpo_reward_normalized"]
        rows = [
            [t, -_need(mpc, t, "objective", "mpc"), -_need(cpo, t, "objective", "cpo"),
             _need(cpo, t, "reward", "cpo"), _need(cpo, t, "reward", "cpo") / scale]
            for t in steps
        ]
        note = (
            f"cost = -(sum priority * served P - sum MT cost * P_MT) of the applied step; "
            f"cpo_reward_normalized = reward / sum_(k=0..{h}) gamma^k with gamma = {gamma!r}"
        )
        return header, rows, note
    if which == "fig3":
        header, cols = ["t"], []
        for b in scenario.ess_buses:
            for src in ("mpc", "cpo"):
                for q in ("ch", "dis"):
                    header.append(f"{src}_{q}[{b}]")
                    cols.append((src, f"{q}[{b}]"))
    elif which == "soc":
        header = ["t"] + [f"{src}_soc[{b}]" for b in scenario.ess_buses for src in ("mpc", "cpo")]
        cols = [(src, f"soc[{b}]") for b in scenario.ess_buses for src in ("mpc", "cpo")]
    elif which == "fig4":
        header = ["t"] + [f"{src}_fuel[{b}]" for b in scenario.mt_buses for src in ("mpc", "cpo")]
        cols = [(src, f"fuel[{b}]") for b in scenario.mt_buses for src in ("mpc", "cpo")]
    elif which == "fig6":
        buses = [b for b in scenario.load_buses if b != scenario.network.slack_bus]
        header = ["t"] + [f"{src}_rho[{b}]" for b in buses for src in ("mpc", "cpo")]
        cols = [(src, f"rho[{b}]") for b in buses for src in ("mpc", "cpo")]
    else:
        raise ValueError(f"unknown series {which!r}; expected one of {FIGURES}")
    logs = {"mpc": mpc, "cpo": cpo}
    rows = [[t] + [_need(logs[s], t, k, s) for s, k in cols] for t in steps]
    note = "fuel and soc at the start of the step" if which in ("soc", "fig4") else None
    return header, rows, note


def emit_series(scenario: Scenario, which: str, path=None, **sources) -> str:
    """CSV text of one figure series; written to ``path`` when given."""
    header, rows, note = series_columns(scenario, which, **sources)
    text = _table(header, rows, note)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def comparison_csv(scenario: Scenario, mpc: Trace, cpo: Trace, gamma: float, lookahead: int | None = None) -> str:
    """Per-step join of the fig2 to fig6 columns plus state of charge."""
    header, rows, note = series_columns(scenario, "fig2", mpc, cpo, gamma=gamma, lookahead=lookahead)
    for which in ("fig3", "soc", "fig4", "fig6"):
        h2, r2, _ = series_columns(scenario, which, mpc, cpo)
        header += h2[1:]
        rows = [a + b[1:] for a, b in zip(rows, r2)]
    for name, src in (("mpc", mpc), ("cpo", cpo)):
        h2, r2, _ = series_columns(scenario, "fig5", **{name: src})
        header += [f"{name}_{c}" for c in h2[1:]]
        rows = [a + b[1:] for a, b in zip(rows, r2)]
    return _table(header, rows, note)


# ---------------------------------------------------------------------------
# commands


def _scenario(cfg: RunConfig) -> Scenario:
    try:
        return load_scenario(resolve_scenario(cfg.scenario))
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None


def _cpo_config(cfg: RunConfig) -> CpoConfig:
    o = cfg.overrides
    kw = {k: o[k] for k in ("episodes", "n_samples", "delta", "gamma", "lookahead") if o.get(k) is not None}
    config = CpoConfig(seed=cfg.seed, **kw)
    if config.episodes < 0 or config.n_samples < 1 or config.delta < 0 or not 0 < config.gamma <= 1:
        raise ConfigError("episodes >= 0, n_samples >= 1, delta >= 0 and 0 < gamma <= 1 are required")
    return config


def cmd_run_mpc(cfg: RunConfig) -> list[Path]:
    sc = _scenario(cfg)
    log = run_mpc(sc, lookahead=cfg.overrides.get("mpc_lookahead"))
    path = cfg.out / "mpc_log.csv"
    log.to_csv(path)
    return [path]


def cmd_run_cpo(cfg: RunConfig, progress=None) -> list[Path]:
    sc = _scenario(cfg)
    config = _cpo_config(cfg)
    written = []
    meta = {"seed": config.seed, "delta": config.delta, "gamma": config.gamma,
            "n_samples": config.n_samples, "scenario": sc.name}

    def periodic(ep, spec, params):
        if cfg.checkpoint_every and ep % cfg.checkpoint_every == 0:
            path = cfg.out / f"policy_ep{ep}.json"
            save_checkpoint(path, spec, params, {**meta, "episodes": ep})
            written.append(path)

    spec, params, report = train(sc, config, progress=progress, on_episode=periodic)
    path = cfg.out / "policy.json"
    save_checkpoint(path, spec, params, {**meta, "episodes": config.episodes})
    written.append(path)
    for name in ("train_report.csv", "fig1.csv"):
        report.to_csv(cfg.out / name)
        written.append(cfg.out / name)
    return written


def _load_policy(cfg: RunConfig, sc: Scenario):
    if cfg.checkpoint is None or not cfg.checkpoint.is_file():
        raise ConfigError(f"checkpoint not found: {cfg.checkpoint}")
    spec, params, meta = load_checkpoint(cfg.checkpoint)
    base = ActionLayout.for_scenario(sc, 0).dim
    if spec.action_dim % base or state_dim(sc, spec.action_dim // base - 1) != spec.state_dim:
        raise ConfigError("checkpoint does not match the scenario dimensions")
    return spec, params, meta


def cmd_eval_cpo(cfg: RunConfig) -> list[Path]:
    sc = _scenario(cfg)
    spec, params, meta = _load_policy(cfg, sc)
    gamma = cfg.overrides.get("gamma") or meta.get("gamma", 0.9)
    log, rewards, _ = evaluate(sc, spec, params, np.random.default_rng(cfg.seed), gamma)
    path = cfg.out / "cpo_trace.csv"
    trace_csv(log, rewards, path)
    return [path]


def cmd_compare(cfg: RunConfig) -> list[Path]:
    sc = _scenario(cfg)
    written = []
    mpc_path = cfg.mpc_log or cfg.out / "mpc_log.csv"
    cpo_path = cfg.cpo_log or cfg.out / "cpo_trace.csv"
    if cfg.checkpoint is not None:
        written += cmd_run_mpc(RunConfig(cfg.scenario, "mpc", cfg.out, cfg.seed, cfg.overrides))
        written += cmd_eval_cpo(cfg)
        mpc_path, cpo_path = cfg.out / "mpc_log.csv", cfg.out / "cpo_trace.csv"
    for p in (mpc_path, cpo_path):
        if not Path(p).is_file():
            raise ConfigError(f"log not found: {p} (run run-mpc and eval-cpo first, or pass --checkpoint)")
    mpc, cpo = load_trace(mpc_path), load_trace(cpo_path)
    gamma = cfg.overrides.get("gamma") or 0.9
    h = cfg.overrides.get("lookahead")
    (cfg.out / "compare.csv").write_text(comparison_csv(sc, mpc, cpo, gamma, h), encoding="utf-8")
    written.append(cfg.out / "compare.csv")
    emit_series(sc, "fig2", cfg.out / "fig2.csv", mpc=mpc, cpo=cpo, gamma=gamma, lookahead=h)
    for which in ("fig3", "fig4", "fig6"):
        emit_series(sc, which, cfg.out / f"{which}.csv", mpc=mpc, cpo=cpo)
        written.append(cfg.out / f"{which}.csv")
    emit_series(sc, "fig5", cfg.out / "fig5_mpc.csv", mpc=mpc)
    emit_series(sc, "fig5", cfg.out / "fig5_cpo.csv", cpo=cpo)
    written += [cfg.out / "fig2.csv", cfg.out / "fig5_mpc.csv", cfg.out / "fig5_cpo.csv"]
    return written


COMMANDS = {"run-mpc": ("mpc", cmd_run_mpc), "run-cpo": ("cpo-train", cmd_run_cpo),
            "eval-cpo": ("cpo-eval", cmd_eval_cpo), "compare": ("compare", cmd_compare)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgrestore", description="Microgrid load restoration: MPC and CPO runs.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--scenario", default="case12da", help="bundled name or JSON path")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--gamma", type=float)
        if name == "run-mpc" or name == "compare":
            s.add_argument("--mpc-lookahead", type=int, help="MPC window length minus one")
        if name != "run-mpc":
            s.add_argument("--lookahead", type=int, help="CPO action window length minus one")
        if name == "run-cpo":
            s.add_argument("--episodes", type=int)
            s.add_argument("--n-samples", type=int)
            s.add_argument("--delta", type=float)
            s.add_argument("--checkpoint-every", type=int, default=0)
            s.add_argument("--quiet", action="store_true")
        if name in ("eval-cpo", "compare"):
            s.add_argument("--checkpoint", help="policy checkpoint (compare: rerun both controllers)")
        if name == "compare":
            s.add_argument("--mpc-log")
            s.add_argument("--cpo-log")
    return p


def config_from_args(args: argparse.Namespace) -> RunConfig:
    keys = ("episodes", "n_samples", "delta", "gamma", "lookahead", "mpc_lookahead")
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    opt = lambda name: Path(getattr(args, name)) if getattr(args, name, None) else None  # noqa: E731
    return RunConfig(
        args.scenario,
        COMMANDS[args.command][0],
        Path(args.out),
        args.seed,
        overrides,
        opt("checkpoint"),
        opt("mpc_log"),
        opt("cpo_log"),
        getattr(args, "checkpoint_every", 0) or 0,
    )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    cfg = config_from_args(args)
    if cfg.checkpoint_every < 0:
        print("error: --checkpoint-every must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    _, fn = COMMANDS[args.command]
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
        if args.command == "run-cpo" and not args.quiet:
            written = fn(cfg, lambda ep, r: print(f"episode {ep} reward {r:.6g}", file=sys.stderr))
        else:
            written = fn(cfg)
    except (ConfigError, ScenarioError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MpcInfeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (PowerFlowError, SensitivityError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for p in written:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
