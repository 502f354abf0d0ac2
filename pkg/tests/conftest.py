"""Prints one pass/fail line per acceptance criterion after the run."""

from __future__ import annotations

OUTCOMES = ("passed", "failed", "xfailed", "xpassed", "error")


def pytest_terminal_summary(terminalreporter):
    results: dict[int, list[tuple[str, str]]] = {}
    for outcome in OUTCOMES:
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" not in props or getattr(rep, "when", "call") != "call":
                continue
            results.setdefault(int(props["criterion"]), []).append((outcome, props.get("detail", "")))
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        parts = results[n]
        ok = all(o == "passed" for o, _ in parts)
        detail = "; ".join(d for _, d in parts if d)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
