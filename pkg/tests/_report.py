"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

LINES = {}


def record(n: int, ok: bool, detail: str):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES[n] = line
    print(line)
    return ok
