"""Collects one verdict line per acceptance criterion for the terminal summary."""

LINES = {}


def record(number, title, ok, detail):
    LINES[number] = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    return ok
