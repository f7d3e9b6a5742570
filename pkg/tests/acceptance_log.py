"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

RESULTS: dict[int, str] = {}


def record(number, ok, title, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
    RESULTS[number] = line
    print(line)
    return ok
