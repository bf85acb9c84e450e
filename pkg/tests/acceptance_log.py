"""Collects one pass/fail line per acceptance criterion for the end-of-run summary."""

LINES = []


def record_criterion(number, ok, detail):
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    LINES.append(line)
    return ok
