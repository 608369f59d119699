"""Collects one result line per acceptance criterion for the terminal summary."""
LINES = []


def record(number: int, passed: bool, detail: str) -> bool:
    LINES.append(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
    return passed
