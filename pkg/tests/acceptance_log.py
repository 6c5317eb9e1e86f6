"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
LINES: list[str] = []


def record(number: int, title: str, passed: bool, detail: str, seconds: float) -> str:
    line = f"{'PASS' if passed else 'FAIL'}  criterion {number:2d}  {title:32s} {detail}  [{seconds:.1f}s]"
    LINES.append(line)
    print(line)
    return line
