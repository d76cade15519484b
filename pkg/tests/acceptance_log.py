"""Collects one verdict line per acceptance check for the terminal summary."""

_RESULTS: dict = {}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    _RESULTS[(number, title)] = line
    print(line)


def lines() -> list:
    return [_RESULTS[k] for k in sorted(_RESULTS, key=lambda k: k[0])]
