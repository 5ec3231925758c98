"""Acceptance verdict log shared by the acceptance tests and the summary hook."""

LINES: list[str] = []


def record(name: str, ok: bool, detail: str = "") -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else "")
    LINES.append(line)
    print(line)
