"""Shared record of acceptance outcomes, printed by the terminal-summary hook in conftest."""

RESULTS: dict = {}


def record(number: int, ok: bool, detail: str):
    RESULTS[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
