"""Simulated time is an integer count of microseconds."""

SECOND = 1_000_000
MILLISECOND = 1_000


def seconds(value: float) -> int:
    return int(round(value * SECOND))


def to_seconds(t: int) -> float:
    return t / SECOND
