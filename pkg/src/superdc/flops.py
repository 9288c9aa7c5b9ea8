"""Process-wide operation counters used for the flop estimates in run reports."""

from collections import Counter
from contextlib import contextmanager

_counts = Counter()


def add(category, amount):
    _counts[category] += int(amount)


def snapshot():
    return dict(_counts)


def total():
    return int(sum(_counts.values()))


def reset():
    _counts.clear()


@contextmanager
def counting():
    """Reset the counters on entry; yields the live counter mapping."""
    reset()
    yield _counts
