"""Hallucination/quality metrics over generated finding sets, plus timing."""

from __future__ import annotations

import time
from dataclasses import dataclass


def chair(generated, reference) -> float:
    """Hallucination rate |G - S| / |G| over finding sets.

    An empty generated set scores 0: no claims means no hallucinated claims
    (callers that care can test ``len(generated) == 0`` themselves).
    """
    g = set(generated)
    s = set(reference)
    if not g:
        return 0.0
    return len(g - s) / len(g)


def recall(generated, reference) -> float:
    """Key-findings recall |G ∩ S| / |S|."""
    g = set(generated)
    s = set(reference)
    if not s:
        raise ValueError("recall: reference finding set is empty")
    return len(g & s) / len(s)


def closed_ended_accuracy(predictions, labels) -> float:
    """Fraction of exact matches between yes/no predictions and labels."""
    predictions = list(predictions)
    labels = list(labels)
    if len(predictions) != len(labels):
        raise ValueError("closed_ended_accuracy: length mismatch")
    if not predictions:
        raise ValueError("closed_ended_accuracy: empty inputs")
    hits = sum(1 for p, l in zip(predictions, labels) if p == l)
    return hits / len(predictions)


@dataclass
class RunTiming:
    """Wall-clock and throughput record for one decode run."""

    wall_seconds: float
    tokens: int
    tps: float
    peak_rows: int
    memory_elements: int


def measure_run(decode_closure):
    """Execute a decode closure under a monotonic clock.

    Returns ``(RunTiming, result)``; the closure must return a decode result
    exposing ``tokens``, ``peak_rows`` and ``memory_elements``.
    """
    t0 = time.perf_counter()
    result = decode_closure()
    wall = time.perf_counter() - t0
    n = len(result.tokens)
    tps = n / wall if wall > 0 and n > 0 else 0.0
    return RunTiming(wall_seconds=wall, tokens=n, tps=tps,
                     peak_rows=result.peak_rows,
                     memory_elements=result.memory_elements), result
