"""Inference-time mask schedules: the fraction of initially masked fields still masked at progress ``r``."""

from __future__ import annotations

import enum
import math


class ScheduleKind(enum.Enum):
    EXPONENTIAL = "exponential"
    SQUARE = "square"
    COSINE = "cosine"
    LINEAR = "linear"
    LOGARITHMIC = "logarithmic"

    @classmethod
    def parse(cls, name):
        try:
            return cls(name.lower())
        except ValueError:
            kinds = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown schedule {name!r}; choose one of: {kinds}") from None


_E5 = math.exp(5.0)


def gamma(kind: ScheduleKind, r: float) -> float:
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"schedule progress must be in [0, 1], got {r}")
    if r == 0.0:
        return 1.0
    if r == 1.0:
        return 0.0
    if kind is ScheduleKind.LINEAR:
        return 1.0 - r
    if kind is ScheduleKind.COSINE:
        return math.cos(math.pi * r / 2.0)
    if kind is ScheduleKind.SQUARE:
        return 1.0 - r * r
    if kind is ScheduleKind.EXPONENTIAL:
        return 1.0 - (math.exp(5.0 * r) - 1.0) / (_E5 - 1.0)
    if kind is ScheduleKind.LOGARITHMIC:
        return 1.0 - math.log1p((math.e - 1.0) * r)
    raise ValueError(f"unknown schedule kind {kind!r}")


def masked_after_step(kind, t, T, m0, currently_masked=None):
    """Number of positions left masked after step ``t`` of ``T``.

    ``floor(gamma(t/T) * m0)``, capped at the current masked count. The
    ``1e-9`` guards against products like ``0.7 * 10`` landing just below an
    integer.
    """
    l = int(math.floor(gamma(kind, t / T) * m0 + 1e-9))
    if currently_masked is not None:
        l = min(l, currently_masked)
    return max(l, 0)


def masked_count_sequence(kind, T, m0):
    seq, cur = [], m0
    for t in range(1, T + 1):
        cur = masked_after_step(kind, t, T, m0, cur)
        seq.append(cur)
    return seq
