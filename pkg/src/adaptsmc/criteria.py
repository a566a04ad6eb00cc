"""Resampling criteria and threshold sequences shared by the engine and the oracle."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InvalidInterval
from .rng import KeyedRNG, Role


class CriterionKind(str, Enum):
    CV2 = "cv2"
    ENTROPY = "entropy"
    FIXED = "fixed"


class Thresholds:
    """A threshold ``a_n`` for every block index ``n``.

    Explicit sequences repeat their last value once exhausted, so a single
    float behaves as a constant threshold.
    """

    def __init__(self, values):
        values = np.atleast_1d(np.asarray(values, dtype=np.float64))
        if values.size == 0 or np.any(~np.isfinite(values)) or np.any(values <= 0):
            raise ValueError("thresholds must be positive and finite")
        self._values = values

    def __getitem__(self, n):
        return float(self._values[min(n, self._values.size - 1)])

    def prefix(self, count):
        return [self[n] for n in range(count)]

    def __repr__(self):
        return f"Thresholds({self._values.tolist()})"


class RandomizedThresholds(Thresholds):
    """Thresholds drawn i.i.d. uniform on ``(lower, upper)``.

    Draw ``n`` is position ``n`` of the ``Role.THRESHOLD`` stream keyed by
    ``seed``; it depends on neither the particle seed nor the replicate, so
    every run conditioned on the same realization sees the same ``a_n``.
    """

    def __init__(self, lower, upper, seed):
        lower, upper = float(lower), float(upper)
        if not (0 < lower < upper and np.isfinite(upper)):
            raise InvalidInterval(f"need 0 < lower < upper, got ({lower}, {upper})")
        self.lower, self.upper, self.seed = lower, upper, int(seed)
        self._values = np.empty(0)

    def _extend(self, count):
        if count > self._values.size:
            u = KeyedRNG(self.seed).open_uniforms(0, Role.THRESHOLD, max(count, 2 * self._values.size))
            self._values = self.lower + (self.upper - self.lower) * u

    def __getitem__(self, n):
        self._extend(n + 1)
        return float(self._values[n])

    def __repr__(self):
        return f"RandomizedThresholds({self.lower}, {self.upper}, seed={self.seed})"


def draw_thresholds(rng, lower, upper, count):
    """``count`` uniform draws on the open interval ``(lower, upper)``."""
    lower, upper = float(lower), float(upper)
    if not (0 < lower < upper and np.isfinite(upper)):
        raise InvalidInterval(f"need 0 < lower < upper, got ({lower}, {upper})")
    u = rng.open_uniforms(0, Role.THRESHOLD, count)
    return lower + (upper - lower) * u


@dataclass
class CriterionSpec:
    """What triggers resampling.

    ``kind`` is ``"cv2"``, ``"entropy"`` or ``"fixed"``; for ``"fixed"`` the
    resampling times are ``times`` (which must start at 0) and thresholds are
    ignored.
    """

    kind: CriterionKind
    thresholds: Thresholds = None
    times: tuple = field(default=())

    def __post_init__(self):
        self.kind = CriterionKind(self.kind)
        if self.kind is CriterionKind.FIXED:
            times = tuple(int(t) for t in self.times)
            if not times or times[0] != 0 or any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError("fixed schedule must be strictly increasing from 0")
            self.times = times
        else:
            if self.thresholds is None:
                raise ValueError(f"criterion {self.kind.value} needs thresholds")
            if not isinstance(self.thresholds, Thresholds):
                self.thresholds = Thresholds(self.thresholds)

    @classmethod
    def fixed(cls, times):
        return cls(CriterionKind.FIXED, times=tuple(times))
