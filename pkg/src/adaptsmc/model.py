"""Finite-state Feynman-Kac models.

A model is a Markov chain on states ``0..K-1`` over base times ``0..T`` with
row-stochastic kernels and potentials strictly inside ``(0, 1)``.

Indexing convention: ``kernels[k]`` moves the chain from time ``k`` to time
``k + 1`` and ``potentials[k]`` is evaluated at time ``k + 1``.  In the
one-based notation used by :mod:`adaptsmc.exact` this reads ``M_{k+1}`` and
``G_{k+1}``; the potential is never evaluated at time 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (InitialNotNormalized, LengthMismatch, PotentialOutOfRange,
                     RowNotStochastic, StateOutOfRange)

STOCHASTIC_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class FiniteModel:
    """Time-inhomogeneous finite-state Feynman-Kac model.

    Parameters
    ----------
    initial : array_like, shape (K,)
        Law of the chain at time 0.
    kernels : sequence of array_like, each (K, K)
        ``kernels[k]`` is the transition from time ``k`` to ``k + 1``.
    potentials : sequence of array_like, each (K,)
        ``potentials[k]`` is the potential applied at time ``k + 1``.

    Construct through :func:`make_model` or :meth:`from_dict`, both of which
    run :func:`validate`.
    """

    initial: np.ndarray
    kernels: np.ndarray
    potentials: np.ndarray
    potential_ratios: np.ndarray = field(default=None, repr=False)

    @property
    def num_states(self):
        return self.initial.shape[0]

    @property
    def horizon(self):
        return self.kernels.shape[0]

    def kernel(self, time):
        """Kernel into base time ``time`` (one-based, ``1 <= time <= T``)."""
        return self.kernels[time - 1]

    def potential(self, time):
        """Potential at base time ``time`` (one-based)."""
        return self.potentials[time - 1]

    def log_potential(self, time):
        return np.log(self.potentials[time - 1])

    def to_dict(self):
        return {
            "num_states": int(self.num_states),
            "horizon": int(self.horizon),
            "initial": self.initial.tolist(),
            "kernels": self.kernels.tolist(),
            "potentials": self.potentials.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        for key in ("initial", "kernels", "potentials"):
            if key not in data:
                raise LengthMismatch(f"model description lacks {key!r}")
        model = make_model(data["initial"], data["kernels"], data["potentials"])
        if "num_states" in data and int(data["num_states"]) != model.num_states:
            raise LengthMismatch(
                f"num_states={data['num_states']} but initial has {model.num_states} entries")
        if "horizon" in data and int(data["horizon"]) != model.horizon:
            raise LengthMismatch(
                f"horizon={data['horizon']} but {model.horizon} kernels were given")
        return model

    def with_potentials(self, potentials):
        return make_model(self.initial, self.kernels, potentials)


def _as_arrays(initial, kernels, potentials):
    initial = np.asarray(initial, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    potentials = np.asarray(potentials, dtype=np.float64)
    if initial.ndim != 1 or initial.size == 0:
        raise LengthMismatch("initial law must be a non-empty vector")
    k = initial.size
    if kernels.ndim != 3 or kernels.shape[1:] != (k, k):
        raise LengthMismatch(f"kernels must have shape (T, {k}, {k}), got {kernels.shape}")
    if potentials.shape != (kernels.shape[0], k):
        raise LengthMismatch(
            f"potentials must have shape ({kernels.shape[0]}, {k}), got {potentials.shape}")
    if kernels.shape[0] < 1:
        raise LengthMismatch("horizon must be at least 1")
    return initial, kernels, potentials


def validate(model):
    """Check every model invariant and cache the per-step potential ratios.

    Returns the (possibly new) validated model.  Raises the first violation
    found, scanning the initial law, then kernels, then potentials, each in
    time order and then row/state order.
    """
    initial, kernels, potentials = _as_arrays(model.initial, model.kernels, model.potentials)

    bad = np.flatnonzero(~np.isfinite(initial) | (initial < 0))
    if bad.size:
        raise InitialNotNormalized(index=int(bad[0]))
    total = float(initial.sum())
    if abs(total - 1.0) > STOCHASTIC_TOL:
        raise InitialNotNormalized(total=total)

    for t, m in enumerate(kernels):
        sums = m.sum(axis=1)
        rows = np.flatnonzero(np.any(~np.isfinite(m) | (m < 0), axis=1)
                              | (np.abs(sums - 1.0) > STOCHASTIC_TOL))
        if rows.size:
            r = int(rows[0])
            raise RowNotStochastic(t, r, float(sums[r]))

    for t, g in enumerate(potentials):
        states = np.flatnonzero(~(np.isfinite(g) & (g > 0) & (g < 1)))
        if states.size:
            x = int(states[0])
            raise PotentialOutOfRange(t, x, float(g[x]))

    ratios = potentials.max(axis=1) / potentials.min(axis=1)
    for arr in (initial, kernels, potentials, ratios):
        arr.setflags(write=False)
    return FiniteModel(initial, kernels, potentials, ratios)


def make_model(initial, kernels, potentials):
    return validate(FiniteModel(*_as_arrays(initial, kernels, potentials)))


def homogeneous_model(initial, kernel, potential, horizon):
    """Model with the same kernel and potential at every step."""
    kernel = np.asarray(kernel, dtype=np.float64)
    potential = np.asarray(potential, dtype=np.float64)
    return make_model(initial, np.repeat(kernel[None], horizon, axis=0),
                      np.repeat(potential[None], horizon, axis=0))


def reference_model(horizon=12):
    """Two-state model used throughout the tests and experiments.

    ``M = [[0.9, 0.1], [0.2, 0.8]]``, ``G = [0.3, 0.7]`` at every step and a
    uniform initial law.
    """
    return homogeneous_model([0.5, 0.5], [[0.9, 0.1], [0.2, 0.8]], [0.3, 0.7], horizon)


def mixing_model(horizon=8):
    """Three-state model whose kernel entries are all at least 0.1."""
    kernel = [[0.6, 0.3, 0.1],
              [0.2, 0.5, 0.3],
              [0.1, 0.3, 0.6]]
    return homogeneous_model([0.2, 0.5, 0.3], kernel, [0.4, 0.6, 0.8], horizon)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return FiniteModel.from_dict(json.load(fh))


def save_model(model, path):
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class PathWeightSpec:
    """Block ``(start, end]`` over which a path weight is accumulated."""

    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise LengthMismatch(f"need 0 <= start < end, got ({self.start}, {self.end})")


def path_log_weight(model, spec, path):
    """``sum_{start < k <= end} log G_k(x_k)``."""
    if spec.end > model.horizon:
        raise LengthMismatch(f"end={spec.end} exceeds horizon {model.horizon}")
    path = np.asarray(path)
    if path.shape != (spec.end - spec.start,):
        raise LengthMismatch(
            f"path of length {path.size} for block ({spec.start}, {spec.end}]")
    k = model.num_states
    for pos, x in enumerate(path.tolist()):
        if not (isinstance(x, (int, np.integer)) and 0 <= x < k):
            raise StateOutOfRange(pos, x, k)
    times = np.arange(spec.start, spec.end)
    return float(np.log(model.potentials[times, path]).sum())


def path_weight(model, spec, path):
    """Importance weight ``prod_{start < k <= end} G_k(x_k)`` of a block path."""
    return float(np.exp(path_log_weight(model, spec, path)))


def cumulative_kernel(model, time):
    """Row-wise CDFs of ``kernels[time]``, padded with ``inf`` past the last
    positive entry so round-off in the row sum can never select a null state."""
    m = model.kernels[time]
    cum = np.cumsum(m, axis=1)
    k = m.shape[1]
    last = k - 1 - np.argmax(m[:, ::-1] > 0, axis=1)
    cum[np.arange(k)[None, :] >= last[:, None]] = np.inf
    return cum


def sample_step(model, time, state, draw):
    """Inverse-CDF move from ``state`` at ``time`` to ``time + 1``.

    ``draw`` may be a scalar or an array (then ``state`` broadcasts against
    it).  The cumulative row is split into right-open intervals
    ``[c_{y-1}, c_y)``.
    """
    if not 0 <= time < model.horizon:
        raise LengthMismatch(f"no kernel out of time {time}")
    draw = np.asarray(draw, dtype=np.float64)
    if np.any((draw < 0) | (draw >= 1)):
        raise ValueError("draw must lie in [0, 1)")
    state = np.asarray(state)
    k = model.num_states
    if np.any((state < 0) | (state >= k)):
        raise StateOutOfRange(0, state, k)
    nxt = (draw[..., None] >= cumulative_kernel(model, time)[state]).sum(axis=-1)
    if nxt.ndim == 0:
        return int(nxt)
    return nxt
