"""Particle engine: mutation, weighting, criteria, resampling and run loops.

Particles carry only their terminal state and the log-weight accumulated
since the last resampling time; genealogies are kept as per-block parent
index arrays when requested.  All randomness comes from
:class:`~adaptsmc.rng.KeyedRNG` so a run is a pure function of
``(model, spec, N, seed, replicate, resampler)``.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .criteria import CriterionKind, CriterionSpec
from .errors import (AllWeightsUnderflow, EmptyBlock, HorizonExhausted,
                     WeightNotInUnitInterval)
from .model import cumulative_kernel
from .rng import KeyedRNG, Role

RESAMPLERS = ("select", "multinomial")


@dataclass
class ParticleSystem:
    """State of an ``N``-particle system at base time ``time``."""

    states: np.ndarray
    block_log_weights: np.ndarray
    time: int = 0
    block_index: int = 0
    block_start: int = 0
    resampling_times: list = field(default_factory=lambda: [0])
    ancestry: list = None

    @property
    def num_particles(self):
        return self.states.shape[0]

    def weights(self):
        return np.exp(self.block_log_weights)

    def copy(self):
        return copy.deepcopy(self)


def initialize(model, num_particles, rng, track_ancestry=False):
    """Draw ``N`` i.i.d. particles from the initial law."""
    if num_particles < 1:
        raise ValueError("need at least one particle")
    u = rng.uniforms(0, Role.INIT, num_particles)
    cdf = np.cumsum(model.initial)
    last = int(np.flatnonzero(model.initial > 0)[-1])
    states = np.minimum(np.searchsorted(cdf, u, side="right"), last)
    return ParticleSystem(states.astype(np.int64), np.zeros(num_particles),
                          ancestry=[] if track_ancestry else None)


def mutate(system, model, rng):
    """Move every particle one base step and accumulate its log-potential."""
    t = system.time
    if t >= model.horizon:
        raise HorizonExhausted(f"no kernel beyond time {t}")
    u = rng.uniforms(t + 1, Role.MUTATION, system.num_particles)
    cum = cumulative_kernel(model, t)
    system.states = (u[:, None] >= cum[system.states]).sum(axis=1)
    system.block_log_weights = system.block_log_weights + model.log_potential(t + 1)[system.states]
    system.time = t + 1
    return system


def cv2_from_log_weights(log_w):
    w = np.exp(log_w - log_w.max())
    n = w.shape[0]
    return max(float(n * np.dot(w, w) / w.sum() ** 2 - 1.0), 0.0)


def criterion_value(system, kind):
    """Empirical criterion of the current block and the effective sample size.

    ``kind="cv2"`` gives the squared coefficient of variation of the block
    weights, ``kind="entropy"`` gives ``-mean(log W)`` on the raw weights.
    The ESS is always ``N / (1 + CV2)``.
    """
    if system.time == system.block_start:
        raise EmptyBlock(f"no mutation since the block started at {system.block_start}")
    log_w = system.block_log_weights
    cv2 = cv2_from_log_weights(log_w)
    ess = system.num_particles / (1.0 + cv2)
    kind = CriterionKind(kind)
    if kind is CriterionKind.ENTROPY:
        return float(-log_w.mean()), ess
    return cv2, ess


def _normalized(log_w):
    total = logsumexp(log_w)
    if not np.isfinite(total):
        raise AllWeightsUnderflow("log-sum-exp of block weights is not finite")
    return np.exp(log_w - total)


def _inverse_cdf(probs, u):
    cdf = np.cumsum(probs)
    last = int(np.flatnonzero(probs > 0)[-1])
    return np.minimum(np.searchsorted(cdf, u, side="right"), last)


def _close_block(system, parents):
    system.states = system.states[parents]
    system.block_log_weights = np.zeros(system.num_particles)
    system.block_index += 1
    system.block_start = system.time
    system.resampling_times.append(system.time)
    if system.ancestry is not None:
        system.ancestry.append(parents)
    return system


def resample_multinomial(system, rng):
    """N independent categorical draws from the normalized block weights."""
    if not np.all(np.isfinite(system.block_log_weights)):
        raise AllWeightsUnderflow("non-finite block log-weight")
    probs = _normalized(system.block_log_weights)
    u = rng.uniforms(system.time, Role.SELECTION, system.num_particles)
    return _close_block(system, _inverse_cdf(probs, u))


def resample_selection_kernel(system, rng):
    """Keep each particle with probability equal to its block weight,
    otherwise replace it by a draw from the weighted population."""
    w = system.weights()
    if not np.all((w > 0) & (w <= 1)):
        raise WeightNotInUnitInterval("block weights must lie in (0, 1]")
    n = system.num_particles
    keep = rng.uniforms(system.time, Role.KEEP, n) < w
    u = rng.uniforms(system.time, Role.SELECTION, n)
    replacement = _inverse_cdf(_normalized(system.block_log_weights), u)
    parents = np.where(keep, np.arange(n), replacement)
    return _close_block(system, parents)


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

@dataclass
class BlockSummary:
    """Particle configuration at a block time, before resampling.

    ``counts[y]`` is the number of particles in state ``y`` and
    ``weight_sums[y]`` the sum of their block weights.
    """

    index: int
    time: int
    counts: np.ndarray
    weight_sums: np.ndarray
    log_mean_weight: float
    closed: bool

    def to_dict(self):
        return {"index": self.index, "time": self.time, "counts": self.counts.tolist(),
                "weight_sums": self.weight_sums.tolist(),
                "log_mean_weight": self.log_mean_weight, "closed": self.closed}


@dataclass
class RunRecord:
    """Everything a run reports.

    ``blocks[n]`` summarizes the system at ``t_n`` (block 0 is the initial
    sample); a trailing summary with ``closed=False`` describes the open tail
    at the horizon.  ``estimates[s]`` is the weighted terminal marginal at
    base time ``s``.  ``criteria`` lists ``(s, value, ess)`` after every
    mutation.
    """

    num_particles: int
    seed: int
    replicate: int
    resampler: str
    resampling_times: list
    truncated: bool
    thresholds: list
    criteria: list
    blocks: list
    post_counts: list
    estimates: np.ndarray
    log_gamma: float

    @property
    def gamma(self):
        return float(np.exp(self.log_gamma))

    def block_estimate(self, n, f):
        """``eta_n^N(f)``: unweighted particle mean at ``t_n``."""
        b = self.blocks[n]
        return float(b.counts @ np.asarray(f, dtype=np.float64)) / self.num_particles

    def closed_blocks(self):
        return [b for b in self.blocks if b.closed]

    def to_dict(self):
        return {
            "num_particles": self.num_particles,
            "seed": self.seed,
            "replicate": self.replicate,
            "resampler": self.resampler,
            "resampling_times": list(self.resampling_times),
            "truncated": self.truncated,
            "thresholds": self.thresholds,
            "criteria": [list(c) for c in self.criteria],
            "blocks": [b.to_dict() for b in self.blocks],
            "post_counts": [c.tolist() for c in self.post_counts],
            "estimates": self.estimates.tolist(),
            "log_gamma": self.log_gamma,
            "gamma": self.gamma,
        }

    def fingerprint(self, particles_only=False):
        """SHA-256 of the canonical JSON form; equal iff records are bitwise equal.

        With ``particles_only`` the criterion log and thresholds are left
        out, which is what an adaptive run and a reference run can share.
        """
        data = self.to_dict()
        if particles_only:
            for key in ("criteria", "thresholds"):
                data.pop(key)
        blob = json.dumps(data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class Runner:
    """Incremental driver of one particle run.

    ``advance()`` mutates and measures the criterion; ``conclude(trigger)``
    then either resamples or keeps going.  Splitting the step lets the
    coupling code decide the trigger itself and fork the run on
    disagreement.
    """

    def __init__(self, model, spec, num_particles, seed, replicate=0, resampler="select",
                 horizon=None, track_ancestry=False):
        if resampler not in RESAMPLERS:
            raise ValueError(f"resampler must be one of {RESAMPLERS}")
        if not isinstance(spec, CriterionSpec):
            raise TypeError("spec must be a CriterionSpec")
        self.model = model
        self.spec = spec
        self.resampler = resampler
        self.horizon = model.horizon if horizon is None else int(horizon)
        if not 1 <= self.horizon <= model.horizon:
            raise ValueError(f"horizon must lie in 1..{model.horizon}")
        self.rng = KeyedRNG(seed, replicate)
        self.system = initialize(model, num_particles, self.rng, track_ancestry)
        k = model.num_states
        self._k = k
        self._estimates = np.zeros((self.horizon + 1, k))
        counts = np.bincount(self.system.states, minlength=k).astype(np.float64)
        self._estimates[0] = counts / num_particles
        self._blocks = [BlockSummary(0, 0, counts, counts.copy(), 0.0, True)]
        self._post = []
        self._criteria = []
        self._thresholds = [self._threshold(0)]
        self._log_gamma = 0.0
        self._last_value = None

    # -- policy -------------------------------------------------------------

    def _threshold(self, n):
        if self.spec.kind is CriterionKind.FIXED:
            return None
        return self.spec.thresholds[n]

    @property
    def current_threshold(self):
        return self._thresholds[-1]

    def wants_resampling(self, value):
        if self.spec.kind is CriterionKind.FIXED:
            return self.system.time in self.spec.times
        return value >= self.current_threshold

    @property
    def done(self):
        return self.system.time >= self.horizon

    # -- stepping -----------------------------------------------------------

    def advance(self):
        mutate(self.system, self.model, self.rng)
        kind = CriterionKind.CV2 if self.spec.kind is CriterionKind.FIXED else self.spec.kind
        value, ess = criterion_value(self.system, kind)
        log_w = self.system.block_log_weights
        w = np.exp(log_w - log_w.max())
        self._estimates[self.system.time] = (np.bincount(self.system.states, weights=w,
                                                         minlength=self._k) / w.sum())
        self._criteria.append((self.system.time, value, ess))
        self._last_value = value
        return value

    def _summary(self, closed):
        s = self.system
        w = s.weights()
        return BlockSummary(
            s.block_index + 1, s.time,
            np.bincount(s.states, minlength=self._k).astype(np.float64),
            np.bincount(s.states, weights=w, minlength=self._k),
            float(logsumexp(s.block_log_weights) - np.log(s.num_particles)), closed)

    def conclude(self, trigger):
        if not trigger:
            return
        summary = self._summary(closed=True)
        self._blocks.append(summary)
        self._log_gamma += summary.log_mean_weight
        if self.resampler == "select":
            resample_selection_kernel(self.system, self.rng)
        else:
            resample_multinomial(self.system, self.rng)
        self._post.append(np.bincount(self.system.states, minlength=self._k).astype(np.float64))
        self._thresholds.append(self._threshold(self.system.block_index))

    def step(self):
        value = self.advance()
        self.conclude(self.wants_resampling(value))

    def fork(self, spec=None):
        other = copy.copy(self)
        other.system = self.system.copy()
        other._estimates = self._estimates.copy()
        other._blocks = list(self._blocks)
        other._post = list(self._post)
        other._criteria = list(self._criteria)
        other._thresholds = list(self._thresholds)
        if spec is not None:
            other.spec = spec
            other._thresholds[-1] = other._threshold(other.system.block_index)
        return other

    def run(self):
        while not self.done:
            self.step()
        return self.finish()

    def finish(self):
        s = self.system
        truncated = s.time > s.block_start
        blocks = list(self._blocks)
        log_gamma = self._log_gamma
        if truncated:
            tail = self._summary(closed=False)
            blocks.append(tail)
            log_gamma += tail.log_mean_weight
        return RunRecord(
            num_particles=s.num_particles, seed=self.rng.seed, replicate=self.rng.replicate,
            resampler=self.resampler, resampling_times=list(s.resampling_times),
            truncated=truncated, thresholds=list(self._thresholds),
            criteria=list(self._criteria), blocks=blocks, post_counts=list(self._post),
            estimates=self._estimates.copy(), log_gamma=float(log_gamma))


def run_adaptive(model, spec, num_particles, seed, horizon=None, replicate=0,
                 resampler="select", track_ancestry=False):
    """Adaptive SMC: resample whenever the empirical criterion reaches ``a_n``."""
    return Runner(model, spec, num_particles, seed, replicate, resampler, horizon,
                  track_ancestry).run()


def run_reference(model, times, num_particles, seed, horizon=None, replicate=0,
                  resampler="select", track_ancestry=False):
    """Reference SMC: resample exactly at the given deterministic times."""
    spec = CriterionSpec.fixed(times)
    return Runner(model, spec, num_particles, seed, replicate, resampler, horizon,
                  track_ancestry).run()


def predicted_block_mean(model, record, n, f, resampler=None):
    """``eta_{n-1}^N K_n(f)`` computed exactly from the realized block-``n-1``
    configuration (for ``n = 0`` this is ``eta_0(f)``)."""
    f = np.asarray(f, dtype=np.float64)
    if n == 0:
        return float(model.initial @ f)
    from .exact import transition_matrix
    prev, cur = record.blocks[n - 1], record.blocks[n]
    bf = transition_matrix(model, prev.time, cur.time) @ f
    resampler = resampler or record.resampler
    w_sums = prev.weight_sums
    total_w = w_sums.sum()
    c = float(w_sums @ bf) / total_w
    if n == 1 or resampler == "select":
        # block 0 carries unit weights, so every particle is kept there
        return (float(w_sums @ bf) + (record.num_particles - total_w) * c) / record.num_particles
    return c
