"""Shared-randomness coupling of the adaptive and reference algorithms.

Both algorithms read identical keyed draws, so while their resampling
decisions agree they are the same particle system.  :func:`run_coupled`
evolves one system and forks it only at the first step where the adaptive
trigger and the deterministic schedule disagree.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .criteria import CriterionSpec, draw_thresholds
from .parallel import map_replicates
from .smc import Runner
from .stats import wilson_interval


@dataclass
class CoupledRun:
    adaptive_times: list
    reference_times: list
    first_divergence: int | None
    shared_seed: int
    replicate: int = 0
    adaptive: object = None
    reference: object = None


def first_divergence(adaptive_times, reference_times, m=None):
    """First block index ``n <= m`` with ``t_n^N != t_n`` (missing entries differ
    from present ones), or ``None``."""
    size = max(len(adaptive_times), len(reference_times))
    if m is not None:
        size = min(size, m + 1)
    for n in range(size):
        a = adaptive_times[n] if n < len(adaptive_times) else None
        r = reference_times[n] if n < len(reference_times) else None
        if a != r:
            return n
    return None


def run_coupled(model, spec, schedule, num_particles, seed, m=None, replicate=0,
                resampler="select", keep_records=True):
    """Run the adaptive and reference systems on shared randomness.

    ``schedule`` is the deterministic schedule computed with the same
    thresholds as ``spec``.  The shared system is forked at the first
    disagreement and both branches then run to the horizon.
    """
    ref_times = list(schedule.times)
    ref_spec = CriterionSpec.fixed(ref_times)
    ref_set = set(ref_times)
    adaptive = Runner(model, spec, num_particles, seed, replicate, resampler)
    reference = None
    while not adaptive.done:
        value = adaptive.advance()
        want = adaptive.wants_resampling(value)
        if reference is None and want != (adaptive.system.time in ref_set):
            reference = adaptive.fork(ref_spec)
            reference.conclude(not want)
        elif reference is not None:
            reference.step()
        adaptive.conclude(want)
    while reference is not None and not reference.done:
        reference.step()
    a_rec = adaptive.finish()
    r_rec = reference.finish() if reference is not None else a_rec
    div = first_divergence(a_rec.resampling_times, r_rec.resampling_times, m)
    return CoupledRun(a_rec.resampling_times, r_rec.resampling_times, div, int(seed), replicate,
                      a_rec if keep_records else None, r_rec if keep_records else None)


def sample_thresholds(rng, lower, upper, m):
    """``a_0 .. a_m`` drawn uniformly on the open interval ``(lower, upper)``."""
    return draw_thresholds(rng, lower, upper, m + 1)


@dataclass
class SweepReport:
    rows: list
    fit: dict

    @property
    def passed(self):
        return sweep_verdict(self.rows)


def sweep_verdict(rows, require_zero_at_largest=True):
    """Failure frequencies never increase significantly with N, and the
    largest N shows no failure."""
    for i, a in enumerate(rows):
        for b in rows[i + 1:]:
            if float(b["wilson_lo"]) > float(a["wilson_hi"]):
                return False
    if require_zero_at_largest and rows and int(rows[-1]["failures"]) != 0:
        return False
    return True


def fit_decay(rows):
    """Least-squares slope of ``log(freq)`` against ``N`` over non-zero frequencies."""
    pts = [(int(r["N"]), float(r["freq"])) for r in rows if int(r["failures"]) > 0]
    fit = {"points": [[n, f] for n, f in pts], "slope": None, "intercept": None}
    if len(pts) >= 2:
        x = np.array([p[0] for p in pts], dtype=np.float64)
        y = np.log([p[1] for p in pts])
        slope, intercept = np.polyfit(x, y, 1)
        fit["slope"], fit["intercept"] = float(slope), float(intercept)
    return fit


def failure_sweep(model, spec, schedule, m, n_list, replicates, seed, resampler="select",
                  level=0.95, threads=None):
    """Coupling-failure frequency for each ``N`` over ``replicates`` seeds."""
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("N list must be increasing")
    rows = []
    for n in n_list:
        def one(r, n=n):
            run = run_coupled(model, spec, schedule, n, seed, m, replicate=r,
                              resampler=resampler, keep_records=False)
            return run.first_divergence is not None

        failures = sum(map_replicates(one, range(replicates), threads))
        lo, hi = wilson_interval(failures, replicates, level)
        rows.append({"N": n, "failures": int(failures), "R": int(replicates),
                     "freq": failures / replicates, "wilson_lo": lo, "wilson_hi": hi})
    return SweepReport(rows, fit_decay(rows))
