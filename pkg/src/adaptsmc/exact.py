"""Exact finite-state oracle.

Everything here is a deterministic function of a validated
:class:`~adaptsmc.model.FiniteModel`: Feynman-Kac marginals, the limiting
resampling criteria, the deterministic resampling times they induce, the
semigroup constants that enter the concentration bounds, and the asymptotic
variances of the particle estimates.

Conventions
-----------
Base times are one-based inside this module: ``M_s = kernels[s - 1]`` and
``G_s = potentials[s - 1]`` for ``1 <= s <= T``.  For a block ``(t0, t1]``:

* ``B`` is the pure transition ``M_{t0+1} ... M_{t1}``,
* ``A`` is the weighted transition ``prod_s M_s diag(G_s)``, so
  ``A[x, y] = E[W 1{X_t1 = y} | X_t0 = x]`` with ``W`` the block weight,
* ``A2`` is the same with ``G_s**2``.

Block ``n >= 1`` spans ``(t_{n-1}, t_n]`` and its potential is the path
weight accumulated over that span; block 0 carries the unit potential.  The
particle measure at block ``n`` is the *predicted* law at ``t_n`` (weighted
by all earlier blocks, not by block ``n`` itself).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .criteria import CriterionKind, Thresholds
from .errors import DegenerateExpectation, DegenerateThreshold, EnumerationCapExceeded

DEFAULT_ENUMERATION_CAP = 10 ** 6


# ---------------------------------------------------------------------------
# forward recursions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FKMarginals:
    """Per-time marginals of the Feynman-Kac flow on base times ``0..T``.

    ``predicted[s]`` is the law of ``X_s`` weighted by ``G_1..G_{s-1}``;
    ``updated[s]`` also includes ``G_s``.  ``gamma[s]`` is
    ``E[G_1(X_1) ... G_s(X_s)]`` (so ``gamma[0] = 1``).
    """

    predicted: np.ndarray
    updated: np.ndarray
    log_gamma: np.ndarray

    @property
    def gamma(self):
        return np.exp(self.log_gamma)


def fk_marginals(model):
    t_max, k = model.horizon, model.num_states
    predicted = np.empty((t_max + 1, k))
    updated = np.empty((t_max + 1, k))
    log_gamma = np.zeros(t_max + 1)
    predicted[0] = updated[0] = model.initial
    for s in range(1, t_max + 1):
        pred = updated[s - 1] @ model.kernel(s)
        weighted = pred * model.potential(s)
        mass = weighted.sum()
        predicted[s] = pred / pred.sum()
        updated[s] = weighted / mass
        log_gamma[s] = log_gamma[s - 1] + np.log(mass)
    return FKMarginals(predicted, updated, log_gamma)


def transition_matrix(model, t0, t1, power=0):
    """``prod_{t0 < s <= t1} M_s diag(G_s**power)``; identity when ``t0 == t1``."""
    out = np.eye(model.num_states)
    for s in range(t0 + 1, t1 + 1):
        step = model.kernel(s)
        if power:
            step = step * model.potential(s) ** power
        out = out @ step
    return out


def criterion_curve(model, kind, start, law, end=None):
    """Limiting criterion values for ``s = start + 1 .. end``.

    ``law`` is the terminal marginal at ``start`` of the updated measure the
    block starts from.  Returns an array of length ``end - start``.
    """
    kind = CriterionKind(kind)
    end = model.horizon if end is None else end
    law = np.asarray(law, dtype=np.float64)
    values = np.empty(end - start)
    if kind is CriterionKind.ENTROPY:
        p = law
        acc = 0.0
        for j, s in enumerate(range(start + 1, end + 1)):
            p = p @ model.kernel(s)
            acc += float(p @ -model.log_potential(s))
            values[j] = acc
        return values
    if kind is not CriterionKind.CV2:
        raise ValueError(f"no limiting criterion for {kind.value!r}")
    # Two weighted recursions, renormalized each step with log-scales.
    v1, v2 = law.copy(), law.copy()
    log1 = log2 = 0.0
    for j, s in enumerate(range(start + 1, end + 1)):
        g = model.potential(s)
        v1 = (v1 @ model.kernel(s)) * g
        v2 = (v2 @ model.kernel(s)) * g * g
        c1, c2 = v1.sum(), v2.sum()
        if not (c1 > 0 and np.isfinite(c1)):
            raise DegenerateExpectation(f"E[W] vanished at time {s}")
        log1 += np.log(c1)
        log2 += np.log(c2)
        v1, v2 = v1 / c1, v2 / c2
        # E[W^2] >= E[W]^2, so negative values are round-off
        values[j] = max(np.expm1(log2 - 2.0 * log1), 0.0)
    return values


def limiting_cv2(model, start, law, s):
    """``E[W^2] / E[W]^2 - 1`` for the block weight over ``(start, s]``."""
    _check_block(model, start, s)
    return float(criterion_curve(model, CriterionKind.CV2, start, law, s)[-1])


def limiting_entropy(model, start, law, s):
    """``-E[log W]`` for the block weight over ``(start, s]``."""
    _check_block(model, start, s)
    return float(criterion_curve(model, CriterionKind.ENTROPY, start, law, s)[-1])


def _check_block(model, start, s):
    if not 0 <= start < s <= model.horizon:
        raise ValueError(f"need 0 <= start < s <= {model.horizon}, got ({start}, {s})")


# ---------------------------------------------------------------------------
# deterministic schedule
# ---------------------------------------------------------------------------

@dataclass
class BlockSchedule:
    """Deterministic resampling times and the flow they induce.

    ``times[n]`` is ``t_n``; when the last criterion scan reached the horizon
    without triggering, ``truncated`` is set and the open tail
    ``(times[-1], horizon]`` is *not* a block time.  ``curves[n]`` holds the
    criterion values for ``s = t_n + 1 .. t_{n+1}`` (or up to the horizon for
    the truncated tail) and ``thresholds[n]`` the level ``a_n`` it was
    compared against.
    """

    times: list
    horizon: int
    truncated: bool
    kind: CriterionKind = None
    thresholds: list = field(default_factory=list)
    curves: list = field(default_factory=list)
    predicted_marginals: list = field(default_factory=list)
    updated_marginals: list = field(default_factory=list)

    @property
    def num_blocks(self):
        return len(self.times)

    def block_end(self, n):
        return self.times[n + 1] if n + 1 < len(self.times) else self.horizon

    def curve_points(self):
        """Yield ``(block, s, value)`` for every recorded criterion value."""
        for n, curve in enumerate(self.curves):
            for j, v in enumerate(curve):
                yield n, self.times[n] + 1 + j, float(v)


def deterministic_times(model, kind, thresholds):
    """Scan the limiting criterion block by block.

    ``t_{n+1}`` is the first ``s > t_n`` whose criterion value is ``>= a_n``.
    A block that never triggers is closed at the horizon and flagged.
    """
    kind = CriterionKind(kind)
    if not isinstance(thresholds, Thresholds):
        thresholds = Thresholds(thresholds)
    t_max = model.horizon
    times = [0]
    law = model.initial.copy()
    sched = BlockSchedule(times=times, horizon=t_max, truncated=False, kind=kind)
    sched.predicted_marginals.append(law.copy())
    sched.updated_marginals.append(law.copy())
    while times[-1] < t_max:
        n = len(times) - 1
        start = times[-1]
        a = thresholds[n]
        values = criterion_curve(model, kind, start, law, t_max)
        hits = np.flatnonzero(values >= a)
        sched.thresholds.append(a)
        if hits.size == 0:
            sched.curves.append(values)
            sched.truncated = True
            break
        stop = start + int(hits[0]) + 1
        sched.curves.append(values[: hits[0] + 1])
        pred = law @ transition_matrix(model, start, stop)
        upd = law @ transition_matrix(model, start, stop, power=1)
        law = upd / upd.sum()
        times.append(stop)
        sched.predicted_marginals.append(pred / pred.sum())
        sched.updated_marginals.append(law.copy())
    return sched


def schedule_from_times(model, times):
    """A :class:`BlockSchedule` for user-supplied times (no criterion)."""
    times = [int(t) for t in times]
    if not times or times[0] != 0 or any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("times must be strictly increasing from 0")
    if times[-1] > model.horizon:
        raise ValueError("times exceed the horizon")
    sched = BlockSchedule(times=times, horizon=model.horizon,
                          truncated=times[-1] < model.horizon)
    law = model.initial.copy()
    sched.predicted_marginals.append(law.copy())
    sched.updated_marginals.append(law.copy())
    for start, stop in zip(times, times[1:]):
        pred = law @ transition_matrix(model, start, stop)
        upd = law @ transition_matrix(model, start, stop, power=1)
        law = upd / upd.sum()
        sched.predicted_marginals.append(pred / pred.sum())
        sched.updated_marginals.append(law.copy())
    return sched


def epsilon_m(schedule, m=None):
    """Smallest gap ``|H(s) - a_n|`` over blocks ``n <= m``.

    Uses ``H(t_n) = 0`` at every block start.  The truncated tail, when
    present, counts as block ``len(times) - 1``.  Returns ``(eps, (n, s))``.
    """
    if not schedule.curves:
        raise ValueError("schedule carries no criterion curves")
    last = len(schedule.curves) - 1 if m is None else min(m, len(schedule.curves) - 1)
    best, where = np.inf, None
    for n in range(last + 1):
        a = schedule.thresholds[n]
        start = schedule.times[n]
        pts = np.concatenate([[0.0], schedule.curves[n]])
        gaps = np.abs(pts - a)
        exact = np.flatnonzero(pts == a)
        if exact.size:
            raise DegenerateThreshold(n, start + int(exact[0]), a)
        j = int(np.argmin(gaps))
        if gaps[j] < best:
            best, where = float(gaps[j]), (n, start + j)
    return best, where


# ---------------------------------------------------------------------------
# block operators and constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockOperators:
    """Per-block matrices; index ``n`` covers ``(t_{n-1}, t_n]``, ``n >= 1``.

    ``weighted[n]`` (``A_n``) carries the block weight at arrival, so
    ``product(p, n) = A_{p+1} ... A_n`` is the terminal-coordinate semigroup
    of the updated flow.  ``weighted2`` uses squared potentials and
    ``transition`` is the unweighted block kernel.
    """

    times: tuple
    weighted: tuple
    weighted2: tuple
    transition: tuple

    def product(self, p, n):
        out = np.eye(self.weighted[1].shape[0] if len(self.weighted) > 1 else 1)
        for k in range(p + 1, n + 1):
            out = out @ self.weighted[k]
        return out

    def semigroup(self, p, n):
        """Terminal part of the block semigroup from ``p`` to ``n``.

        ``A_{p+1} ... A_{n-1} B_n`` for ``p < n``: the block-``p`` potential
        multiplies on the left and is handled by the caller.
        """
        if p == n:
            return np.eye(self.transition[n].shape[0] if n else self.weighted[1].shape[0])
        out = self.product(p, n - 1)
        return out @ self.transition[n]


def block_operators(model, schedule):
    times = tuple(schedule.times)
    w, w2, tr = [None], [None], [None]
    for start, stop in zip(times, times[1:]):
        w.append(transition_matrix(model, start, stop, power=1))
        w2.append(transition_matrix(model, start, stop, power=2))
        tr.append(transition_matrix(model, start, stop))
    if len(times) == 1:
        k = model.num_states
        w, w2, tr = [np.eye(k)], [np.eye(k)], [np.eye(k)]
    return BlockOperators(times, tuple(w), tuple(w2), tuple(tr))


def log_weight_extremes(model, t0, t1, log_terminal=None):
    """Max and min over admissible paths of ``sum log G_s(x_s) + log_terminal(x_t1)``.

    Paths cover base times ``t0 + 1 .. t1``, start from any state at ``t0``
    and only use transitions of positive probability.  With ``t0 == t1`` the
    path is the single state at ``t0``.
    """
    k = model.num_states
    hi = np.zeros(k)
    lo = np.zeros(k)
    for s in range(t0 + 1, t1 + 1):
        allowed = model.kernel(s) > 0
        lg = model.log_potential(s)
        hi = np.where(allowed, hi[:, None], -np.inf).max(axis=0) + lg
        lo = np.where(allowed, lo[:, None], np.inf).min(axis=0) + lg
    if log_terminal is not None:
        hi = hi + log_terminal
        lo = lo + log_terminal
    return float(hi[np.isfinite(hi)].max()), float(lo[np.isfinite(lo)].min())


def max_pairwise_tv(rows):
    """Dobrushin coefficient of a kernel given by its (unnormalized) rows."""
    rows = np.asarray(rows, dtype=np.float64)
    rows = rows / rows.sum(axis=1, keepdims=True)
    diff = np.abs(rows[:, None, :] - rows[None, :, :]).sum(axis=-1)
    return float(0.5 * diff.max())


@dataclass
class ConstantsReport:
    """Semigroup and concentration constants for the block model.

    ``q[p, n]`` and ``beta[p, n]`` are filled for ``p <= n`` (NaN below the
    diagonal).  ``delta[p]`` is the one-step minorization constant of the
    transition out of block ``p`` and ``r[k, l]`` the ratio bound of the block
    potentials ``k .. l-1``.
    """

    q: np.ndarray
    beta: np.ndarray
    sigma1: np.ndarray
    sigma2: np.ndarray
    sigma_sq: np.ndarray
    sigma_tilde_sq: np.ndarray
    delta: np.ndarray
    r: np.ndarray
    mixing_available: bool
    q_bound_ok: np.ndarray = None
    beta_bound_ok: np.ndarray = None
    beta_bound: np.ndarray = None
    uniform_bounds: dict = None

    @property
    def num_blocks(self):
        return self.q.shape[0]


def _block_log_span(times, k):
    # base-time span carrying the potential of block k (empty for block 0)
    return (times[k - 1], times[k]) if k >= 1 else (0, 0)


def constants(model, schedule, operators=None):
    ops = operators or block_operators(model, schedule)
    times = list(schedule.times)
    nb = len(times)
    k = model.num_states
    q = np.full((nb, nb), np.nan)
    beta = np.full((nb, nb), np.nan)
    for n in range(nb):
        q[n, n] = 1.0
        beta[n, n] = 1.0 if k > 1 else 0.0
        for p in range(n):
            rows = ops.semigroup(p, n)
            beta[p, n] = max_pairwise_tv(rows)
            log_v = np.log(rows.sum(axis=1))
            t0, t1 = _block_log_span(times, p)
            hi, lo = log_weight_extremes(model, t0, t1, log_v)
            q[p, n] = float(np.exp(hi - lo))

    sigma1 = np.array([4 * np.sum(q[: n + 1, n] ** 3 * beta[: n + 1, n]) for n in range(nb)])
    sigma2 = np.array([2 * np.sum(q[: n + 1, n] * beta[: n + 1, n]) for n in range(nb)])
    sigma_sq = np.array([4 * np.sum(q[: n + 1, n] ** 2 * beta[: n + 1, n] ** 2) for n in range(nb)])
    sigma_tilde_sq = np.array([4 * np.sum(q[: n + 1, n] * beta[: n + 1, n]) ** 2 for n in range(nb)])

    # minorization of the transition leaving block p: only its first base
    # step differs between two starting states
    delta = np.zeros(max(nb - 1, 0))
    for p in range(nb - 1):
        m = model.kernel(times[p] + 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = m[:, None, :] / m[None, :, :]
        ratio = np.where(m[None, :, :] > 0, ratio, np.inf)
        delta[p] = float(min(ratio.min(), 1.0))

    r = np.ones((nb + 1, nb + 1))
    for a in range(nb):
        for b in range(a + 1, nb + 1):
            lo_t = times[a - 1] if a >= 1 else 0
            hi_t = times[b - 1]
            if hi_t > lo_t:
                hi, lo = log_weight_extremes(model, lo_t, hi_t)
                r[a, b] = float(np.exp(hi - lo))

    report = ConstantsReport(q, beta, sigma1, sigma2, sigma_sq, sigma_tilde_sq, delta, r,
                             mixing_available=bool(delta.size and np.all(delta > 0)))
    if report.mixing_available:
        _mixing_checks(report)
    return report


def _mixing_checks(rep):
    """Semigroup inequalities under one-step mixing (m = 1)."""
    nb = rep.num_blocks
    delta, r = rep.delta, rep.r
    q_ok = np.ones((nb, nb), dtype=bool)
    b_ok = np.ones((nb, nb), dtype=bool)
    b_bound = np.full((nb, nb), np.nan)
    for p in range(nb):
        for n in range(p + 1, nb):
            q_ok[p, n] = rep.q[p, n] <= r[p, p + 1] / delta[p] * (1 + 1e-12)
            factors = [1.0 - delta[j] ** 2 / r[j, j + 1] for j in range(p, n)]
            b_bound[p, n] = float(np.prod(factors))
            b_ok[p, n] = rep.beta[p, n] <= b_bound[p, n] * (1 + 1e-12)
    rep.q_bound_ok, rep.beta_bound_ok, rep.beta_bound = q_ok, b_ok, b_bound

    d = float(delta.min())
    r_over = float(max(r[p, p + 1] for p in range(nb - 1)))
    r_under = 1.0
    series = {}
    for alpha in (0, 1, 2, 3):
        bound = r_under * r_over ** alpha / d ** (2 + alpha)
        values = np.array([np.sum(rep.q[: n + 1, n] ** alpha * rep.beta[: n + 1, n])
                           for n in range(nb)])
        series[alpha] = (values, bound, bool(np.all(values <= bound * (1 + 1e-12))))
    rep.uniform_bounds = {
        "delta": d, "r_over": r_over, "r_under": r_under, "m": 1, "series": series,
        "sigma1_ok": bool(np.all(rep.sigma1 <= 4 * series[3][1] * (1 + 1e-12))),
        "sigma2_ok": bool(np.all(rep.sigma2 <= 2 * series[1][1] * (1 + 1e-12))),
        "sigma_sq_ok": bool(np.all(rep.sigma_sq <= 4 * series[2][1] * (1 + 1e-12))),
    }


# ---------------------------------------------------------------------------
# asymptotic variances
# ---------------------------------------------------------------------------

def _block_moments(model, schedule, ops):
    """Per block ``p``: ``(P(y), E[w; y], E[w^2; y])`` at ``t_p`` under ``eta_p``."""
    out = []
    law = model.initial
    out.append((law, law, law))
    for p in range(1, len(schedule.times)):
        hat = schedule.updated_marginals[p - 1]
        out.append((hat @ ops.transition[p], hat @ ops.weighted[p], hat @ ops.weighted2[p]))
    return out


def _local_term(moments_prev, h1, h2, selection):
    m0, m1, m2 = moments_prev
    hat = m1 / m1.sum()
    c1, c2 = float(hat @ h1), float(hat @ h2)
    if not selection:
        return c2 - c1 * c1
    return float(m1 @ (h2 - c2 - 2 * h1 * c1 + 2 * c1 * c1) - m2 @ (h1 - c1) ** 2 + c2 - c1 * c1)


def _terminal_function(f, k):
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (k,) or not np.all(np.isfinite(f)):
        raise ValueError(f"test function must be {k} finite values")
    return f


def clt_variance(model, schedule, f, n, resampler="select", method="moments",
                 cap=DEFAULT_ENUMERATION_CAP):
    """Asymptotic variance of ``sqrt(N) [eta_n^N - eta_n](f)``.

    Sums the local variances of the first-order fields ``D_{p,n} f`` over
    ``p = 0..n``.  ``method="moments"`` evaluates each term from block moment
    vectors; ``method="enumerate"`` sums explicitly over within-block paths
    and raises :class:`EnumerationCapExceeded` past ``cap``.
    """
    f = _terminal_function(f, model.num_states)
    if not 0 <= n < len(schedule.times):
        raise ValueError(f"block {n} outside schedule with {len(schedule.times)} times")
    if method == "enumerate":
        return _clt_variance_enumerate(model, schedule, f, n, resampler, cap)
    if method != "moments":
        raise ValueError(f"unknown method {method!r}")
    ops = block_operators(model, schedule)
    mom = _block_moments(model, schedule, ops)
    selection = resampler == "select"
    fc = f - float(mom[n][0] @ f)
    total = 0.0
    for p in range(n + 1):
        if p == n:
            u, power = fc, 0
        else:
            rows = ops.semigroup(p, n)
            norm = float(mom[p][1] @ rows.sum(axis=1))
            u, power = rows @ fc / norm, 1
        if p == 0:
            law = model.initial
            total += float(law @ u ** 2 - (law @ u) ** 2)
            continue
        h1 = (ops.weighted if power else ops.transition)[p] @ u
        h2 = (ops.weighted2 if power else ops.transition)[p] @ u ** 2
        # no resampling happens at t_0: the first transition is pure mutation
        total += _local_term(mom[p - 1], h1, h2, selection or p == 1)
    return max(total, 0.0)


def local_field_variance(model, schedule, f, n, resampler="select"):
    """Limiting variance of the one-step sampling field ``V_n(f)``."""
    f = _terminal_function(f, model.num_states)
    if n == 0:
        law = model.initial
        return float(law @ f ** 2 - (law @ f) ** 2)
    ops = block_operators(model, schedule)
    mom = _block_moments(model, schedule, ops)
    h1, h2 = ops.transition[n] @ f, ops.transition[n] @ f ** 2
    return max(_local_term(mom[n - 1], h1, h2, resampler == "select" or n == 1), 0.0)


# -- enumeration route --------------------------------------------------------

@dataclass(frozen=True)
class PathTable:
    """Explicit paths over base times ``base + 1 .. base + length``.

    One row per ``(start, path)`` pair of positive probability; ``prob`` is
    the path probability given the start state.
    """

    base: int
    start: np.ndarray
    paths: np.ndarray
    prob: np.ndarray

    @property
    def terminal(self):
        if self.paths.shape[1] == 0:
            return self.start
        return self.paths[:, -1]

    def weight(self, model, t0, t1, power=1):
        """Product of ``G_s(x_s)**power`` over ``t0 < s <= t1`` (within the span)."""
        out = np.ones(self.prob.shape[0])
        for s in range(t0 + 1, t1 + 1):
            out *= model.potential(s)[self.paths[:, s - self.base - 1]] ** power
        return out


def block_paths(model, t0, t1, cap=DEFAULT_ENUMERATION_CAP, block=None):
    """Enumerate every path over ``t0 + 1 .. t1`` from every start state."""
    k = model.num_states
    length = t1 - t0
    required = k ** length
    if required > cap:
        raise EnumerationCapExceeded(block, required, cap)
    paths = np.array(list(itertools.product(range(k), repeat=length)), dtype=np.int64)
    paths = paths.reshape(-1, length)
    starts = np.repeat(np.arange(k), paths.shape[0])
    paths = np.tile(paths, (k, 1))
    prob = np.ones(paths.shape[0])
    prev = starts
    for j in range(length):
        prob *= model.kernel(t0 + 1 + j)[prev, paths[:, j]]
        prev = paths[:, j]
    keep = prob > 0
    return PathTable(t0, starts[keep], paths[keep], prob[keep])


def _clt_variance_enumerate(model, schedule, f, n, resampler, cap):
    times = schedule.times
    k = model.num_states
    selection = resampler == "select"
    tables = [None] + [block_paths(model, times[p - 1], times[p], cap, block=p)
                       for p in range(1, n + 1)]

    # excursion law of block p: updated start law times path probability
    hat = model.initial.copy()
    laws, weights = [None], [None]
    for p in range(1, n + 1):
        tab = tables[p]
        w = tab.weight(model, times[p - 1], times[p])
        mass = hat[tab.start] * tab.prob
        laws.append(mass)
        weights.append(w)
        upd = np.bincount(tab.terminal, weights=mass * w, minlength=k)
        hat = upd / upd.sum()
    eta_n = model.initial if n == 0 else np.bincount(tables[n].terminal, weights=laws[n],
                                                     minlength=k)
    fc = f - float(eta_n @ f)

    total = 0.0
    for p in range(n + 1):
        if p == n:
            u = fc
            norm = 1.0
        else:
            span = block_paths(model, times[p], times[n], cap, block=(p, n))
            inner = span.weight(model, times[p], times[n - 1])
            u = np.bincount(span.start, weights=span.prob * inner * fc[span.terminal],
                            minlength=k)
            v = np.bincount(span.start, weights=span.prob * inner, minlength=k)
            if p == 0:
                norm = float(model.initial @ v)
            else:
                norm = float(np.sum(laws[p] * weights[p] * v[tables[p].terminal]))
        if p == 0:
            g = u / norm
            law = model.initial
            total += float(law @ g ** 2 - (law @ g) ** 2)
            continue
        tab = tables[p]
        g = u[tab.terminal] / norm
        if p < n:
            g = g * weights[p]
        h1 = np.bincount(tab.start, weights=tab.prob * g, minlength=k)
        h2 = np.bincount(tab.start, weights=tab.prob * g ** 2, minlength=k)
        if p == 1:
            out_mass, out_term, out_w = model.initial, np.arange(k), np.ones(k)
        else:
            out_mass, out_term, out_w = laws[p - 1], tables[p - 1].terminal, weights[p - 1]
        sel = out_mass * out_w
        c1 = float(np.sum(sel * h1[out_term]) / sel.sum())
        c2 = float(np.sum(sel * h2[out_term]) / sel.sum())
        keep = out_w if (selection or p == 1) else np.zeros_like(out_w)
        kg = keep * h1[out_term] + (1 - keep) * c1
        kg2 = keep * h2[out_term] + (1 - keep) * c2
        total += float(np.sum(out_mass * (kg2 - kg ** 2)))
    return max(total, 0.0)
