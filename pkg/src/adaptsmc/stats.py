"""Closed-form concentration bounds and the Monte Carlo suites that test them.

Experiments return plain report objects whose verdicts are recomputed from
stored counts and moments by pure functions, so a verdict read back from a
CSV is reproduced exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
from scipy import stats as sps

from .exact import clt_variance, constants, local_field_variance
from .parallel import map_replicates
from .smc import predicted_block_mean, run_reference

DEFAULT_SLACK = 3.0
ZERO_VARIANCE = 1e-20


# ---------------------------------------------------------------------------
# constants and closed-form bounds
# ---------------------------------------------------------------------------

def _log_factorial(k):
    return math.lgamma(k + 1)


def khinchine_b(m):
    """Khinchine-type constant ``b(m)``.

    ``b(2k)^{2k} = (2k)! / (k! 2^k)`` is the ``2k``-th standard normal moment;
    ``b(2k+1)^{2k+1} = (2k+1)! / k! * 2^{-(k+1/2)} / sqrt(k+1/2)``.
    Factorials are exact integers up to ``m = 20`` and log-gamma beyond.
    """
    m = int(m)
    if m < 1:
        raise ValueError("khinchine_b needs m >= 1")
    k, odd = divmod(m, 2)
    if m <= 20:
        if odd:
            value = math.factorial(2 * k + 1) / math.factorial(k) * 2.0 ** -(k + 0.5) / math.sqrt(k + 0.5)
        else:
            value = math.factorial(2 * k) / (math.factorial(k) * 2 ** k)
        return value ** (1.0 / m)
    if odd:
        log_v = (_log_factorial(2 * k + 1) - _log_factorial(k) - (k + 0.5) * math.log(2)
                 - 0.5 * math.log(k + 0.5))
    else:
        log_v = _log_factorial(2 * k) - _log_factorial(k) - k * math.log(2)
    return math.exp(log_v / m)


def bound_main(eps, n_particles, sigma1, cap=True):
    """``6 exp(-N eps^2 / (8 sigma1))``, capped at 1 unless ``cap=False``."""
    value = 6.0 * math.exp(-n_particles * eps * eps / (8.0 * sigma1))
    return min(value, 1.0) if cap else value


def alpha_n(eps, sigma_sq, sigma1):
    """``(s2 / (3 s1 eps)) (sqrt(1 + 6 s1 eps / s2) - 1)``; tends to 1 as eps -> 0."""
    if eps <= 0:
        return 1.0
    x = 6.0 * sigma1 * eps / sigma_sq
    # sqrt(1+x) - 1 = x / (sqrt(1+x) + 1), stable for small x
    return 2.0 / (math.sqrt(1.0 + x) + 1.0)


def bound_improved(eps, n_particles, sigma_sq, sigma1):
    a = alpha_n(eps, sigma_sq, sigma1)
    return 6.0 * math.exp(-n_particles * eps * eps * a * a / (2.0 * sigma_sq))


def bound_fk743(eps, n_particles, sigma_tilde_sq):
    return (1.0 + eps * math.sqrt(n_particles)) * math.exp(
        -n_particles * eps * eps / (2.0 * sigma_tilde_sq))


def uniform_quantile(rho, n_particles, delta, r_over, r_under=1.0, m=1):
    """Error level exceeded with probability at most ``rho`` under mixing."""
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    return (4.0 * r_over / delta ** 2) * math.sqrt(
        2.0 * m * r_under * r_over / (n_particles * delta) * math.log(6.0 / rho))


def bound_table(sigma1, sigma_sq, sigma_tilde_sq, eps_grid, n_grid):
    """Rows ``(eps, N, main, improved, fk743, improved < fk743)``."""
    rows = []
    for n_particles in n_grid:
        for eps in eps_grid:
            imp = bound_improved(eps, n_particles, sigma_sq, sigma1)
            fk = bound_fk743(eps, n_particles, sigma_tilde_sq)
            rows.append({"eps": float(eps), "N": int(n_particles),
                         "main": bound_main(eps, n_particles, sigma1, cap=False),
                         "improved": imp, "fk743": fk, "improved_smaller": bool(imp < fk)})
    return rows


# ---------------------------------------------------------------------------
# interval estimates
# ---------------------------------------------------------------------------

def wilson_interval(k, n, level=0.95):
    """Two-sided Wilson score interval for ``k`` successes in ``n`` trials."""
    if n <= 0:
        raise ValueError("need at least one trial")
    z = NormalDist().inv_cdf(0.5 + level / 2.0)
    return _wilson(k, n, z)


def wilson_upper(k, n, level=0.99):
    """One-sided Wilson upper confidence limit."""
    z = NormalDist().inv_cdf(level)
    return _wilson(k, n, z)[1]


def _wilson(k, n, z):
    p = k / n
    z2 = z * z
    centre = (p + z2 / (2 * n)) / (1 + z2 / n)
    half = z / (1 + z2 / n) * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n))
    lo = 0.0 if k == 0 else max(0.0, centre - half)
    hi = 1.0 if k == n else min(1.0, centre + half)
    return lo, hi


def oscillation(f):
    f = np.asarray(f, dtype=np.float64)
    return float(f.max() - f.min())


def _check_osc(f):
    if oscillation(f) > 1.0 + 1e-12:
        raise ValueError("test function must have oscillation at most 1")


def _variance_se(x):
    """Sample variance and its standard error from the fourth central moment."""
    x = np.asarray(x, dtype=np.float64)
    r = x.size
    c = x - x.mean()
    var = float(c @ c / (r - 1))
    m4 = float(np.mean(c ** 4))
    se = math.sqrt(max(m4 - (c @ c / r) ** 2, 0.0) / r)
    return var, se


def _lm_norm(x, m):
    """``(E|x|^m)^{1/m}`` and its delta-method standard error."""
    y = np.abs(np.asarray(x, dtype=np.float64)) ** m
    mu = float(y.mean())
    se_mu = float(y.std(ddof=1) / math.sqrt(y.size)) if y.size > 1 else 0.0
    if mu == 0:
        return 0.0, 0.0
    value = mu ** (1.0 / m)
    return value, value / (m * mu) * se_mu


# ---------------------------------------------------------------------------
# replicate harness
# ---------------------------------------------------------------------------

def reference_replicates(model, schedule, num_particles, replicates, seed, blocks,
                         resampler="select", threads=None):
    """Run ``replicates`` reference systems up to the last requested block.

    Returns the list of :class:`RunRecord` in replicate order.
    """
    blocks = list(blocks)
    last = max(blocks)
    if last >= len(schedule.times):
        raise ValueError(f"block {last} beyond schedule {list(schedule.times)}")
    horizon = schedule.times[last] if last > 0 else 1
    times = [t for t in schedule.times if t <= horizon]

    def one(r):
        return run_reference(model, times, num_particles, seed, horizon=horizon,
                             replicate=r, resampler=resampler)

    return map_replicates(one, range(replicates), threads)


def block_errors(model, schedule, records, f, blocks):
    """Array ``(R, len(blocks))`` of ``eta_n^N(f) - eta_n(f)``."""
    f = np.asarray(f, dtype=np.float64)
    exact = [float(schedule.predicted_marginals[n] @ f) for n in blocks]
    return np.array([[rec.block_estimate(n, f) - e for n, e in zip(blocks, exact)]
                     for rec in records])


# ---------------------------------------------------------------------------
# concentration
# ---------------------------------------------------------------------------

@dataclass
class TailExperiment:
    """Exceedance counts of ``|eta_n^N(f) - eta_n(f)| >= eps``."""

    f: np.ndarray
    blocks: list
    eps_grid: list
    num_particles: int
    replicates: int
    sigma1: dict
    counts: dict = field(default_factory=dict)
    level: float = 0.99

    def rows(self):
        out = []
        for n in self.blocks:
            for eps in self.eps_grid:
                k = self.counts[(n, eps)]
                bound = bound_main(eps, self.num_particles, self.sigma1[n])
                hi = wilson_upper(k, self.replicates, self.level)
                out.append({"block": n, "eps": eps, "N": self.num_particles,
                            "exceedances": k, "R": self.replicates,
                            "freq": k / self.replicates, "wilson_hi": hi,
                            "bound": bound, "ok": hi <= bound})
        return out

    @property
    def passed(self):
        return tail_verdict(self.rows())


def tail_verdict(rows):
    """PASS iff every upper confidence limit stays below its bound."""
    return all(float(r["wilson_hi"]) <= float(r["bound"]) for r in rows)


def tail_experiment(model, schedule, f, blocks, eps_grid, num_particles, replicates, seed,
                    sigma1=None, resampler="select", level=0.99, threads=None):
    """Concentration check for the reference algorithm.

    ``sigma1`` maps block index to the constant used in the bound; by
    default it comes from :func:`adaptsmc.exact.constants`.
    """
    _check_osc(f)
    blocks = list(blocks)
    if sigma1 is None:
        rep = constants(model, schedule)
        sigma1 = {n: float(rep.sigma1[n]) for n in blocks}
    records = reference_replicates(model, schedule, num_particles, replicates, seed, blocks,
                                   resampler, threads)
    err = np.abs(block_errors(model, schedule, records, f, blocks))
    exp = TailExperiment(np.asarray(f, dtype=np.float64), blocks, [float(e) for e in eps_grid],
                         num_particles, replicates, dict(sigma1), level=level)
    for j, n in enumerate(blocks):
        for eps in exp.eps_grid:
            exp.counts[(n, eps)] = int(np.count_nonzero(err[:, j] >= eps))
    return exp


# ---------------------------------------------------------------------------
# bias and L_m norms
# ---------------------------------------------------------------------------

@dataclass
class BiasReport:
    rows: list
    lm_rows: list

    @property
    def passed(self):
        return bias_verdict(self.rows, self.lm_rows)


def bias_verdict(rows, lm_rows, slack=DEFAULT_SLACK):
    ok = all(float(r["N_abs_bias"]) <= float(r["sigma1"]) + slack * float(r["N_se"]) for r in rows)
    return ok and all(float(r["lm"]) <= float(r["bound"]) + slack * float(r["se"]) for r in lm_rows)


def bias_and_lm_experiment(model, schedule, f, blocks, num_particles, replicates, seed,
                           m_list=(1, 2, 4), resampler="select", threads=None, report=None):
    _check_osc(f)
    blocks = list(blocks)
    rep = report or constants(model, schedule)
    records = reference_replicates(model, schedule, num_particles, replicates, seed, blocks,
                                   resampler, threads)
    err = block_errors(model, schedule, records, f, blocks)
    rows, lm_rows = [], []
    sqrt_n = math.sqrt(num_particles)
    for j, n in enumerate(blocks):
        e = err[:, j]
        bias = float(e.mean())
        se = float(e.std(ddof=1) / math.sqrt(replicates))
        s1, s2 = float(rep.sigma1[n]), float(rep.sigma2[n])
        rows.append({"block": n, "N": num_particles, "R": replicates, "bias": bias, "se": se,
                     "N_abs_bias": num_particles * abs(bias), "N_se": num_particles * se,
                     "sigma1": s1})
        for m in m_list:
            value, value_se = _lm_norm(e, m)
            bound = khinchine_b(2 * m) ** 2 * s1 / sqrt_n + khinchine_b(m) * s2
            lm_rows.append({"block": n, "m": m, "N": num_particles,
                            "lm": sqrt_n * value, "se": sqrt_n * value_se, "bound": bound})
    return BiasReport(rows, lm_rows)


# ---------------------------------------------------------------------------
# local sampling fields
# ---------------------------------------------------------------------------

@dataclass
class LocalFieldReport:
    rows: list
    lm_rows: list

    @property
    def passed(self):
        return local_field_verdict(self.rows, self.lm_rows)


def local_field_verdict(rows, lm_rows, slack=DEFAULT_SLACK):
    for r in rows:
        if abs(float(r["mean"])) > slack * float(r["mean_se"]):
            return False
        if abs(float(r["var"]) - float(r["var_exact"])) > slack * float(r["var_se"]):
            return False
    return all(float(r["lm"]) <= float(r["bound"]) + slack * float(r["se"]) for r in lm_rows)


def local_fields(model, records, f, n):
    """``V_n^N(f)`` for every record."""
    f = np.asarray(f, dtype=np.float64)
    out = np.empty(len(records))
    for i, rec in enumerate(records):
        centre = predicted_block_mean(model, rec, n, f)
        out[i] = math.sqrt(rec.num_particles) * (rec.block_estimate(n, f) - centre)
    return out


def local_field_experiment(model, schedule, f, blocks, num_particles, replicates, seed,
                           m_list=(1, 2, 4), resampler="select", threads=None):
    blocks = list(blocks)
    records = reference_replicates(model, schedule, num_particles, replicates, seed, blocks,
                                   resampler, threads)
    osc = oscillation(f)
    rows, lm_rows = [], []
    for n in blocks:
        v = local_fields(model, records, f, n)
        var, var_se = _variance_se(v)
        rows.append({"block": n, "N": num_particles, "R": replicates,
                     "mean": float(v.mean()), "mean_se": float(v.std(ddof=1) / math.sqrt(replicates)),
                     "var": var, "var_se": var_se,
                     "var_exact": local_field_variance(model, schedule, f, n, resampler)})
        for m in m_list:
            value, se = _lm_norm(v, m)
            lm_rows.append({"block": n, "m": m, "lm": value, "se": se,
                            "bound": khinchine_b(m) * osc})
    return LocalFieldReport(rows, lm_rows)


# ---------------------------------------------------------------------------
# central limit theorem
# ---------------------------------------------------------------------------

@dataclass
class CLTReport:
    rows: list

    @property
    def passed(self):
        return clt_verdict(self.rows)


def clt_verdict(rows, ratio_range=(0.9, 1.1), max_skew=0.2, max_kurt=0.5):
    for r in rows:
        exact = float(r["var_exact"])
        if exact <= ZERO_VARIANCE:
            # constant test functions: only round-off noise is allowed
            if float(r["var"]) > ZERO_VARIANCE:
                return False
            continue
        ratio = float(r["var"]) / exact
        if not ratio_range[0] <= ratio <= ratio_range[1]:
            return False
        if abs(float(r["skewness"])) >= max_skew or abs(float(r["excess_kurtosis"])) >= max_kurt:
            return False
    return True


def clt_experiment(model, schedule, f, blocks, num_particles, replicates, seed,
                   resampler="select", threads=None):
    blocks = list(blocks)
    records = reference_replicates(model, schedule, num_particles, replicates, seed, blocks,
                                   resampler, threads)
    err = math.sqrt(num_particles) * block_errors(model, schedule, records, f, blocks)
    rows = []
    for j, n in enumerate(blocks):
        w = err[:, j]
        var, var_se = _variance_se(w)
        exact = clt_variance(model, schedule, f, n, resampler)
        degenerate = float(np.ptp(w)) == 0.0
        rows.append({
            "block": n, "N": num_particles, "R": replicates, "mean": float(w.mean()),
            "var": var, "var_se": var_se, "var_exact": exact,
            "ratio": var / exact if exact > ZERO_VARIANCE else float("nan"),
            "skewness": 0.0 if degenerate else float(sps.skew(w)),
            "excess_kurtosis": 0.0 if degenerate else float(sps.kurtosis(w)),
        })
    return CLTReport(rows)
