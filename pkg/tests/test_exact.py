import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptsmc.errors import DegenerateThreshold, EnumerationCapExceeded
from adaptsmc.exact import (block_operators, clt_variance, constants, criterion_curve,
                            deterministic_times, epsilon_m, fk_marginals, limiting_cv2,
                            limiting_entropy, local_field_variance, schedule_from_times,
                            transition_matrix)
from adaptsmc.model import homogeneous_model, make_model, reference_model

from conftest import (all_paths, brute_criterion, brute_marginals, brute_schedule,
                      path_weight_brute, random_model)


# -- marginals ---------------------------------------------------------------

def test_single_state_marginals():
    m = make_model([1.0], np.ones((4, 1, 1)), [[0.5], [0.4], [0.3], [0.2]])
    fk = fk_marginals(m)
    assert np.all(fk.updated == 1.0) and np.all(fk.predicted == 1.0)
    assert fk.gamma[-1] == pytest.approx(0.5 * 0.4 * 0.3 * 0.2, rel=1e-14)


def test_memoryless_kernel_predicted_is_row():
    row = [0.1, 0.6, 0.3]
    m = homogeneous_model([1, 0, 0], [row] * 3, [0.2, 0.5, 0.9], 5)
    fk = fk_marginals(m)
    for s in range(1, 6):
        assert np.allclose(fk.predicted[s], row, atol=1e-15)


@pytest.mark.parametrize("seed,k,t", [(0, 2, 5), (1, 3, 6), (2, 4, 5), (3, 1, 6), (4, 3, 8)])
def test_marginals_match_path_enumeration(seed, k, t):
    m = reference_model(5) if seed == 0 else random_model(np.random.default_rng(seed), k, t)
    pred, upd, gamma = brute_marginals(m)
    fk = fk_marginals(m)
    assert np.allclose(fk.predicted, pred, atol=1e-12, rtol=0)
    assert np.allclose(fk.updated, upd, atol=1e-12, rtol=0)
    assert np.allclose(fk.gamma, gamma, rtol=1e-12, atol=0)


# -- limiting criteria ---------------------------------------------------------

def test_state_independent_potentials_give_zero_cv2():
    m = make_model([0.3, 0.7], [[[0.9, 0.1], [0.2, 0.8]]] * 4,
                   [[0.3, 0.3], [0.6, 0.6], [0.2, 0.2], [0.9, 0.9]])
    curve = criterion_curve(m, "cv2", 0, m.initial)
    assert np.all(curve >= 0.0) and np.all(curve < 1e-14)


def test_cv2_two_point_example():
    m = homogeneous_model([0.5, 0.5], np.eye(2), [0.2, 0.8], 3)
    assert limiting_cv2(m, 0, [0.5, 0.5], 1) == pytest.approx(0.36, abs=1e-15)


def test_entropy_examples():
    g = 0.4
    m = homogeneous_model([0.5, 0.5], [[0.9, 0.1], [0.2, 0.8]], [g, g], 6)
    for s in range(1, 7):
        assert limiting_entropy(m, 0, [0.5, 0.5], s) == pytest.approx(-s * math.log(g), rel=1e-14)
    ident = homogeneous_model([0.5, 0.5], np.eye(2), [0.2, 0.8], 3)
    assert limiting_entropy(ident, 0, [0.5, 0.5], 2) == pytest.approx(1.8325814637483102, abs=1e-14)
    p1 = np.array([0.3, 0.7]) @ ident.kernel(1)
    assert limiting_entropy(ident, 0, [0.3, 0.7], 1) == pytest.approx(
        float(p1 @ -np.log([0.2, 0.8])), abs=1e-15)


@pytest.mark.parametrize("kind", ["cv2", "entropy"])
@pytest.mark.parametrize("seed", range(4))
def test_criteria_match_path_enumeration(kind, seed):
    rng = np.random.default_rng(100 + seed)
    m = reference_model(6) if seed == 0 else random_model(rng, 2 + seed % 2, 6)
    law = rng.dirichlet(np.ones(m.num_states))
    for start in range(0, 3):
        curve = criterion_curve(m, kind, start, law)
        for j, s in enumerate(range(start + 1, m.horizon + 1)):
            assert curve[j] == pytest.approx(brute_criterion(m, kind, start, law, s), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_entropy_strictly_increasing(seed):
    m = random_model(np.random.default_rng(seed), 3, 7)
    curve = criterion_curve(m, "entropy", 0, m.initial)
    assert np.all(np.diff(curve) > 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 5), st.floats(0.05, 1.0))
def test_cv2_invariant_under_potential_scaling(seed, t, c):
    m = random_model(np.random.default_rng(seed), 3, 6)
    pots = np.array(m.potentials)
    pots[t] *= c / pots[t].max() * 0.99
    scaled = m.with_potentials(pots)
    a = criterion_curve(m, "cv2", 0, m.initial)
    b = criterion_curve(scaled, "cv2", 0, m.initial)
    assert np.allclose(a, b, rtol=1e-10, atol=1e-13)


# -- deterministic schedules -----------------------------------------------------

@pytest.mark.parametrize("a_mult", [1.0, 1.5, 2.0, 2.7, 3.2])
def test_entropy_constant_potential_block_lengths(a_mult):
    g = 0.6
    m = homogeneous_model([0.5, 0.5], [[0.9, 0.1], [0.2, 0.8]], [g, g], 12)
    step = -math.log(g)
    sched = deterministic_times(m, "entropy", a_mult * step)
    length = math.ceil(a_mult)
    expected = list(range(0, 13, length))
    assert sched.times == expected
    assert sched.truncated == (expected[-1] < 12)


def test_state_independent_cv2_gives_single_truncated_block():
    m = homogeneous_model([0.5, 0.5], [[0.9, 0.1], [0.2, 0.8]], [0.4, 0.4], 7)
    sched = deterministic_times(m, "cv2", 0.1)
    assert sched.times == [0] and sched.truncated


@pytest.mark.parametrize("kind,a", [("cv2", 0.3), ("cv2", 0.5), ("entropy", 1.5), ("entropy", 1.1)])
def test_reference_schedule_matches_brute(kind, a):
    m = reference_model(10)
    times, truncated, curves = brute_schedule(m, kind, [a])
    sched = deterministic_times(m, kind, a)
    assert sched.times == times and sched.truncated == truncated
    for (aa, values), curve in zip(curves, sched.curves):
        assert np.allclose(curve, values, atol=1e-12, rtol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.5), st.floats(0.0, 1.0),
       st.sampled_from(["cv2", "entropy"]))
def test_times_monotone_in_thresholds(seed, a, bump, kind):
    m = random_model(np.random.default_rng(seed), 2, 8)
    lo = deterministic_times(m, kind, a)
    hi = deterministic_times(m, kind, a + bump)
    # every block of the higher-threshold schedule is at least as long from
    # a common start law, so its n-th time is never earlier
    for n in range(min(len(lo.times), len(hi.times))):
        if n == 0 or lo.times[n - 1] == hi.times[n - 1]:
            assert hi.times[n] >= lo.times[n]
        else:
            break


# -- block operators and constants ----------------------------------------------

def test_single_step_operator():
    m = reference_model(3)
    ops = block_operators(m, schedule_from_times(m, [0, 1, 2, 3]))
    M, G = m.kernel(1), m.potential(1)
    assert np.allclose(ops.weighted[1], M @ np.diag(G), atol=1e-15)
    assert np.array_equal(ops.product(2, 2), np.eye(2))


def test_operator_products_match_path_sums():
    m = random_model(np.random.default_rng(7), 3, 6)
    sched = schedule_from_times(m, [0, 2, 3, 6])
    ops = block_operators(m, sched)
    for p in range(3):
        for n in range(p + 1, 4):
            t0, t1 = sched.times[p], sched.times[n]
            brute = np.zeros((3, 3))
            for x in range(3):
                for prob, path in all_paths(m, t0, t1, np.eye(3)[x]):
                    brute[x, path[-1]] += prob * path_weight_brute(m, t0, path)
            assert np.allclose(ops.product(p, n), brute, atol=1e-12)
            assert np.all(ops.product(p, n).sum(axis=1) > 0)


def test_constants_single_state():
    m = make_model([1.0], np.ones((4, 1, 1)), [[0.5]] * 4)
    rep = constants(m, schedule_from_times(m, [0, 1, 2, 4]))
    assert np.all(rep.q[np.triu_indices(4)] == 1.0)
    assert np.all(rep.beta[np.triu_indices(4)] == 0.0)
    for arr in (rep.sigma1, rep.sigma2, rep.sigma_sq, rep.sigma_tilde_sq):
        assert np.all(arr == 0.0)


def test_constants_identity_kernel():
    m = homogeneous_model([0.5, 0.5], np.eye(2), [0.3, 0.7], 4)
    rep = constants(m, schedule_from_times(m, [0, 1, 2, 3, 4]))
    assert np.all(rep.beta[np.triu_indices(5)] == 1.0)
    assert np.all(rep.delta == 0.0) and not rep.mixing_available
    assert rep.q_bound_ok is None


def test_constants_reference_unit_blocks_by_hand():
    m = reference_model(4)
    rep = constants(m, schedule_from_times(m, [0, 1, 2, 3, 4]))
    M = np.array([[0.9, 0.1], [0.2, 0.8]])
    G = np.array([0.3, 0.7])
    # p = 0: block 0 has no weight, v = B_1 1 = 1
    assert rep.q[0, 1] == 1.0
    assert rep.beta[0, 1] == pytest.approx(0.7, abs=1e-15)
    assert rep.sigma1[1] == pytest.approx(4 * (0.7 + 1.0), abs=1e-14)
    assert rep.sigma2[1] == pytest.approx(2 * (0.7 + 1.0), abs=1e-14)
    assert rep.sigma_sq[1] == pytest.approx(4 * (0.49 + 1.0), abs=1e-14)
    assert rep.sigma_tilde_sq[1] == pytest.approx(4 * 1.7 ** 2, abs=1e-13)
    v = M @ G
    assert rep.q[0, 2] == pytest.approx(v.max() / v.min(), rel=1e-14)
    assert rep.q[1, 2] == pytest.approx(0.7 / 0.3, rel=1e-14)
    rows = M @ np.diag(G) @ M
    rows = rows / rows.sum(axis=1, keepdims=True)
    assert rep.beta[0, 2] == pytest.approx(0.5 * np.abs(rows[0] - rows[1]).sum(), abs=1e-15)
    assert rep.delta[0] == pytest.approx(0.1 / 0.8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_sigma_orderings(seed, k):
    rng = np.random.default_rng(seed)
    m = random_model(rng, k, 6)
    cuts = sorted(rng.choice(np.arange(1, 7), size=rng.integers(1, 5), replace=False).tolist())
    rep = constants(m, schedule_from_times(m, [0] + cuts))
    assert np.all(rep.sigma_sq <= rep.sigma1 * (1 + 1e-12))
    assert np.all(rep.sigma_sq <= rep.sigma_tilde_sq * (1 + 1e-12))
    iu = np.triu_indices(rep.num_blocks)
    assert np.all(rep.q[iu] >= 1.0 - 1e-12) and np.all((rep.beta[iu] >= 0) & (rep.beta[iu] <= 1))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_mixing_bounds_on_random_mixing_models(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, 3, 6, min_entry=0.1)
    cuts = sorted(rng.choice(np.arange(1, 7), size=rng.integers(1, 5), replace=False).tolist())
    rep = constants(m, schedule_from_times(m, [0] + cuts))
    assert rep.mixing_available
    assert rep.q_bound_ok.all() and rep.beta_bound_ok.all()
    ub = rep.uniform_bounds
    assert ub["sigma1_ok"] and ub["sigma2_ok"] and ub["sigma_sq_ok"]


# -- epsilon ----------------------------------------------------------------------

def test_epsilon_closed_form_entropy():
    g = 0.5
    m = homogeneous_model([0.5, 0.5], [[0.9, 0.1], [0.2, 0.8]], [g, g], 8)
    step = -math.log(g)
    eps, _ = epsilon_m(deterministic_times(m, "entropy", 1.5 * step))
    assert eps == pytest.approx(0.5 * step, rel=1e-12)


def test_epsilon_degenerate_threshold():
    m = reference_model(6)
    value = float(criterion_curve(m, "entropy", 0, m.initial)[1])
    with pytest.raises(DegenerateThreshold):
        epsilon_m(deterministic_times(m, "entropy", value))


def test_epsilon_matches_brute_scan():
    m = reference_model(10)
    for kind, a in [("cv2", 0.3), ("entropy", 1.2)]:
        _, _, curves = brute_schedule(m, kind, [a])
        brute = min(min([abs(0 - aa)] + [abs(v - aa) for v in values]) for aa, values in curves)
        assert epsilon_m(deterministic_times(m, kind, a))[0] == pytest.approx(brute, abs=1e-12)


def test_epsilon_restricted_to_first_blocks():
    m = reference_model(12)
    sched = deterministic_times(m, "cv2", 0.3)
    full, _ = epsilon_m(sched)
    first, (n, _) = epsilon_m(sched, m=1)
    assert first >= full and n <= 1


# -- asymptotic variances ---------------------------------------------------------

def test_clt_constant_function_is_zero():
    m = reference_model(8)
    sched = deterministic_times(m, "cv2", 0.3)
    for n in range(len(sched.times)):
        assert clt_variance(m, sched, [2.0, 2.0], n) == pytest.approx(0.0, abs=1e-14)


def test_clt_block_zero_is_initial_variance():
    m = reference_model(8)
    sched = schedule_from_times(m, list(range(9)))
    f = np.array([0.0, 1.0])
    assert clt_variance(m, sched, f, 0) == pytest.approx(0.25)
    assert local_field_variance(m, sched, f, 0) == pytest.approx(0.25)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(0.1, 4))
def test_clt_shift_and_scale(seed, shift, scale):
    rng = np.random.default_rng(seed)
    m = random_model(rng, 3, 6)
    sched = schedule_from_times(m, [0, 2, 3, 5])
    f = rng.normal(size=3)
    base = clt_variance(m, sched, f, 3)
    assert clt_variance(m, sched, f + shift, 3) == pytest.approx(base, rel=1e-9, abs=1e-12)
    assert clt_variance(m, sched, scale * f, 3) == pytest.approx(scale ** 2 * base, rel=1e-9)


@pytest.mark.parametrize("resampler", ["select", "multinomial"])
@pytest.mark.parametrize("seed", range(5))
def test_clt_routes_agree(resampler, seed):
    rng = np.random.default_rng(200 + seed)
    m = reference_model(8) if seed == 0 else random_model(rng, 2 + seed % 3, 7)
    times = [0, 2, 4, 6, 8] if seed == 0 else [0, 1, 3, 4, 7]
    sched = schedule_from_times(m, times)
    f = rng.normal(size=m.num_states)
    for n in range(len(times)):
        a = clt_variance(m, sched, f, n, resampler)
        b = clt_variance(m, sched, f, n, resampler, method="enumerate")
        assert a == pytest.approx(b, rel=1e-10, abs=1e-12)


def test_clt_enumeration_cap():
    m = reference_model(12)
    sched = schedule_from_times(m, [0, 12])
    with pytest.raises(EnumerationCapExceeded) as exc:
        clt_variance(m, sched, [0, 1], 1, method="enumerate", cap=100)
    assert "4096" in str(exc.value)


def test_local_field_keep_all_first_block():
    m = reference_model(6)
    sched = schedule_from_times(m, [0, 2, 4, 6])
    f = np.array([0.0, 1.0])
    B = transition_matrix(m, 0, 2)
    bf = B @ f
    expected = float(m.initial @ (bf * (1 - bf)))
    assert local_field_variance(m, sched, f, 1) == pytest.approx(expected, abs=1e-15)
    assert local_field_variance(m, sched, f, 1, "multinomial") == pytest.approx(expected, abs=1e-15)
