import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from adaptsmc.errors import (InitialNotNormalized, LengthMismatch, PotentialOutOfRange,
                             RowNotStochastic, StateOutOfRange)
from adaptsmc.model import (FiniteModel, PathWeightSpec, homogeneous_model, load_model,
                            make_model, path_log_weight, path_weight, reference_model,
                            sample_step, save_model, validate)


def test_constant_potential_is_valid_with_unit_ratio():
    m = homogeneous_model([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]], [0.3, 0.3], 4)
    assert np.all(m.potential_ratios == 1.0)


def test_potential_of_one_is_rejected():
    with pytest.raises(PotentialOutOfRange) as exc:
        make_model([0.5, 0.5], [[[0.5, 0.5], [0.5, 0.5]]], [[0.3, 1.0]])
    assert exc.value.args and "1" in str(exc.value)


def test_row_summing_above_one_is_rejected():
    kernel = [[0.5, 0.5, 0.0], [0.5, 0.5, 0.1], [0.0, 0.0, 1.0]]
    with pytest.raises(RowNotStochastic) as exc:
        make_model([1, 0, 0], [kernel], [[0.5, 0.5, 0.5]])
    assert "row 1" in str(exc.value) or "1" in str(exc.value)


def test_initial_must_be_normalized():
    with pytest.raises(InitialNotNormalized):
        make_model([0.6, 0.6], [[[1, 0], [0, 1]]], [[0.5, 0.5]])
    with pytest.raises(InitialNotNormalized):
        make_model([1.2, -0.2], [[[1, 0], [0, 1]]], [[0.5, 0.5]])


def test_shape_errors():
    with pytest.raises(LengthMismatch):
        make_model([0.5, 0.5], [[[1, 0], [0, 1]]], [[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(LengthMismatch):
        make_model([1.0], np.ones((0, 1, 1)), np.ones((0, 1)))


def test_validated_arrays_are_read_only():
    m = reference_model(3)
    with pytest.raises(ValueError):
        m.kernels[0, 0, 0] = 0.3


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.data())
def test_validate_agrees_with_brute_scan(k, t, data):
    vals = st.floats(-0.2, 1.2, allow_nan=False)
    initial = np.array(data.draw(st.lists(vals, min_size=k, max_size=k)))
    kernels = np.array(data.draw(st.lists(vals, min_size=t * k * k, max_size=t * k * k))).reshape(t, k, k)
    pots = np.array(data.draw(st.lists(vals, min_size=t * k, max_size=t * k))).reshape(t, k)
    if data.draw(st.booleans()):
        initial = np.abs(initial) + 1e-3
        initial /= initial.sum()
        kernels = np.abs(kernels) + 1e-3
        kernels /= kernels.sum(axis=2, keepdims=True)
    ok = (all(x >= 0 for x in initial) and abs(sum(initial) - 1) <= 1e-12
          and all(all(v >= 0 for v in row) and abs(sum(row) - 1) <= 1e-12
                  for m in kernels for row in m)
          and all(0 < g < 1 for row in pots for g in row))
    try:
        make_model(initial, kernels, pots)
        accepted = True
    except (RowNotStochastic, PotentialOutOfRange, InitialNotNormalized):
        accepted = False
    assert accepted == ok


def test_path_weight_examples():
    m = homogeneous_model([1.0], [[1.0]], [0.5], 3)
    assert path_weight(m, PathWeightSpec(0, 3), [0, 0, 0]) == pytest.approx(0.125, abs=1e-15)
    assert path_weight(m, PathWeightSpec(1, 2), [0]) == pytest.approx(0.5)
    two = make_model([0.5, 0.5], [np.eye(2), np.eye(2)], [[0.2, 0.8], [0.5, 0.6]])
    assert path_weight(two, PathWeightSpec(0, 2), [1, 0]) == pytest.approx(0.40, abs=1e-15)
    assert path_log_weight(two, PathWeightSpec(0, 2), [1, 0]) == pytest.approx(math.log(0.4))


def test_path_weight_errors():
    m = reference_model(3)
    with pytest.raises(LengthMismatch):
        path_weight(m, PathWeightSpec(0, 2), [0])
    with pytest.raises(StateOutOfRange):
        path_weight(m, PathWeightSpec(0, 2), [0, 2])
    with pytest.raises(LengthMismatch):
        PathWeightSpec(2, 2)
    with pytest.raises(LengthMismatch):
        path_weight(m, PathWeightSpec(0, 4), [0, 0, 0, 0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=3, max_size=9), st.data())
def test_path_weight_is_multiplicative_in_log_space(path, data):
    m = reference_model(12)
    p = data.draw(st.integers(0, 2))
    q = p + data.draw(st.integers(1, len(path) - 1))
    r = p + len(path)
    left = path_log_weight(m, PathWeightSpec(p, q), path[: q - p])
    right = path_log_weight(m, PathWeightSpec(q, r), path[q - p:])
    whole = path_log_weight(m, PathWeightSpec(p, r), path)
    assert left + right == pytest.approx(whole, abs=1e-13)


def test_sample_step_examples():
    m = make_model([1, 0, 0], [[[1, 0, 0], [0.5, 0.5, 0], [0.2, 0.3, 0.5]]], [[0.5] * 3])
    assert sample_step(m, 0, 0, 0.999) == 0
    assert sample_step(m, 0, 1, 0.75) == 1
    assert sample_step(m, 0, 2, 0.2) == 1
    assert sample_step(m, 0, 2, 0.1999) == 0
    with pytest.raises(ValueError):
        sample_step(m, 0, 0, 1.0)


def test_sample_step_never_selects_null_state():
    # row sums to 1 within tolerance but the cumulative sum falls short of 1
    row = [0.3, 0.7 - 1e-13, 0.0]
    row[2] = 1 - sum(row)
    m = make_model([1, 0, 0], [[row, [0, 1, 0], [0, 0, 1]]], [[0.5] * 3])
    assert sample_step(m, 0, 0, np.nextafter(1.0, 0.0)) in (1, 2)
    m2 = make_model([1, 0], [[[0.4, 0.6], [1.0, 0.0]]], [[0.5, 0.5]])
    assert sample_step(m2, 0, 1, np.nextafter(1.0, 0.0)) == 0


def test_sample_step_chi_square():
    m = make_model([1, 0, 0], [[[0.2, 0.3, 0.5]] * 3], [[0.5] * 3])
    draws = np.random.default_rng(1).random(100_000)
    counts = np.bincount(sample_step(m, 0, np.zeros_like(draws, dtype=int), draws), minlength=3)
    assert stats.chisquare(counts, 1e5 * np.array([0.2, 0.3, 0.5])).pvalue > 0.001


def test_json_round_trip(tmp_path):
    m = reference_model(4)
    path = tmp_path / "m.json"
    save_model(m, path)
    back = load_model(path)
    assert np.array_equal(back.kernels, m.kernels) and np.array_equal(back.potentials, m.potentials)
    data = json.loads(path.read_text())
    data["horizon"] = 5
    path.write_text(json.dumps(data))
    with pytest.raises(LengthMismatch):
        load_model(path)
    data["horizon"] = 4
    data["potentials"][0][0] = 1.5
    path.write_text(json.dumps(data))
    with pytest.raises(PotentialOutOfRange):
        load_model(path)


def test_from_dict_requires_fields():
    with pytest.raises(LengthMismatch):
        FiniteModel.from_dict({"initial": [1.0]})


def test_validate_returns_cached_ratios():
    m = make_model([0.5, 0.5], [[[0.5, 0.5], [0.5, 0.5]]], [[0.2, 0.8]])
    assert validate(m).potential_ratios[0] == pytest.approx(4.0)
