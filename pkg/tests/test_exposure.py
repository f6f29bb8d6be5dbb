import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netrdd.exposure import (
    FRACTION_TREATED,
    ONE_TREATED,
    SUM_TREATED,
    ExposureError,
    ExposureMapping,
    apply_exposure,
    assign_effective_treatments,
    attainable_values,
    enumerate_configs,
    mapping_from_name,
)
from netrdd.graph import interference_from_clusters, InterferenceSets

BUILTINS = [ONE_TREATED, SUM_TREATED, FRACTION_TREATED]


def test_apply_examples():
    assert apply_exposure(ONE_TREATED, [0, 1, 0]) == 1
    assert apply_exposure(SUM_TREATED, [0, 0]) == 0
    assert apply_exposure(FRACTION_TREATED, [1, 0, 1, 1]) == Fraction(3, 4)


def test_empty_vector_rejected():
    with pytest.raises(ExposureError):
        apply_exposure(ONE_TREATED, [])


def test_assign_two_units():
    sets = InterferenceSets.from_lists([[1], [0]])
    tr = assign_effective_treatments(np.array([-1.0, 0.5]), 0.0, sets, ONE_TREATED)
    assert [tr[0], tr[1]] == [(0, 1), (1, 0)]


def test_score_at_cutoff_is_treated():
    sets = InterferenceSets.from_lists([[1], [0]])
    tr = assign_effective_treatments(np.array([0.0, -1.0]), 0.0, sets, ONE_TREATED)
    assert tr.d.tolist() == [1, 0]


def test_cluster_of_three():
    sets = interference_from_clusters([0, 0, 0])
    tr = assign_effective_treatments(np.array([-1.0, -2.0, 3.0]), 0.0, sets, ONE_TREATED)
    assert [tr.g(i) for i in range(3)] == [1, 1, 0]


def test_isolated_unit_has_undefined_exposure():
    sets = interference_from_clusters([0, 0, 1])
    tr = assign_effective_treatments(np.array([1.0, -1.0, 2.0]), 0.0, sets, ONE_TREATED)
    assert tr.g(2) is None
    assert not tr.match(1, 0)[2]


def test_enumerate_examples():
    assert enumerate_configs(ONE_TREATED, 2, 0, 0) == [(0, (0, 0))]
    got = sorted(enumerate_configs(ONE_TREATED, 2, 0, 1))
    assert got == [(0, (0, 1)), (0, (1, 0)), (0, (1, 1))]
    assert enumerate_configs(FRACTION_TREATED, 4, 0, 1) == [(0, (1, 1, 1, 1))]


def test_unattainable_value_gives_empty():
    assert enumerate_configs(ONE_TREATED, 3, 1, 2) == []


def test_fraction_exact_grouping():
    sets = interference_from_clusters([0] * 4)
    tr = assign_effective_treatments(np.array([1.0, 1.0, -1.0, 1.0]), 0.0, sets, FRACTION_TREATED)
    # unit 2 sees three treated of three, the others two of three
    assert tr.match(1, Fraction(2, 3)).tolist() == [True, True, False, True]
    assert tr.match(0, 1).tolist() == [False, False, True, False]


def test_custom_mapping_and_rejection():
    first = ExposureMapping.custom(lambda v: v[0])
    assert apply_exposure(first, [1, 0]) == 1
    with pytest.raises(ExposureError):
        ExposureMapping.custom(lambda v: sum(v) / 3.0)


def test_mapping_names():
    assert mapping_from_name("fraction") is FRACTION_TREATED
    with pytest.raises(ExposureError):
        mapping_from_name("nope")


@pytest.mark.parametrize("mapping", BUILTINS + [ExposureMapping.custom(lambda v: v[0] + 2 * v[-1])])
@pytest.mark.parametrize("s", [1, 2, 3, 5])
@pytest.mark.parametrize("d", [0, 1])
def test_configs_partition_and_reproduce(mapping, s, d):
    seen = []
    for g in attainable_values(mapping, s):
        for dd, v in enumerate_configs(mapping, s, d, g):
            assert dd == d
            assert apply_exposure(mapping, v) == g
            seen.append(v)
    assert sorted(seen) == sorted(itertools.product((0, 1), repeat=s))


@settings(max_examples=100)
@given(v=st.lists(st.integers(0, 1), min_size=1, max_size=10), perm_seed=st.integers(0, 10**6),
       m=st.sampled_from(BUILTINS))
def test_builtins_permutation_invariant(v, perm_seed, m):
    perm = np.random.default_rng(perm_seed).permutation(len(v))
    assert apply_exposure(m, v) == apply_exposure(m, [v[i] for i in perm])


def test_custom_path_matches_builtin_vectorised():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 30, 200)
    sets = interference_from_clusters(labels)
    x = rng.normal(size=200)
    slow = ExposureMapping.custom(lambda v: Fraction(sum(v), len(v)))
    a = assign_effective_treatments(x, 0.0, sets, FRACTION_TREATED)
    b = assign_effective_treatments(x, 0.0, sets, slow)
    assert all(a[i] == b[i] for i in range(200))
