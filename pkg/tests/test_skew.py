import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skewprune.models import VGGConfig, build_vgg
from skewprune.skew import (SkewnessReport, collect_skewness, load_reports, median, save_reports,
                            skewness, skewness_rows)


def two_pass_skew(xs):
    n = len(xs)
    mean = math.fsum(xs) / n
    m2 = math.fsum((x - mean) ** 2 for x in xs) / n
    if m2 < 1e-12:
        return 0.0
    m3 = math.fsum((x - mean) ** 3 for x in xs) / n
    return m3 / m2 ** 1.5


def test_skew_examples():
    assert skewness([1, 2, 3]) == 0.0
    assert skewness([0, 0, 0, 1]) == pytest.approx(2 / math.sqrt(3), abs=1e-12)
    assert round(skewness([0, 0, 0, 1]), 4) == 1.1547
    assert skewness([5, 5, 5]) == 0.0
    with pytest.raises(ValueError):
        skewness([])


def test_median_examples():
    assert median([3, 1, 2]) == 2
    assert median([1, 2, 3, 4]) == 2.5
    with pytest.raises(ValueError):
        median([])


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@given(st.lists(finite, min_size=1, max_size=40))
def test_median_permutation_invariant(xs):
    assert median(xs) == median(list(reversed(xs))) == median(sorted(xs))
    assert median(xs) == float(np.median(xs))


@given(st.lists(finite, min_size=3, max_size=50), st.floats(0.1, 100), st.floats(-100, 100))
def test_skew_affine_invariance(xs, a, b):
    base = skewness(xs)
    if np.var(xs) < 1e-6:
        return
    moved = skewness([a * x + b for x in xs])
    assert moved == pytest.approx(base, rel=1e-9, abs=1e-9)
    assert skewness([-x for x in xs]) == pytest.approx(-base, rel=1e-9, abs=1e-12)


def test_rows_match_scalar(rng):
    arr = rng.gamma(2.0, size=(20, 31))
    arr[3] = 7.0
    np.testing.assert_allclose(skewness_rows(arr), [skewness(r) for r in arr], rtol=1e-12, atol=0)
    assert skewness_rows(arr)[3] == 0.0


def _lesion_map(size, lesion, bg, level):
    m = np.full((size, size), bg)
    m[:lesion, :lesion] = level
    return m.ravel()


def test_constructed_maps_signs():
    # small bright lesion on a positive constant background -> long right tail
    assert skewness(_lesion_map(16, 3, 0.2, 5.0)) > 0
    # uniformly active background with dips where the lesion sits -> long left tail
    assert skewness(_lesion_map(16, 3, 1.0, 0.1)) < 0


def test_collect_skewness_pool_reports(rng):
    model = build_vgg(VGGConfig(blocks=((4,), (6,)), classifier=(8,), image_size=16), seed=1)
    x = rng.random((7, 3, 16, 16)).astype(np.float32)
    reps = collect_skewness(model, x, "pool", batch_size=3)
    assert [r.site for r in reps] == ["pool0", "pool1"]
    assert reps[0].values.shape == (4, 7) and reps[1].values.shape == (6, 7)
    for r in reps:
        assert np.all(np.isfinite(r.values))
        expect = [median(sorted(row)) for row in r.values]
        assert r.medians.tolist() == expect
    # sample order follows dataset order regardless of batching (BLAS blocking may
    # change the last bits, so compare with a tolerance)
    again = collect_skewness(model, x, "pool", batch_size=7)
    for a, b in zip(reps, again):
        np.testing.assert_allclose(a.values, b.values, rtol=1e-4, atol=1e-5)
    single = collect_skewness(model, x[2:3], "pool")
    np.testing.assert_allclose(single[0].values[:, 0], reps[0].values[:, 2], rtol=1e-4, atol=1e-5)
    assert np.array_equal(collect_skewness(model, x, "pool", batch_size=3)[1].values, reps[1].values)


def test_collect_empty_dataset():
    model = build_vgg(VGGConfig(blocks=((4,),), classifier=(), image_size=8))
    with pytest.raises(ValueError):
        collect_skewness(model, np.zeros((0, 3, 8, 8), np.float32), "pool")


def test_report_roundtrip(tmp_path, rng):
    reps = [SkewnessReport("pool0", [0, 1, 2], rng.standard_normal((3, 5)))]
    save_reports(reps, tmp_path / "r.json")
    back = load_reports(tmp_path / "r.json")
    assert np.array_equal(back[0].values, reps[0].values)
    save_reports(reps, tmp_path / "m.json", include_values=False)
    assert np.array_equal(load_reports(tmp_path / "m.json")[0].medians, reps[0].medians)


def test_report_rejects_non_finite():
    with pytest.raises(ValueError):
        SkewnessReport("x", [0], np.array([[np.nan]]))
