import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import uniform_pair_conditional_mean
from storeshare.demand import (
    DemandError,
    Discrete,
    Empirical,
    FirmProfile,
    IngestWarning,
    Parametric,
    RareEventError,
    SampleSet,
    SyntheticCommunity,
    aggregate_quantile,
    conditional_mean_band,
    correlation_histogram,
    day_anchor,
    density_at,
    draw_samples,
    exact_samples,
    ingest_load_csv,
    load_profiles,
    pairwise_correlation,
    sample_days,
    save_profiles,
    uniform_profile,
    weighted_quantile,
)


def test_weighted_quantile_generalized_inverse():
    v = np.array([0.0, 1.0, 2.0, 3.0])
    w = np.full(4, 0.25)
    assert weighted_quantile(v, w, 0.0) == 0.0
    assert weighted_quantile(v, w, 0.25) == 0.0
    assert weighted_quantile(v, w, 0.26) == 1.0
    assert weighted_quantile(v, w, 0.5) == 1.0
    assert weighted_quantile(v, w, 1.0) == 3.0
    with pytest.raises(DemandError):
        weighted_quantile(v, w, 1.5)


def test_aggregate_quantile_of_uniform_sum(two_tier):
    prof = [uniform_profile("a", two_tier), uniform_profile("b", two_tier)]
    est = aggregate_quantile(prof, [1], 0.5, n_samples=200_000, seed=1, sched=two_tier)
    assert abs(est.value - 10.0) < 4 * est.se + 0.02


def test_sampling_is_seed_deterministic(rus):
    prof = [uniform_profile("a", rus), uniform_profile("b", rus, 1, 5)]
    a = draw_samples(prof, rus, 1000, seed=7)
    b = draw_samples(prof, rus, 1000, seed=7)
    c = draw_samples(prof, rus, 1000, seed=8)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert a.values.shape == (2, 1000, 3)
    assert a.values[1, :, 1:].max() <= 5


def test_missing_period_rejected(rus):
    prof = FirmProfile("a", {2: Parametric("uniform", (0, 1))})
    with pytest.raises(DemandError, match="lacks periods"):
        draw_samples([prof], rus, 10)


@pytest.mark.parametrize("family,params", [("uniform", (3, 1)), ("truncnorm", (1, 0)), ("beta", (1, 1))])
def test_bad_parametric(family, params):
    with pytest.raises(DemandError):
        Parametric(family, params)


def test_truncnorm_is_non_negative():
    x = Parametric("truncnorm", (1.0, 2.0)).sample(np.random.default_rng(0), 10_000)
    assert x.min() >= 0


def test_discrete_validation():
    with pytest.raises(DemandError):
        Discrete(np.array([0, 1]), np.array([0.5, 0.6]))
    d = Discrete(np.array([0.0, 2.0]), np.array([0.25, 0.75]))
    assert d.mean() == 1.5


def test_exact_samples_weights(two_tier):
    d = Discrete(np.array([0.0, 1.0, 2.0]), np.array([0.5, 0.25, 0.25]))
    prof = [FirmProfile("a", {1: d}), FirmProfile("b", {1: d})]
    s = exact_samples(prof, two_tier)
    assert s.exact and s.n == 9
    assert math.isclose(s.w.sum(), 1.0)
    assert math.isclose(s.mean(s.collective[:, 1]), 1.5)
    assert s.estimate(s.collective[:, 1]).se == 0.0


def test_exact_samples_off_grid(two_tier):
    d = Discrete(np.array([0.0, 0.5]), np.array([0.5, 0.5]))
    with pytest.raises(DemandError, match="grid"):
        exact_samples([FirmProfile("a", {1: d})], two_tier)


def test_band_conditional_mean_matches_integration():
    rng = np.random.default_rng(3)
    vals = np.zeros((2, 400_000, 2))
    vals[:, :, 1] = rng.uniform(0, 10, size=(2, 400_000))
    s = SampleSet(vals)
    for r in (4.0, 10.0, 15.0):
        est = conditional_mean_band(s, 0, [1], [1], r)
        assert abs(est.mean - uniform_pair_conditional_mean(r)) < 4 * est.se + 0.02


def test_band_conditioning_respects_constraints():
    rng = np.random.default_rng(4)
    vals = rng.uniform(0, 10, size=(2, 200_000, 3))
    s = SampleSet(vals)
    est = conditional_mean_band(s, 0, [1, 2], [1, 2], 20.0, constraints=[([1], 5.0)])
    assert est.n_accepted >= 1000
    ok = s.collective[:, 1] < 5.0
    assert ok.any()


def test_band_rare_event():
    vals = np.zeros((2, 100, 2))
    vals[:, :, 1] = 1.0
    with pytest.raises(RareEventError):
        conditional_mean_band(SampleSet(vals), 0, [1], [1], 50.0, max_doublings=2)


def test_band_exact_lattice(two_tier):
    d = Discrete(np.array([0.0, 1.0, 2.0]), np.array([1 / 3, 1 / 3, 1 / 3]))
    s = exact_samples([FirmProfile("a", {1: d}), FirmProfile("b", {1: d})], two_tier)
    est = conditional_mean_band(s, 0, [1], [1], 2.0)
    assert est.exact and math.isclose(est.mean, 1.0)
    with pytest.raises(RareEventError):
        conditional_mean_band(s, 0, [1], [1], 7.0)


def test_density_of_uniform():
    rng = np.random.default_rng(5)
    v = rng.uniform(0, 10, 200_000)
    assert abs(density_at(v, np.full(v.size, 1 / v.size), 5.0) - 0.1) < 0.01
    assert density_at(v, np.full(v.size, 1 / v.size), 50.0) == 1e-9


def _history_profiles(series):
    return [FirmProfile(f"f{i}", {1: Empirical(s)}, np.c_[np.zeros(len(s)), s]) for i, s in enumerate(series)]


def test_pairwise_correlation_and_zero_variance():
    a = np.arange(10.0)
    mat = pairwise_correlation(_history_profiles([a, 2 * a + 1, -a + 20, np.full(10, 3.0)]), [1])
    assert math.isclose(mat[0, 1], 1.0) and math.isclose(mat[0, 2], -1.0)
    assert np.isnan(mat[0, 3])
    hist = correlation_histogram(mat, bins=4)
    assert hist[-1][2] == 3  # three undefined pairs
    assert sum(c for *_, c in hist[:-1]) == 3


def test_correlation_needs_two_firms():
    with pytest.raises(DemandError):
        pairwise_correlation(_history_profiles([np.arange(5.0)]), [1])


def _write_csv(path, rows):
    path.write_text("timestamp,meter_id,kwh\n" + "\n".join(rows) + "\n")


def test_ingest_aggregates_by_period(tmp_path, sce):
    rows = []
    for day in (1, 2):
        for h in range(24):
            rows.append(f"2016-06-0{day}T{h:02d}:00:00Z,m1,1.0")
            rows.append(f"2016-06-0{day}T{h:02d}:30:00,m2,0.5")
    rows.append("2016-06-03T00:00:00,m1,1.0")  # incomplete day
    _write_csv(tmp_path / "a.csv", rows)
    with pytest.warns(IngestWarning, match="incomplete"):
        res = ingest_load_csv(tmp_path / "a.csv", sce)
    assert [p.firm_id for p in res.profiles] == ["m1", "m2"]
    assert res.dropped_days == {"m1": 1}
    hist = res.profiles[0].history
    assert hist.shape == (2, 4)
    assert list(hist[0]) == [10.0, 6.0, 6.0, 2.0]
    assert list(res.profiles[1].history[0]) == [5.0, 3.0, 3.0, 1.0]


def test_ingest_clamps_negative(tmp_path, sce):
    rows = [f"2016-06-01T{h:02d}:00:00,m1,{-1 if h == 3 else 1}" for h in range(24)]
    _write_csv(tmp_path / "a.csv", rows)
    with pytest.warns(IngestWarning, match="clamped"):
        res = ingest_load_csv(tmp_path / "a.csv", sce)
    assert res.clamped_rows == 1
    assert res.profiles[0].history.sum() == 23


def test_ingest_reports_bad_line(tmp_path, sce):
    _write_csv(tmp_path / "a.csv", ["2016-06-01T00:00:00,m1,1", "not-a-time,m1,1"])
    with pytest.raises(DemandError, match="line 3"):
        ingest_load_csv(tmp_path / "a.csv", sce)


def test_day_anchor_midnight(sce):
    assert day_anchor(sce) == 0


def test_profile_json_roundtrip(tmp_path, rus):
    profs = [
        uniform_profile("a", rus),
        FirmProfile("b", {1: Discrete(np.array([0.0, 1.0]), np.array([0.5, 0.5])), 2: Empirical(np.arange(3.0))}),
    ]
    save_profiles(profs, tmp_path / "p.json")
    back = load_profiles(tmp_path / "p.json")
    a = draw_samples(profs, rus, 500, seed=3)
    b = draw_samples(back, rus, 500, seed=3)
    assert np.array_equal(a.values, b.values)


def test_synthetic_community_deterministic(sce):
    com = SyntheticCommunity(n_firms=4)
    assert np.array_equal(com.draw(sce, 100, 1), com.draw(sce, 100, 1))
    days = com.days(sce, 50, 2)
    assert days.shape == (50, 4, 4)
    assert com.firm_ids() == ("firm00", "firm01", "firm02", "firm03")
    assert np.isclose(com.period_hours(sce).sum(), 24)


def test_sample_days_shape(rus):
    prof = [uniform_profile("a", rus), uniform_profile("b", rus)]
    assert sample_days(prof, rus, 7, seed=0).shape == (7, 2, 3)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=30), st.floats(0.01, 1.0))
def test_quantile_is_a_sample_value_with_enough_mass(vals, prob):
    v = np.array(vals)
    w = np.full(v.size, 1 / v.size)
    q = weighted_quantile(v, w, prob)
    assert q in v
    assert w[v <= q].sum() >= prob - 1e-9
    assert w[v < q].sum() < prob + 1e-9
