import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from storeshare.demand import RealizedDay, draw_samples, uniform_profile
from storeshare.market import (
    SettlementError,
    SharingMarket,
    budget_certificate,
    clearing_price,
    export_outcome_csv,
    price_law_report,
    reservation_trajectory,
    rus_reservation,
    settle_day,
    settle_days,
    social_cost_certificate,
)
from storeshare.policy import EfficiencyPair, ReservationPolicy, simulate_standalone
from storeshare.tariff import ToUSchedule


def _samples(sched, firms=1, n=200_000, seed=0, hi=10.0):
    return draw_samples([uniform_profile(f"f{i}", sched, 0, hi) for i in range(firms)], sched, n, seed)


def test_trajectory_step(rus):
    u, taken, bought = reservation_trajectory(8.0, 4.0, 1, rus, (5.0,))
    assert (float(u), float(taken), float(bought)) == (5.0, 3.0, 1.0)
    u, taken, bought = reservation_trajectory(5.0, 2.0, 2, rus, (5.0,))
    assert (float(u), float(taken), float(bought)) == (3.0, 2.0, 0.0)
    with pytest.raises(SettlementError):
        reservation_trajectory(1.0, 1.0, 0, rus)


def test_surplus_price_in_ramp_down(rds):
    s = _samples(rds, seed=1)
    # 4 kWh left for the partial peak, which needs more with probability 0.6
    p = clearing_price(1, 2.0, 6.0, rds, s)
    assert abs(p - 22.0) < 0.1


def test_deficit_price_is_the_tariff(rds):
    s = _samples(rds, n=1000)
    assert clearing_price(1, 6.0, 6.0, rds, s) == 52.0
    assert clearing_price(2, 9.0, 3.0, rds, s) == 28.0


def test_two_tier_prices_are_binary(two_tier):
    m = SharingMarket(two_tier, _samples(two_tier, n=1000))
    prices = m.price(1, np.array([0.0, 1.0, 5.0, 6.0, 9.0]), 6.0)
    assert list(prices) == [13.0, 13.0, 13.0, 52.0, 52.0]


def test_rus_reservation_quantile():
    sched = ToUSchedule.from_rates(13, [28], [52], 14)
    assert abs(rus_reservation(sched, _samples(sched, hi=20.0, seed=2)) - 20 * 24 / 39) < 0.08


def test_hand_settlement(rds):
    s = _samples(rds, n=1000)
    m = SharingMarket(rds, s)
    demand = np.array([[[1.0, 1.0, 0.0], [1.0, 5.0, 0.0]]])
    out = settle_days(demand, [3.0, 1.0], m)
    # collective deficit in the peak: 6 kWh wanted, 4 stored
    assert out.prices[0, 1] == 52.0
    assert out.deficit[0, 1]
    taken = np.array([3.0, 1.0])
    assert np.allclose(out.procurement[0, :, 1], [1.0, 5.0] - taken)
    assert np.allclose(out.cash[0, :, 1], 52.0 * (np.array([1.0, 5.0]) - taken))
    assert np.allclose(out.recharge_cost[0], 13.0 * taken)
    assert budget_certificate(out).passed
    assert social_cost_certificate(out, rds).passed


def test_settle_day_wrapper(rds):
    s = _samples(rds, firms=2, n=1000)
    day = RealizedDay(("a", "b"), np.array([[1.0, 2.0, 3.0], [0.0, 1.0, 1.0]]))
    out = settle_day(day, 5.0, [2.5, 2.5], rds, s)
    assert out.firm_ids == ("a", "b")
    with pytest.raises(SettlementError, match="sum"):
        settle_day(day, 6.0, [2.5, 2.5], rds, s)


def test_capacity_shape_checked(rds):
    m = SharingMarket(rds, _samples(rds, n=100))
    with pytest.raises(SettlementError):
        settle_days(np.zeros((1, 2, 3)), [1.0], m)
    with pytest.raises(SettlementError):
        settle_days(np.zeros((1, 2, 2)), [1.0, 1.0], m)


def test_export_csv(tmp_path, rds):
    m = SharingMarket(rds, _samples(rds, n=100))
    out = settle_days(np.ones((3, 2, 3)), [1.0, 2.0], m, ("a", "b"))
    export_outcome_csv(out, rds, tmp_path / "f.csv", tmp_path / "d.csv")
    firms = list(csv.DictReader(open(tmp_path / "f.csv")))
    days = list(csv.DictReader(open(tmp_path / "d.csv")))
    assert len(firms) == 6 and len(days) == 3


@st.composite
def settlement_case(draw):
    p = draw(st.integers(0, 2))
    q = draw(st.integers(1, 2))
    ru = sorted(draw(st.sets(st.integers(15, 50), min_size=p, max_size=p)))
    rd = sorted(draw(st.sets(st.integers(15, 50), min_size=q - 1, max_size=q - 1)), reverse=True)
    sched = ToUSchedule.from_rates(13, ru, [52] + rd, 5)
    n_firms = draw(st.integers(1, 4))
    eff = draw(st.sampled_from([EfficiencyPair(), EfficiencyPair(0.9, 0.85)]))
    return sched, n_firms, eff, draw(st.integers(0, 10_000))


@settings(max_examples=30, deadline=None)
@given(settlement_case())
def test_budget_welfare_and_price_law(case):
    sched, n_firms, eff, seed = case
    s = _samples(sched, n_firms, n=3000, seed=seed)
    m = SharingMarket(sched, s, eff)
    rng = np.random.default_rng(seed)
    caps = rng.uniform(0, 6, n_firms)
    days = rng.uniform(0, 8, size=(40, n_firms, sched.n_periods + 1))
    days[rng.random(days.shape) < 0.2] = 0.0
    out = settle_days(days, caps, m)
    assert budget_certificate(out).passed
    assert social_cost_certificate(out, sched).passed
    law = price_law_report(out, sched)
    if eff.ideal:
        assert law.passed
    else:
        assert law.deficit_mismatches == 0
    ledger = simulate_standalone(ReservationPolicy(caps.sum(), m.reservations, eff), sched, days.sum(axis=1))
    assert np.allclose(out.grid, ledger.grid)
