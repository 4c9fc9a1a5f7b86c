"""Posted sharing prices, collective dispatch and per-firm settlement.

The aggregator runs the collective (M, C) policy on the pooled storage.  In
each period it posts a price for energy traded inside the park: the grid
rate when the collective runs short, otherwise the off-peak replacement cost
plus the marginal value of the energy still held, scaled by the discharge
efficiency.  Firms pay (or are paid) that price for energy beyond what their
own stored share delivers.  Because the price equals the grid rate whenever
grid energy is bought, the aggregator's books always balance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .demand import RealizedDay, SampleSet, weighted_quantile
from .policy import (
    IDEAL,
    EfficiencyPair,
    PolicyError,
    ReservationPolicy,
    ValueModel,
    grid_only,
    simulate_standalone,
    solve_reservations,
)
from .tariff import ToUSchedule

CERT_TOL = 1e-9


class SettlementError(ValueError):
    pass


def reservation_trajectory(
    u_prev,
    x,
    tau: int,
    sched: ToUSchedule,
    reservations: Sequence[float] = (),
    eff: EfficiencyPair = IDEAL,
):
    """One dispatch step: returns ``(u_next, discharged, grid_purchase)``.

    ``discharged`` is energy drawn from storage; ``eta_out`` of it reaches the
    load.  Works elementwise on arrays.
    """
    if not 1 <= tau <= sched.n_periods:
        raise SettlementError(f"period {tau} is not a storage period")
    if tau <= sched.p:
        m = reservations[tau - 1]
    else:
        m = np.inf if grid_only(sched, eff)[tau] else 0.0
    u_prev = np.asarray(u_prev, dtype=float)
    x = np.asarray(x, dtype=float)
    served = np.minimum(x, np.maximum(0.0, u_prev - m) * eff.eta_out)
    taken = served / eff.eta_out
    return u_prev - taken, taken, x - served


class SharingMarket:
    """Pricing rule of one collective, built on its pre-drawn demand samples.

    Reservations are solved collectively unless given.  ``capacity`` is only
    needed for settlement.
    """

    def __init__(
        self,
        sched: ToUSchedule,
        samples: SampleSet,
        eff: EfficiencyPair = IDEAL,
        reservations: Sequence[float] | None = None,
        model: ValueModel | None = None,
    ):
        self.sched = sched
        self.eff = eff
        if model is None:
            model = ValueModel(sched, samples, eff)
            if reservations is None:
                solve_reservations(sched, samples, eff, model)
            else:
                model.thresholds[1 : sched.p + 1] = reservations
        self.model = model
        self.reservations = model.reservations

    def thresholds(self) -> np.ndarray:
        return self.model.dispatch_thresholds()

    def price(self, tau: int, x_c, u_prev) -> np.ndarray:
        """Sharing price for collective demand ``x_c`` with ``u_prev`` kWh stored."""
        x_c = np.atleast_1d(np.asarray(x_c, dtype=float))
        u_prev = np.broadcast_to(np.asarray(u_prev, dtype=float), x_c.shape)
        m = self.thresholds()[tau]
        avail = np.maximum(0.0, u_prev - m) * self.eff.eta_out
        deficit = x_c >= avail
        out = np.full(x_c.shape, self.sched.rate(tau))
        surplus = ~deficit
        if surplus.any():
            u_post = u_prev[surplus] - x_c[surplus] / self.eff.eta_out
            mv = self.model.mv(tau, u_post)
            out[surplus] = (self.sched.off_peak_rate / self.eff.eta_in + mv) / self.eff.eta_out
        return out

    def price_se(self, tau: int, x_c, u_prev) -> np.ndarray:
        x_c = np.atleast_1d(np.asarray(x_c, dtype=float))
        u_prev = np.broadcast_to(np.asarray(u_prev, dtype=float), x_c.shape)
        avail = np.maximum(0.0, u_prev - self.thresholds()[tau]) * self.eff.eta_out
        out = np.zeros(x_c.shape)
        surplus = x_c < avail
        if surplus.any():
            u_post = u_prev[surplus] - x_c[surplus] / self.eff.eta_out
            out[surplus] = self.model.mv_se(tau, u_post) / self.eff.eta_out
        return out


def clearing_price(
    tau: int,
    x_c: float,
    u_prev: float,
    sched: ToUSchedule,
    samples: SampleSet,
    reservations: Sequence[float] | None = None,
    eff: EfficiencyPair = IDEAL,
) -> float:
    """Sharing price of period ``tau`` (see :class:`SharingMarket`)."""
    return float(SharingMarket(sched, samples, eff, reservations).price(tau, x_c, u_prev)[0])


def rus_reservation(sched: ToUSchedule, samples: SampleSet) -> float:
    """Collective partial-peak reservation of a three-tier ramp-up schedule.

    The peak-demand quantile at ``(pi_peak - pi_partial) / (pi_peak - pi_off)``.
    """
    if (sched.p, sched.q) != (1, 1):
        raise PolicyError("needs one ramp-up period followed by the peak")
    lo, mid, hi = sched.rates
    return weighted_quantile(samples.collective[:, 2], samples.w, (hi - mid) / (hi - lo))


@dataclass
class MarketOutcome:
    """Settlement of one or more days (leading axis = day).

    ``procurement`` is signed per firm and period: positive energy bought
    from the park (at the sharing price), negative energy supplied to it.
    ``cash`` is the matching payment (column 0 holds the off-peak bill).
    """

    firm_ids: tuple[str, ...]
    capacities: np.ndarray
    demand: np.ndarray
    prices: np.ndarray
    procurement: np.ndarray
    cash: np.ndarray
    recharge_cost: np.ndarray
    collective_level: np.ndarray
    collective_discharge: np.ndarray
    grid: np.ndarray
    deficit: np.ndarray
    aggregator_balance: np.ndarray
    policy: ReservationPolicy

    @property
    def firm_cost(self) -> np.ndarray:
        """Daily operating cost per firm, shape ``(n_days, n_firms)``."""
        return self.cash.sum(axis=2) + self.recharge_cost

    @property
    def total_cost(self) -> np.ndarray:
        return self.firm_cost.sum(axis=1)

    @property
    def n_days(self) -> int:
        return self.demand.shape[0]

    def day(self, d: int) -> "MarketOutcome":
        sl = slice(d, d + 1)
        return MarketOutcome(
            self.firm_ids,
            self.capacities,
            self.demand[sl],
            self.prices[sl],
            self.procurement[sl],
            self.cash[sl],
            self.recharge_cost[sl],
            self.collective_level[sl],
            self.collective_discharge[sl],
            self.grid[sl],
            self.deficit[sl],
            self.aggregator_balance[sl],
            self.policy,
        )


def settle_days(
    demand: np.ndarray,
    capacities: Sequence[float],
    market: SharingMarket,
    firm_ids: Sequence[str] | None = None,
    collective_capacity: float | None = None,
) -> MarketOutcome:
    """Dispatch and settle realized days of shape ``(n_days, n_firms, T+1)``.

    The collective discharge is split among firms in proportion to what each
    still holds.
    """
    sched, eff = market.sched, market.eff
    x = np.asarray(demand, dtype=float)
    if x.ndim == 2:
        x = x[None]
    n_days, n_firms, width = x.shape
    T = sched.n_periods
    if width != T + 1:
        raise SettlementError("demand does not match the schedule's periods")
    caps = np.asarray(capacities, dtype=float)
    if caps.shape != (n_firms,) or np.any(caps < 0):
        raise SettlementError("need one non-negative capacity per firm")
    c_c = float(caps.sum())
    if collective_capacity is not None and abs(collective_capacity - c_c) > CERT_TOL * max(1.0, c_c):
        raise SettlementError(f"firm capacities sum to {c_c}, not {collective_capacity}")

    xc = x.sum(axis=1)
    u_i = np.broadcast_to(caps, (n_days, n_firms)).copy()
    u_c = np.full(n_days, c_c)
    prices = np.zeros((n_days, T + 1))
    prices[:, 0] = sched.off_peak_rate
    proc = np.zeros_like(x)
    proc[:, :, 0] = x[:, :, 0]
    cash = np.zeros_like(x)
    cash[:, :, 0] = sched.off_peak_rate * x[:, :, 0]
    level = np.zeros((n_days, T + 1))
    level[:, 0] = u_c
    out = np.zeros((n_days, T + 1))
    grid = np.zeros((n_days, T + 1))
    grid[:, 0] = xc[:, 0]
    deficit = np.zeros((n_days, T + 1), dtype=bool)
    balance = np.zeros(n_days)
    thr = market.thresholds()
    for tau in range(1, T + 1):
        avail = np.maximum(0.0, u_c - thr[tau]) * eff.eta_out
        deficit[:, tau] = xc[:, tau] >= avail
        price = market.price(tau, xc[:, tau], u_c)
        u_next, taken, bought = reservation_trajectory(u_c, xc[:, tau], tau, sched, market.reservations, eff)
        with np.errstate(invalid="ignore", divide="ignore"):
            share = np.where(u_c[:, None] > 0, u_i / u_c[:, None], 0.0)
        taken_i = taken[:, None] * share
        u_i = np.maximum(u_i - taken_i, 0.0)
        d_i = x[:, :, tau] - taken_i * eff.eta_out
        proc[:, :, tau] = d_i
        cash[:, :, tau] = price[:, None] * d_i
        balance += cash[:, :, tau].sum(axis=1) - sched.rate(tau) * bought
        prices[:, tau] = price
        out[:, tau] = taken
        grid[:, tau] = bought
        u_c = u_next
        level[:, tau] = u_c
    recharge = sched.off_peak_rate * (caps[None, :] - u_i) / eff.eta_in
    ids = tuple(firm_ids) if firm_ids is not None else tuple(f"firm{i}" for i in range(n_firms))
    pol = ReservationPolicy(c_c, market.reservations, eff)
    return MarketOutcome(ids, caps, x, prices, proc, cash, recharge, level, out, grid, deficit, balance, pol)


def settle_day(
    realized: RealizedDay,
    collective_capacity: float,
    capacities: Sequence[float],
    sched: ToUSchedule,
    samples: SampleSet,
    eff: EfficiencyPair = IDEAL,
    market: SharingMarket | None = None,
) -> MarketOutcome:
    """Settle a single realized day (see :func:`settle_days`)."""
    market = market or SharingMarket(sched, samples, eff)
    return settle_days(realized.demand[None], capacities, market, realized.firm_ids, collective_capacity)


@dataclass(frozen=True)
class Certificate:
    passed: bool
    max_error: float
    detail: str = ""

    def __bool__(self) -> bool:
        return self.passed


def budget_certificate(outcome: MarketOutcome, tol: float = CERT_TOL) -> Certificate:
    worst = float(np.max(np.abs(outcome.aggregator_balance))) if outcome.n_days else 0.0
    return Certificate(worst < tol, worst, f"max |aggregator balance| = {worst:.3g} cents")


def social_cost_certificate(outcome: MarketOutcome, sched: ToUSchedule, tol: float = CERT_TOL) -> Certificate:
    """Check settled firm costs add up to the collective running the same policy alone."""
    ledger = simulate_standalone(outcome.policy, sched, outcome.demand.sum(axis=1))
    diff = outcome.total_cost - ledger.cost
    worst = float(np.max(np.abs(diff))) if diff.size else 0.0
    detail = f"max |settled - collective| = {worst:.3g} cents"
    if worst >= tol:
        d = int(np.argmax(np.abs(diff)))
        detail += f"; day {d}: settled {outcome.total_cost[d]:.12g} vs collective {ledger.cost[d]:.12g}"
    return Certificate(worst < tol, worst, detail)


@dataclass(frozen=True)
class PriceLawReport:
    violations: int
    deficit_mismatches: int
    n_prices: int

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.deficit_mismatches == 0


def price_law_report(outcome: MarketOutcome, sched: ToUSchedule) -> PriceLawReport:
    """Count prices outside ``[pi_off, pi_tau]`` and deficit periods not priced at ``pi_tau``."""
    rates = sched.rates[1:]
    p = outcome.prices[:, 1:]
    viol = int(np.sum((p < sched.off_peak_rate) | (p > rates[None, :])))
    mism = int(np.sum(outcome.deficit[:, 1:] & (p != rates[None, :])))
    return PriceLawReport(viol, mism, p.size)


def export_outcome_csv(outcome: MarketOutcome, sched: ToUSchedule, firm_path: str | Path, day_path: str | Path) -> None:
    """Per (day, firm) cash flows and per-day prices/aggregator balance."""
    names = [str(sched.period(t)) for t in range(sched.n_periods + 1)]
    with open(firm_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["day_id", "firm_id"]
            + [f"demand_{n}" for n in names]
            + [f"cash_{n}" for n in names]
            + ["recharge_cost", "total"]
        )
        for d in range(outcome.n_days):
            for i, fid in enumerate(outcome.firm_ids):
                w.writerow(
                    [d, fid]
                    + [_num(v) for v in outcome.demand[d, i]]
                    + [_num(v) for v in outcome.cash[d, i]]
                    + [_num(outcome.recharge_cost[d, i]), _num(outcome.firm_cost[d, i])]
                )
    with open(day_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["day_id"] + [f"price_{n}" for n in names[1:]] + ["aggregator_balance"])
        for d in range(outcome.n_days):
            w.writerow([d] + [_num(v) for v in outcome.prices[d, 1:]] + [_num(outcome.aggregator_balance[d])])


def _num(v: float) -> str:
    return repr(float(v)) if math.isfinite(v) else "nan"
