"""Capacity investment game: equilibrium capacities and their certificates.

At equilibrium the firms together buy the capacity the collective would buy
on its own.  Each firm's share is its expected demand given that the
collective just exhausts that capacity, averaged over the ramp-down periods
in which exhaustion can happen.  The weights are the marginal price drop at
that period times the density of the cumulative collective demand there.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .demand import (
    BandEstimate,
    Estimate,
    RareEventError,
    SampleSet,
    conditional_mean_band,
    density_at,
    period_sum,
    weighted_quantile,
)
from .market import SharingMarket, settle_days
from .policy import (
    IDEAL,
    EfficiencyPair,
    ReservationPolicy,
    SolvedPolicy,
    ValueModel,
    investment_cost,
    simulate_standalone,
    solve_policy,
    solve_reservations,
)
from .tariff import ArbitrageWarning, ToUSchedule

CORRECTION_BOUNDS = (0.95, 1.05)
DEVIATION_FACTORS = (0.5, 0.8, 0.9, 1.1, 1.2, 1.5)
MIN_WEIGHT = 1e-6


class EquilibriumError(RuntimeError):
    pass


# --- alignment -------------------------------------------------------------


@dataclass(frozen=True)
class SlopeEstimate:
    firm: str
    ramp_down: int
    r_lo: float
    r_hi: float
    slope: float
    se: float


@dataclass
class AlignmentReport:
    """Finite-difference slopes of each firm's conditional demand in the collective total."""

    slopes: list[SlopeEstimate] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    vacuous: bool = False

    def min_slopes(self) -> dict[tuple[str, int], SlopeEstimate]:
        out: dict[tuple[str, int], SlopeEstimate] = {}
        for s in self.slopes:
            key = (s.firm, s.ramp_down)
            if key not in out or s.slope < out[key].slope:
                out[key] = s
        return out

    @property
    def verdict(self) -> str:
        if self.vacuous:
            return "pass"
        if not self.slopes:
            return "inconclusive"
        if any(s.slope < -2 * s.se for s in self.slopes):
            return "fail"
        if any(s.se > 0 and abs(s.slope) < 2 * s.se for s in self.slopes):
            return "inconclusive"
        return "pass"

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict,
            "min_slopes": [
                {"firm": k[0], "ramp_down": k[1], "slope": v.slope, "se": v.se, "r": [v.r_lo, v.r_hi]}
                for k, v in sorted(self.min_slopes().items())
            ],
            "notes": list(self.notes),
        }


def prefix_constraints(
    sched: ToUSchedule, reservations: Sequence[float], level: float, eta_out: float = 1.0
) -> list[tuple[list[int], float]]:
    """Ramp-up prefixes must leave the reservation untouched: ``S_n < level - M_n * eta_out``."""
    return [(list(range(1, n + 1)), level - reservations[n - 1] * eta_out) for n in range(1, sched.p + 1)]


def check_alignment(
    samples: SampleSet,
    sched: ToUSchedule,
    reservations: Sequence[float] | None = None,
    eff: EfficiencyPair = IDEAL,
    r_grid: Sequence[float] | None = None,
    quantiles: Sequence[float] = (0.1, 0.3, 0.5, 0.7, 0.9),
) -> AlignmentReport:
    """Estimate slopes of ``G(r) = E[firm's cumulative demand | collective cumulative = r]``.

    One curve per firm and ramp-down period, on a grid of ``r`` values
    (quantiles of the collective cumulative demand unless ``r_grid`` is
    given).  Grid points whose conditioning event is too rare are dropped
    and noted.
    """
    report = AlignmentReport()
    if samples.n_firms < 2:
        report.vacuous = True
        report.notes.append("single firm: conditional demand equals the total")
        return report
    if reservations is None:
        reservations = solve_reservations(sched, samples, eff)
    for l in range(1, sched.q + 1):
        periods = list(range(1, sched.p + l + 1))
        total = period_sum(samples.collective, periods)
        if r_grid is not None:
            grid = list(r_grid)
        elif samples.exact:
            lo = weighted_quantile(total, samples.w, quantiles[0])
            hi = weighted_quantile(total, samples.w, quantiles[-1])
            grid = [v for v in np.unique(total) if lo <= v <= hi]
        else:
            grid = sorted({weighted_quantile(total, samples.w, q) for q in quantiles})
        points: list[tuple[float, list[BandEstimate]]] = []
        for r in grid:
            cons = prefix_constraints(sched, reservations, r, eff.eta_out)
            try:
                est = [conditional_mean_band(samples, i, periods, periods, r, cons) for i in range(samples.n_firms)]
            except RareEventError as exc:
                report.notes.append(f"RD({l}) r={r:.4g} dropped: {exc}")
                continue
            points.append((r, est))
        for (ra, ea), (rb, eb) in zip(points, points[1:]):
            for i, fid in enumerate(samples.firm_ids):
                dr = rb - ra
                slope = (eb[i].mean - ea[i].mean) / dr
                se = math.hypot(ea[i].se, eb[i].se) / dr
                report.slopes.append(SlopeEstimate(fid, l, ra, rb, slope, se))
    return report


# --- equilibrium ------------------------------------------------------------


@dataclass
class EquilibriumResult:
    collective_capacity: float
    allocations: dict[str, float]
    rho_weights: tuple[float, ...]
    lambda_weights: tuple[float, float] | None
    alignment: AlignmentReport | None
    reservations: tuple[float, ...]
    correction_factor: float
    band_se: dict[str, float]
    efficiency: EfficiencyPair = IDEAL
    solved: SolvedPolicy | None = field(default=None, repr=False)
    notes: list[str] = field(default_factory=list)

    @property
    def capacities(self) -> np.ndarray:
        return np.array(list(self.allocations.values()))

    @property
    def policy(self) -> ReservationPolicy:
        return ReservationPolicy(self.collective_capacity, self.reservations, self.efficiency)

    def to_json(self) -> dict:
        return {
            "collective_capacity_kwh": self.collective_capacity,
            "reservations_kwh": list(self.reservations),
            "allocations_kwh": dict(self.allocations),
            "rho_weights": list(self.rho_weights),
            "lambda_weights": list(self.lambda_weights) if self.lambda_weights else None,
            "correction_factor": self.correction_factor,
            "allocation_se_kwh": dict(self.band_se),
            "alignment": self.alignment.to_json() if self.alignment else None,
            "eta_in": self.efficiency.eta_in,
            "eta_out": self.efficiency.eta_out,
            "notes": list(self.notes),
        }


def collective_capacity(sched: ToUSchedule, samples: SampleSet, eff: EfficiencyPair = IDEAL) -> SolvedPolicy:
    """Social-optimum (M, C) of the merged community; its capacity is the equilibrium total."""
    if sched.peak_rate * eff.eta_out - sched.off_peak_rate / eff.eta_in <= sched.storage_cost * eff.eta_out:
        warnings.warn("arbitrage is not viable; collective capacity is 0", ArbitrageWarning, stacklevel=2)
    return solve_policy(sched, samples, eff)


def rho_weights(
    capacity: float, sched: ToUSchedule, samples: SampleSet, eff: EfficiencyPair = IDEAL
) -> np.ndarray:
    """Weight of each ramp-down period in the allocation, normalized to sum to 1.

    Proportional to the rate drop after the period times the density of the
    collective demand accumulated through it, at ``capacity * eta_out``.
    Densities are unconditional, as in the closed-form weights.
    """
    r = capacity * eff.eta_out
    rates = sched.rates
    sentinel = sched.off_peak_rate / (eff.eta_in * eff.eta_out)
    raw = np.zeros(sched.q)
    for l in range(1, sched.q + 1):
        k = sched.p + l
        drop = rates[k] - (rates[k + 1] if k < sched.n_periods else sentinel)
        total = period_sum(samples.collective, range(1, k + 1))
        raw[l - 1] = drop * density_at(total, samples.w, r, samples.lattice)
    return raw / raw.sum()


def equilibrium_allocation(
    capacity: float,
    reservations: Sequence[float],
    samples: SampleSet,
    sched: ToUSchedule,
    eff: EfficiencyPair = IDEAL,
) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Per-firm capacities summing to ``capacity``.

    Returns ``(allocations, rho, correction_factor, standard_errors)``.  The
    band-conditional means are rescaled to hit the total exactly; a rescale
    outside 5% is an error.
    """
    n = samples.n_firms
    if capacity <= 0:
        return np.zeros(n), rho_weights(0.0, sched, samples, eff), 1.0, np.zeros(n)
    if n == 1:
        return np.array([capacity]), rho_weights(capacity, sched, samples, eff), 1.0, np.zeros(1)
    level = capacity * eff.eta_out
    rho = rho_weights(capacity, sched, samples, eff)
    cons = prefix_constraints(sched, reservations, level, eff.eta_out)
    alloc = np.zeros(n)
    var = np.zeros(n)
    for l in range(1, sched.q + 1):
        if rho[l - 1] < MIN_WEIGHT:
            continue
        periods = list(range(1, sched.p + l + 1))
        for i in range(n):
            est = conditional_mean_band(samples, i, periods, periods, level, cons)
            alloc[i] += rho[l - 1] * est.mean / eff.eta_out
            var[i] += (rho[l - 1] * est.se / eff.eta_out) ** 2
    raw_total = alloc.sum()
    if raw_total <= 0:
        raise EquilibriumError("conditional demands are all zero at the collective capacity")
    factor = capacity / raw_total
    lo, hi = CORRECTION_BOUNDS
    if not lo <= factor <= hi:
        raise EquilibriumError(
            f"allocation correction factor {factor:.4f} outside [{lo}, {hi}]; "
            "the conditioning band is too wide, use more samples"
        )
    return alloc * factor, rho, factor, np.sqrt(var) * factor


def solve_equilibrium(
    sched: ToUSchedule,
    samples: SampleSet,
    eff: EfficiencyPair = IDEAL,
    check: bool = True,
    force: bool = False,
) -> EquilibriumResult:
    """Collective capacity, per-firm allocations and the alignment report.

    A failed alignment check raises unless ``force`` is set.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ArbitrageWarning)
        solved = collective_capacity(sched, samples, eff)
    cap = solved.policy.capacity
    res = solved.policy.reservations
    notes: list[str] = []
    report = check_alignment(samples, sched, res, eff) if check else None
    if report is not None and report.verdict == "fail" and not force:
        raise EquilibriumError("alignment condition fails; no pure equilibrium is guaranteed")
    if report is not None and report.verdict != "pass":
        notes.append(f"alignment {report.verdict}")
    alloc, rho, factor, se = equilibrium_allocation(cap, res, samples, sched, eff)
    lam = (float(rho[0]), float(rho[1])) if (sched.p, sched.q) == (0, 2) else None
    return EquilibriumResult(
        cap,
        dict(zip(samples.firm_ids, (float(a) for a in alloc))),
        tuple(float(v) for v in rho),
        lam,
        report,
        res,
        factor,
        dict(zip(samples.firm_ids, (float(s) for s in se))),
        eff,
        solved,
        notes,
    )


# --- certificates ----------------------------------------------------------


def _paired(diff: np.ndarray) -> Estimate:
    return Estimate(float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else 0.0)


@dataclass(frozen=True)
class DeviationResult:
    factor: float
    capacity: float
    cost_increase: Estimate

    @property
    def ok(self) -> bool:
        return self.cost_increase.value >= -3 * self.cost_increase.se


@dataclass
class BestResponseCertificate:
    firm: str
    alpha: Estimate
    deviations: list[DeviationResult]

    @property
    def alpha_ok(self) -> bool:
        return abs(self.alpha.value) < 3 * self.alpha.se or self.alpha.value == 0

    @property
    def passed(self) -> bool:
        return self.alpha_ok and all(d.ok for d in self.deviations)


def alpha_residual(eq: EquilibriumResult, sched: ToUSchedule, fresh: SampleSet) -> Estimate:
    """Capacity first-order condition re-evaluated on independent samples.

    ``pi_s * eta_out - MV_0(C_c)``; the standard error combines the noise of
    the fresh evaluation with that of the sample set the root was found on.
    """
    eff = eq.efficiency
    model = ValueModel(sched, fresh, eff, eq.reservations)
    c = eq.collective_capacity
    val = sched.storage_cost * eff.eta_out - float(model.mv(0, c)[0])
    se = float(model.mv_se(0, c)[0])
    if eq.solved is not None:
        se = math.hypot(se, float(eq.solved.model.mv_se(0, c)[0]))
    return Estimate(val, se)


def firm_costs(
    capacities: np.ndarray, market: SharingMarket, days: np.ndarray, sched: ToUSchedule
) -> np.ndarray:
    """Daily cost per firm including amortized investment, shape ``(n_days, n_firms)``."""
    out = settle_days(days, capacities, market)
    return out.firm_cost + sched.storage_cost * market.eff.eta_out * capacities[None, :]


def verify_best_response(
    firm: int,
    eq: EquilibriumResult,
    sched: ToUSchedule,
    market: SharingMarket,
    days: np.ndarray,
    fresh: SampleSet | None = None,
    factors: Sequence[float] = DEVIATION_FACTORS,
    base_costs: np.ndarray | None = None,
) -> BestResponseCertificate:
    """Check that scaling one firm's capacity, others fixed, never lowers its expected cost.

    Costs are compared on the same realized days (paired differences).
    """
    caps = eq.capacities
    base = firm_costs(caps, market, days, sched) if base_costs is None else base_costs
    devs = []
    for f in factors:
        trial = caps.copy()
        trial[firm] = caps[firm] * f
        cost = firm_costs(trial, market, days, sched)
        devs.append(DeviationResult(f, float(trial[firm]), _paired(cost[:, firm] - base[:, firm])))
    alpha = alpha_residual(eq, sched, fresh) if fresh is not None else Estimate(0.0, 0.0)
    return BestResponseCertificate(list(eq.allocations)[firm], alpha, devs)


@dataclass(frozen=True)
class CoalitionResult:
    members: tuple[str, ...]
    capacity_alone: float
    gain_from_defecting: Estimate

    @property
    def stable(self) -> bool:
        return self.gain_from_defecting.value <= 3 * self.gain_from_defecting.se


@dataclass
class CoalitionCertificate:
    results: list[CoalitionResult]
    grand_vs_singletons: Estimate | None = None

    @property
    def passed(self) -> bool:
        return all(r.stable for r in self.results)


def coalition_stability(
    partition: Sequence[Sequence[int]],
    samples: SampleSet,
    sched: ToUSchedule,
    eq: EquilibriumResult,
    market: SharingMarket,
    days: np.ndarray,
) -> CoalitionCertificate:
    """Compare each coalition's stand-alone cost with its members' grand-coalition costs.

    A coalition on its own invests its own collective optimum and, sharing
    internally, pays its collective cost.  Paired over the same days.
    """
    flat = sorted(i for block in partition for i in block)
    if flat != list(range(samples.n_firms)):
        raise EquilibriumError("partition must cover every firm exactly once")
    eff = eq.efficiency
    grand = firm_costs(eq.capacities, market, days, sched)
    results = []
    alone_total = np.zeros(days.shape[0])
    for block in partition:
        idx = list(block)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ArbitrageWarning)
            pol = solve_policy(sched, samples.subset(idx).merged(), eff).policy
        alone = simulate_standalone(pol, sched, days[:, idx].sum(axis=1)).cost + investment_cost(pol, sched)
        alone_total += alone
        gain = grand[:, idx].sum(axis=1) - alone
        results.append(CoalitionResult(tuple(samples.firm_ids[i] for i in idx), pol.capacity, _paired(gain)))
    summary = _paired(alone_total - grand.sum(axis=1)) if len(partition) == samples.n_firms else None
    return CoalitionCertificate(results, summary)
