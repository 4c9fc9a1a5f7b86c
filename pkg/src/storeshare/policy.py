"""Optimal (M, C) arbitrage for one decision-maker and its daily simulation.

The central object is the marginal value of stored energy.  After period
``j`` with ``u`` kWh in storage, one more unit just above ``u`` is eventually
discharged in the first later period ``k`` where the policy runs short, and
then earns the spread ``r_k = pi_k * eta_out - pi_off / eta_in``.  Its
expected value is ``MV_j(u) = sum_k r_k P_j^k(u)`` with ``P_j^k`` the
first-purchase probabilities.  Reservations, capacity and sharing prices are
all read off this one curve.

Purchase times are found through running maxima: with no purchase since
``j`` the storage before period ``m`` holds ``u - S_{m-1} / eta_out`` where
``S`` is cumulative demand, so the first purchase happens at the first ``k``
where ``B_k = max_{m<=k} (S_m / eta_out + M_m)`` exceeds ``u`` (``M_m`` is 0
in ramp-down periods).  A purchase is a strictly positive deficit.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .demand import Estimate, RealizedDay, SampleSet, weighted_quantile
from .tariff import ArbitrageWarning, ToUSchedule

BISECTION_TOL = 1e-4
BRACKET_QUANTILE = 0.9999
MONOTONE_SE_FACTOR = 5.0


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class EfficiencyPair:
    eta_in: float = 1.0
    eta_out: float = 1.0

    def __post_init__(self):
        for name in ("eta_in", "eta_out"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise PolicyError(f"{name} must lie in (0, 1], got {v}")

    @property
    def ideal(self) -> bool:
        return self.eta_in == 1.0 and self.eta_out == 1.0


IDEAL = EfficiencyPair()


def spreads(sched: ToUSchedule, eff: EfficiencyPair = IDEAL) -> np.ndarray:
    """Per-kWh saving of serving period ``k`` from storage, indexed 0..T+1.

    Entry 0 is unused and entry ``T+1`` is the zero sentinel, which
    corresponds to the rate ``pi_off / (eta_in * eta_out)``.
    """
    r = np.zeros(sched.n_periods + 2)
    r[1:-1] = sched.rates[1:] * eff.eta_out - sched.off_peak_rate / eff.eta_in
    return r


def grid_only(sched: ToUSchedule, eff: EfficiencyPair = IDEAL) -> np.ndarray:
    """Ramp-down periods where a stored kWh costs more than buying it then.

    Storage sits idle in these periods; they close the day early.
    """
    out = np.zeros(sched.n_periods + 1, dtype=bool)
    out[sched.p + 1 :] = spreads(sched, eff)[sched.p + 1 : sched.n_periods + 1] < 0
    return out


def check_viability(sched: ToUSchedule, eff: EfficiencyPair = IDEAL) -> bool:
    ok = sched.peak_rate * eff.eta_out - sched.off_peak_rate / eff.eta_in > 0
    if not ok:
        warnings.warn("round-trip losses eat the whole peak spread", ArbitrageWarning, stacklevel=2)
    return ok


@dataclass(frozen=True)
class ReservationPolicy:
    capacity: float
    reservations: tuple[float, ...] = ()
    efficiency: EfficiencyPair = IDEAL

    def __post_init__(self):
        res = tuple(float(m) for m in self.reservations)
        object.__setattr__(self, "reservations", res)
        chain = (float(self.capacity),) + res
        if not all(math.isfinite(v) and v >= 0 for v in chain):
            raise PolicyError("capacity and reservations must be finite and non-negative")
        if any(b > a + 1e-12 for a, b in zip(res, res[1:])):
            raise PolicyError(f"inconsistent reservation ordering {res}")

    def thresholds(self, sched: ToUSchedule) -> np.ndarray:
        """Reservation per flat period index (zero off peak and in ramp-down)."""
        if len(self.reservations) != sched.p:
            raise PolicyError(f"policy has {len(self.reservations)} reservations, schedule has p={sched.p}")
        out = np.zeros(sched.n_periods + 1)
        out[1 : sched.p + 1] = self.reservations
        out[grid_only(sched, self.efficiency)] = np.inf
        return out

    def to_json(self) -> dict:
        return {
            "capacity_kwh": self.capacity,
            "reservations_kwh": list(self.reservations),
            "eta_in": self.efficiency.eta_in,
            "eta_out": self.efficiency.eta_out,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ReservationPolicy":
        return cls(
            float(doc["capacity_kwh"]),
            tuple(doc.get("reservations_kwh", ())),
            EfficiencyPair(float(doc.get("eta_in", 1.0)), float(doc.get("eta_out", 1.0))),
        )


def save_policy(policy: ReservationPolicy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(policy.to_json(), indent=2), encoding="utf-8")


def load_policy(path: str | Path) -> ReservationPolicy:
    return ReservationPolicy.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


class MarginalValue:
    """Marginal value curve ``u -> MV_j(u)`` on a fixed sample matrix.

    ``demand`` is the decision-maker's demand, shape ``(n, T+1)``.  The curve
    is a right-continuous step function with breakpoints at the sampled
    ``B_k``.  It is monotone exactly when no ramp-up period lies ahead;
    otherwise sampling noise can produce small upward steps, which are
    removed by a running minimum and rejected if larger than five standard
    errors.
    """

    def __init__(
        self,
        demand: np.ndarray,
        weights: np.ndarray,
        j: int,
        thresholds: np.ndarray,
        r: np.ndarray,
        eta_out: float = 1.0,
        exact: bool = False,
    ):
        T = demand.shape[1] - 1
        if not 0 <= j < T:
            raise PolicyError(f"no period follows {j}")
        self.j = j
        self.exact = exact
        self.n = demand.shape[0]
        self.top = float(r[j + 1])
        self.r = np.asarray(r[j + 1 : T + 1], dtype=float)
        self.coef = self.r - np.asarray(r[j + 2 : T + 2], dtype=float)
        cum = np.cumsum(demand[:, j + 1 :], axis=1) / eta_out
        self.last_b = np.maximum.accumulate(cum + thresholds[j + 1 :], axis=1)
        self._sorted = []
        self._cumw = []
        for col in self.last_b.T:
            order = np.argsort(col, kind="stable")
            self._sorted.append(col[order])
            self._cumw.append(np.concatenate([[0.0], np.cumsum(weights[order])]))

    def cdfs(self, u) -> np.ndarray:
        """``F_k(u) = Pr(B_k <= u)`` for every later period, shape ``(T-j, len(u))``."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return np.array([c[np.searchsorted(s, u, side="right")] for s, c in zip(self._sorted, self._cumw)])

    def probs(self, u) -> np.ndarray:
        """First-purchase probabilities ``P_j^k(u)`` for ``k = j+1..T``."""
        F = self.cdfs(u)
        prev = np.vstack([np.ones((1, F.shape[1])), F[:-1]])
        return np.clip(prev - F, 0.0, 1.0)

    def raw(self, u) -> np.ndarray:
        v = self.top - self.coef @ self.cdfs(u)
        # cancellation residue when every later purchase is certain
        v[np.abs(v) < 1e-9] = 0.0
        return v

    def se(self, u) -> np.ndarray:
        if self.exact:
            return np.zeros(np.atleast_1d(u).shape)
        P = self.probs(u)
        mean = self.r @ P
        second = (self.r**2) @ P
        return np.sqrt(np.maximum(second - mean**2, 0.0) / self.n)

    @property
    def monotone(self) -> bool:
        return bool(np.all(self.coef >= 0))

    @cached_property
    def breakpoints(self) -> np.ndarray:
        return np.unique(np.concatenate(self._sorted))

    @cached_property
    def _envelope(self) -> np.ndarray:
        bp = self.breakpoints
        full = np.concatenate([[self.top], self.raw(bp)])
        env = np.minimum.accumulate(full)
        excursion = full[1:] - env[1:]
        if self.exact:
            tol = 1e-9
        else:
            # The rise from the running minimum is carried by the paths whose
            # first purchase moved in between; each moves the mean by at most
            # the spread range over n, which bounds the standard error.
            idx = np.arange(full.size)
            at_min = np.maximum.accumulate(np.where(full <= env, idx, 0))
            moved = np.concatenate([[0.0], self.cdfs(bp).sum(axis=0)]) * self.n
            moved = np.maximum(moved - moved[at_min], 0.0)[1:]
            spread = max(self.r.max(), 0.0) - min(self.r.min(), 0.0)
            tol = MONOTONE_SE_FACTOR * spread * np.sqrt(moved) / self.n + 1e-12
        bad = excursion > tol
        if np.any(bad):
            worst = int(np.argmax(np.where(bad, excursion, -np.inf)))
            raise PolicyError(
                "positive-density assumption violated or sample count too low: marginal value rises by "
                f"{excursion[worst]:.4g} at {bp[worst]:.4g} kWh after period {self.j}"
            )
        return env

    def __call__(self, u) -> np.ndarray:
        if self.monotone:
            return self.raw(u)
        idx = np.searchsorted(self.breakpoints, np.atleast_1d(np.asarray(u, dtype=float)), side="right")
        return self._envelope[idx]

    def upper_bracket(self) -> float:
        """A storage level at (or beyond) which the curve is practically zero."""
        return float(self._sorted[-1][-1])


class ValueModel:
    """Marginal value curves of one decision-maker for a fixed policy shape.

    ``thresholds`` holds the reservation per flat period index; curves for
    period ``j`` depend only on entries after ``j``, so a backward solve can
    fill them in as it goes.
    """

    def __init__(
        self,
        sched: ToUSchedule,
        samples: SampleSet,
        eff: EfficiencyPair = IDEAL,
        reservations: Sequence[float] | None = None,
    ):
        if samples.n_periods != sched.n_periods:
            raise PolicyError("sample set and schedule disagree on the number of periods")
        self.sched = sched
        self.samples = samples
        self.eff = eff
        self.r = spreads(sched, eff)
        # idle periods add nothing, as if the day ended before them
        self.idle = grid_only(sched, eff)
        self.r[: sched.n_periods + 1][self.idle] = 0.0
        self.demand = samples.collective
        self.thresholds = np.zeros(sched.n_periods + 1)
        if reservations is not None:
            self.thresholds[1 : sched.p + 1] = reservations
        self._curves: dict[int, MarginalValue] = {}

    @property
    def reservations(self) -> tuple[float, ...]:
        return tuple(float(m) for m in self.thresholds[1 : self.sched.p + 1])

    @property
    def hold_all(self) -> float:
        """A level above anything storage could ever usefully hold on these samples."""
        return float(self.demand[:, 1:].sum(axis=1).max()) / self.eff.eta_out + 1.0

    def dispatch_thresholds(self) -> np.ndarray:
        """Per-period level storage may not go below (infinite in idle periods)."""
        out = self.thresholds.copy()
        out[self.idle] = np.inf
        return out

    def curve(self, j: int) -> MarginalValue:
        if j not in self._curves:
            self._curves[j] = MarginalValue(
                self.demand, self.samples.w, j, self.thresholds, self.r, self.eff.eta_out, self.samples.exact
            )
        return self._curves[j]

    def active_period(self, j: int, u: np.ndarray) -> np.ndarray:
        """Last period ``m >= j`` whose reservation exceeds ``u``.

        Periods in between never touch energy below their reservation, so the
        marginal unit at ``u`` first becomes usable after ``m``.
        """
        jp = np.full(u.shape, j, dtype=int)
        for m in range(j + 1, self.sched.p + 1):
            jp = np.where(self.thresholds[m] > u, m, jp)
        return jp

    def mv(self, j: int, u) -> np.ndarray:
        """Marginal value of the unit just above ``u`` kWh held after period ``j``."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        out = np.zeros(u.shape)
        if j >= self.sched.n_periods:
            return out
        jp = self.active_period(j, u)
        for m in np.unique(jp):
            sel = jp == m
            out[sel] = self.curve(int(m))(u[sel])
        return out

    def mv_se(self, j: int, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        out = np.zeros(u.shape)
        if j >= self.sched.n_periods or self.samples.exact:
            return out
        jp = self.active_period(j, u)
        for m in np.unique(jp):
            sel = jp == m
            out[sel] = self.curve(int(m)).se(u[sel])
        return out

    def candidates(self, j: int, lo: float) -> np.ndarray:
        """Every level where the composite curve after ``j`` can change value."""
        pts = [np.array([lo]), self.thresholds[j + 1 : self.sched.p + 1]]
        pts += [self.curve(m).breakpoints for m in range(j, self.sched.p + 1) if m < self.sched.n_periods]
        allp = np.unique(np.concatenate(pts))
        return allp[allp >= lo]

    def smallest_level(self, j: int, target: float, lo: float = 0.0) -> float:
        """Smallest ``u >= lo`` with ``MV_j(u) <= target``.

        Exact sets search the breakpoints directly; Monte Carlo sets bisect to
        ``BISECTION_TOL`` and return the upper end of the final bracket.
        """
        if self.mv(j, lo)[0] <= target + 1e-12:
            return lo
        if self.samples.exact:
            pts = self.candidates(j, lo)
            ok = self.mv(j, pts) <= target + 1e-12
            if not ok.any():
                raise PolicyError("marginal value never falls to the target")
            return float(pts[np.argmax(ok)])
        top = self.curve(j).last_b[:, -1]
        hi = max(weighted_quantile(top, self.samples.w, BRACKET_QUANTILE), lo)
        if self.mv(j, hi)[0] > target:
            hi = max(float(top.max()), lo) + BISECTION_TOL
            limit = 4 * max(hi, 1.0)
            while self.mv(j, hi)[0] > target:
                hi *= 2
                if hi > limit:
                    raise PolicyError(f"marginal value after period {j} never falls to {target:.4g}")
        while hi - lo > BISECTION_TOL:
            mid = 0.5 * (lo + hi)
            if self.mv(j, mid)[0] <= target:
                hi = mid
            else:
                lo = mid
        return float(hi)


def first_purchase_prob(
    j: int,
    k: int,
    policy: ReservationPolicy,
    sched: ToUSchedule,
    samples: SampleSet,
    state: float | None = None,
) -> Estimate:
    """Probability that ``k`` is the first period after ``j`` needing grid energy.

    ``state`` is the storage level after period ``j`` (the capacity when
    ``j`` is off peak).  Reservations follow ``policy``.
    """
    if not 0 <= j < k <= sched.n_periods:
        raise PolicyError(f"need 0 <= j < k <= {sched.n_periods}, got j={j}, k={k}")
    u = policy.capacity if state is None else state
    model = ValueModel(sched, samples, policy.efficiency, policy.reservations)
    prob = float(model.curve(j).probs(u)[k - j - 1, 0])
    se = 0.0 if samples.exact else math.sqrt(prob * (1 - prob) / samples.n)
    return Estimate(prob, se)


def marginal_revenue(
    j: int,
    level: float,
    downstream: Sequence[float],
    sched: ToUSchedule,
    samples: SampleSet,
    eff: EfficiencyPair = IDEAL,
) -> Estimate:
    """Expected revenue of reserving one more kWh at ``level`` in ramp-up period ``j``.

    ``downstream`` holds the reservations of periods ``j+1..p``.
    """
    if not 1 <= j <= sched.p:
        raise PolicyError(f"period {j} is not a ramp-up period")
    if len(downstream) != sched.p - j:
        raise PolicyError(f"expected {sched.p - j} downstream reservations")
    res = [0.0] * j + list(downstream)
    model = ValueModel(sched, samples, eff, res)
    curve = model.curve(j)
    return Estimate(float(curve(level)[0]), float(curve.se(level)[0]))


def solve_reservations(
    sched: ToUSchedule, samples: SampleSet, eff: EfficiencyPair = IDEAL, model: ValueModel | None = None
) -> tuple[float, ...]:
    """Reservations ``M_1..M_p``, solved backward from the last ramp-up period.

    ``M_j`` is the smallest level whose marginal value no longer beats
    discharging now, which also makes ``M_j >= M_{j+1}``.  A period whose
    spread is negative after losses never discharges: its reservation holds
    everything.
    """
    model = model or ValueModel(sched, samples, eff)
    lo = 0.0
    for j in range(sched.p, 0, -1):
        if model.r[j] < 0:
            lo = max(lo, model.hold_all)
        else:
            lo = model.smallest_level(j, model.r[j], lo)
        model.thresholds[j] = lo
    return model.reservations


def solve_capacity(
    sched: ToUSchedule,
    samples: SampleSet,
    reservations: Sequence[float] | None = None,
    eff: EfficiencyPair = IDEAL,
    model: ValueModel | None = None,
) -> float:
    """Capacity where the marginal value of a full-at-dawn unit meets its amortized cost.

    Capacity is charged ``pi_s`` per deliverable kWh, i.e. ``pi_s * eta_out``
    per stored kWh.
    """
    if model is None:
        if reservations is None:
            reservations = solve_reservations(sched, samples, eff)
        model = ValueModel(sched, samples, eff, reservations)
    target = sched.storage_cost * eff.eta_out
    if model.mv(0, 0.0)[0] <= target:
        warnings.warn("storage cost exceeds the best marginal saving; capacity is 0", ArbitrageWarning, stacklevel=2)
        return 0.0
    return model.smallest_level(0, target)


@dataclass(frozen=True)
class SolvedPolicy:
    policy: ReservationPolicy
    model: ValueModel = field(repr=False, compare=False)

    def capacity_residual(self) -> Estimate:
        """``MV_0(C) - pi_s * eta_out`` at the solved capacity (zero at an interior root)."""
        c = self.policy.capacity
        m = self.model
        return Estimate(
            float(m.mv(0, c)[0] - m.sched.storage_cost * m.eff.eta_out), float(m.mv_se(0, c)[0])
        )


def solve_policy(sched: ToUSchedule, samples: SampleSet, eff: EfficiencyPair = IDEAL) -> SolvedPolicy:
    """Reservations and capacity for the decision-maker whose demand is ``samples.collective``."""
    model = ValueModel(sched, samples, eff)
    res = solve_reservations(sched, samples, eff, model)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ArbitrageWarning)
        cap = solve_capacity(sched, samples, eff=eff, model=model)
    return SolvedPolicy(ReservationPolicy(cap, res, eff), model)


def closed_form_three_tier(sched: ToUSchedule, samples: SampleSet) -> tuple[float, float]:
    """Reservation and capacity of a three-tier ramp-up schedule from quantiles.

    The reservation is the peak-demand quantile at ``(pi_h - pi_m) / (pi_h - pi_off)``
    and the capacity the quantile of total demand given peak demand above it,
    at ``(pi_m - pi_off - pi_s) / (pi_m - pi_off)``.  When that level is not
    positive, storage only pays for the peak and the capacity is the plain
    peak-demand newsvendor quantile (zero if even the peak spread is too thin).
    """
    if (sched.p, sched.q) != (1, 1):
        raise PolicyError("closed form needs exactly one ramp-up period and the peak")
    lo, mid, hi = sched.rates
    ps = sched.storage_cost
    x1 = samples.collective[:, 1]
    x2 = samples.collective[:, 2]
    w = samples.w
    m_star = weighted_quantile(x2, w, (hi - mid) / (hi - lo))
    level = (mid - lo - ps) / (mid - lo)
    if level > 0:
        tail = x2 > m_star
        if not tail.any():
            return m_star, m_star
        return m_star, weighted_quantile((x1 + x2)[tail], w[tail], level)
    if hi - lo <= ps:
        return m_star, 0.0
    return m_star, weighted_quantile(x2, w, 1 - ps / (hi - lo))


# --- daily simulation -----------------------------------------------------


@dataclass
class DayLedger:
    """Energy and cost trace of one decision-maker over one or more days.

    Arrays have a leading day axis.  ``discharge`` is energy taken out of
    storage and ``grid`` energy bought during each period; ``level`` is the
    storage content after each period (index 0 holds the dawn level ``C``).
    """

    cost: np.ndarray
    grid: np.ndarray
    discharge: np.ndarray
    level: np.ndarray
    recharge_kwh: np.ndarray
    recharge_cost: np.ndarray
    off_peak_cost: np.ndarray

    @property
    def delivered(self) -> np.ndarray:
        return self.discharge.sum(axis=1)


def simulate_standalone(policy: ReservationPolicy, sched: ToUSchedule, demand: np.ndarray) -> DayLedger:
    """Run the (M, C) policy on realized demand of shape ``(n_days, T+1)``.

    Ramp-up periods discharge only the energy above their reservation,
    ramp-down periods discharge greedily, and storage is refilled off peak.
    The returned cost excludes the amortized investment.
    """
    x = np.atleast_2d(np.asarray(demand, dtype=float))
    T = sched.n_periods
    eo, ei = policy.efficiency.eta_out, policy.efficiency.eta_in
    thr = policy.thresholds(sched)
    n_days = x.shape[0]
    grid = np.zeros((n_days, T + 1))
    out = np.zeros((n_days, T + 1))
    level = np.zeros((n_days, T + 1))
    u = np.full(n_days, float(policy.capacity))
    level[:, 0] = u
    cost = sched.off_peak_rate * x[:, 0]
    off = cost.copy()
    grid[:, 0] = x[:, 0]
    for tau in range(1, T + 1):
        served = np.minimum(x[:, tau], np.maximum(0.0, u - thr[tau]) * eo)
        taken = served / eo
        u = u - taken
        out[:, tau] = taken
        grid[:, tau] = x[:, tau] - served
        cost = cost + sched.rate(tau) * grid[:, tau]
        level[:, tau] = u
    refill = (policy.capacity - u) / ei
    recharge = sched.off_peak_rate * refill
    return DayLedger(cost + recharge, grid, out, level, refill, recharge, off)


def simulate_standalone_day(
    policy: ReservationPolicy, sched: ToUSchedule, realized: RealizedDay | np.ndarray
) -> DayLedger:
    """One day for one decision-maker (a firm, or the whole collective of a RealizedDay)."""
    demand = realized.collective if isinstance(realized, RealizedDay) else np.asarray(realized, dtype=float)
    return simulate_standalone(policy, sched, demand[None])


def investment_cost(policy: ReservationPolicy, sched: ToUSchedule) -> float:
    """Daily amortized cost of the storage (``pi_s`` per deliverable kWh)."""
    return sched.storage_cost * policy.efficiency.eta_out * policy.capacity
