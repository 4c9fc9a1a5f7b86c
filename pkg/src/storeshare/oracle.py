"""Brute-force references for small instances.

* hindsight dispatch of one realized day;
* exact value iteration over integer storage levels with rational
  probabilities, searching every capacity;
* a joint-state search over several firms' storage, with or without sharing.

None of this uses the marginal-value machinery of :mod:`storeshare.policy`.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .demand import Discrete, FirmProfile, SampleSet, exact_samples, point_mass
from .policy import IDEAL, EfficiencyPair
from .tariff import ToUSchedule, parse_schedule, serialize_schedule

MAX_STATES = 10**7

Pmf = dict[int, Fraction]


class OracleError(ValueError):
    pass


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(str(x))


def _rate(sched: ToUSchedule, tau: int) -> Fraction:
    return Fraction(sched.rate_tenths[tau], 10)


# --- hindsight ----------------------------------------------------------------


def offline_optimal_cost(
    demand: np.ndarray, capacity: float, sched: ToUSchedule, eff: EfficiencyPair = IDEAL
) -> np.ndarray:
    """Cheapest cost of realized days given full knowledge of the day's demand.

    Stored energy goes to the dearest periods first (for single-peaked rates
    this is optimal by an exchange argument), skipping periods where a
    round trip costs more than the grid.  ``demand`` has shape
    ``(n_days, T+1)`` or ``(T+1,)``; investment is excluded.
    """
    x = np.atleast_2d(np.asarray(demand, dtype=float))
    T = sched.n_periods
    left = np.full(x.shape[0], float(capacity))
    cost = sched.off_peak_rate * x[:, 0]
    order = sorted(range(1, T + 1), key=lambda t: -sched.rate(t))
    for tau in order:
        rate = sched.rate(tau)
        if rate * eff.eta_out <= sched.off_peak_rate / eff.eta_in:
            cost = cost + rate * x[:, tau]
            continue
        served = np.minimum(x[:, tau], left * eff.eta_out)
        left = left - served / eff.eta_out
        cost = cost + rate * (x[:, tau] - served)
    return cost + sched.off_peak_rate * (capacity - left) / eff.eta_in


def offline_exhaustive(demand: Sequence[int], capacity: int, sched: ToUSchedule) -> Fraction:
    """Hindsight optimum by trying every integer split of storage over the periods."""
    T = sched.n_periods
    best = None
    ranges = [range(0, min(int(demand[t]), capacity) + 1) for t in range(1, T + 1)]
    for split in itertools.product(*ranges):
        if sum(split) > capacity:
            continue
        cost = _rate(sched, 0) * (int(demand[0]) + sum(split))
        cost += sum(_rate(sched, t) * (int(demand[t]) - split[t - 1]) for t in range(1, T + 1))
        best = cost if best is None or cost < best else best
    return best


# --- discretized instances ---------------------------------------------------


def convolve(a: Pmf, b: Pmf) -> Pmf:
    out: Pmf = {}
    for x, p in a.items():
        for y, q in b.items():
            out[x + y] = out.get(x + y, Fraction(0)) + p * q
    return out


@dataclass
class DiscretizedInstance:
    """Demand on a grid ``{0, delta, ..., K delta}`` with rational masses.

    ``pmfs[i][tau]`` maps grid units to probability for firm ``i`` in
    period ``tau``; periods missing from a firm's map carry zero demand.
    """

    sched: ToUSchedule
    pmfs: list[dict[int, Pmf]]
    delta: float = 1.0
    firm_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.firm_ids:
            self.firm_ids = tuple(f"firm{i}" for i in range(len(self.pmfs)))
        for i, firm in enumerate(self.pmfs):
            for tau, pmf in firm.items():
                if sum(pmf.values()) != 1:
                    raise OracleError(f"masses of firm {i} period {tau} do not sum to 1")
                if any(k < 0 for k in pmf) or any(v < 0 for v in pmf.values()):
                    raise OracleError("levels and masses must be non-negative")

    @property
    def n_firms(self) -> int:
        return len(self.pmfs)

    def pmf(self, firm: int, tau: int) -> Pmf:
        return self.pmfs[firm].get(tau, {0: Fraction(1)})

    def collective_pmf(self, tau: int) -> Pmf:
        out: Pmf = {0: Fraction(1)}
        for i in range(self.n_firms):
            out = convolve(out, self.pmf(i, tau))
        return out

    def max_storage(self) -> int:
        """Largest useful storage in grid units: the most the day can ever need."""
        return sum(max(self.collective_pmf(t)) for t in range(1, self.sched.n_periods + 1))

    def merged(self) -> "DiscretizedInstance":
        T = self.sched.n_periods
        return DiscretizedInstance(self.sched, [{t: self.collective_pmf(t) for t in range(T + 1)}], self.delta)

    def to_profiles(self) -> list[FirmProfile]:
        profs = []
        for fid, firm in zip(self.firm_ids, self.pmfs):
            per = {}
            for tau in range(self.sched.n_periods + 1):
                pmf = firm.get(tau)
                if pmf is None:
                    per[tau] = point_mass(0.0)
                    continue
                lv = sorted(pmf)
                per[tau] = Discrete(np.array(lv, dtype=float) * self.delta, np.array([float(pmf[v]) for v in lv]))
            profs.append(FirmProfile(fid, per))
        return profs

    def samples(self) -> SampleSet:
        return exact_samples(self.to_profiles(), self.sched, self.delta)

    def to_json(self) -> dict:
        return {
            "schedule": serialize_schedule(self.sched),
            "delta": self.delta,
            "firm_ids": list(self.firm_ids),
            "pmfs": [
                {str(t): {str(k): str(v) for k, v in pmf.items()} for t, pmf in firm.items()} for firm in self.pmfs
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DiscretizedInstance":
        pmfs = [
            {int(t): {int(k): Fraction(v) for k, v in pmf.items()} for t, pmf in firm.items()} for firm in doc["pmfs"]
        ]
        return cls(parse_schedule(doc["schedule"]), pmfs, float(doc["delta"]), tuple(doc["firm_ids"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DiscretizedInstance":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def random_pmf(rng: np.random.Generator, max_level: int, denominator: int = 12) -> Pmf:
    """Random rational pmf on ``{0..max_level}`` with masses in multiples of ``1/denominator``."""
    cuts = np.sort(rng.integers(0, denominator + 1, size=max_level))
    counts = np.diff(np.concatenate([[0], cuts, [denominator]]))
    return {k: Fraction(int(c), denominator) for k, c in enumerate(counts) if c > 0}


def random_instance(
    rng: np.random.Generator, sched: ToUSchedule, n_firms: int = 1, max_level: int = 6
) -> DiscretizedInstance:
    pmfs = [{t: random_pmf(rng, max_level) for t in range(1, sched.n_periods + 1)} for _ in range(n_firms)]
    return DiscretizedInstance(sched, pmfs)


# --- value iteration -----------------------------------------------------------


@dataclass
class DPResult:
    capacity: float
    expected_cost: Fraction
    cost_by_capacity: list[Fraction]
    values: list[list[Fraction]] = field(repr=False)
    thresholds: list[int | None] = field(default_factory=list)

    @property
    def threshold_structured(self) -> bool:
        return all(m is not None for m in self.thresholds)


def _value_iteration(sched: ToUSchedule, pmfs: list[Pmf], U: int, delta: Fraction):
    """``V[tau][u]``: expected cost of periods ``tau..T`` plus refill, from ``u`` units stored."""
    T = sched.n_periods
    off = _rate(sched, 0)
    V: list[list[Fraction] | None] = [None] * (T + 2)
    V[T + 1] = [-off * u * delta for u in range(U + 1)]
    for tau in range(T, 0, -1):
        rate = _rate(sched, tau)
        nxt = V[tau + 1]
        row = []
        for u in range(U + 1):
            total = Fraction(0)
            for x, p in pmfs[tau].items():
                best = min(rate * (x - a) * delta + nxt[u - a] for a in range(min(x, u) + 1))
                total += p * best
            row.append(total)
        V[tau] = row
    return V


def _smallest_threshold(sched: ToUSchedule, tau: int, pmf: Pmf, nxt: list[Fraction], U: int, delta) -> int | None:
    """Smallest ``M`` whose rule ``discharge min(x, max(0, u - M))`` is optimal at every ``(u, x)``."""
    rate = _rate(sched, tau)
    optimal = {}
    for u in range(U + 1):
        for x in pmf:
            q = [rate * (x - a) * delta + nxt[u - a] for a in range(min(x, u) + 1)]
            best = min(q)
            optimal[(u, x)] = {a for a, v in enumerate(q) if v == best}
    for m in range(U + 1):
        if all(min(x, max(0, u - m)) in acts for (u, x), acts in optimal.items()):
            return m
    return None


def dp_optimal_policy(instance: DiscretizedInstance) -> DPResult:
    """Optimal expected daily cost of the merged instance over all policies and capacities.

    Capacity cost is ``pi_s`` per kWh; ties in capacity go to the smallest.
    Also reports, per ramp-up period, the smallest threshold rule that is
    optimal at every state (``None`` if none is).
    """
    sched = instance.sched
    T = sched.n_periods
    U = instance.max_storage()
    if (U + 1) * (T + 1) > MAX_STATES:
        raise OracleError(f"state space of {U + 1} levels x {T + 1} periods is too large")
    delta = _frac(instance.delta)
    pmfs = [instance.collective_pmf(t) for t in range(T + 1)]
    V = _value_iteration(sched, pmfs, U, delta)
    off = _rate(sched, 0)
    ps = _frac(sched.storage_cost)
    base = off * sum(x * p for x, p in pmfs[0].items()) * delta
    costs = [ps * c * delta + off * c * delta + V[1][c] + base for c in range(U + 1)]
    best = min(costs)
    c_star = costs.index(best)
    thresholds = [_smallest_threshold(sched, t, pmfs[t], V[t + 1], U, delta) for t in range(1, sched.p + 1)]
    return DPResult(c_star * float(delta), best, costs, V, thresholds)


def exhaustive_social_optimum(
    instance: DiscretizedInstance, capacities: Sequence[int], sharing: bool = True
) -> Fraction:
    """Minimum expected operating cost over every joint discharge plan.

    State is each firm's stored units; in each period every firm picks how
    much to discharge.  With sharing the total discharge may serve anyone's
    demand, without it each firm serves only itself.  Investment excluded,
    refill of used energy at the off-peak rate included.
    """
    n = instance.n_firms
    if n > 3:
        raise OracleError("exhaustive search is limited to three firms")
    caps = [int(c) for c in capacities]
    sched = instance.sched
    T = sched.n_periods
    states = list(itertools.product(*[range(c + 1) for c in caps]))
    if len(states) * (T + 1) > MAX_STATES:
        raise OracleError("joint state space too large")
    delta = _frac(instance.delta)
    off = _rate(sched, 0)
    V = {s: -off * sum(s) * delta for s in states}
    for tau in range(T, 0, -1):
        rate = _rate(sched, tau)
        joint = [
            (xs, np.prod([p for _, p in combo], dtype=object))
            for combo in itertools.product(*[instance.pmf(i, tau).items() for i in range(n)])
            for xs in [tuple(x for x, _ in combo)]
        ]
        newV = {}
        for s in states:
            total = Fraction(0)
            for xs, prob in joint:
                need = sum(xs)
                if sharing:
                    choices = itertools.product(*[range(s[i] + 1) for i in range(n)])
                else:
                    choices = itertools.product(*[range(min(s[i], xs[i]) + 1) for i in range(n)])
                best = None
                for a in choices:
                    used = sum(a)
                    if used > need:
                        continue
                    v = rate * (need - used) * delta + V[tuple(si - ai for si, ai in zip(s, a))]
                    best = v if best is None or v < best else best
                total += prob * best
            newV[s] = total
        V = newV
    base = off * sum(sum(x * p for x, p in instance.pmf(i, 0).items()) for i in range(n)) * delta
    return off * sum(caps) * delta + V[tuple(caps)] + base


def expected_policy_cost(samples: SampleSet, costs: np.ndarray) -> float:
    """Probability-weighted mean of per-scenario costs of an exact sample set."""
    return float(samples.w @ costs)
