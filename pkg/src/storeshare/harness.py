"""Scenario runner comparing storage mechanisms on paired simulated days.

Every mechanism is evaluated on the same realized days, so differences are
paired statistics.  Mechanisms:

``no_storage``
    pass-through billing at the tariff rates.
``no_sharing``
    each firm solves and runs its own (M, C) policy.
``two_tier_division``
    one two-rate sharing problem per storage period (that period against off
    peak), each with its own physical capacity and no reservation.
``sharing``
    the equilibrium of the sharing market, settled day by day.
``offline_optimal``
    hindsight dispatch of the sharing capacity.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .demand import (
    FirmProfile,
    SampleSet,
    SyntheticCommunity,
    correlation_histogram,
    draw_samples,
    ingest_load_csv,
    load_profiles,
    pairwise_correlation,
    sample_days,
)
from .game import EquilibriumError, EquilibriumResult, solve_equilibrium
from .market import (
    SharingMarket,
    budget_certificate,
    price_law_report,
    settle_days,
    social_cost_certificate,
)
from .oracle import offline_optimal_cost
from .policy import (
    IDEAL,
    EfficiencyPair,
    ReservationPolicy,
    investment_cost,
    simulate_standalone,
    solve_policy,
)
from .tariff import ArbitrageWarning, ToUSchedule, parse_schedule, tomllib

MECHANISMS = ("no_storage", "no_sharing", "two_tier_division", "sharing", "offline_optimal")
ORDER = ("offline_optimal", "sharing", "two_tier_division", "no_sharing", "no_storage")


class ScenarioError(ValueError):
    pass


@dataclass
class DataSource:
    """Firm demand, either from profiles (CSV or cache) or a synthetic generator."""

    profiles: list[FirmProfile] | None = None
    community: SyntheticCommunity | None = None
    mode: str = "independent"

    @property
    def firm_ids(self) -> tuple[str, ...]:
        if self.community is not None:
            return self.community.firm_ids()
        return tuple(p.firm_id for p in self.profiles)

    @property
    def n_firms(self) -> int:
        return len(self.firm_ids)

    def sample_set(self, sched: ToUSchedule, n: int, seed: int) -> SampleSet:
        if self.community is not None:
            return self.community.sample_set(sched, n, seed)
        return draw_samples(self.profiles, sched, n, seed, self.mode)

    def days(self, sched: ToUSchedule, n_days: int, seed: int) -> np.ndarray:
        if self.community is not None:
            return self.community.days(sched, n_days, seed)
        return sample_days(self.profiles, sched, n_days, seed, self.mode)

    def history_profiles(self, sched: ToUSchedule, seed: int) -> list[FirmProfile]:
        if self.community is not None:
            return self.community.profiles(sched, 365, seed)
        return self.profiles


@dataclass
class Scenario:
    schedule: ToUSchedule
    data: DataSource
    mechanisms: tuple[str, ...] = MECHANISMS
    n_days: int = 2000
    n_samples: int = 200_000
    seed: int = 0
    efficiency: EfficiencyPair = IDEAL
    community_sizes: tuple[int, ...] = ()
    repetitions: int = 30
    sweep_samples: int = 20_000

    def __post_init__(self):
        unknown = set(self.mechanisms) - set(MECHANISMS)
        if unknown:
            raise ScenarioError(f"unknown mechanisms {sorted(unknown)}")
        if not self.mechanisms:
            raise ScenarioError("at least one mechanism is required")
        if self.n_days < 1:
            raise ScenarioError("n_days must be at least 1")
        self.mechanisms = tuple(m for m in MECHANISMS if m in self.mechanisms)

    @property
    def seeds(self) -> tuple[int, int]:
        """Seeds of the solver sample matrix and of the realized-day stream."""
        ss = np.random.SeedSequence(self.seed).spawn(2)
        return int(ss[0].generate_state(1)[0]), int(ss[1].generate_state(1)[0])


def load_scenario(
    config: str | Path | Mapping[str, Any], data: str | Path | None = None, **overrides
) -> Scenario:
    """Scenario from a TOML document.

    The schedule is read from a ``[schedule]`` table (or a ``schedule`` path,
    or the top level); run settings from ``[scenario]``; synthetic demand
    parameters from ``[synthetic]``.  ``data`` (a meter CSV or a profile JSON
    cache) replaces the synthetic generator.
    """
    if isinstance(config, Mapping):
        doc = dict(config)
        base = Path(".")
    else:
        path = Path(config)
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
        base = path.parent
    if isinstance(doc.get("schedule"), str):
        sched = parse_schedule(base / doc["schedule"])
    else:
        sched = parse_schedule(doc.get("schedule", doc))
    run = dict(doc.get("scenario", {}))
    run.update({k: v for k, v in overrides.items() if v is not None})
    if data is not None:
        p = Path(data)
        if p.suffix.lower() == ".json":
            source = DataSource(load_profiles(p))
        else:
            source = DataSource(ingest_load_csv(p, sched).profiles)
        if not source.profiles:
            raise ScenarioError(f"no complete days found in {data}")
    else:
        source = DataSource(community=SyntheticCommunity(**doc.get("synthetic", {})))
    eff = EfficiencyPair(float(run.get("eta_in", 1.0)), float(run.get("eta_out", 1.0)))
    mech = run.get("mechanisms", MECHANISMS)
    if isinstance(mech, str):
        mech = [m.strip() for m in mech.split(",") if m.strip()]
    return Scenario(
        sched,
        source,
        tuple(mech),
        int(run.get("n_days", 2000)),
        int(run.get("n_samples", 200_000)),
        int(run.get("seed", 0)),
        eff,
        tuple(int(s) for s in run.get("community_sizes", ())),
        int(run.get("repetitions", 30)),
        int(run.get("sweep_samples", 20_000)),
    )


# --- mechanisms --------------------------------------------------------------


@dataclass
class MechanismResult:
    name: str
    capacity: float
    daily_cost: np.ndarray
    notes: list[str] = field(default_factory=list)


@dataclass
class Evaluation:
    """All mechanisms on one firm set; the raw material of a report."""

    results: dict[str, MechanismResult]
    equilibrium: EquilibriumResult | None = None
    certificates: dict[str, dict] = field(default_factory=dict)


def _period_cost(sched: ToUSchedule, demand: np.ndarray) -> np.ndarray:
    return demand @ sched.rates


def two_tier_instances(sched: ToUSchedule) -> list[tuple[int, ToUSchedule]]:
    """One two-rate schedule per storage period, paired with off peak."""
    return [(tau, sched.sub_schedule(tau)) for tau in range(1, sched.n_periods + 1)]


def decompose_two_tier(
    sched: ToUSchedule, samples: SampleSet, eff: EfficiencyPair = IDEAL
) -> list[tuple[int, float]]:
    """Capacity of each per-period two-rate sharing problem (zero where the spread is too thin)."""
    out = []
    for tau, sub in two_tier_instances(sched):
        vals = samples.values[:, :, [0, tau]].copy()
        vals[:, :, 0] = 0.0
        sub_samples = SampleSet(vals, samples.weights, samples.firm_ids, samples.lattice)
        if sub.peak_rate * eff.eta_out - sub.off_peak_rate / eff.eta_in <= sub.storage_cost * eff.eta_out:
            out.append((tau, 0.0))
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ArbitrageWarning)
            out.append((tau, solve_policy(sub, sub_samples.merged(), eff).policy.capacity))
    return out


def evaluate_mechanisms(
    sched: ToUSchedule,
    samples: SampleSet,
    days: np.ndarray,
    mechanisms: Sequence[str] = MECHANISMS,
    eff: EfficiencyPair = IDEAL,
    settle: bool = True,
) -> Evaluation:
    """Daily community cost of every requested mechanism on the same days.

    With ``settle`` the sharing mechanism is run through the full per-firm
    settlement (and certified); otherwise its cost is the collective cost,
    which the welfare certificate shows to be the same thing.
    """
    ev = Evaluation({})
    xc = days.sum(axis=1)
    if "no_storage" in mechanisms:
        ev.results["no_storage"] = MechanismResult("no_storage", 0.0, _period_cost(sched, xc))

    if "no_sharing" in mechanisms:
        total = np.zeros(days.shape[0])
        cap = 0.0
        for i in range(samples.n_firms):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ArbitrageWarning)
                pol = solve_policy(sched, samples.subset([i]).merged(), eff).policy
            total += simulate_standalone(pol, sched, days[:, i]).cost + investment_cost(pol, sched)
            cap += pol.capacity
        ev.results["no_sharing"] = MechanismResult("no_sharing", cap, total)

    if "two_tier_division" in mechanisms:
        total = sched.off_peak_rate * xc[:, 0]
        cap = 0.0
        for (tau, sub), (_, c) in zip(two_tier_instances(sched), decompose_two_tier(sched, samples, eff)):
            pol = ReservationPolicy(c, (), eff)
            sub_days = xc[:, [0, tau]].copy()
            sub_days[:, 0] = 0.0
            total += simulate_standalone(pol, sub, sub_days).cost + investment_cost(pol, sub)
            cap += c
        ev.results["two_tier_division"] = MechanismResult("two_tier_division", cap, total)

    if "sharing" in mechanisms or "offline_optimal" in mechanisms:
        notes: list[str] = []
        eq = None
        if settle and samples.n_firms > 1:
            try:
                eq = solve_equilibrium(sched, samples, eff, check=True, force=True)
                notes += eq.notes
            except EquilibriumError as exc:
                notes.append(f"equilibrium allocation failed: {exc}")
        if eq is not None:
            solved = eq.solved
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ArbitrageWarning)
                solved = solve_policy(sched, samples, eff)
        pol = solved.policy
        c_c = pol.capacity
        if "sharing" in mechanisms:
            if settle:
                caps = eq.capacities if eq is not None else np.full(samples.n_firms, c_c / samples.n_firms)
                market = SharingMarket(sched, samples, eff, model=solved.model)
                out = settle_days(days, caps, market, samples.firm_ids)
                cost = out.total_cost + investment_cost(pol, sched)
                ev.certificates["budget_balance"] = _cert_json(budget_certificate(out))
                ev.certificates["welfare"] = _cert_json(social_cost_certificate(out, sched))
                law = price_law_report(out, sched)
                ev.certificates["price_law"] = {
                    "passed": law.passed,
                    "violations": law.violations,
                    "deficit_mismatches": law.deficit_mismatches,
                }
            else:
                cost = simulate_standalone(pol, sched, xc).cost + investment_cost(pol, sched)
            ev.results["sharing"] = MechanismResult("sharing", c_c, cost, notes)
        if "offline_optimal" in mechanisms:
            cost = offline_optimal_cost(xc, c_c, sched, eff) + investment_cost(pol, sched)
            ev.results["offline_optimal"] = MechanismResult("offline_optimal", c_c, cost)
        ev.equilibrium = eq
    return ev


def _cert_json(cert) -> dict:
    return {"passed": bool(cert.passed), "max_error": cert.max_error, "detail": cert.detail}


# --- reports -----------------------------------------------------------------


@dataclass(frozen=True)
class MechanismRow:
    mechanism: str
    capacity_kwh: float
    mean_cost: float
    cost_se: float
    mean_profit: float
    profit_se: float
    saving_fraction: float
    profit_std: float


@dataclass
class ComparisonReport:
    n_firms: int
    n_days: int
    rows: dict[str, MechanismRow]
    deltas: list[dict]
    sweep: list[dict] = field(default_factory=list)
    equilibrium: dict | None = None
    certificates: dict[str, dict] = field(default_factory=dict)
    correlations: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def certificates_passed(self) -> bool:
        return all(c.get("passed", True) for c in self.certificates.values())

    def to_json(self) -> dict:
        return {
            "n_firms": self.n_firms,
            "n_days": self.n_days,
            "mechanisms": {k: vars(v) for k, v in self.rows.items()},
            "paired_deltas": self.deltas,
            "community_sweep": self.sweep,
            "equilibrium": self.equilibrium,
            "certificates": self.certificates,
            "notes": self.notes,
        }


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0


def summarize(ev: Evaluation, n_firms: int) -> ComparisonReport:
    res = ev.results
    n_days = next(iter(res.values())).daily_cost.size
    baseline = res["no_storage"].daily_cost if "no_storage" in res else None
    if baseline is None:
        raise ScenarioError("the no_storage baseline is needed for profits")
    base_mean = float(baseline.mean())
    rows = {}
    for name in MECHANISMS:
        if name not in res:
            continue
        r = res[name]
        profit = baseline - r.daily_cost
        mc, sc = _mean_se(r.daily_cost)
        mp, sp = _mean_se(profit)
        rows[name] = MechanismRow(
            name,
            r.capacity,
            mc,
            sc,
            mp,
            sp,
            mp / base_mean if base_mean > 0 else 0.0,
            float(profit.std(ddof=1)) if profit.size > 1 else 0.0,
        )
    present = [m for m in ORDER if m in res]
    deltas = []
    for better, worse in zip(present, present[1:]):
        m, s = _mean_se(res[worse].daily_cost - res[better].daily_cost)
        deltas.append({"better": better, "worse": worse, "mean_saving_gap": m, "se": s})
    notes = [f"{k}: {n}" for k, r in res.items() for n in r.notes]
    eq = ev.equilibrium.to_json() if ev.equilibrium is not None else None
    return ComparisonReport(n_firms, n_days, rows, deltas, equilibrium=eq, certificates=dict(ev.certificates), notes=notes)


def community_sweep(scenario: Scenario, samples: SampleSet, days: np.ndarray) -> list[dict]:
    """Per-firm capacity and profit over random sub-communities of each size.

    Each size is drawn ``repetitions`` times (seeded); the per-firm mean and
    the variance across draws are reported.
    """
    rng = np.random.default_rng(np.random.SeedSequence(scenario.seed).spawn(3)[2])
    n = samples.n_firms
    small = SampleSet(samples.values[:, : scenario.sweep_samples], None, samples.firm_ids)
    out = []
    for size in scenario.community_sizes:
        if not 1 <= size <= n:
            raise ScenarioError(f"community size {size} outside 1..{n}")
        reps = 1 if size == n else scenario.repetitions
        caps: dict[str, list[float]] = {m: [] for m in scenario.mechanisms}
        profits: dict[str, list[float]] = {m: [] for m in scenario.mechanisms}
        for _ in range(reps):
            idx = sorted(rng.choice(n, size=size, replace=False).tolist())
            mech = tuple(set(scenario.mechanisms) | {"no_storage"})
            ev = evaluate_mechanisms(
                scenario.schedule, small.subset(idx), days[:, idx], mech, scenario.efficiency, settle=False
            )
            base = ev.results["no_storage"].daily_cost
            for m in scenario.mechanisms:
                caps[m].append(ev.results[m].capacity / size)
                profits[m].append(float((base - ev.results[m].daily_cost).mean()) / size)
        for m in scenario.mechanisms:
            out.append(
                {
                    "community_size": size,
                    "mechanism": m,
                    "capacity_mean_kwh": float(np.mean(caps[m])),
                    "capacity_var": float(np.var(caps[m])),
                    "profit_mean_cents": float(np.mean(profits[m])),
                    "profit_var": float(np.var(profits[m])),
                    "repetitions": reps,
                }
            )
    return out


def correlation_rows(profiles: Sequence[FirmProfile], sched: ToUSchedule, bins: int = 20) -> list[dict]:
    rows = []
    if len(profiles) < 2:
        return rows
    for tau in range(1, sched.n_periods + 1):
        hist = correlation_histogram(pairwise_correlation(profiles, [tau]), bins)
        for lo, hi, count in hist:
            rows.append(
                {
                    "period": str(sched.period(tau)),
                    "bin_lo": "undefined" if math.isnan(lo) else lo,
                    "bin_hi": "undefined" if math.isnan(hi) else hi,
                    "count": count,
                }
            )
    return rows


def run_scenario(scenario: Scenario, out_dir: str | Path | None = None) -> ComparisonReport:
    """Solve, simulate every mechanism on paired days, and optionally write the outputs."""
    sched = scenario.schedule
    s_seed, d_seed = scenario.seeds
    samples = scenario.data.sample_set(sched, scenario.n_samples, s_seed)
    days = scenario.data.days(sched, scenario.n_days, d_seed)
    mech = tuple(set(scenario.mechanisms) | {"no_storage"})
    ev = evaluate_mechanisms(sched, samples, days, mech, scenario.efficiency, settle=True)
    report = summarize(ev, samples.n_firms)
    report.rows = {k: v for k, v in report.rows.items() if k in scenario.mechanisms}
    if scenario.community_sizes:
        report.sweep = community_sweep(scenario, samples, days)
    try:
        report.correlations = correlation_rows(scenario.data.history_profiles(sched, d_seed + 1), sched)
    except ValueError as exc:
        report.notes.append(f"correlations unavailable: {exc}")
    if out_dir is not None:
        emit_plot_data(report, out_dir)
    return report


def emit_plot_data(report: ComparisonReport, out_dir: str | Path) -> list[Path]:
    """Write ``report.json`` and the plot-data CSVs; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "report.json"
    path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(path)

    sweep = report.sweep or [
        {
            "community_size": report.n_firms,
            "mechanism": r.mechanism,
            "capacity_mean_kwh": r.capacity_kwh / report.n_firms,
            "capacity_var": 0.0,
            "profit_mean_cents": r.mean_profit / report.n_firms,
            "profit_var": 0.0,
        }
        for r in report.rows.values()
    ]
    written.append(
        _write_csv(
            out / "sweep_capacity.csv",
            ["community_size", "mechanism", "capacity_mean_kwh", "capacity_var"],
            sweep,
        )
    )
    written.append(
        _write_csv(
            out / "sweep_profit.csv",
            ["community_size", "mechanism", "profit_mean_cents", "profit_var"],
            sweep,
        )
    )
    written.append(
        _write_csv(
            out / "mechanism_costs.csv",
            ["mechanism", "capacity_kwh", "mean_cost", "cost_se", "mean_profit", "profit_se", "saving_fraction"],
            [vars(r) for r in report.rows.values()],
        )
    )
    written.append(_write_csv(out / "correlations.csv", ["period", "bin_lo", "bin_hi", "count"], report.correlations))
    return written


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[Mapping]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])
    return path


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
