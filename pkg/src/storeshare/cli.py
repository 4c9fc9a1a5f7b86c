"""Command line entry point: ``storeshare {solve,simulate,validate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .game import solve_equilibrium
from .harness import MECHANISMS, Scenario, load_scenario, run_scenario
from .market import (
    SharingMarket,
    budget_certificate,
    price_law_report,
    settle_days,
    social_cost_certificate,
)
from .oracle import (
    DiscretizedInstance,
    dp_optimal_policy,
    exhaustive_social_optimum,
    expected_policy_cost,
    offline_exhaustive,
    offline_optimal_cost,
    random_instance,
    random_pmf,
)
from .policy import investment_cost, simulate_standalone, solve_policy
from .tariff import ArbitrageWarning, ToUSchedule

log = logging.getLogger("storeshare")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="storeshare", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("solve", "solve the collective policy and the capacity equilibrium"),
        ("simulate", "compare storage mechanisms on simulated days"),
        ("validate", "run the oracle certification suite"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, type=Path, help="scenario or schedule TOML file")
        p.add_argument("--data", type=Path, help="meter CSV (timestamp,meter_id,kwh) or profile JSON cache")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--days", type=int, dest="n_days")
        p.add_argument("--samples", type=int, dest="n_samples")
        p.add_argument("--mechanisms", type=str, help=f"comma-separated subset of {','.join(MECHANISMS)}")
        p.add_argument("--eta-in", type=float, dest="eta_in")
        p.add_argument("--eta-out", type=float, dest="eta_out")
    return parser


def _scenario(args) -> Scenario:
    return load_scenario(
        args.config,
        args.data,
        seed=args.seed,
        n_days=args.n_days,
        n_samples=args.n_samples,
        mechanisms=args.mechanisms,
        eta_in=args.eta_in,
        eta_out=args.eta_out,
    )


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_solve(args) -> int:
    sc = _scenario(args)
    samples = sc.data.sample_set(sc.schedule, sc.n_samples, sc.seeds[0])
    eq = solve_equilibrium(sc.schedule, samples, sc.efficiency, check=True, force=True)
    doc = {"policy": eq.policy.to_json(), "equilibrium": eq.to_json()}
    _write_json(args.out / "report.json", doc)
    _write_json(args.out / "policy.json", eq.policy.to_json())
    print(f"collective capacity {eq.collective_capacity:.4f} kWh, reservations {list(eq.reservations)}")
    for fid, c in eq.allocations.items():
        print(f"  {fid}: {c:.4f} kWh")
    print(f"alignment: {eq.alignment.verdict if eq.alignment else 'skipped'}")
    return 0


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    report = run_scenario(sc, args.out)
    for row in report.rows.values():
        print(
            f"{row.mechanism:18s} capacity {row.capacity_kwh:9.3f} kWh  cost {row.mean_cost:10.2f}  "
            f"profit {row.mean_profit:9.2f} +- {row.profit_se:.2f} cents/day  saving {100 * row.saving_fraction:5.2f}%"
        )
    for name, cert in report.certificates.items():
        print(f"certificate {name}: {'pass' if cert.get('passed') else 'FAIL'}")
    return 0 if report.certificates_passed else 1


def validation_suite(sched: ToUSchedule, seed: int = 0, n_instances: int = 25) -> dict[str, dict]:
    """Oracle checks that need no scenario data: DP, hindsight and joint-state equivalences."""
    rng = np.random.default_rng(seed)
    shapes = [(0, 1), (1, 1), (0, 2), (1, 2), (2, 1), (2, 2), (1, 3)]
    worst = 0.0
    thresholds_ok = True
    for k in range(n_instances):
        p, q = shapes[k % len(shapes)]
        inst = random_instance(rng, _random_schedule(rng, p, q), 1, int(rng.integers(2, 7)))
        dp = dp_optimal_policy(inst)
        samples = inst.samples()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ArbitrageWarning)
            pol = solve_policy(inst.sched, samples).policy
        cost = expected_policy_cost(samples, simulate_standalone(pol, inst.sched, samples.collective).cost)
        cost += investment_cost(pol, inst.sched)
        worst = max(worst, abs(cost - float(dp.expected_cost)))
        thresholds_ok &= dp.threshold_structured and list(pol.reservations) == [float(m) for m in dp.thresholds]
    out = {"dp_equivalence": {"passed": worst < 1e-9 and thresholds_ok, "max_error": worst}}

    worst = 0.0
    for _ in range(200):
        x = rng.integers(0, 6, size=sched.n_periods + 1)
        c = int(rng.integers(0, 12))
        worst = max(worst, abs(float(offline_exhaustive(x, c, sched)) - float(offline_optimal_cost(x, c, sched)[0])))
    out["offline_exchange"] = {"passed": worst < 1e-9, "max_error": worst}

    two = DiscretizedInstance(
        ToUSchedule.from_rates(13, [28], [52], 14),
        [{t: random_pmf(rng, 2, 4) for t in (1, 2)} for _ in range(2)],
    )
    shared = exhaustive_social_optimum(two, (2, 1), sharing=True)
    merged = exhaustive_social_optimum(two.merged(), (3,), sharing=True)
    alone = exhaustive_social_optimum(two, (2, 1), sharing=False)
    out["joint_state"] = {
        "passed": shared == merged and alone >= shared,
        "max_error": float(abs(shared - merged)),
    }
    return out


def _random_schedule(rng: np.random.Generator, p: int, q: int) -> ToUSchedule:
    peak = 52
    ru = sorted(rng.choice(np.arange(14, peak), size=p, replace=False).tolist())
    rd = sorted(rng.choice(np.arange(14, peak), size=q - 1, replace=False).tolist(), reverse=True)
    return ToUSchedule.from_rates(13, ru, [peak] + rd, float(rng.integers(2, 30)))


def cmd_validate(args) -> int:
    sc = _scenario(args)
    sched = sc.schedule
    results = validation_suite(sched, sc.seed)
    samples = sc.data.sample_set(sched, sc.n_samples, sc.seeds[0])
    days = sc.data.days(sched, sc.n_days, sc.seeds[1])
    eq = solve_equilibrium(sched, samples, sc.efficiency, check=True, force=True)
    market = SharingMarket(sched, samples, sc.efficiency, model=eq.solved.model)
    outcome = settle_days(days, eq.capacities, market, samples.firm_ids)
    for name, cert in (("budget_balance", budget_certificate(outcome)), ("welfare", social_cost_certificate(outcome, sched))):
        results[name] = {"passed": cert.passed, "max_error": cert.max_error}
    law = price_law_report(outcome, sched)
    results["price_law"] = {"passed": law.passed, "violations": law.violations}
    hindsight = offline_optimal_cost(days.sum(axis=1), eq.collective_capacity, sched, sc.efficiency)
    gap = float(np.max(hindsight - outcome.total_cost))
    results["hindsight_dominance"] = {"passed": gap <= 1e-9, "max_error": max(gap, 0.0)}
    _write_json(args.out / "report.json", {"validation": results})
    for name, r in results.items():
        print(f"{name:20s} {'pass' if r['passed'] else 'FAIL'}")
    return 0 if all(r["passed"] for r in results.values()) else 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"solve": cmd_solve, "simulate": cmd_simulate, "validate": cmd_validate}[args.command]
    try:
        return handler(args)
    except (ValueError, RuntimeError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
