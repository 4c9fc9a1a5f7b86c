"""Per-firm, per-period demand models and the sample sets the solvers run on.

Every solver works on a :class:`SampleSet`: an array of demand scenarios of
shape ``(n_firms, n, p+q+1)`` (column 0 is off peak) with optional scenario
weights.  Monte Carlo sets carry equal weights; exact sets enumerate every
joint outcome of discretized distributions and carry their probabilities.
Reusing one pre-drawn set across a solve keeps every estimate a deterministic
step function of its thresholds (common random numbers).
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence, Union

import numpy as np
from scipy import stats

from .tariff import HOURS, PeriodId, PeriodKind, ToUSchedule

DEFAULT_SAMPLES = 200_000
MIN_BAND_HITS = 1000


class DemandError(ValueError):
    pass


class RareEventError(DemandError):
    """The conditioning event of a band estimate is too rare to estimate."""


class IngestWarning(UserWarning):
    pass


class Estimate(NamedTuple):
    value: float
    se: float


# --- distributions --------------------------------------------------------


@dataclass(frozen=True)
class Empirical:
    """Daily kWh totals, resampled with replacement."""

    samples: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=float).ravel()
        if arr.size == 0:
            raise DemandError("empty empirical sample set")
        if np.any(arr < 0):
            raise DemandError("demand samples must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.samples[rng.integers(self.samples.size, size=n)]

    def mean(self) -> float:
        return float(self.samples.mean())

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        levels, counts = np.unique(self.samples, return_counts=True)
        return levels, counts / counts.sum()


@dataclass(frozen=True)
class Parametric:
    """``uniform(low, high)``, ``truncnorm(mu, sigma)`` cut at zero, or ``lognormal(mu, sigma)``."""

    family: str
    params: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(v) for v in self.params))
        self.frozen()  # validates

    def frozen(self):
        a, b = self.params
        if self.family == "uniform":
            if not 0 <= a < b:
                raise DemandError("uniform needs 0 <= low < high")
            return stats.uniform(loc=a, scale=b - a)
        if self.family == "truncnorm":
            if b <= 0:
                raise DemandError("truncnorm needs sigma > 0")
            return stats.truncnorm((0 - a) / b, np.inf, loc=a, scale=b)
        if self.family == "lognormal":
            if b <= 0:
                raise DemandError("lognormal needs sigma > 0")
            return stats.lognorm(s=b, scale=math.exp(a))
        raise DemandError(f"unknown family {self.family!r}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        # inverse-cdf draws keep samples monotone in the underlying uniforms
        return self.frozen().ppf(rng.random(n))

    def mean(self) -> float:
        return float(self.frozen().mean())


@dataclass(frozen=True)
class Discrete:
    """Probability masses on a kWh grid (the exact-enumeration mode)."""

    levels: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=float).ravel()
        ms = np.asarray(self.masses, dtype=float).ravel()
        if lv.shape != ms.shape or lv.size == 0:
            raise DemandError("levels and masses must be non-empty and aligned")
        if np.any(lv < 0) or np.any(ms < 0):
            raise DemandError("levels and masses must be non-negative")
        if not math.isclose(ms.sum(), 1.0, abs_tol=1e-12):
            raise DemandError(f"masses sum to {ms.sum()}, not 1")
        object.__setattr__(self, "levels", lv)
        object.__setattr__(self, "masses", ms)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.levels[rng.choice(self.levels.size, size=n, p=self.masses)]

    def mean(self) -> float:
        return float(self.levels @ self.masses)

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        keep = self.masses > 0
        return self.levels[keep], self.masses[keep]


def point_mass(value: float) -> Discrete:
    return Discrete(np.array([value]), np.array([1.0]))


DemandDistribution = Union[Empirical, Parametric, Discrete]


@dataclass
class FirmProfile:
    """Demand distributions of one firm keyed by flat period index.

    ``history`` optionally holds aligned daily totals, shape
    ``(n_days, p+q+1)``, used for paired sampling and correlations.
    """

    firm_id: str
    per_period: dict[int, DemandDistribution]
    history: np.ndarray | None = None
    day_labels: tuple | None = None

    def __post_init__(self):
        self.per_period = {
            (k.flat_index if isinstance(k, PeriodId) else int(k)): v for k, v in self.per_period.items()
        }

    def distribution(self, tau: int) -> DemandDistribution:
        if tau in self.per_period:
            return self.per_period[tau]
        if tau == 0:
            return point_mass(0.0)
        raise DemandError(f"firm {self.firm_id} has no distribution for period {tau}")

    def check(self, sched: ToUSchedule) -> None:
        missing = [t for t in range(1, sched.n_periods + 1) if t not in self.per_period]
        if missing:
            raise DemandError(f"firm {self.firm_id} lacks periods {missing}")


def uniform_profile(firm_id: str, sched: ToUSchedule, low: float = 0.0, high: float = 10.0) -> FirmProfile:
    dist = Parametric("uniform", (low, high))
    return FirmProfile(firm_id, {t: dist for t in range(1, sched.n_periods + 1)})


# --- sample sets ----------------------------------------------------------


@dataclass(frozen=True)
class SampleSet:
    values: np.ndarray
    weights: np.ndarray | None = None
    firm_ids: tuple[str, ...] = ()
    lattice: float | None = None
    paired: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 2:
            vals = vals[None]
        if vals.ndim != 3:
            raise DemandError("sample values must have shape (n_firms, n, n_periods + 1)")
        object.__setattr__(self, "values", vals)
        if not self.firm_ids:
            object.__setattr__(self, "firm_ids", tuple(f"firm{i}" for i in range(vals.shape[0])))
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            object.__setattr__(self, "weights", w / w.sum())

    @property
    def n_firms(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def n_periods(self) -> int:
        return self.values.shape[2] - 1

    @property
    def exact(self) -> bool:
        return self.weights is not None

    @cached_property
    def collective(self) -> np.ndarray:
        return self.values.sum(axis=0)

    @cached_property
    def w(self) -> np.ndarray:
        """Normalized scenario weights."""
        if self.weights is None:
            return np.full(self.n, 1.0 / self.n)
        return self.weights

    @property
    def n_eff(self) -> float:
        """Effective sample size; infinite for exact enumeration."""
        return math.inf if self.exact else float(self.n)

    def mean(self, arr: np.ndarray) -> float:
        return float(self.w @ arr)

    def estimate(self, arr: np.ndarray) -> Estimate:
        m = self.mean(arr)
        if self.exact:
            return Estimate(m, 0.0)
        var = self.mean((arr - m) ** 2)
        return Estimate(m, math.sqrt(var / max(self.n - 1, 1)))

    def subset(self, firms: Sequence[int]) -> "SampleSet":
        idx = list(firms)
        return SampleSet(
            self.values[idx], self.weights, tuple(self.firm_ids[i] for i in idx), self.lattice, self.paired
        )

    def merged(self, firm_id: str = "collective") -> "SampleSet":
        return SampleSet(self.collective[None], self.weights, (firm_id,), self.lattice, self.paired)


def _firm_rngs(seed: int | np.random.SeedSequence, n_firms: int) -> list[np.random.SeedSequence]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(n_firms)


def draw_samples(
    profiles: Sequence[FirmProfile],
    sched: ToUSchedule,
    n: int = DEFAULT_SAMPLES,
    seed: int = 0,
    mode: str = "independent",
) -> SampleSet:
    """Monte Carlo sample set, independent per firm and per period by default.

    ``mode="paired"`` draws whole historical days per firm (keeps within-day
    correlation; the result is flagged ``paired``).
    """
    if not profiles:
        raise DemandError("no firm profiles")
    if mode not in ("independent", "paired"):
        raise DemandError(f"unknown sampling mode {mode!r}")
    T = sched.n_periods
    out = np.empty((len(profiles), n, T + 1))
    for i, (prof, ss) in enumerate(zip(profiles, _firm_rngs(seed, len(profiles)))):
        prof.check(sched)
        if mode == "paired":
            if prof.history is None:
                raise DemandError(f"paired sampling needs history for firm {prof.firm_id}")
            rng = np.random.default_rng(ss)
            out[i] = prof.history[rng.integers(len(prof.history), size=n)][:, : T + 1]
            continue
        for tau, pss in zip(range(T + 1), ss.spawn(T + 1)):
            out[i, :, tau] = prof.distribution(tau).sample(np.random.default_rng(pss), n)
    return SampleSet(out, None, tuple(p.firm_id for p in profiles), None, mode == "paired")


def exact_samples(profiles: Sequence[FirmProfile], sched: ToUSchedule, lattice: float = 1.0) -> SampleSet:
    """Enumerate every joint outcome of discretized distributions.

    Off-peak demand only enters costs linearly, so it is fixed at its mean
    instead of being enumerated.
    """
    T = sched.n_periods
    factors = []
    for prof in profiles:
        prof.check(sched)
        for tau in range(1, T + 1):
            dist = prof.distribution(tau)
            if not hasattr(dist, "support"):
                raise DemandError("exact enumeration needs discrete or empirical distributions")
            levels, masses = dist.support()
            if lattice and not np.allclose(levels / lattice, np.round(levels / lattice)):
                raise DemandError(f"levels of firm {prof.firm_id} are off the {lattice} kWh grid")
            factors.append((levels, masses))
    n_scen = math.prod(len(lv) for lv, _ in factors)
    if n_scen > 2_000_000:
        raise DemandError(f"{n_scen} joint outcomes is too many to enumerate")
    grids = np.meshgrid(*[lv for lv, _ in factors], indexing="ij")
    probs = np.meshgrid(*[ms for _, ms in factors], indexing="ij")
    weights = np.prod(np.stack([p.ravel() for p in probs]), axis=0)
    vals = np.stack([g.ravel() for g in grids]).reshape(len(profiles), T, n_scen)
    out = np.empty((len(profiles), n_scen, T + 1))
    out[:, :, 1:] = vals.transpose(0, 2, 1)
    for i, prof in enumerate(profiles):
        out[i, :, 0] = prof.distribution(0).mean()
    return SampleSet(out, weights, tuple(p.firm_id for p in profiles), lattice)


def _as_samples(source, sched, n_samples, seed) -> SampleSet:
    if isinstance(source, SampleSet):
        return source
    if sched is None:
        raise DemandError("a schedule is needed to sample firm profiles")
    return draw_samples(list(source), sched, n_samples, seed)


@dataclass(frozen=True)
class RealizedDay:
    firm_ids: tuple[str, ...]
    demand: np.ndarray  # (n_firms, n_periods + 1)
    paired: bool = False

    @property
    def collective(self) -> np.ndarray:
        return self.demand.sum(axis=0)


def sample_days(
    profiles: Sequence[FirmProfile], sched: ToUSchedule, n_days: int, seed: int, mode: str = "independent"
) -> np.ndarray:
    """Realized demand for ``n_days`` days, shape ``(n_days, n_firms, p+q+1)``."""
    return draw_samples(profiles, sched, n_days, seed, mode).values.transpose(1, 0, 2).copy()


def sample_day(
    profiles: Sequence[FirmProfile], sched: ToUSchedule, seed: int, mode: str = "independent"
) -> RealizedDay:
    days = sample_days(profiles, sched, 1, seed, mode)
    return RealizedDay(tuple(p.firm_id for p in profiles), days[0], mode == "paired")


# --- statistics on sample sets -------------------------------------------


def period_sum(arr: np.ndarray, periods: Iterable[int | PeriodId]) -> np.ndarray:
    idx = [p.flat_index if isinstance(p, PeriodId) else int(p) for p in periods]
    return arr[..., idx].sum(axis=-1)


def weighted_quantile(values: np.ndarray, weights: np.ndarray, prob: float) -> float:
    """Generalized inverse ``inf{x >= 0 : F(x) >= prob}`` of a non-negative sample."""
    if not 0 <= prob <= 1:
        raise DemandError(f"probability {prob} outside [0, 1]")
    if prob == 0:
        return 0.0
    order = np.argsort(values, kind="stable")
    v = values[order]
    cum = np.cumsum(weights[order])
    cum /= cum[-1]
    idx = int(np.searchsorted(cum, prob - 1e-12, side="left"))
    return float(v[min(idx, v.size - 1)])


def sample_quantile(samples: SampleSet, periods, prob: float, values: np.ndarray | None = None) -> Estimate:
    """Quantile of the collective demand summed over ``periods``.

    The standard error comes from the binomial spread of the order statistic.
    """
    v = period_sum(samples.collective, periods) if values is None else values
    q = weighted_quantile(v, samples.w, prob)
    if samples.exact or prob in (0.0, 1.0):
        return Estimate(q, 0.0)
    s = math.sqrt(prob * (1 - prob) / v.size)
    lo = weighted_quantile(v, samples.w, max(prob - s, 1e-12))
    hi = weighted_quantile(v, samples.w, min(prob + s, 1.0))
    return Estimate(q, (hi - lo) / 2)


def aggregate_quantile(
    source,
    periods,
    prob: float,
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    sched: ToUSchedule | None = None,
) -> Estimate:
    """Quantile of ``sum_i sum_{tau in periods} X_tau^i`` at level ``prob``."""
    return sample_quantile(_as_samples(source, sched, n_samples, seed), periods, prob)


def pairwise_correlation(profiles: Sequence[FirmProfile], periods) -> np.ndarray:
    """Correlation of per-day demand sums over ``periods`` between firm pairs.

    Uses the aligned day histories of the profiles; entries involving a
    zero-variance firm are NaN.
    """
    if len(profiles) < 2:
        raise DemandError("need at least two firms")
    series = _aligned_period_sums(profiles, periods)
    if series.shape[1] < 2:
        raise DemandError("need at least two common days")
    centered = series - series.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered**2).sum(axis=1))
    n = len(profiles)
    out = np.full((n, n), np.nan)
    for a in range(n):
        for b in range(a, n):
            if norms[a] == 0 or norms[b] == 0:
                continue
            rho = float(centered[a] @ centered[b] / (norms[a] * norms[b]))
            out[a, b] = out[b, a] = min(1.0, max(-1.0, rho))
    return out


def _aligned_period_sums(profiles: Sequence[FirmProfile], periods) -> np.ndarray:
    if any(p.history is None for p in profiles):
        raise DemandError("correlations need aligned day histories")
    labelled = all(p.day_labels is not None for p in profiles)
    if labelled:
        common = set(profiles[0].day_labels)
        for p in profiles[1:]:
            common &= set(p.day_labels)
        days = sorted(common)
        rows = []
        for p in profiles:
            pos = {d: i for i, d in enumerate(p.day_labels)}
            rows.append(period_sum(p.history[[pos[d] for d in days]], periods))
        return np.array(rows)
    lengths = {len(p.history) for p in profiles}
    if len(lengths) != 1:
        raise DemandError("unlabelled histories must have equal length")
    return np.array([period_sum(p.history, periods) for p in profiles])


def correlation_histogram(matrix: np.ndarray, bins: int = 20) -> list[tuple[float, float, int]]:
    """Histogram of the upper-triangle coefficients; NaN entries get their own row."""
    iu = np.triu_indices_from(matrix, k=1)
    vals = matrix[iu]
    defined = vals[~np.isnan(vals)]
    counts, edges = np.histogram(defined, bins=bins, range=(-1.0, 1.0))
    rows = [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]
    rows.append((math.nan, math.nan, int(np.isnan(vals).sum())))
    return rows


@dataclass(frozen=True)
class BandEstimate:
    mean: float
    se: float
    n_accepted: int
    half_width: float
    exact: bool = False


def conditional_mean_band(
    samples: SampleSet,
    firm: int,
    numerator_periods,
    conditioning_periods,
    r: float,
    constraints: Sequence[tuple[Sequence[int], float]] = (),
    half_width: float | None = None,
    min_hits: int = MIN_BAND_HITS,
    max_doublings: int = 12,
) -> BandEstimate:
    """Estimate ``E[sum_num X^firm | sum_cond X^c = r, prefix constraints]``.

    Each constraint ``(periods, bound)`` requires the collective demand summed
    over ``periods`` to stay strictly below ``bound``.  Monte Carlo sets use a
    band ``|sum - r| <= h`` starting at 1% of ``r`` and doubling until
    ``min_hits`` scenarios are accepted; exact lattice sets condition on the
    event itself.
    """
    num = period_sum(samples.values[firm], numerator_periods)
    cond = period_sum(samples.collective, conditioning_periods)
    ok = np.ones(samples.n, dtype=bool)
    for prefix, bound in constraints:
        ok &= period_sum(samples.collective, prefix) < bound
    w = samples.w
    if samples.exact and half_width is None:
        mask = ok & (np.abs(cond - r) <= 1e-9)
        mass = w[mask].sum()
        if mass <= 0:
            raise RareEventError(f"conditioning event sum = {r} has probability zero")
        return BandEstimate(float(w[mask] @ num[mask] / mass), 0.0, int(mask.sum()), 0.0, True)

    h = half_width if half_width is not None else 0.01 * r
    if h <= 0:
        h = 0.01 * max(float(np.std(cond)), 1e-6)
    for _ in range(max_doublings + 1):
        mask = ok & (np.abs(cond - r) <= h)
        hits = int(mask.sum())
        if hits >= min_hits:
            wm = w[mask] / w[mask].sum()
            m = float(wm @ num[mask])
            var = float(wm @ (num[mask] - m) ** 2)
            return BandEstimate(m, math.sqrt(var / hits), hits, h)
        h *= 2
    raise RareEventError(f"conditioning event too rare: {hits} hits within +-{h / 2:g} of {r:g}")


def density_at(values: np.ndarray, weights: np.ndarray, r: float, lattice: float | None = None) -> float:
    """Histogram density of ``values`` at ``r`` with a Freedman-Diaconis bin.

    On a lattice the bin is one grid step.  Floored at 1e-9.
    """
    if lattice:
        width = lattice
    else:
        q1 = weighted_quantile(values, weights, 0.25)
        q3 = weighted_quantile(values, weights, 0.75)
        width = 2 * (q3 - q1) * values.size ** (-1 / 3)
        if width <= 0:
            width = max(float(np.std(values)), 1e-6) * values.size ** (-1 / 3)
    mass = weights[np.abs(values - r) < width / 2].sum()
    return max(float(mass) / width, 1e-9)


# --- smart-meter ingestion ------------------------------------------------


@dataclass
class IngestResult:
    profiles: list[FirmProfile]
    dropped_days: dict[str, int] = field(default_factory=dict)
    clamped_rows: int = 0
    warnings: list[str] = field(default_factory=list)


def _parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return datetime.fromisoformat(text)


def day_anchor(sched: ToUSchedule) -> int:
    """Clock hour at which a tariff day starts.

    Midnight when it falls in off peak (then every storage period sits
    inside one calendar day), otherwise the start of the off-peak window.
    """
    if sched.period_of(0).kind is PeriodKind.OFF_PEAK:
        return 0
    return sched.off_peak_start()


def ingest_load_csv(path: str | Path, sched: ToUSchedule) -> IngestResult:
    """Read ``timestamp,meter_id,kwh`` interval data into per-period daily totals.

    Incomplete days (any clock hour without a reading) are dropped with a
    warning, negative readings are clamped to zero, and an unparseable row
    raises :class:`DemandError` naming its line.
    """
    hour_period = sched.hour_map()
    anchor = day_anchor(sched)
    energy: dict[tuple[str, object], np.ndarray] = defaultdict(lambda: np.zeros(HOURS))
    seen: dict[tuple[str, object], set[int]] = defaultdict(set)
    result = IngestResult([])
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"timestamp", "meter_id", "kwh"} <= set(reader.fieldnames):
            raise DemandError("CSV header must contain timestamp,meter_id,kwh")
        for row in reader:
            line = reader.line_num
            try:
                ts = _parse_timestamp(row["timestamp"])
                meter = row["meter_id"].strip()
                kwh = float(row["kwh"])
                if not meter or math.isnan(kwh):
                    raise ValueError("empty meter id or NaN energy")
            except (TypeError, ValueError, AttributeError) as exc:
                raise DemandError(f"line {line}: cannot parse row {row!r}: {exc}") from None
            if kwh < 0:
                msg = f"line {line}: negative reading {kwh} kWh clamped to 0"
                warnings.warn(msg, IngestWarning, stacklevel=2)
                result.warnings.append(msg)
                result.clamped_rows += 1
                kwh = 0.0
            day = (ts - timedelta(hours=anchor)).date()
            key = (meter, day)
            energy[key][ts.hour] += kwh
            seen[key].add(ts.hour)

    per_meter: dict[str, list[tuple[object, np.ndarray]]] = defaultdict(list)
    for (meter, day), hourly in energy.items():
        if len(seen[(meter, day)]) < HOURS:
            result.dropped_days[meter] = result.dropped_days.get(meter, 0) + 1
            continue
        totals = np.zeros(sched.n_periods + 1)
        np.add.at(totals, hour_period, hourly)
        per_meter[meter].append((day, totals))
    for meter in sorted(result.dropped_days):
        msg = f"meter {meter}: {result.dropped_days[meter]} incomplete day(s) dropped"
        warnings.warn(msg, IngestWarning, stacklevel=2)
        result.warnings.append(msg)

    for meter in sorted(per_meter):
        rows = sorted(per_meter[meter], key=lambda r: r[0])
        hist = np.array([r[1] for r in rows])
        result.profiles.append(
            FirmProfile(
                meter,
                {t: Empirical(hist[:, t]) for t in range(sched.n_periods + 1)},
                hist,
                tuple(r[0] for r in rows),
            )
        )
    return result


def save_profiles(profiles: Sequence[FirmProfile], path: str | Path) -> None:
    doc = {"firms": []}
    for prof in profiles:
        periods = {}
        for tau, dist in prof.per_period.items():
            if isinstance(dist, Empirical):
                periods[str(tau)] = {"kind": "empirical", "samples": dist.samples.tolist()}
            elif isinstance(dist, Parametric):
                periods[str(tau)] = {"kind": "parametric", "family": dist.family, "params": list(dist.params)}
            else:
                periods[str(tau)] = {
                    "kind": "discrete",
                    "levels": dist.levels.tolist(),
                    "masses": dist.masses.tolist(),
                }
        entry = {"firm_id": prof.firm_id, "periods": periods}
        if prof.history is not None:
            entry["history"] = prof.history.tolist()
        if prof.day_labels is not None:
            entry["days"] = [str(d) for d in prof.day_labels]
        doc["firms"].append(entry)
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_profiles(path: str | Path) -> list[FirmProfile]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    out = []
    for entry in doc["firms"]:
        periods: dict[int, DemandDistribution] = {}
        for key, spec in entry["periods"].items():
            if spec["kind"] == "empirical":
                periods[int(key)] = Empirical(np.array(spec["samples"]))
            elif spec["kind"] == "parametric":
                periods[int(key)] = Parametric(spec["family"], tuple(spec["params"]))
            else:
                periods[int(key)] = Discrete(np.array(spec["levels"]), np.array(spec["masses"]))
        hist = np.array(entry["history"]) if "history" in entry else None
        labels = tuple(entry["days"]) if "days" in entry else None
        out.append(FirmProfile(entry["firm_id"], periods, hist, labels))
    return out


# --- synthetic communities ------------------------------------------------


@dataclass(frozen=True)
class SyntheticCommunity:
    """Lognormal per-firm, per-period demand with a shared daily factor.

    Firm ``i``'s demand in period ``tau`` is
    ``scale_i,tau * exp(sigma * Z - sigma^2 / 2) * exp(day_sigma * W - day_sigma^2 / 2)``
    where ``W`` is common to every firm and period of a day.  ``day_sigma``
    therefore controls cross-firm (and within-day) correlation.
    """

    n_firms: int = 10
    kwh_per_hour: float = 1.0
    firm_spread: float = 0.4
    period_spread: float = 0.3
    sigma: float = 0.5
    day_sigma: float = 0.15
    seed: int = 2016

    def period_hours(self, sched: ToUSchedule) -> np.ndarray:
        if sched.windows is None:
            return np.full(sched.n_periods + 1, 24 / (sched.n_periods + 1))
        hours = np.zeros(sched.n_periods + 1)
        np.add.at(hours, sched.hour_map(), 1)
        return hours

    def means(self, sched: ToUSchedule) -> np.ndarray:
        """Mean daily kWh per firm and period, shape ``(n_firms, p+q+1)``."""
        rng = np.random.default_rng(self.seed)
        base = self.kwh_per_hour * self.period_hours(sched)
        firm = rng.lognormal(-self.firm_spread**2 / 2, self.firm_spread, size=(self.n_firms, 1))
        shape = rng.lognormal(-self.period_spread**2 / 2, self.period_spread, size=(self.n_firms, base.size))
        return base * firm * shape

    def draw(self, sched: ToUSchedule, n: int, seed: int) -> np.ndarray:
        """Joint demand draws, shape ``(n_firms, n, p+q+1)``."""
        rng = np.random.default_rng(seed)
        means = self.means(sched)
        z = rng.standard_normal((self.n_firms, n, means.shape[1]))
        day = rng.standard_normal((1, n, 1))
        mult = np.exp(self.sigma * z - self.sigma**2 / 2) * np.exp(self.day_sigma * day - self.day_sigma**2 / 2)
        return means[:, None, :] * mult

    def firm_ids(self) -> tuple[str, ...]:
        return tuple(f"firm{i:02d}" for i in range(self.n_firms))

    def sample_set(self, sched: ToUSchedule, n: int = DEFAULT_SAMPLES, seed: int = 0) -> SampleSet:
        return SampleSet(self.draw(sched, n, seed), None, self.firm_ids())

    def days(self, sched: ToUSchedule, n_days: int, seed: int) -> np.ndarray:
        """Realized days, shape ``(n_days, n_firms, p+q+1)``."""
        return self.draw(sched, n_days, seed).transpose(1, 0, 2).copy()

    def profiles(self, sched: ToUSchedule, n_history: int = 365, seed: int = 0) -> list[FirmProfile]:
        hist = self.draw(sched, n_history, seed)
        return [
            FirmProfile(fid, {t: Empirical(hist[i, :, t]) for t in range(hist.shape[2])}, hist[i], tuple(range(n_history)))
            for i, fid in enumerate(self.firm_ids())
        ]
