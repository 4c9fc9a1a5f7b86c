"""Single-peaked time-of-use tariffs.

A schedule has one off-peak period followed by ``p`` ramp-up periods
(RU_1..RU_p) and ``q`` ramp-down periods (RD_1..RD_q, RD_1 being the peak).
Periods are addressed by a flat index ``tau``: 0 is off peak, ``1..p`` are the
ramp-up periods and ``p+1..p+q`` the ramp-down periods.

Rates are kept as integer tenths of a cent so that price equality tests are
exact; the public accessors return cents per kWh as floats.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

HOURS = 24


class ScheduleError(ValueError):
    """Raised when a tariff document cannot be turned into a valid schedule."""

    def __init__(self, message: str, violations: Sequence[str] = ()):
        self.violations = list(violations)
        if self.violations:
            message = f"{message}: " + "; ".join(self.violations)
        super().__init__(message)


class ArbitrageWarning(UserWarning):
    """Peak spread does not cover the amortized storage cost."""


class PeriodKind(enum.Enum):
    OFF_PEAK = "off_peak"
    RAMP_UP = "ru"
    RAMP_DOWN = "rd"


@dataclass(frozen=True, order=True)
class PeriodId:
    flat_index: int
    kind: PeriodKind = field(compare=False)
    number: int = field(compare=False)

    def __str__(self) -> str:
        if self.kind is PeriodKind.OFF_PEAK:
            return "OffPeak"
        label = "RU" if self.kind is PeriodKind.RAMP_UP else "RD"
        return f"{label}({self.number})"


@dataclass(frozen=True)
class Window:
    """Half-open clock interval ``[start, end)``; ``start > end`` wraps midnight."""

    start: int
    end: int
    period: int

    def hours(self) -> list[int]:
        if self.start < self.end:
            return list(range(self.start, self.end))
        return list(range(self.start, HOURS)) + list(range(0, self.end))


def to_tenths(value: float | int | str | Decimal) -> int:
    try:
        tenths = Decimal(str(value)) * 10
    except InvalidOperation as exc:
        raise ScheduleError(f"not a number: {value!r}") from exc
    if tenths != tenths.to_integral_value():
        raise ScheduleError(f"rate {value} is finer than a tenth of a cent")
    return int(tenths)


@dataclass(frozen=True)
class ToUSchedule:
    off_peak_tenths: int
    ru_tenths: tuple[int, ...]
    rd_tenths: tuple[int, ...]
    storage_cost: float
    windows: tuple[Window, ...] | None = None

    @classmethod
    def from_rates(
        cls,
        off_peak: float,
        ru: Iterable[float],
        rd: Iterable[float],
        storage_cost: float,
        windows: Iterable[Window] | None = None,
    ) -> "ToUSchedule":
        return cls(
            to_tenths(off_peak),
            tuple(to_tenths(r) for r in ru),
            tuple(to_tenths(r) for r in rd),
            float(storage_cost),
            None if windows is None else tuple(windows),
        )

    @property
    def p(self) -> int:
        return len(self.ru_tenths)

    @property
    def q(self) -> int:
        return len(self.rd_tenths)

    @property
    def n_periods(self) -> int:
        """Number of non-off-peak periods, ``p + q``."""
        return self.p + self.q

    @property
    def off_peak_rate(self) -> float:
        return self.off_peak_tenths / 10

    @property
    def peak_rate(self) -> float:
        return self.rd_tenths[0] / 10

    @property
    def rate_tenths(self) -> tuple[int, ...]:
        return (self.off_peak_tenths,) + self.ru_tenths + self.rd_tenths

    @property
    def rates(self) -> np.ndarray:
        """Rates indexed by flat period index, off peak at position 0."""
        return np.array(self.rate_tenths, dtype=float) / 10

    def rate(self, tau: int) -> float:
        return self.rate_tenths[tau] / 10

    def rate_with_sentinel(self, tau: int) -> float:
        """Rate of period ``tau`` with ``tau = p + q + 1`` mapped to off peak."""
        if tau == self.n_periods + 1:
            return self.off_peak_rate
        return self.rate(tau)

    def is_ramp_up(self, tau: int) -> bool:
        return 1 <= tau <= self.p

    def period(self, tau: int) -> PeriodId:
        if tau == 0:
            return PeriodId(0, PeriodKind.OFF_PEAK, 0)
        if 1 <= tau <= self.p:
            return PeriodId(tau, PeriodKind.RAMP_UP, tau)
        if self.p < tau <= self.n_periods:
            return PeriodId(tau, PeriodKind.RAMP_DOWN, tau - self.p)
        raise IndexError(f"period index {tau} outside 0..{self.n_periods}")

    def periods(self, include_off_peak: bool = False) -> list[PeriodId]:
        start = 0 if include_off_peak else 1
        return [self.period(t) for t in range(start, self.n_periods + 1)]

    @property
    def arbitrage_viable(self) -> bool:
        return self.peak_rate - self.off_peak_rate > self.storage_cost

    def period_of(self, hour: int) -> PeriodId:
        if self.windows is None:
            raise ScheduleError("schedule has no clock windows")
        if not 0 <= hour < HOURS:
            raise ValueError(f"hour {hour} outside 0..23")
        for w in self.windows:
            if hour in w.hours():
                return self.period(w.period)
        raise ScheduleError(f"hour {hour} not covered by any window")

    def hour_map(self) -> np.ndarray:
        """Flat period index for each clock hour."""
        return np.array([self.period_of(h).flat_index for h in range(HOURS)])

    def hourly_rates(self) -> list[float]:
        return [self.rate(t) for t in self.hour_map()]

    def off_peak_start(self) -> int:
        if self.windows is None:
            raise ScheduleError("schedule has no clock windows")
        return next(w.start for w in self.windows if w.period == 0)

    def sub_schedule(self, tau: int) -> "ToUSchedule":
        """Two-tier schedule pairing period ``tau`` with off peak."""
        return ToUSchedule(self.off_peak_tenths, (), (self.rate_tenths[tau],), self.storage_cost)


def validate_single_peaked(sched: ToUSchedule) -> list[str]:
    """Return the list of violated schedule invariants (empty when valid)."""
    problems: list[str] = []
    if sched.q < 1:
        problems.append("schedule needs at least the peak period")
    if sched.storage_cost <= 0:
        problems.append("storage cost must be positive")
    seq = list(sched.rate_tenths) + [sched.off_peak_tenths]
    if sched.q >= 1:
        maxima = sum(
            1 for i in range(1, len(seq) - 1) if seq[i] > seq[i - 1] and seq[i] >= seq[i + 1]
        )
        if maxima > 1:
            problems.append(f"two local maxima: rates rise to {maxima} separate peaks")
        up = seq[: sched.p + 2]
        down = seq[sched.p + 1 :]
        if any(b <= a for a, b in zip(up, up[1:])) or any(b >= a for a, b in zip(down, down[1:])):
            problems.append(
                "strict monotonicity: rates must strictly rise from off peak to the peak "
                "and strictly fall back"
            )
    if sched.windows is not None:
        problems.extend(_window_problems(sched))
    return problems


def _window_problems(sched: ToUSchedule) -> list[str]:
    problems = []
    cover = [0] * HOURS
    for w in sched.windows:
        if not (0 <= w.start < HOURS and 0 <= w.end <= HOURS) or w.start == w.end:
            problems.append(f"bad window {w.start}-{w.end}")
            continue
        if w.start > w.end and w.period != 0:
            problems.append("only the off-peak window may wrap midnight")
        if not 0 <= w.period <= sched.n_periods:
            problems.append(f"window {w.start}-{w.end} refers to unknown period {w.period}")
        for h in w.hours():
            cover[h] += 1
    if any(c == 0 for c in cover):
        problems.append("windows do not cover 24 hours")
    if any(c > 1 for c in cover):
        problems.append("windows overlap")
    ids = sorted(w.period for w in sched.windows)
    if ids != list(range(sched.n_periods + 1)):
        problems.append("each period needs exactly one contiguous window")
    return problems


# --- config documents -----------------------------------------------------


def _blocks_from_hours(rates: Sequence[int]) -> list[tuple[int, int, int]]:
    """Split 24 hourly rates into maximal constant blocks ``(start, end, rate)``.

    Blocks are rotated to begin where the lowest rate begins, so a block may
    wrap midnight.
    """
    low = min(rates)
    starts = [h for h in range(HOURS) if rates[h] != rates[h - 1]]
    if not starts:
        return [(0, 0, rates[0])]
    begin = next((h for h in starts if rates[h] == low), starts[0])
    k = starts.index(begin)
    ordered = starts[k:] + starts[:k]
    blocks = []
    for i, s in enumerate(ordered):
        e = ordered[(i + 1) % len(ordered)]
        blocks.append((s, e, rates[s]))
    return blocks


def _schedule_from_blocks(
    blocks: Sequence[tuple[int, int, int]], off_peak: int, storage_cost: float
) -> ToUSchedule:
    if blocks[0][2] != off_peak:
        raise ScheduleError(
            "off_peak_rate_cents does not match the lowest hourly rate",
            [f"lowest rate is {blocks[0][2] / 10}"],
        )
    problems = []
    if any(rate == off_peak for _, _, rate in blocks[1:]):
        problems.append("off-peak rate appears in more than one window")
    rest = [rate for _, _, rate in blocks[1:]]
    if not rest:
        raise ScheduleError("rate list has no non-off-peak period")
    top = max(rest)
    p = rest.index(top)
    sched = ToUSchedule(
        off_peak,
        tuple(rest[:p]),
        tuple(rest[p:]),
        storage_cost,
        tuple(Window(s, e % HOURS, i) for i, (s, e, _) in enumerate(blocks)),
    )
    problems.extend(validate_single_peaked(sched))
    if problems:
        raise ScheduleError("invalid schedule", problems)
    return sched


def parse_schedule(config: str | Path | Mapping[str, Any]) -> ToUSchedule:
    """Build a validated schedule from a TOML document, a path, or a mapping.

    Accepted keys: ``off_peak_rate_cents``, ``storage_cost_cents_per_kwh_day``
    and either ``rates`` (24 hour-indexed rates), or ``[[windows]]`` tables
    with ``start``, ``end`` and ``rate_cents``, or explicit
    ``ru_rates_cents``/``rd_rates_cents`` lists without clock windows.
    """
    doc = _load_document(config)
    try:
        off_peak = to_tenths(doc["off_peak_rate_cents"])
        storage_cost = float(doc["storage_cost_cents_per_kwh_day"])
    except KeyError as exc:
        raise ScheduleError(f"missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ScheduleError(f"malformed document: {exc}") from None

    if "rates" in doc:
        rates = doc["rates"]
        if not isinstance(rates, list) or not rates:
            raise ScheduleError("rate list empty")
        if len(rates) != HOURS:
            raise ScheduleError(f"windows not covering 24h: {len(rates)} hourly rates given")
        sched = _schedule_from_blocks(_blocks_from_hours([to_tenths(r) for r in rates]), off_peak, storage_cost)
    elif "windows" in doc:
        sched = _schedule_from_windows(doc["windows"], off_peak, storage_cost)
    elif "rd_rates_cents" in doc:
        rd = doc["rd_rates_cents"]
        if not rd:
            raise ScheduleError("rate list empty")
        sched = ToUSchedule(
            off_peak,
            tuple(to_tenths(r) for r in doc.get("ru_rates_cents", [])),
            tuple(to_tenths(r) for r in rd),
            storage_cost,
        )
        problems = validate_single_peaked(sched)
        if problems:
            raise ScheduleError("invalid schedule", problems)
    else:
        raise ScheduleError("document declares no rates")

    if not sched.arbitrage_viable:
        warnings.warn(
            f"peak spread {sched.peak_rate - sched.off_peak_rate:g} does not exceed storage "
            f"cost {sched.storage_cost:g}; optimal capacity is zero",
            ArbitrageWarning,
            stacklevel=2,
        )
    return sched


def _schedule_from_windows(windows: Any, off_peak: int, storage_cost: float) -> ToUSchedule:
    if not isinstance(windows, list) or not windows:
        raise ScheduleError("rate list empty")
    raw = []
    for w in windows:
        try:
            raw.append((int(w["start"]), int(w["end"]) % HOURS, to_tenths(w["rate_cents"])))
        except (KeyError, TypeError) as exc:
            raise ScheduleError(f"malformed window {w!r}") from exc
    cover = [0] * HOURS
    for s, e, _ in raw:
        for h in Window(s, e, 0).hours():
            cover[h] += 1
    if any(c != 1 for c in cover):
        raise ScheduleError("windows not covering 24h exactly once")
    offs = [w for w in raw if w[2] == off_peak]
    if len(offs) != 1:
        raise ScheduleError("exactly one window must carry the off-peak rate")
    # walk the day from the off-peak window
    by_start = {s: (s, e, r) for s, e, r in raw}
    blocks = [offs[0]]
    while len(blocks) < len(raw):
        nxt = by_start.get(blocks[-1][1])
        if nxt is None:
            raise ScheduleError("windows are not contiguous")
        blocks.append(nxt)
    rest = [r for _, _, r in blocks[1:]]
    if not rest:
        raise ScheduleError("rate list has no non-off-peak period")
    p = rest.index(max(rest))
    sched = ToUSchedule(
        off_peak,
        tuple(rest[:p]),
        tuple(rest[p:]),
        storage_cost,
        tuple(Window(s, e, i) for i, (s, e, _) in enumerate(blocks)),
    )
    problems = validate_single_peaked(sched)
    if problems:
        raise ScheduleError("invalid schedule", problems)
    return sched


def _load_document(config: str | Path | Mapping[str, Any]) -> Mapping[str, Any]:
    if isinstance(config, Mapping):
        return config
    if isinstance(config, Path) or (isinstance(config, str) and "=" not in config):
        try:
            text = Path(config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ScheduleError(f"cannot read schedule file {config}: {exc}") from exc
    else:
        text = config
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScheduleError(f"malformed document: {exc}") from exc
    return doc.get("schedule", doc)


def _fmt(tenths: int) -> str:
    return str(Decimal(tenths) / 10)


def serialize_schedule(sched: ToUSchedule) -> str:
    """TOML text that :func:`parse_schedule` turns back into ``sched``."""
    lines = [
        f"off_peak_rate_cents = {_fmt(sched.off_peak_tenths)}",
        f"storage_cost_cents_per_kwh_day = {sched.storage_cost!r}",
    ]
    if sched.windows is None:
        lines.append("ru_rates_cents = [" + ", ".join(_fmt(r) for r in sched.ru_tenths) + "]")
        lines.append("rd_rates_cents = [" + ", ".join(_fmt(r) for r in sched.rd_tenths) + "]")
    else:
        for w in sched.windows:
            lines += [
                "",
                "[[windows]]",
                f"start = {w.start}",
                f"end = {w.end}",
                f"rate_cents = {_fmt(sched.rate_tenths[w.period])}",
            ]
    return "\n".join(lines) + "\n"


def sce_tou_d_a(storage_cost: float = 14.0) -> ToUSchedule:
    """SCE grandfathered ToU-D-A: 13/28/52/28 cents with 8AM, 2PM, 8PM, 10PM edges."""
    hourly = [13] * 8 + [28] * 6 + [52] * 6 + [28] * 2 + [13] * 2
    return parse_schedule(
        {"off_peak_rate_cents": 13, "storage_cost_cents_per_kwh_day": storage_cost, "rates": hourly}
    )
