"""Loop-detector flow data: CSV ingest/export, windows, normalization, synthetic roads."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractError, FitError, IngestError, SpecificationError

SLOT_MINUTES = 15
SLOTS_PER_DAY = 96
SLOTS_PER_WEEK = 7 * SLOTS_PER_DAY
N_LOOPS = 9
TARGET_INDEX = 4
N_LAGS = 5
CSV_HEADER = ("timestamp", "loop_id", "flow")


@dataclass
class FlowSeries:
    loop_id: str
    start: datetime
    values: np.ndarray
    slot_minutes: int = SLOT_MINUTES

    def __len__(self) -> int:
        return len(self.values)

    def timestamp(self, slot: int) -> datetime:
        return self.start + timedelta(minutes=self.slot_minutes * slot)


@dataclass
class RoadDataset:
    """Nine aligned loops ordered upstream to downstream; the middle one is predicted."""

    road_name: str
    loops: list[FlowSeries]
    target_index: int = TARGET_INDEX

    def __post_init__(self):
        if len(self.loops) != N_LOOPS:
            raise ContractError(f"road {self.road_name!r} has {len(self.loops)} loops, expected {N_LOOPS}")
        first = self.loops[0]
        for s in self.loops[1:]:
            if s.start != first.start or s.slot_minutes != first.slot_minutes or len(s) != len(first):
                raise ContractError(f"loop {s.loop_id!r} is not aligned with {first.loop_id!r}")
        ids = [s.loop_id for s in self.loops]
        if len(set(ids)) != len(ids):
            raise ContractError("duplicate loop ids")
        self._matrix = np.column_stack([np.asarray(s.values, dtype=float) for s in self.loops])
        self._matrix.setflags(write=False)

    @property
    def start(self) -> datetime:
        return self.loops[0].start

    @property
    def n_slots(self) -> int:
        return len(self.loops[0])

    @property
    def loop_ids(self) -> list[str]:
        return [s.loop_id for s in self.loops]

    @property
    def matrix(self) -> np.ndarray:
        """(n_slots, 9) read-only flow matrix."""
        return self._matrix

    def timestamp(self, slot: int) -> datetime:
        return self.loops[0].timestamp(slot)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RoadDataset):
            return NotImplemented
        return (
            self.road_name == other.road_name
            and self.target_index == other.target_index
            and self.loop_ids == other.loop_ids
            and self.start == other.start
            and self.n_slots == other.n_slots
            and np.array_equal(self.matrix, other.matrix)
        )


@dataclass(frozen=True)
class SampleWindow:
    features: np.ndarray  # (lags, loops); row 0 is slot t-lags, last row t-1
    target: float
    slot_index: int


@dataclass
class WindowBatch:
    """A chronological run of windows stored as stacked arrays."""

    features: np.ndarray  # (N, lags, loops)
    targets: np.ndarray  # (N,)
    slots: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.targets)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return WindowBatch(self.features[i], self.targets[i], self.slots[i])
        return SampleWindow(self.features[i], float(self.targets[i]), int(self.slots[i]))

    def __iter__(self) -> Iterator[SampleWindow]:
        for i in range(len(self)):
            yield self[i]


# ---------------------------------------------------------------------------
# CSV ingest / export
# ---------------------------------------------------------------------------


def manifest_path_for(csv_path) -> Path:
    return Path(csv_path).with_suffix(".manifest")


def read_manifest(source) -> list[str]:
    if isinstance(source, (list, tuple)):
        ids = [str(s) for s in source]
    else:
        text = Path(source).read_text(encoding="utf-8")
        ids = [line.strip() for line in text.splitlines() if line.strip()]
    if len(ids) != N_LOOPS:
        raise IngestError(f"manifest lists {len(ids)} loops, expected {N_LOOPS}")
    if len(set(ids)) != len(ids):
        raise IngestError("manifest contains duplicate loop ids")
    return ids


def _open_text(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8")
    return source


def parse_flow_csv(source, manifest=None, road_name: str | None = None, repair_gaps: int = 0) -> RoadDataset:
    """Read a ``timestamp,loop_id,flow`` CSV into a RoadDataset.

    ``manifest`` is a path or a list of the nine loop ids upstream to downstream;
    by default it is looked up next to the CSV (``<stem>.manifest``). Gaps are
    rejected unless ``repair_gaps`` > 0, in which case runs of at most that
    many missing slots are forward-filled.
    """
    if manifest is None:
        if not isinstance(source, (str, os.PathLike)):
            raise IngestError("a manifest is required when reading from a stream")
        manifest = manifest_path_for(source)
    loop_ids = read_manifest(manifest)
    if road_name is None:
        road_name = Path(source).stem if isinstance(source, (str, os.PathLike)) else "road"

    rows: dict[str, list[tuple[datetime, float, int]]] = {lid: [] for lid in loop_ids}
    fh = _open_text(source)
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise IngestError(f"row 1: header must be {','.join(CSV_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise IngestError(f"row {lineno}: expected 3 fields, got {len(row)}")
            ts_text, lid, flow_text = (x.strip() for x in row)
            try:
                ts = datetime.fromisoformat(ts_text)
            except ValueError:
                raise IngestError(f"row {lineno}: unparseable timestamp {ts_text!r}") from None
            try:
                flow = float(flow_text)
            except ValueError:
                raise IngestError(f"row {lineno}: unparseable flow {flow_text!r}") from None
            if not np.isfinite(flow):
                raise IngestError(f"row {lineno}: non-finite flow {flow_text!r}")
            if flow < 0:
                raise IngestError(f"row {lineno}: negative flow {flow_text!r}")
            if lid not in rows:
                raise IngestError(f"row {lineno}: loop {lid!r} not in manifest")
            rows[lid].append((ts, flow, lineno))
    finally:
        if fh is not source:
            fh.close()

    step = timedelta(minutes=SLOT_MINUTES)
    series = []
    for lid in loop_ids:
        recs = sorted(rows[lid], key=lambda r: r[0])
        if not recs:
            raise IngestError(f"loop {lid!r} from the manifest has no rows")
        values = [recs[0][1]]
        for prev, cur in zip(recs, recs[1:]):
            delta = cur[0] - prev[0]
            if delta == step:
                values.append(cur[1])
                continue
            if delta == timedelta(0):
                raise IngestError(f"row {cur[2]}: duplicate slot {cur[0].isoformat()} for loop {lid!r}")
            missing, rem = divmod(delta, step)
            if rem or delta < step:
                raise IngestError(
                    f"row {cur[2]}: loop {lid!r} has non-uniform slot spacing at {cur[0].isoformat()}"
                )
            missing -= 1
            if missing > repair_gaps:
                raise IngestError(
                    f"row {cur[2]}: loop {lid!r} has a gap of {missing} slot(s) starting at "
                    f"{(prev[0] + step).isoformat()}"
                )
            values.extend([prev[1]] * missing)
            values.append(cur[1])
        series.append(FlowSeries(lid, recs[0][0], np.asarray(values, dtype=float)))

    first = series[0]
    for s in series[1:]:
        if s.start != first.start or len(s) != len(first):
            raise IngestError(
                f"loop {s.loop_id!r} spans {s.start.isoformat()} (+{len(s)} slots) but "
                f"{first.loop_id!r} spans {first.start.isoformat()} (+{len(first)} slots)"
            )
    return RoadDataset(road_name, series)


def write_flow_csv(dataset: RoadDataset, sink, manifest_sink=None) -> None:
    """Write the canonical CSV (rows by slot, then manifest order) and its manifest."""
    if manifest_sink is None and isinstance(sink, (str, os.PathLike)):
        manifest_sink = manifest_path_for(sink)
    fh = sink if not isinstance(sink, (str, os.PathLike)) else open(sink, "w", newline="", encoding="utf-8")
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        ids = dataset.loop_ids
        M = dataset.matrix
        for t in range(dataset.n_slots):
            ts = dataset.timestamp(t).isoformat()
            for k, lid in enumerate(ids):
                writer.writerow((ts, lid, repr(float(M[t, k]))))
    finally:
        if fh is not sink:
            fh.close()
    if manifest_sink is not None:
        text = "\n".join(dataset.loop_ids) + "\n"
        if isinstance(manifest_sink, (str, os.PathLike)):
            Path(manifest_sink).write_text(text, encoding="utf-8")
        else:
            manifest_sink.write(text)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


def _as_interval(rng) -> tuple[int, int]:
    if isinstance(rng, range):
        if rng.step != 1:
            raise ContractError("slot ranges must have step 1")
        return rng.start, rng.stop
    start, stop = rng
    return int(start), int(stop)


def build_windows(dataset: RoadDataset, slot_range, lags: int = N_LAGS) -> WindowBatch:
    """One window per slot t in ``slot_range``: features are slots t-lags..t-1, target is t."""
    start, stop = _as_interval(slot_range)
    if start < lags:
        raise ContractError(f"range start {start} leaves fewer than {lags} lag slots")
    if stop > dataset.n_slots:
        raise ContractError(f"range end {stop} exceeds series length {dataset.n_slots}")
    stop = max(stop, start)
    M = dataset.matrix
    n = stop - start
    if n == 0:
        return WindowBatch(np.empty((0, lags, M.shape[1])), np.empty(0), np.empty(0, dtype=np.int64))
    view = np.lib.stride_tricks.sliding_window_view(M[start - lags : stop - 1], lags, axis=0)
    features = np.ascontiguousarray(view.transpose(0, 2, 1))
    targets = M[start:stop, dataset.target_index].copy()
    return WindowBatch(features, targets, np.arange(start, stop, dtype=np.int64))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass
class Normalizer:
    mins: np.ndarray
    maxs: np.ndarray
    target_index: int = TARGET_INDEX

    @property
    def span(self) -> np.ndarray:
        return self.maxs - self.mins

    def apply(self, x):
        """Scale the loop axis (last) of ``x`` to the fitted [0, 1] range."""
        return (np.asarray(x, dtype=float) - self.mins) / self.span

    def invert(self, x):
        return np.asarray(x, dtype=float) * self.span + self.mins

    def apply_target(self, y):
        k = self.target_index
        return (np.asarray(y, dtype=float) - self.mins[k]) / self.span[k]

    def invert_target(self, y):
        k = self.target_index
        return np.asarray(y, dtype=float) * self.span[k] + self.mins[k]

    def normalize_windows(self, batch: WindowBatch) -> WindowBatch:
        if batch.features.shape[-1] != len(self.mins):
            raise ContractError(
                f"normalizer covers {len(self.mins)} loops, windows have {batch.features.shape[-1]}"
            )
        return WindowBatch(self.apply(batch.features), self.apply_target(batch.targets), batch.slots)

    def to_dict(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist(), "target_index": self.target_index}

    @classmethod
    def from_dict(cls, d) -> "Normalizer":
        return cls(np.asarray(d["mins"], dtype=float), np.asarray(d["maxs"], dtype=float), int(d["target_index"]))


def fit_normalizer(dataset: RoadDataset, training_range) -> Normalizer:
    """Per-loop min/max over the training slots only."""
    start, stop = _as_interval(training_range)
    if not 0 <= start < stop <= dataset.n_slots:
        raise ContractError(f"training range [{start}, {stop}) is empty or outside the series")
    block = dataset.matrix[start:stop]
    mins, maxs = block.min(axis=0), block.max(axis=0)
    for k, lid in enumerate(dataset.loop_ids):
        if not maxs[k] > mins[k]:
            raise FitError(f"loop {lid!r} is constant over the training range")
    return Normalizer(mins, maxs, dataset.target_index)


# ---------------------------------------------------------------------------
# calendar
# ---------------------------------------------------------------------------


def _day_offset(dataset: RoadDataset, d) -> int:
    if isinstance(d, (int, np.integer)):
        return int(d)
    if isinstance(d, str):
        d = date.fromisoformat(d)
    if isinstance(d, datetime):
        d = d.date()
    return (d - dataset.start.date()).days


def split_by_calendar(dataset: RoadDataset, ranges: dict) -> dict[str, tuple[int, int]]:
    """Map named day intervals ``[first, end)`` to slot intervals.

    Bounds may be day offsets from the dataset start, ``date`` objects or ISO
    date strings.
    """
    out = {}
    total_days = dataset.n_slots / SLOTS_PER_DAY
    for name, (lo, hi) in ranges.items():
        a, b = _day_offset(dataset, lo), _day_offset(dataset, hi)
        if b <= a:
            out[name] = (a * SLOTS_PER_DAY, a * SLOTS_PER_DAY)
            if not 0 <= a <= total_days:
                raise ContractError(f"interval {name!r} starts outside the dataset span")
            continue
        if a < 0 or b > total_days:
            raise ContractError(f"interval {name!r} = days [{a}, {b}) is outside the dataset span")
        out[name] = (a * SLOTS_PER_DAY, b * SLOTS_PER_DAY)
    spans = sorted((v, k) for k, v in out.items() if v[1] > v[0])
    for (x, xn), (y, yn) in zip(spans, spans[1:]):
        if y[0] < x[1]:
            raise ContractError(f"intervals {xn!r} and {yn!r} overlap")
    return out


def default_month_days(year_days: int) -> int:
    """31/365 of a (possibly scaled) year, but never less than one full week."""
    return min(year_days, max(7, round(31 * year_days / 365)))


def standard_ranges(year_days: int = 365, month_days: int | None = None) -> dict[str, tuple[int, int]]:
    """Day intervals used by the experiment: year 1, January of year 2 and the test spans."""
    if month_days is None:
        month_days = default_month_days(year_days)
    return {
        "year1": (0, year_days),
        "january_year2": (year_days, year_days + month_days),
        "february_onward_year2": (year_days + month_days, 2 * year_days),
    }


# ---------------------------------------------------------------------------
# synthetic roads
# ---------------------------------------------------------------------------


def default_profile(peak: float = 300.0) -> np.ndarray:
    """Weekday template with morning and evening rush hours, in vehicles per slot."""
    hours = np.arange(SLOTS_PER_DAY) * SLOT_MINUTES / 60.0

    def bump(center, width, height):
        return height * np.exp(-0.5 * ((hours - center) / width) ** 2)

    shape = 0.08 + bump(8.25, 1.2, 0.92) + bump(13.5, 2.5, 0.45) + bump(18.5, 1.6, 0.75)
    return peak * shape / shape.max()


@dataclass
class SpecialEvent:
    """Perturbation over days ``[start_day, end_day)``: ``v * scale + offset + profile[slot]``."""

    start_day: int
    end_day: int
    scale: float = 1.0
    offset: float = 0.0
    profile: np.ndarray | None = None


@dataclass
class SyntheticConfig:
    days: int
    seed: int = 0
    base_profile: np.ndarray | None = None
    amplitude: float = 1.0
    weekend_scale: float = 0.6
    special_events: list[SpecialEvent] = field(default_factory=list)
    drift: float = 0.0
    noise_std: float = 5.0
    propagation_lag: int = 1
    days_per_year: int = 365
    start: date = date(2017, 1, 1)
    road_name: str = "synthetic"

    def validate(self) -> None:
        if self.days < 8:
            raise SpecificationError("days must be >= 8")
        if self.noise_std < 0:
            raise SpecificationError("noise_std must be >= 0")
        if self.propagation_lag < 0:
            raise SpecificationError("propagation_lag must be >= 0")
        if self.weekend_scale < 0 or self.amplitude < 0:
            raise SpecificationError("weekend_scale and amplitude must be >= 0")
        if self.days_per_year < 1:
            raise SpecificationError("days_per_year must be >= 1")
        if self.base_profile is not None and np.shape(self.base_profile) != (SLOTS_PER_DAY,):
            raise SpecificationError(f"base_profile must have {SLOTS_PER_DAY} values")
        for ev in self.special_events:
            if ev.end_day < ev.start_day:
                raise SpecificationError("special event ends before it starts")
            if ev.profile is not None and np.shape(ev.profile) != (SLOTS_PER_DAY,):
                raise SpecificationError(f"event profile must have {SLOTS_PER_DAY} values")


def generate_synthetic(config: SyntheticConfig) -> RoadDataset:
    """Nine loops sharing one upstream-to-downstream traffic wave plus sensor noise.

    A single road-level series is built on an extended clock and loop k reads it
    ``k * propagation_lag`` slots late, so each downstream loop repeats what its
    upstream neighbour saw one lag earlier.
    """
    config.validate()
    n = config.days * SLOTS_PER_DAY
    lead = (N_LOOPS - 1) * config.propagation_lag
    u = np.arange(-lead, n)  # road clock in slots relative to the dataset start

    profile = default_profile() if config.base_profile is None else np.asarray(config.base_profile, float)
    profile = config.amplitude * profile
    day = np.floor_divide(u, SLOTS_PER_DAY)
    slot_of_day = u - day * SLOTS_PER_DAY
    weekday = np.array([(config.start + timedelta(days=int(d))).weekday() for d in range(day[0], day[-1] + 1)])
    is_weekend = weekday[day - day[0]] >= 5
    road = profile[slot_of_day] * np.where(is_weekend, config.weekend_scale, 1.0)

    for ev in config.special_events:
        hit = (day >= ev.start_day) & (day < ev.end_day)
        road[hit] = road[hit] * ev.scale + ev.offset
        if ev.profile is not None:
            road[hit] += np.asarray(ev.profile, float)[slot_of_day[hit]]

    if config.drift:
        road = road * (1.0 + config.drift * u / (config.days_per_year * SLOTS_PER_DAY))

    rng = np.random.default_rng(config.seed)
    loops = []
    for k in range(N_LOOPS):
        offset = lead - k * config.propagation_lag
        values = road[offset : offset + n].copy()
        if config.noise_std > 0:
            values += rng.normal(0.0, config.noise_std, size=n)
        np.maximum(values, 0.0, out=values)
        loops.append(
            FlowSeries(f"{config.road_name}-L{k}", datetime.combine(config.start, datetime.min.time()), values)
        )
    return RoadDataset(config.road_name, loops)


def dataset_to_text(dataset: RoadDataset) -> tuple[str, str]:
    """CSV and manifest text, handy for in-memory round trips."""
    buf, man = io.StringIO(), io.StringIO()
    write_flow_csv(dataset, buf, man)
    return buf.getvalue(), man.getvalue()
