"""Week-windowed R², offline/online test passes and the three-scenario study."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from . import lifecycle, nn_core
from .data import (
    SLOT_MINUTES,
    SLOTS_PER_DAY,
    SLOTS_PER_WEEK,
    Normalizer,
    RoadDataset,
    WindowBatch,
    build_windows,
    default_month_days,
    fit_normalizer,
    split_by_calendar,
    standard_ranges,
)
from .errors import ContractError
from .lifecycle import OnlineConfig, TrainingConfig
from .nn_core import NetworkModel, NetworkSpec

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("slot", "timestamp", "observed", "predicted", "r2_window")
SUMMARY_COLUMNS = ("scenario", "setting", "donor", "deployment_slot", "mean_r2", "min_r2", "final_r2")
_R2_CHUNK = 4096


@dataclass
class PredictionTrace:
    slots: np.ndarray
    observed: np.ndarray
    predicted: np.ndarray
    start: datetime | None = None  # timestamp of slot 0, for export

    def __post_init__(self):
        self.slots = np.asarray(self.slots, dtype=np.int64)
        self.observed = np.asarray(self.observed, dtype=float)
        self.predicted = np.asarray(self.predicted, dtype=float)
        if not (len(self.slots) == len(self.observed) == len(self.predicted)):
            raise ContractError("trace columns have different lengths")

    def __len__(self) -> int:
        return len(self.slots)

    def since(self, slot: int) -> "PredictionTrace":
        keep = self.slots >= slot
        return PredictionTrace(self.slots[keep], self.observed[keep], self.predicted[keep], self.start)


@dataclass
class R2Series:
    """R² of each full window; ``values[j]`` covers trace positions j .. j+window-1.

    Windows whose observed values are constant are undefined and hold NaN.
    """

    values: np.ndarray
    slots: np.ndarray  # slot index of each window's last position
    window: int = SLOTS_PER_WEEK

    def mean(self) -> float:
        return _nan_stat(np.nanmean, self.values)

    def min(self) -> float:
        return _nan_stat(np.nanmin, self.values)

    def final(self) -> float:
        return float(self.values[-1]) if len(self.values) else math.nan


def _nan_stat(fn, values) -> float:
    if len(values) == 0 or np.all(np.isnan(values)):
        return math.nan
    return float(fn(values))


def r2_windowed(trace: PredictionTrace, window: int = SLOTS_PER_WEEK) -> R2Series:
    """``1 - SS_res / SS_tot`` over every run of ``window`` consecutive trace positions.

    Sums are taken directly over each window (in chunks), never from running
    totals, so values do not drift over long traces.
    """
    n = len(trace)
    if window < 1:
        raise ContractError("window must be >= 1")
    if n < window:
        raise ContractError(f"trace of {n} slots is shorter than the {window}-slot window")
    from numpy.lib.stride_tricks import sliding_window_view

    o_win = sliding_window_view(trace.observed, window)
    p_win = sliding_window_view(trace.predicted, window)
    out = np.empty(n - window + 1)
    for a in range(0, len(out), _R2_CHUNK):
        o = o_win[a : a + _R2_CHUNK]
        p = p_win[a : a + _R2_CHUNK]
        ss_res = np.sum((o - p) ** 2, axis=1)
        ss_tot = np.sum((o - o.mean(axis=1, keepdims=True)) ** 2, axis=1)
        constant = np.ptp(o, axis=1) == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            r2 = 1.0 - ss_res / ss_tot
        r2[constant] = np.nan
        out[a : a + len(r2)] = r2
    return R2Series(out, trace.slots[window - 1 :].copy(), window)


# ---------------------------------------------------------------------------
# test passes
# ---------------------------------------------------------------------------


def _check_normalizer(normalizer: Normalizer, windows: WindowBatch):
    if normalizer is None or len(normalizer.mins) != windows.features.shape[-1]:
        raise ContractError("normalizer does not match the test windows")


def run_offline(model: NetworkModel, windows: WindowBatch, normalizer: Normalizer, start=None) -> PredictionTrace:
    """Frozen-weight pass over raw windows with the LSTM state carried slot to slot.

    Works on a copy; the caller's model is not touched.
    """
    _check_normalizer(normalizer, windows)
    work = lifecycle.transfer(model)
    X = normalizer.apply(windows.features)
    preds = np.empty(len(windows))
    for i in range(len(windows)):
        preds[i], _ = nn_core.forward(work, X[i], carry_state=True)
    return PredictionTrace(windows.slots, windows.targets, normalizer.invert_target(preds), start)


def run_online(model: NetworkModel, windows: WindowBatch, normalizer: Normalizer, config: OnlineConfig, start=None):
    """Prequential pass: predict each slot, then take the online update(s) on it.

    Returns ``(trace, updated_model)``; the input model is left unchanged.
    """
    _check_normalizer(normalizer, windows)
    config.validate()
    work = lifecycle.transfer(model)
    X = normalizer.apply(windows.features)
    y = normalizer.apply_target(windows.targets)
    preds = np.empty(len(windows))
    for i in range(len(windows)):
        preds[i], _ = lifecycle.online_step(work, X[i], float(y[i]), config)
    return PredictionTrace(windows.slots, windows.targets, normalizer.invert_target(preds), start), work


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


@dataclass
class ScenarioConfig:
    network: NetworkSpec = field(default_factory=NetworkSpec)
    year_days: int = 365
    month_days: int | None = None
    r2_window: int = SLOTS_PER_WEEK
    batch: TrainingConfig = field(default_factory=TrainingConfig)
    retrain: TrainingConfig = field(default_factory=lambda: lifecycle.retrain_defaults())
    scratch: TrainingConfig = field(default_factory=lambda: lifecycle.retrain_defaults())
    online: OnlineConfig = field(default_factory=OnlineConfig)

    @property
    def months(self) -> int:
        return self.month_days if self.month_days is not None else default_month_days(self.year_days)


@dataclass
class ScenarioReport:
    scenario: str  # PS1 | PS2 | PS3
    setting: str  # offline | online
    donor: str  # road whose history built the starting weights; "none" for a fresh model
    strategy: str  # transfer | retrain | scratch | target
    trace: PredictionTrace
    r2: R2Series | None
    deployment_slot: int
    model: NetworkModel | None = None  # weights as deployed, before any online update
    normalizer: Normalizer | None = None

    @property
    def name(self) -> str:
        return f"{self.scenario}_{self.setting}_{self.donor}"

    def summary(self) -> dict:
        r2 = self.r2
        return {
            "scenario": self.scenario,
            "setting": self.setting,
            "donor": self.donor,
            "deployment_slot": self.deployment_slot,
            "mean_r2": r2.mean() if r2 is not None else math.nan,
            "min_r2": r2.min() if r2 is not None else math.nan,
            "final_r2": r2.final() if r2 is not None else math.nan,
        }

    def r2_since(self, slot: int) -> R2Series:
        """R² recomputed on the part of the trace at or after ``slot``."""
        return r2_windowed(self.trace.since(slot), self.r2.window if self.r2 else SLOTS_PER_WEEK)


def _check_calendar(donors, target, year_days):
    need = 2 * year_days * SLOTS_PER_DAY
    names = [d.road_name for d in donors]
    if len(set(names)) != len(names) or target.road_name in names:
        raise ContractError("donor and target road names must be distinct")
    for ds in [*donors, target]:
        if ds.start != target.start or ds.n_slots != target.n_slots:
            raise ContractError(f"road {ds.road_name!r} does not share the target's calendar")
        if ds.n_slots < need:
            raise ContractError(f"road {ds.road_name!r} has {ds.n_slots} slots; two years need {need}")


def run_scenarios(donors: list[RoadDataset], target: RoadDataset, config: ScenarioConfig | None = None, progress=None):
    """Train every strategy of the three data-availability scenarios and test each offline and online.

    PS1: each donor trained on its year 1, transferred, tested from the start of year 2.
    PS2: each transferred donor retrained on the target's first month of year 2,
         plus a fresh model trained on that month only; tested from the following month.
    PS3: a model trained on the target's own year 1, tested from the start of year 2.
    """
    config = config or ScenarioConfig()
    Y = config.year_days
    _check_calendar(donors, target, Y)
    say = progress or (lambda msg: log.info(msg))
    named = split_by_calendar(target, standard_ranges(Y, config.months))
    year1 = named["year1"]
    january = named["january_year2"]
    year2 = (january[0], Y * 2 * SLOTS_PER_DAY)
    release = year2[0]
    later = january[1]

    lags = config.network.input_lags
    train_year1 = (max(year1[0], lags), year1[1])
    test_all = build_windows(target, year2, lags)
    test_late = build_windows(target, (later, year2[1]), lags)
    jan_norm = fit_normalizer(target, january)
    jan_windows = jan_norm.normalize_windows(build_windows(target, january, lags))

    def fit_year1(ds: RoadDataset):
        norm = fit_normalizer(ds, year1)
        windows = norm.normalize_windows(build_windows(ds, train_year1, lags))
        model, _ = lifecycle.fit_new(config.network, windows, config.batch)
        return model, norm

    strategies = []  # (scenario, donor, strategy, model, normalizer, test windows, deployment slot)
    donor_models = []
    for ds in donors:
        say(f"training donor {ds.road_name} on year 1")
        model, norm = fit_year1(ds)
        donor_models.append((ds.road_name, model, norm))
        strategies.append(("PS1", ds.road_name, "transfer", lifecycle.transfer(model), norm, test_all, release))
    for name, model, _ in donor_models:
        say(f"retraining transferred {name} on target month")
        tuned, _ = lifecycle.retrain(lifecycle.transfer(model), jan_windows, config.retrain)
        strategies.append(("PS2", name, "retrain", tuned, jan_norm, test_late, later))
    say("training fresh model on target month")
    scratch, _ = lifecycle.fit_new(config.network, jan_windows, config.scratch)
    strategies.append(("PS2", "none", "scratch", scratch, jan_norm, test_late, later))
    say(f"training target {target.road_name} on year 1")
    own, own_norm = fit_year1(target)
    strategies.append(("PS3", target.road_name, "target", own, own_norm, test_all, release))

    reports = []
    for scenario, donor, strategy, model, norm, windows, slot in strategies:
        for setting in ("offline", "online"):
            say(f"testing {scenario} {donor} {setting}")
            if setting == "offline":
                trace = run_offline(model, windows, norm, target.start)
            else:
                trace, _ = run_online(model, windows, norm, config.online, target.start)
            r2 = r2_windowed(trace, config.r2_window) if len(trace) >= config.r2_window else None
            reports.append(ScenarioReport(scenario, setting, donor, strategy, trace, r2, slot, model, norm))
    return reports


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    return repr(float(x))


def write_trace_csv(report_or_trace, sink, window: int = SLOTS_PER_WEEK) -> None:
    if isinstance(report_or_trace, ScenarioReport):
        trace, r2 = report_or_trace.trace, report_or_trace.r2
    else:
        trace = report_or_trace
        r2 = r2_windowed(trace, window) if len(trace) >= window else None
    r2_cells = [""] * len(trace)
    if r2 is not None:
        for j, v in enumerate(r2.values):
            r2_cells[j + r2.window - 1] = _fmt(v)
    step = timedelta(minutes=SLOT_MINUTES)
    with open(sink, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for j in range(len(trace)):
            slot = int(trace.slots[j])
            ts = (trace.start + slot * step).isoformat() if trace.start is not None else ""
            w.writerow((slot, ts, repr(float(trace.observed[j])), repr(float(trace.predicted[j])), r2_cells[j]))


def read_trace_csv(source) -> tuple[PredictionTrace, np.ndarray]:
    """Load an exported trace; returns the trace and the stored r2 column (NaN where blank/NA)."""
    slots, obs, pred, r2 = [], [], [], []
    start = None
    with open(source, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRACE_COLUMNS:
            raise ContractError(f"unexpected trace header {header}")
        for row in reader:
            slots.append(int(row[0]))
            if start is None and row[1]:
                start = datetime.fromisoformat(row[1]) - int(row[0]) * timedelta(minutes=SLOT_MINUTES)
            obs.append(float(row[2]))
            pred.append(float(row[3]))
            r2.append(float(row[4]) if row[4] not in ("", "NA") else math.nan)
    return PredictionTrace(slots, obs, pred, start), np.asarray(r2)


def write_summary_csv(reports, sink) -> None:
    with open(sink, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for rep in reports:
            s = rep.summary()
            w.writerow(
                (s["scenario"], s["setting"], s["donor"], s["deployment_slot"],
                 _fmt(s["mean_r2"]), _fmt(s["min_r2"]), _fmt(s["final_r2"]))
            )


def export_report(reports, out_dir) -> list[Path]:
    """One ``<scenario>_<setting>_<donor>.csv`` per report plus ``summary.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    names = [r.name for r in reports]
    if len(set(names)) != len(names):
        raise ContractError("report names collide")
    for rep in reports:
        path = out / f"{rep.name}.csv"
        write_trace_csv(rep, path)
        written.append(path)
    summary = out / "summary.csv"
    write_summary_csv(reports, summary)
    written.append(summary)
    return written
