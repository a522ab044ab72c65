"""Per-trial statistics and CSV serialization for experiment runs.

Slip frames are counted from the detector, not from actuation, so a frozen
arm and a reflex arm are scored by the same rule.
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .controller import Phase, detect_slip
from .scenario import CycleLog, TrialRecord

POUR_SUCCESS_FRACTION = 0.8

METRIC_FIELDS = (
    "n_slip",
    "fn_peak",
    "delta_e",
    "slip_fraction",
    "sy_peak",
    "success",
    "drop",
    "deformed",
)

COMMAND_LOG_COLUMNS = (
    "cycle",
    "timestamp_us",
    "phase",
    "effort",
    "position",
    "fired_channels",
    "sy_raw_L",
    "sy_raw_R",
    "fn_ema_max",
    "mean_cop_y",
    "cop_ref",
)


@dataclass(frozen=True)
class TrialMetrics:
    n_slip: int
    fn_peak: float
    delta_e: float
    slip_fraction: float
    sy_peak: float
    success: bool
    drop: bool
    deformed: bool


def slip_frames(cycles: Sequence[CycleLog], theta_s: float) -> list[bool]:
    """Flag cycles where either side's detector sees slip."""
    flags = []
    for c in cycles:
        slip_l, slip_r = detect_slip(c.sample, theta_s)
        flags.append(slip_l or slip_r)
    return flags


def count_slip_events(flags: Sequence[bool]) -> int:
    """Number of maximal runs of consecutive slip frames."""
    events = 0
    prev = False
    for flag in flags:
        if flag and not prev:
            events += 1
        prev = flag
    return events


def compute_trial_metrics(record: TrialRecord, theta_s: float) -> TrialMetrics:
    window = record.cycles[record.execution_start : record.execution_end + 1]
    flags = slip_frames(window, theta_s)
    outcome = record.outcome

    if record.task == "pour":
        poured_enough = (
            outcome.water_initial_kg > 0.0
            and outcome.poured_kg >= POUR_SUCCESS_FRACTION * outcome.water_initial_kg
        )
        success = poured_enough and not outcome.dropped and not outcome.deformed
    else:
        success = (
            not outcome.dropped
            and not outcome.deformed
            and outcome.final_phase is Phase.HOLDING
        )

    efforts = [c.effort for c in window]
    return TrialMetrics(
        n_slip=count_slip_events(flags),
        fn_peak=max((c.sample.fn_max_ema for c in window), default=0.0),
        delta_e=(max(efforts) - min(efforts)) if efforts else 0.0,
        slip_fraction=(sum(flags) / len(flags)) if flags else 0.0,
        sy_peak=max(
            (max(c.sample.left.sy_raw, c.sample.right.sy_raw) for c in window),
            default=0.0,
        ),
        success=success,
        drop=outcome.dropped,
        deformed=outcome.deformed,
    )


def aggregate(values: Iterable[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0.0 below two samples)."""
    vals = list(values)
    mean = statistics.fmean(vals)
    sd = statistics.stdev(vals) if len(vals) >= 2 else 0.0
    return mean, sd


def _format_cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_metrics_csv(path: Path, rows: Sequence[TrialMetrics]) -> None:
    """One row per trial in trial order; the header is fixed to the
    TrialMetrics field names, so trial identity comes from the file name."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for m in rows:
            writer.writerow([_format_cell(getattr(m, f.name)) for f in fields(TrialMetrics)])


def write_command_log(path: Path, cycles: Sequence[CycleLog]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMMAND_LOG_COLUMNS)
        for c in cycles:
            writer.writerow(
                [
                    str(c.cycle),
                    str(c.timestamp_us),
                    c.phase.value,
                    str(c.effort),
                    str(c.position),
                    "|".join(c.fired),
                    str(c.sample.left.sy_raw),
                    str(c.sample.right.sy_raw),
                    str(c.sample.fn_max_ema),
                    _format_cell(c.sample.mean_cop_y),
                    _format_cell(c.cop_ref),
                ]
            )


@dataclass(frozen=True)
class CommandRow:
    """One parsed command-log line; None where the original cell was empty."""

    cycle: int
    timestamp_us: int
    phase: str
    effort: float
    position: float
    fired: tuple[str, ...]
    sy_raw_l: float
    sy_raw_r: float
    fn_ema_max: float
    mean_cop_y: Optional[float]
    cop_ref: Optional[float]


def read_command_log(path: Path) -> list[CommandRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise ValueError(f"{path}: empty command log") from None
        if header != COMMAND_LOG_COLUMNS:
            raise ValueError(f"{path}: unexpected command log header {header!r}")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if len(raw) != len(COMMAND_LOG_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(COMMAND_LOG_COLUMNS)} cells")
            try:
                rows.append(
                    CommandRow(
                        cycle=int(raw[0]),
                        timestamp_us=int(raw[1]),
                        phase=raw[2],
                        effort=float(raw[3]),
                        position=float(raw[4]),
                        fired=tuple(p for p in raw[5].split("|") if p),
                        sy_raw_l=float(raw[6]),
                        sy_raw_r=float(raw[7]),
                        fn_ema_max=float(raw[8]),
                        mean_cop_y=float(raw[9]) if raw[9] else None,
                        cop_ref=float(raw[10]) if raw[10] else None,
                    )
                )
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return rows
