"""Threshold calibration from recorded proxy statistics.

A scripted static-hold-and-unload session yields labeled segments:
static holding (noise statistics), liftoffs and pushes (slip events),
and press-release events (load-decrease CoP dips plus force spikes).
Every controller threshold is a percentile or extremum of those
segments; nothing is hand-tuned except the operator-supplied grasp
stop force.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from .frames import Segment, SegmentLabel, Side, SLIP_EVENT_LABELS
from .pipeline import (
    DEFAULT_ALPHA,
    DEFAULT_GAMMA,
    DEFAULT_N_MIN,
    ProxyExtractor,
    ProxySample,
    compute_diff,
)

PROFILE_VERSION = 1

#: Every 32nd diff pixel is kept for the noise-floor pool. The noise is
#: i.i.d. per pixel, so the strided subsample leaves the percentile
#: estimate unchanged while keeping memory finite over long recordings.
DIFF_PIXEL_STRIDE = 32

#: Samples averaged at a release window's start to form the CoP baseline.
RELEASE_BASELINE_SAMPLES = 5

#: Minimum pooled StaticHold frames for stable high percentiles.
MIN_STATIC_SAMPLES = 1000


class CalibrationError(ValueError):
    pass


class InsufficientDataError(CalibrationError):
    """A derivation rule has too little labeled data to run."""


class CalibrationInfeasibleError(CalibrationError):
    """The recorded statistics admit no valid threshold."""


def percentile(samples: Sequence[float] | np.ndarray, p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample.

    The product is rounded before the ceiling so that exact grid points
    (for example p=29, n=100) are not pushed up a rank by float error.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        raise InsufficientDataError("percentile of an empty sample set")
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"percentile p={p} outside [0, 100]")
    rank = math.ceil(round(p / 100.0 * arr.size, 9))
    rank = min(max(rank, 1), arr.size)
    return float(np.sort(arr)[rank - 1])


def derive_noise_floor(diff_pixels: Sequence[float] | np.ndarray) -> float:
    return percentile(diff_pixels, 98.0)


def derive_quiet_threshold(sy_noise: Sequence[float] | np.ndarray) -> float:
    return percentile(sy_noise, 95.0)


def derive_force_limit(fn_samples: Sequence[float] | np.ndarray) -> float:
    return percentile(fn_samples, 99.9)


def derive_slip_threshold(
    sy_noise: Sequence[float] | np.ndarray,
    slip_peaks: Sequence[float] | np.ndarray,
) -> float:
    """Slip threshold: weakest observed slip peak, floored to 0.01.

    The value must clear the no-motion ceiling P99.9 of the static shear
    signal, otherwise slip and noise are not separable on this material
    and calibration fails loudly.
    """
    peaks = np.asarray(slip_peaks, dtype=np.float64)
    if peaks.size == 0:
        raise InsufficientDataError("no labeled slip events")
    min_peak = float(peaks.min())
    theta_s = math.floor(round(min_peak * 100.0, 6)) / 100.0
    noise_ceiling = percentile(sy_noise, 99.9)
    if theta_s < noise_ceiling:
        raise CalibrationInfeasibleError(
            f"slip threshold interval is empty: noise ceiling P99.9 = "
            f"{noise_ceiling:.6g} exceeds the rounded minimum slip peak "
            f"{theta_s:.6g} (raw minimum {min_peak:.6g})"
        )
    return theta_s


def _round_toward_zero_half(x: float) -> float:
    if x < 0:
        return math.ceil(round(x * 2.0, 6)) / 2.0
    return math.floor(round(x * 2.0, 6)) / 2.0


def derive_cop_threshold(release_events: Sequence[float] | np.ndarray) -> float:
    """CoP-decrease threshold from labeled load-decrease extrema.

    Takes the deepest (most negative) event extremum and rounds it
    toward zero on a 0.5 px grid, e.g. an extremum of -3.6 px yields
    -3.5. Requires at least three events.
    """
    events = np.asarray(release_events, dtype=np.float64)
    if events.size < 3:
        raise InsufficientDataError(
            f"CoP threshold needs >= 3 labeled load-decrease events, got {events.size}"
        )
    theta_c = _round_toward_zero_half(float(events.min()))
    if theta_c >= 0.0:
        raise CalibrationInfeasibleError(
            f"CoP threshold must be negative, derived {theta_c:.6g}; "
            "load-decrease events never moved the CoP upward"
        )
    return theta_c


@dataclass(frozen=True)
class RecordingSegment:
    label: SegmentLabel
    samples: list[ProxySample]
    diff_pixel_samples: np.ndarray = field(default_factory=lambda: np.empty(0, np.float32))

    def __post_init__(self) -> None:
        stamps = [s.timestamp_us for s in self.samples]
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise ValueError(f"{self.label.value} segment samples are not time-ordered")


@dataclass(frozen=True)
class CalibrationRecording:
    segments: list[RecordingSegment]

    def by_label(self, label: SegmentLabel) -> list[RecordingSegment]:
        return [seg for seg in self.segments if seg.label == label]


@dataclass(frozen=True)
class CalibrationProfile:
    tau: float
    theta_s: float
    theta_q: float
    theta_c: float
    f_lim: float
    f_stop: float
    gamma: float
    alpha: float
    material_label: str
    provenance: dict[str, dict]
    version: int = PROFILE_VERSION
    created_at: int = 0

    def to_json(self) -> str:
        doc = {
            "tau": self.tau,
            "theta_s": self.theta_s,
            "theta_q": self.theta_q,
            "theta_c": self.theta_c,
            "f_lim": self.f_lim,
            "f_stop": self.f_stop,
            "gamma": self.gamma,
            "alpha": self.alpha,
            "material_label": self.material_label,
            "provenance": self.provenance,
            "version": self.version,
            "created_at": self.created_at,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "CalibrationProfile":
        doc = json.loads(text)
        return cls(**{k: doc[k] for k in (
            "tau", "theta_s", "theta_q", "theta_c", "f_lim", "f_stop",
            "gamma", "alpha", "material_label", "provenance", "version",
            "created_at",
        )})

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationProfile":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


FrameSource = Callable[[], Iterator[tuple[int, np.ndarray, np.ndarray]]]


def build_recording(
    frame_source: FrameSource,
    segments: Sequence[Segment],
    *,
    gamma: float = DEFAULT_GAMMA,
    alpha: float = DEFAULT_ALPHA,
    n_min: int = DEFAULT_N_MIN,
    diff_stride: int = DIFF_PIXEL_STRIDE,
) -> CalibrationRecording:
    """Two passes over a frame stream produce a labeled recording.

    Pass one collects static-window difference pixels against the
    stream's opening frames and derives the noise floor. Pass two runs
    the full proxy pipeline with that floor and buckets the resulting
    samples into their labeled segments. frame_source is a factory so
    the stream can be replayed (from disk or regenerated from a seeded
    simulation) without buffering raw frames.
    """
    static_windows = [s for s in segments if s.label == SegmentLabel.STATIC_HOLD]
    if not static_windows:
        raise InsufficientDataError("recording has no StaticHold segment")

    diff_pools: dict[int, list[np.ndarray]] = {id(s): [] for s in static_windows}
    refs: dict[Side, np.ndarray] = {}
    for timestamp_us, left, right in frame_source():
        if not refs:
            refs[Side.LEFT] = left.copy()
            refs[Side.RIGHT] = right.copy()
        for seg in static_windows:
            if seg.contains(timestamp_us):
                for side, px in ((Side.LEFT, left), (Side.RIGHT, right)):
                    diff = compute_diff(px, refs[side])
                    diff_pools[id(seg)].append(diff.ravel()[::diff_stride].copy())
                break
    pooled = [
        np.concatenate(diff_pools[id(s)]) if diff_pools[id(s)] else np.empty(0, np.float32)
        for s in static_windows
    ]
    if not any(p.size for p in pooled):
        raise InsufficientDataError("StaticHold windows contain no frames")
    tau = derive_noise_floor(np.concatenate([p for p in pooled if p.size]))

    extractor = ProxyExtractor(tau, gamma=gamma, alpha=alpha, n_min=n_min)
    buckets: dict[int, list[ProxySample]] = {id(s): [] for s in segments}
    for timestamp_us, left, right in frame_source():
        sample = extractor.process(timestamp_us, left, right)
        for seg in segments:
            if seg.contains(timestamp_us):
                buckets[id(seg)].append(sample)
                break

    out: list[RecordingSegment] = []
    static_iter = iter(pooled)
    for seg in segments:
        diffs = next(static_iter) if seg.label == SegmentLabel.STATIC_HOLD else np.empty(0, np.float32)
        out.append(RecordingSegment(label=seg.label, samples=buckets[id(seg)], diff_pixel_samples=diffs))
    return CalibrationRecording(segments=out)


def _static_sy_pool(recording: CalibrationRecording) -> np.ndarray:
    values = [
        s.side(side).sy_raw
        for seg in recording.by_label(SegmentLabel.STATIC_HOLD)
        for s in seg.samples
        for side in (Side.LEFT, Side.RIGHT)
    ]
    return np.asarray(values, dtype=np.float64)


def _fn_pool(recording: CalibrationRecording) -> np.ndarray:
    values = [
        s.side(side).fn_raw
        for label in (SegmentLabel.STATIC_HOLD, SegmentLabel.PRESS_RELEASE)
        for seg in recording.by_label(label)
        for s in seg.samples
        for side in (Side.LEFT, Side.RIGHT)
    ]
    return np.asarray(values, dtype=np.float64)


def slip_event_peaks(recording: CalibrationRecording) -> np.ndarray:
    """Per labeled slip event, the maximum raw shear across both sides."""
    peaks = []
    for seg in recording.segments:
        if seg.label not in SLIP_EVENT_LABELS:
            continue
        if not seg.samples:
            raise InsufficientDataError(f"empty {seg.label.value} window in recording")
        peaks.append(max(max(s.left.sy_raw, s.right.sy_raw) for s in seg.samples))
    return np.asarray(peaks, dtype=np.float64)


def release_event_extrema(recording: CalibrationRecording) -> np.ndarray:
    """Per press-release window, the deepest mean-CoP dip below its baseline.

    The window is expected to open just before the unload, so its first
    few samples sit at the loaded level and serve as the baseline.
    """
    extrema = []
    for seg in recording.by_label(SegmentLabel.PRESS_RELEASE):
        cops = [s.mean_cop_y for s in seg.samples if s.mean_cop_y is not None]
        if len(cops) <= RELEASE_BASELINE_SAMPLES:
            raise InsufficientDataError(
                f"press-release window has only {len(cops)} dual-contact samples"
            )
        baseline = float(np.mean(cops[:RELEASE_BASELINE_SAMPLES]))
        extrema.append(min(cops) - baseline)
    return np.asarray(extrema, dtype=np.float64)


def run_calibration(
    recording: CalibrationRecording,
    *,
    f_stop: float,
    gamma: float = DEFAULT_GAMMA,
    alpha: float = DEFAULT_ALPHA,
    material_label: str = "unknown",
) -> CalibrationProfile:
    if not recording.by_label(SegmentLabel.STATIC_HOLD):
        raise InsufficientDataError("recording has no StaticHold segment")
    if not recording.by_label(SegmentLabel.LIFTOFF):
        raise InsufficientDataError("recording has no Liftoff segment")
    static_count = sum(
        len(seg.samples) for seg in recording.by_label(SegmentLabel.STATIC_HOLD)
    )
    if static_count < MIN_STATIC_SAMPLES:
        raise InsufficientDataError(
            f"StaticHold pool has {static_count} samples, "
            f"needs at least {MIN_STATIC_SAMPLES} for stable percentiles"
        )

    diff_pixels = np.concatenate(
        [seg.diff_pixel_samples for seg in recording.by_label(SegmentLabel.STATIC_HOLD)]
    )
    sy_noise = _static_sy_pool(recording)
    fn_samples = _fn_pool(recording)
    peaks = slip_event_peaks(recording)
    extrema = release_event_extrema(recording)

    tau = derive_noise_floor(diff_pixels)
    theta_q = derive_quiet_threshold(sy_noise)
    f_lim = derive_force_limit(fn_samples)
    theta_s = derive_slip_threshold(sy_noise, peaks)
    theta_c = derive_cop_threshold(extrema)

    last_ts = max(
        (seg.samples[-1].timestamp_us for seg in recording.segments if seg.samples),
        default=0,
    )
    provenance = {
        "tau": {"percentile": 98.0, "sample_count": int(diff_pixels.size), "source": "static_hold_diff_pixels"},
        "theta_q": {"percentile": 95.0, "sample_count": int(sy_noise.size), "source": "static_hold_sy"},
        "f_lim": {"percentile": 99.9, "sample_count": int(fn_samples.size), "source": "static_hold+press_release_fn"},
        "theta_s": {"percentile": 99.9, "sample_count": int(peaks.size), "source": "slip_event_peaks"},
        "theta_c": {"percentile": None, "sample_count": int(extrema.size), "source": "release_event_extrema"},
        "f_stop": {"percentile": None, "sample_count": 0, "source": "manual"},
    }
    return CalibrationProfile(
        tau=tau,
        theta_s=theta_s,
        theta_q=theta_q,
        theta_c=theta_c,
        f_lim=f_lim,
        f_stop=f_stop,
        gamma=gamma,
        alpha=alpha,
        material_label=material_label,
        provenance=provenance,
        version=PROFILE_VERSION,
        # Derived from the recording clock, not wall time, so identical
        # recordings always serialize to identical bytes.
        created_at=last_ts,
    )
