"""Closed-loop trials: scripted plant events driving the reflex controller.

A trial couples three pieces cycle by cycle: the scripted plant evolves
under the previous gripper command, both sensors render, the proxy
extractor turns the frames into a sample, and the controller (unless
frozen) issues the next command. Scripts for the standard experiments
live here too, as does the fixed-rig frame generator used to produce
calibration recordings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .calibration import CalibrationProfile
from .controller import (
    OPEN_POSITION,
    ControllerConfig,
    GripperCommand,
    Phase,
    begin_grasp,
    initial_state,
    step,
)
from .frames import Segment, SegmentLabel, Side, StreamWriter
from .pipeline import FlowParams, ProxyExtractor, ProxySample
from .plant import (
    DT,
    CycleInputs,
    ManualPush,
    PlantParams,
    PourVolume,
    PressRelease,
    ScenarioScript,
    SupportRemove,
    TiltTrajectory,
    initial_plant_state,
    plant_step,
    render_tactile,
    resolve_script,
)


def cycle_timestamp_us(cycle: int) -> int:
    return cycle * 1_000_000 // 12


@dataclass(frozen=True)
class CycleLog:
    cycle: int
    timestamp_us: int
    phase: Phase
    effort: float
    position: float
    fired: tuple[str, ...]
    sample: ProxySample
    cop_ref: Optional[float]
    tilt_deg: float
    water_kg: float
    pose_drift_deg: float
    slide_velocity: float


@dataclass(frozen=True)
class TrialOutcome:
    dropped: bool
    deformed: bool
    water_initial_kg: float
    water_final_kg: float
    final_phase: Phase

    @property
    def poured_kg(self) -> float:
        return self.water_initial_kg - self.water_final_kg


@dataclass(frozen=True)
class TrialRecord:
    task: str  # "hold" | "pour"
    cycles: tuple[CycleLog, ...]
    outcome: TrialOutcome
    execution_start: int
    execution_end: int
    seed: int


def run_scenario(
    script: ScenarioScript,
    params: PlantParams,
    config: ControllerConfig,
    *,
    task: str = "hold",
    frozen_after_s: Optional[float] = None,
    flow_params: Optional[FlowParams] = None,
    stream_writer: Optional[StreamWriter] = None,
) -> TrialRecord:
    """Run one trial. ``frozen_after_s`` locks the command at that time,
    turning the reflex arm into the frozen-grasp baseline."""
    profile = config.profile
    extractor = ProxyExtractor(
        tau=profile.tau,
        gamma=profile.gamma,
        alpha=profile.alpha,
        flow_params=flow_params or FlowParams(),
    )
    plant = initial_plant_state(params, water=script.initial_water)
    state = begin_grasp(initial_state(config))
    command = GripperCommand(
        position=OPEN_POSITION, effort=config.e_init, fired=frozenset(), phase=Phase.CLOSING
    )
    frozen_cmd: Optional[GripperCommand] = None

    logs: list[CycleLog] = []
    n = script.n_cycles
    for cycle in range(n):
        ts = cycle_timestamp_us(cycle)
        inputs = resolve_script(script, params, cycle)
        plant = plant_step(plant, command, inputs, params)
        left = render_tactile(plant, command, Side.LEFT, cycle, params)
        right = render_tactile(plant, command, Side.RIGHT, cycle, params)
        if stream_writer is not None:
            stream_writer.append(ts, (left, right))
        sample = extractor.process(ts, left, right, idle=state.phase is Phase.IDLE)

        if frozen_after_s is not None and cycle * DT >= frozen_after_s:
            if frozen_cmd is None:
                frozen_cmd = GripperCommand(
                    position=command.position,
                    effort=command.effort,
                    fired=frozenset(),
                    phase=command.phase,
                )
            command = frozen_cmd
        else:
            command, state = step(state, sample, config)

        logs.append(
            CycleLog(
                cycle=cycle,
                timestamp_us=ts,
                phase=command.phase,
                effort=command.effort,
                position=command.position,
                fired=tuple(ch.value for ch in sorted(command.fired, key=_channel_order)),
                sample=sample,
                cop_ref=state.cop_ref if frozen_cmd is None else None,
                tilt_deg=math.degrees(plant.tilt),
                water_kg=plant.water_remaining,
                pose_drift_deg=math.degrees(plant.pose_drift),
                slide_velocity=plant.slide_velocity,
            )
        )

    outcome = TrialOutcome(
        dropped=plant.dropped,
        deformed=plant.deformed,
        water_initial_kg=script.initial_water or 0.0,
        water_final_kg=plant.water_remaining,
        final_phase=logs[-1].phase if logs else Phase.IDLE,
    )
    start, end = _execution_window(script, logs, task)
    return TrialRecord(
        task=task,
        cycles=tuple(logs),
        outcome=outcome,
        execution_start=start,
        execution_end=end,
        seed=params.rng_seed,
    )


def _channel_order(channel) -> int:
    return ["Slip", "Release", "Protect"].index(channel.value)


def _execution_window(script: ScenarioScript, logs: list[CycleLog], task: str) -> tuple[int, int]:
    if not logs:
        return 0, 0
    if task == "pour":
        tilt = script.tilt_trajectory
        if tilt is None:
            raise ValueError("pour task requires a tilt trajectory")
        return int(round(tilt.at_s / DT)), min(int(round(tilt.end_s / DT)), logs[-1].cycle)
    for log in logs:
        if log.phase is Phase.HOLDING:
            return log.cycle, logs[-1].cycle
    return logs[-1].cycle, logs[-1].cycle


# ---------------------------------------------------------------------------
# experiment scripts


def liftoff_script() -> ScenarioScript:
    """Support removal on a lightly filled cup; the cup stays airborne."""
    return ScenarioScript(
        events=(PourVolume("low"), SupportRemove(at_s=3.0)),
        duration_s=8.0,
    )


def hold_script(duration_s: float = 45.0) -> ScenarioScript:
    """Quiet supported grasp, used for stationarity and asymmetry checks."""
    return ScenarioScript(events=(), duration_s=duration_s)


def ablation_script() -> ScenarioScript:
    """The stress sequence behind the channel-ablation comparison.

    Liftoff, then a ramped tug with a squeeze component that forces the
    slip and protection channels into contention. The tug unload and the
    set-down coincide at 7 s, producing the one genuine release cue.
    A benign press and a moderate tug follow. Configurations without the
    release channel are left parked above the empty cup's crush limit.
    """
    return ScenarioScript(
        events=(
            SupportRemove(at_s=3.0, restore_at_s=7.0),
            ManualPush(at_s=4.0, duration_s=3.0, magnitude=1.4, normal_boost=0.25, ramp=True),
            PressRelease(at_s=11.5, press_s=0.3, hold_s=1.0, release_s=0.3, load=0.15),
            ManualPush(at_s=13.5, duration_s=1.2, magnitude=0.65),
        ),
        duration_s=19.0,
    )


def pour_script(level: str) -> ScenarioScript:
    return ScenarioScript(
        events=(
            PourVolume(level),
            SupportRemove(at_s=2.2),
            TiltTrajectory(at_s=4.0, rise_s=4.0, hold_s=3.0, fall_s=4.0, peak_deg=110.0),
        ),
        duration_s=17.5,
    )


# ---------------------------------------------------------------------------
# calibration session

GRASP_CYCLE = 12
GRIP_POSITION = 2.5
GRIP_EFFORT = 1200.0


@dataclass(frozen=True)
class CalibrationSession:
    script: ScenarioScript
    segments: tuple[Segment, ...]

    @property
    def n_cycles(self) -> int:
        return self.script.n_cycles


def _seg(label: SegmentLabel, start_s: float, end_s: float) -> Segment:
    return Segment(
        label=label,
        start_us=cycle_timestamp_us(int(round(start_s / DT))),
        end_us=cycle_timestamp_us(int(round(end_s / DT))),
    )


def calibration_session(params: PlantParams, static_frames: int = 3200) -> CalibrationSession:
    """Scripted rig protocol: a long static hold, six liftoffs, fourteen
    graded tugs, three vertical press-releases, three squeezes.

    Tug magnitudes are the rig grip's friction capacity plus a graded
    excess, so the slip-event family stays comparable across materials.
    """
    if static_frames < 120:
        raise ValueError("static hold needs at least 120 frames")
    capacity = params.friction_mu * params.effort_to_normal * GRIP_EFFORT
    events: list = [PourVolume("low")]
    segments: list[Segment] = []

    static_start = 2.0
    static_end = static_start + static_frames * DT
    segments.append(_seg(SegmentLabel.STATIC_HOLD, static_start, static_end))

    cursor = static_end + 1.0
    for _ in range(6):
        events.append(SupportRemove(at_s=cursor, restore_at_s=cursor + 0.7))
        segments.append(_seg(SegmentLabel.LIFTOFF, cursor - 0.1, cursor + 1.0))
        cursor += 2.0
    cursor += 0.5

    n_push = 14
    for i in range(n_push):
        excess = 0.07 + i * (0.50 - 0.07) / (n_push - 1)
        events.append(ManualPush(at_s=cursor, duration_s=0.5, magnitude=capacity + excess))
        segments.append(_seg(SegmentLabel.PUSH, cursor - 0.1, cursor + 0.7))
        cursor += 0.9
    cursor += 0.5

    for i in range(3):
        press = PressRelease(
            at_s=cursor, press_s=0.4, hold_s=1.0, release_s=0.25, load=0.251 + 0.002 * i
        )
        events.append(press)
        unload = cursor + press.press_s + press.hold_s
        # window straddles the unload so the first samples give a loaded baseline
        segments.append(_seg(SegmentLabel.PRESS_RELEASE, unload - 0.45, unload + 1.25))
        cursor += 2.6

    for i in range(3):
        events.append(
            PressRelease(
                at_s=cursor, press_s=0.4, hold_s=0.6, release_s=0.3,
                load=0.0, normal_boost=params.calib_squeeze_boost + 0.01 * i,
            )
        )
        segments.append(_seg(SegmentLabel.PRESS_RELEASE, cursor - 0.1, cursor + 1.9))
        cursor += 2.2

    script = ScenarioScript(events=tuple(events), duration_s=cursor + 1.0)
    return CalibrationSession(script=script, segments=tuple(segments))


def calibration_frames(
    session: CalibrationSession,
    params: PlantParams,
) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    """Frame source for the calibration rig: open for one second, then a
    fixed grip (effort 1200, position just inside contact) throughout."""
    script = session.script
    plant = initial_plant_state(params, water=script.initial_water)
    open_cmd = GripperCommand(
        position=OPEN_POSITION, effort=GRIP_EFFORT, fired=frozenset(), phase=Phase.IDLE
    )
    hold_cmd = GripperCommand(
        position=GRIP_POSITION, effort=GRIP_EFFORT, fired=frozenset(), phase=Phase.HOLDING
    )
    for cycle in range(script.n_cycles):
        command = open_cmd if cycle < GRASP_CYCLE else hold_cmd
        inputs = resolve_script(script, params, cycle)
        plant = plant_step(plant, command, inputs, params)
        yield (
            cycle_timestamp_us(cycle),
            render_tactile(plant, command, Side.LEFT, cycle, params),
            render_tactile(plant, command, Side.RIGHT, cycle, params),
        )
