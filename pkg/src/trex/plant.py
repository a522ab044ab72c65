"""Deterministic simulated gripper and deformable-cup plant.

The plant is phenomenological. Its contract is reproducing the signal
relationships the controller depends on, not material science: slip
produces a vertical flow spike well separated from sensor noise, load
decrease moves the shared center of pressure upward, over-effort drives
the normal proxy past its protection limit, and sustained over-effort
against a fragile wall latches irreversible deformation.

Dynamics summary, one 1/12 s cycle at a time. Gripper effort sets the
total normal force (effort_to_normal * effort) split across the two
fingers by the asymmetry ratio. Tangential demand is the scripted tug
plus, when the cup hangs unsupported, its weight amplified by tilt
torque (and briefly by a liftoff jerk). Demand above the friction
capacity mu * N slides the cup: the rendered texture translates, pose
drift accumulates, and far enough the cup is dropped. The transmitted
vertical load shears the gel, dragging the contact center downward;
load release lets it spring back, which is exactly the cue the release
channel calibrates against. Above a creep onset effort the gel jitters
micro-shear every cycle, defeating the quiet gate, with occasional
spikes that read as slip. Water stiffens the cup wall against crushing;
an empty soft wall fails after crush_dwell consecutive over-effort
cycles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import cv2
import numpy as np

from .controller import GripperCommand
from .frames import Side

G = 9.81
DT = 1.0 / 12.0

DOMINANT_SIDE = Side.LEFT


@dataclass(frozen=True)
class PlantParams:
    # material and grip
    cup_mass: float
    water_mass: float
    wall_crush_effort: float
    crush_dwell: int
    friction_mu: float
    effort_to_normal: float
    asymmetry: float
    speckle_density: float
    pixel_noise_sigma: float
    sensor_jitter_sigma: float
    rng_seed: int
    # sensor geometry
    image_height: int = 240
    image_width: int = 320
    contact_position: float = 3.0
    contact_base_y: float = 120.0
    ellipse_ax: float = 56.0
    ellipse_ay: float = 42.0
    pressure_ref: float = 0.5
    area_exp: float = 0.625
    gain_exp: float = 0.25
    texture_gain: float = 1.0
    # response shaping
    slide_gain: float = 2.2
    cop_load_gain: float = 40.0
    cop_tau_in: float = 2.0
    cop_tau_out: float = 3.0
    tilt_torque_gain: float = 0.9
    drift_deg_per_px: float = 0.8
    drop_slide_px: float = 600.0
    lift_spike_factor: float = 1.4
    lift_spike_cycles: int = 4
    creep_onset_effort: float = 3300.0
    creep_amp: float = 0.16
    creep_spike_amp: float = 0.26
    creep_spike_period: int = 9
    crush_water_gain: float = 28.0
    crush_storm_cycles: int = 6
    crush_storm_demand: float = 1.5
    calib_squeeze_boost: float = 1.02  # rig squeeze for the limit-calibration presses
    pour_angle_deg: float = 75.0
    pour_align_tol_deg: float = 15.0
    pour_rate_kg_s: float = 0.030

    def validate(self, e_init: float = 1200.0) -> None:
        """Mutual-consistency checks run at preset construction."""
        for name in (
            "cup_mass", "wall_crush_effort", "friction_mu", "effort_to_normal",
            "speckle_density", "pixel_noise_sigma", "slide_gain",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"plant parameter {name} must be positive")
        if self.asymmetry < 1.0:
            raise ValueError("asymmetry must be >= 1 (dominant/weak ratio)")
        if self.water_mass < 0:
            raise ValueError("water_mass must be nonnegative")
        capacity = self.friction_mu * self.effort_to_normal * e_init
        weight = G * self.cup_mass
        if capacity <= weight:
            raise ValueError(
                f"initial effort cannot hold the empty cup: capacity {capacity:.3f} N "
                f"<= weight {weight:.3f} N"
            )
        if e_init >= self.wall_crush_effort:
            raise ValueError("initial effort would crush the cup wall")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PlantParams":
        params = cls(**json.loads(text))
        params.validate()
        return params

    @classmethod
    def load(cls, path: str | Path) -> "PlantParams":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def load_preset(name: str, rng_seed: Optional[int] = None) -> PlantParams:
    path = Path(__file__).parent / "presets" / f"{name}_cup.json"
    if not path.exists():
        raise ValueError(f"unknown preset {name!r}, expected 'soft' or 'hard'")
    params = PlantParams.load(path)
    if rng_seed is not None:
        params = replace(params, rng_seed=int(rng_seed))
    return params


# ---------------------------------------------------------------------------
# scripted events


@dataclass(frozen=True)
class SupportRemove:
    at_s: float
    restore_at_s: Optional[float] = None


@dataclass(frozen=True)
class ManualPush:
    """External tug on the cup along the gravity axis."""

    at_s: float
    duration_s: float
    magnitude: float
    normal_boost: float = 0.0
    ramp: bool = False


@dataclass(frozen=True)
class PressRelease:
    """Vertical load pressed onto the cup, held, then released."""

    at_s: float
    press_s: float
    hold_s: float
    release_s: float
    load: float
    normal_boost: float = 0.0


@dataclass(frozen=True)
class TiltTrajectory:
    at_s: float
    rise_s: float
    hold_s: float
    fall_s: float
    peak_deg: float

    @property
    def end_s(self) -> float:
        return self.at_s + self.rise_s + self.hold_s + self.fall_s


@dataclass(frozen=True)
class PourVolume:
    level: str  # "low" | "high"
    at_s: float = 0.0

    VOLUMES = {"low": 0.045, "high": 0.090}

    @property
    def water_kg(self) -> float:
        try:
            return self.VOLUMES[self.level]
        except KeyError:
            raise ValueError(f"unknown pour volume {self.level!r}") from None


ScriptEvent = Union[SupportRemove, ManualPush, PressRelease, TiltTrajectory, PourVolume]


@dataclass(frozen=True)
class ScenarioScript:
    events: tuple[ScriptEvent, ...]
    duration_s: float

    def __post_init__(self) -> None:
        times = [ev.at_s for ev in self.events]
        if times != sorted(times):
            raise ValueError("script events must be time-ordered")
        tilts = [ev for ev in self.events if isinstance(ev, TiltTrajectory)]
        if len(tilts) > 1:
            raise ValueError("at most one tilt trajectory per script")
        if self.duration_s <= 0:
            raise ValueError("script duration must be positive")

    @property
    def n_cycles(self) -> int:
        return int(round(self.duration_s / DT))

    @property
    def initial_water(self) -> Optional[float]:
        for ev in self.events:
            if isinstance(ev, PourVolume):
                return ev.water_kg
        return None

    @property
    def tilt_trajectory(self) -> Optional[TiltTrajectory]:
        for ev in self.events:
            if isinstance(ev, TiltTrajectory):
                return ev
        return None


@dataclass(frozen=True)
class CycleInputs:
    """Script effects resolved for one control cycle."""

    supported: bool
    push_demand: float
    normal_boost: float
    press_load: float
    lift_spike: float
    tilt_rad: float


def resolve_script(script: ScenarioScript, params: PlantParams, cycle: int) -> CycleInputs:
    t = cycle * DT
    supported = True
    lift_spike = 1.0
    push_demand = 0.0
    normal_boost = 0.0
    press_load = 0.0
    tilt_rad = 0.0
    for ev in script.events:
        if isinstance(ev, SupportRemove):
            removed = t >= ev.at_s and (ev.restore_at_s is None or t < ev.restore_at_s)
            if removed:
                supported = False
                if t < ev.at_s + params.lift_spike_cycles * DT:
                    lift_spike = params.lift_spike_factor
        elif isinstance(ev, ManualPush):
            if ev.at_s <= t < ev.at_s + ev.duration_s:
                frac = (t - ev.at_s) / ev.duration_s if ev.ramp else 1.0
                push_demand += ev.magnitude * frac
                normal_boost += ev.normal_boost  # squeeze lands full-strength at once
        elif isinstance(ev, PressRelease):
            dt_ev = t - ev.at_s
            if 0.0 <= dt_ev < ev.press_s + ev.hold_s + ev.release_s:
                if dt_ev < ev.press_s:
                    frac = dt_ev / ev.press_s
                elif dt_ev < ev.press_s + ev.hold_s:
                    frac = 1.0
                else:
                    frac = 1.0 - (dt_ev - ev.press_s - ev.hold_s) / ev.release_s
                press_load += ev.load * frac
                normal_boost += ev.normal_boost * frac
        elif isinstance(ev, TiltTrajectory):
            dt_ev = t - ev.at_s
            if 0.0 <= dt_ev:
                if dt_ev < ev.rise_s:
                    tilt_rad = math.radians(ev.peak_deg) * (dt_ev / ev.rise_s)
                elif dt_ev < ev.rise_s + ev.hold_s:
                    tilt_rad = math.radians(ev.peak_deg)
                elif dt_ev < ev.rise_s + ev.hold_s + ev.fall_s:
                    remain = 1.0 - (dt_ev - ev.rise_s - ev.hold_s) / ev.fall_s
                    tilt_rad = math.radians(ev.peak_deg) * remain
    return CycleInputs(
        supported=supported,
        push_demand=push_demand,
        normal_boost=normal_boost,
        press_load=press_load,
        lift_spike=lift_spike,
        tilt_rad=tilt_rad,
    )


# ---------------------------------------------------------------------------
# plant state and step


@dataclass(frozen=True)
class PlantState:
    water_remaining: float
    tilt: float = 0.0
    slip_offset: float = 0.0
    pose_drift: float = 0.0
    deformed: bool = False
    dropped: bool = False
    pressure_left: float = 0.0
    pressure_right: float = 0.0
    contact_center_y_left: float = 120.0
    contact_center_y_right: float = 120.0
    # internals
    slide_velocity: float = 0.0
    unsupported_slide: float = 0.0
    crush_cycles: int = 0
    storm_cycles: int = 0
    cycle: int = 0


def initial_plant_state(params: PlantParams, water: Optional[float] = None) -> PlantState:
    return PlantState(
        water_remaining=params.water_mass if water is None else water,
        contact_center_y_left=params.contact_base_y,
        contact_center_y_right=params.contact_base_y,
    )


def _pressures(command: GripperCommand, inputs: CycleInputs, params: PlantParams, in_contact: bool) -> tuple[float, float]:
    if not in_contact:
        return 0.0, 0.0
    total = params.effort_to_normal * command.effort
    share_l = params.asymmetry / (params.asymmetry + 1.0)
    p_l = total * share_l + inputs.normal_boost  # boosts land on the dominant finger
    p_r = total * (1.0 - share_l)
    return p_l, p_r


def plant_step(
    state: PlantState,
    command: GripperCommand,
    inputs: CycleInputs,
    params: PlantParams,
) -> PlantState:
    in_contact = command.position <= params.contact_position and not state.dropped
    p_l, p_r = _pressures(command, inputs, params, in_contact)

    dropped = state.dropped
    if not inputs.supported and not in_contact:
        dropped = True

    mass = params.cup_mass + state.water_remaining
    tilt_factor = 1.0 + params.tilt_torque_gain * math.sin(inputs.tilt_rad)
    weight_demand = 0.0 if inputs.supported else G * mass * tilt_factor * inputs.lift_spike
    demand = weight_demand + inputs.push_demand
    if not inputs.supported:
        demand += inputs.press_load  # nothing beneath the cup to take a press
    if state.storm_cycles > 0:
        demand += params.crush_storm_demand  # wall collapse jolts the grip

    capacity = params.friction_mu * (p_l + p_r)
    excess = demand - capacity
    slide_v = params.slide_gain * excess if (excess > 0.0 and in_contact and not dropped) else 0.0

    slip_offset = state.slip_offset + slide_v
    pose_drift = state.pose_drift + math.radians(params.drift_deg_per_px) * slide_v
    unsupported_slide = state.unsupported_slide + (slide_v if not inputs.supported else 0.0)
    if not dropped and unsupported_slide > params.drop_slide_px:
        dropped = True

    # gel shear: the contact center tracks the transmitted vertical load
    transmitted = inputs.press_load + min(demand, capacity)
    target_y = params.contact_base_y + params.cop_load_gain * transmitted
    center = state.contact_center_y_left
    tau = params.cop_tau_in if target_y > center else params.cop_tau_out
    center = center + (target_y - center) * min(1.0, 1.0 / tau)

    water = state.water_remaining
    pouring = (
        math.degrees(inputs.tilt_rad) >= params.pour_angle_deg
        and math.degrees(pose_drift) < params.pour_align_tol_deg
        and not dropped
        and water > 0.0
    )
    if pouring:
        water = max(0.0, water - params.pour_rate_kg_s * DT)

    # water pressurizes the wall from inside; an empty soft wall crushes
    crush_threshold = params.wall_crush_effort * (1.0 + params.crush_water_gain * water)
    if in_contact and not dropped and command.effort > crush_threshold:
        crush_cycles = state.crush_cycles + 1
    else:
        crush_cycles = 0
    deformed = state.deformed or crush_cycles >= params.crush_dwell
    if deformed and not state.deformed:
        storm_cycles = params.crush_storm_cycles
    else:
        storm_cycles = max(0, state.storm_cycles - 1)

    if dropped:
        p_l, p_r = 0.0, 0.0
        slide_v = 0.0

    return PlantState(
        water_remaining=water,
        tilt=inputs.tilt_rad,
        slip_offset=slip_offset,
        pose_drift=pose_drift,
        deformed=deformed,
        dropped=dropped,
        pressure_left=p_l,
        pressure_right=p_r,
        contact_center_y_left=center,
        contact_center_y_right=center,
        slide_velocity=slide_v,
        unsupported_slide=unsupported_slide,
        crush_cycles=crush_cycles,
        storm_cycles=storm_cycles,
        cycle=state.cycle + 1,
    )


# ---------------------------------------------------------------------------
# rendering

_TEXTURE_MARGIN = 48


class _TextureCache:
    """Per-(seed, side) speckle canvases, built once and reused."""

    def __init__(self) -> None:
        self._cache: dict[tuple[int, int, int, int, float], np.ndarray] = {}

    def get(self, params: PlantParams, side: Side) -> np.ndarray:
        side_idx = 0 if side is DOMINANT_SIDE else 1
        key = (
            params.rng_seed,
            side_idx,
            params.image_height,
            params.image_width,
            params.speckle_density,
        )
        tex = self._cache.get(key)
        if tex is None:
            tex = _render_speckle(params, side_idx)
            if len(self._cache) > 16:
                self._cache.clear()
            self._cache[key] = tex
        return tex


_TEXTURES = _TextureCache()


def _render_speckle(params: PlantParams, side_idx: int) -> np.ndarray:
    """Seeded random dots, dense enough that every 15x15 window holds several."""
    h = params.image_height + 2 * _TEXTURE_MARGIN
    w = params.image_width + 2 * _TEXTURE_MARGIN
    rng = np.random.default_rng(np.random.SeedSequence((params.rng_seed, side_idx, 0xD07)))
    n_dots = int(params.speckle_density * (h * w) / (params.image_height * params.image_width))
    step = max(4, int(round(math.sqrt(h * w / max(n_dots, 1)))))
    ys, xs = np.mgrid[0:h:step, 0:w:step]
    ys = ys.ravel() + rng.uniform(-step * 0.4, step * 0.4, ys.size)
    xs = xs.ravel() + rng.uniform(-step * 0.4, step * 0.4, xs.size)
    amps = rng.uniform(90.0, 230.0, ys.size)
    canvas = np.zeros((h, w), np.float32)
    rad = 3
    yy, xx = np.mgrid[-rad : rad + 1, -rad : rad + 1]
    dot = np.exp(-(yy**2 + xx**2) / (2.0 * 1.2**2)).astype(np.float32)
    for y, x, a in zip(ys, xs, amps):
        iy, ix = int(round(y)), int(round(x))
        if rad <= iy < h - rad - 1 and rad <= ix < w - rad - 1:
            patch = canvas[iy - rad : iy + rad + 1, ix - rad : ix + rad + 1]
            np.maximum(patch, a * dot, out=patch)
    return canvas


def _creep_jitter(state: PlantState, command: GripperCommand, params: PlantParams) -> float:
    if command.effort <= params.creep_onset_effort or state.pressure_left <= 0.0:
        return 0.0
    cyc = state.cycle
    amp = params.creep_spike_amp if cyc % params.creep_spike_period == 0 else params.creep_amp
    return amp * (cyc % 2)


def render_tactile(
    state: PlantState,
    command: GripperCommand,
    side: Side,
    cycle_index: int,
    params: PlantParams,
) -> np.ndarray:
    """One sensor frame: cup-fixed speckle under a pressure-scaled window.

    The texture translates with accumulated cup slide so consecutive
    frames carry the per-cycle slip velocity as genuine vertical optical
    flow. Gaussian pixel noise is seeded per (seed, cycle, side).
    """
    h, w = params.image_height, params.image_width
    side_idx = 0 if side is DOMINANT_SIDE else 1
    noise_rng = np.random.default_rng(
        np.random.SeedSequence((params.rng_seed, cycle_index, side_idx))
    )
    noise = noise_rng.normal(0.0, params.pixel_noise_sigma, (h, w))

    pressure = state.pressure_left if side is DOMINANT_SIDE else state.pressure_right
    if pressure <= 0.0:
        return np.clip(noise + 8.0, 0, 255).astype(np.uint8)

    tex = _TEXTURES.get(params, side)
    # common-mode mount vibration: a sub-pixel jitter shared by the whole
    # frame, which sets a patch-size-independent flow noise floor
    jitter = float(
        np.random.default_rng(
            np.random.SeedSequence((params.rng_seed, cycle_index, side_idx, 0x71B))
        ).normal(0.0, params.sensor_jitter_sigma)
    )
    offset = state.slip_offset + _creep_jitter(state, command, params) + jitter
    shift = np.float32([[1, 0, 0], [0, 1, offset % tex.shape[0]]])
    shifted = cv2.warpAffine(
        tex,
        shift,
        (tex.shape[1], tex.shape[0]),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_WRAP,
    )
    view = shifted[_TEXTURE_MARGIN : _TEXTURE_MARGIN + h, _TEXTURE_MARGIN : _TEXTURE_MARGIN + w]

    rel = pressure / params.pressure_ref
    ax = params.ellipse_ax * rel ** (params.area_exp / 2.0)
    ay = params.ellipse_ay * rel ** (params.area_exp / 2.0)
    gain = params.texture_gain * rel**params.gain_exp
    center_y = state.contact_center_y_left if side is DOMINANT_SIDE else state.contact_center_y_right

    ys = (np.arange(h, dtype=np.float32) - center_y) / ay
    xs = (np.arange(w, dtype=np.float32) - w / 2.0) / ax
    r2 = ys[:, None] ** 2 + xs[None, :] ** 2
    window = np.clip((1.0 - r2) / 0.15, 0.0, 1.0)

    frame = view * window * gain + noise + 8.0
    return np.clip(frame, 0, 255).astype(np.uint8)
