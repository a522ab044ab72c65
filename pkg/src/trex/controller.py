"""Per-cycle grasp reflex state machine.

Three phases: Idle (open), Closing (stroke ramps down at the initial
effort until both sensors report the stop force), Holding (the reflex
channels run). Per Holding cycle, in order: the CoP reference tracks
slowly in the background, then exactly one of anti-slip or release may
fire, then force-protect applies independently on top. Anti-slip reads
raw shear; release and protect read the EMA-filtered signals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional

from .calibration import CalibrationProfile
from .pipeline import ProxySample

CLOSING_STEP = 0.5
OPEN_POSITION = 10.0


class Phase(Enum):
    IDLE = "Idle"
    CLOSING = "Closing"
    HOLDING = "Holding"


class Channel(Enum):
    SLIP = "Slip"
    RELEASE = "Release"
    PROTECT = "Protect"


@dataclass(frozen=True)
class ChannelMask:
    slip: bool = True
    release: bool = True
    protect: bool = True

    @classmethod
    def for_ablation(cls, config_letter: str) -> "ChannelMask":
        table = {
            "A": cls(slip=True, release=False, protect=False),
            "B": cls(slip=True, release=False, protect=True),
            "C": cls(slip=True, release=True, protect=False),
            "D": cls(slip=True, release=True, protect=True),
        }
        try:
            return table[config_letter.upper()]
        except KeyError:
            raise ValueError(f"unknown ablation config {config_letter!r}, expected A-D") from None


@dataclass(frozen=True)
class ControllerConfig:
    profile: CalibrationProfile
    e_init: float = 1200.0
    e_max: float = 5000.0
    p_min: float = 0.0
    de_slip: float = 300.0
    de_prot: float = 400.0
    de_rel: float = 300.0
    dp_slip: float = 0.1
    dp_prot: float = 0.15
    dp_rel: float = 0.15
    dp_max: float = 3.0
    alpha_bg: float = 0.02
    alpha_rel: float = 0.3
    channel_mask: ChannelMask = ChannelMask()

    def __post_init__(self) -> None:
        if self.de_prot <= self.de_slip:
            # protect must win a co-trigger, net effort change stays negative
            raise ValueError("de_prot must exceed de_slip")
        if self.e_max <= self.e_init:
            raise ValueError("e_max must exceed e_init")
        for name in ("de_slip", "de_prot", "de_rel", "dp_slip", "dp_prot", "dp_rel", "dp_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.alpha_bg < self.alpha_rel:
            raise ValueError("alpha_bg must be below alpha_rel")


@dataclass(frozen=True)
class ControllerState:
    phase: Phase
    effort: float
    position: float
    p_hold: Optional[float]
    cop_ref: Optional[float]
    cumulative_dp_slip: float
    cycle_index: int
    grasp_failed: bool = False


@dataclass(frozen=True)
class GripperCommand:
    position: float
    effort: float
    fired: frozenset[Channel]
    phase: Phase


def initial_state(config: ControllerConfig, open_position: float = OPEN_POSITION) -> ControllerState:
    return ControllerState(
        phase=Phase.IDLE,
        effort=config.e_init,
        position=open_position,
        p_hold=None,
        cop_ref=None,
        cumulative_dp_slip=0.0,
        cycle_index=0,
    )


def begin_grasp(state: ControllerState) -> ControllerState:
    """Start a closing episode from the current (open) posture."""
    return replace(
        state,
        phase=Phase.CLOSING,
        p_hold=None,
        cop_ref=None,
        cumulative_dp_slip=0.0,
        grasp_failed=False,
    )


def detect_slip(sample: ProxySample, theta_s: float) -> tuple[bool, bool]:
    """Per-side slip flags: valid contact and raw shear at or above theta_s."""
    slip_l = sample.left.contact_valid and sample.left.sy_raw >= theta_s
    slip_r = sample.right.contact_valid and sample.right.sy_raw >= theta_s
    return slip_l, slip_r


def update_cop_reference_background(
    state: ControllerState, sample: ProxySample, config: ControllerConfig
) -> ControllerState:
    if state.cop_ref is None or sample.mean_cop_y is None:
        return state
    tracked = (1.0 - config.alpha_bg) * state.cop_ref + config.alpha_bg * sample.mean_cop_y
    return replace(state, cop_ref=tracked)


def apply_antislip(state: ControllerState, config: ControllerConfig) -> ControllerState:
    effort = min(state.effort + config.de_slip, config.e_max)
    budget = max(config.dp_max - state.cumulative_dp_slip, 0.0)
    step_down = min(config.dp_slip, budget)
    position = max(state.position - step_down, config.p_min)
    consumed = state.position - position
    return replace(
        state,
        effort=effort,
        position=position,
        cumulative_dp_slip=state.cumulative_dp_slip + consumed,
    )


def release_preconditions(
    state: ControllerState, sample: ProxySample, config: ControllerConfig
) -> bool:
    if not (sample.left.contact_valid and sample.right.contact_valid):
        return False
    if state.cop_ref is None or sample.mean_cop_y is None:
        return False
    if not sample.sy_max_ema < config.profile.theta_q:
        return False
    return (sample.mean_cop_y - state.cop_ref) < config.profile.theta_c


def apply_release(
    state: ControllerState, sample: ProxySample, config: ControllerConfig
) -> ControllerState:
    assert state.p_hold is not None and state.cop_ref is not None and sample.mean_cop_y is not None
    effort = max(state.effort - config.de_rel, config.e_init)
    position = min(state.position + config.dp_rel, state.p_hold)
    cop_ref = (1.0 - config.alpha_rel) * state.cop_ref + config.alpha_rel * sample.mean_cop_y
    return replace(state, effort=effort, position=position, cop_ref=cop_ref)


def apply_protect(state: ControllerState, config: ControllerConfig) -> ControllerState:
    assert state.p_hold is not None
    effort = max(state.effort - config.de_prot, config.e_init)
    position = min(state.position + config.dp_prot, state.p_hold)
    return replace(state, effort=effort, position=position)


def step_closing(
    state: ControllerState, sample: ProxySample, config: ControllerConfig
) -> ControllerState:
    if min(sample.left.fn_raw, sample.right.fn_raw) >= config.profile.f_stop:
        return replace(
            state,
            phase=Phase.HOLDING,
            p_hold=state.position,
            cop_ref=sample.mean_cop_y,
        )
    if state.position <= config.p_min:
        # full close without reaching the stop force: nothing graspable
        return replace(state, phase=Phase.IDLE, grasp_failed=True)
    position = max(state.position - CLOSING_STEP, config.p_min)
    return replace(state, position=position, effort=config.e_init)


def step(
    state: ControllerState, sample: ProxySample, config: ControllerConfig
) -> tuple[GripperCommand, ControllerState]:
    fired: set[Channel] = set()

    if state.phase is Phase.IDLE:
        new = state
    elif state.phase is Phase.CLOSING:
        new = step_closing(state, sample, config)
    else:
        new = state
        if new.cop_ref is None and sample.mean_cop_y is not None:
            new = replace(new, cop_ref=sample.mean_cop_y)
        new = update_cop_reference_background(new, sample, config)

        slip_l, slip_r = (False, False)
        if config.channel_mask.slip:
            slip_l, slip_r = detect_slip(sample, config.profile.theta_s)
        if slip_l or slip_r:
            new = apply_antislip(new, config)
            fired.add(Channel.SLIP)
        elif config.channel_mask.release and release_preconditions(new, sample, config):
            new = apply_release(new, sample, config)
            fired.add(Channel.RELEASE)

        if config.channel_mask.protect and sample.fn_max_ema > config.profile.f_lim:
            new = apply_protect(new, config)
            fired.add(Channel.PROTECT)

    new = replace(new, cycle_index=state.cycle_index + 1)
    command = GripperCommand(
        position=new.position,
        effort=new.effort,
        fired=frozenset(fired),
        phase=new.phase,
    )
    return command, new


CONFIG_VERSION = 1

_CONFIG_FIELDS = (
    "e_init", "e_max", "p_min",
    "de_slip", "de_prot", "de_rel",
    "dp_slip", "dp_prot", "dp_rel", "dp_max",
    "alpha_bg", "alpha_rel",
)


def save_config(config: ControllerConfig, path: str | Path, profile_path: str | Path) -> None:
    """Write the controller configuration document.

    The profile itself is not embedded; the document references it by
    path, resolved against the document's directory on load.
    """
    doc = {name: getattr(config, name) for name in _CONFIG_FIELDS}
    doc["profile"] = str(profile_path)
    doc["channel_mask"] = {
        "slip": config.channel_mask.slip,
        "release": config.channel_mask.release,
        "protect": config.channel_mask.protect,
    }
    doc["version"] = CONFIG_VERSION
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def load_config(path: str | Path) -> ControllerConfig:
    path = Path(path)
    doc = json.loads(path.read_text())
    profile_ref = Path(doc["profile"])
    if not profile_ref.is_absolute():
        profile_ref = path.parent / profile_ref
    profile = CalibrationProfile.load(profile_ref)
    mask = doc.get("channel_mask", {})
    return ControllerConfig(
        profile=profile,
        channel_mask=ChannelMask(
            slip=bool(mask.get("slip", True)),
            release=bool(mask.get("release", True)),
            protect=bool(mask.get("protect", True)),
        ),
        **{name: doc[name] for name in _CONFIG_FIELDS},
    )
