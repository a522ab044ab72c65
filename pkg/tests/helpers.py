"""Hand-construction helpers shared across test modules.

Profiles and proxy samples built here are test inputs with explicitly
chosen values; nothing is derived, so controller and metrics tests can
state their expectations as literals.
"""
from typing import Optional

from trex.calibration import CalibrationProfile
from trex.controller import ControllerConfig, ControllerState, Phase
from trex.pipeline import ProxySample, SideProxies


def make_profile(**overrides) -> CalibrationProfile:
    values = dict(
        tau=20.0,
        theta_s=0.2,
        theta_q=0.06,
        theta_c=-9.5,
        f_lim=50.0,
        f_stop=1.3,
        gamma=1.5,
        alpha=0.3,
        material_label="test",
        provenance={},
        version=1,
        created_at=0,
    )
    values.update(overrides)
    return CalibrationProfile(**values)


def make_side(
    fn_raw: float = 1.0,
    sy_raw: float = 0.0,
    cop: Optional[tuple] = (160.0, 120.0),
    contact_valid: bool = True,
    fn_ema: Optional[float] = None,
    sy_ema: Optional[float] = None,
) -> SideProxies:
    return SideProxies(
        fn_raw=fn_raw,
        sy_raw=sy_raw,
        cop=cop,
        contact_valid=contact_valid,
        fn_ema=fn_raw if fn_ema is None else fn_ema,
        sy_ema=sy_raw if sy_ema is None else sy_ema,
    )


def make_sample(
    left: Optional[SideProxies] = None,
    right: Optional[SideProxies] = None,
    timestamp_us: int = 0,
    mean_cop_y: Optional[float] = "auto",
) -> ProxySample:
    left = left if left is not None else make_side()
    right = right if right is not None else make_side()
    if mean_cop_y == "auto":
        both = (
            left.contact_valid
            and right.contact_valid
            and left.cop is not None
            and right.cop is not None
        )
        mean_cop_y = (left.cop[1] + right.cop[1]) / 2.0 if both else None
    return ProxySample(
        timestamp_us=timestamp_us,
        left=left,
        right=right,
        sy_max_ema=max(left.sy_ema, right.sy_ema),
        fn_max_ema=max(left.fn_ema, right.fn_ema),
        mean_cop_y=mean_cop_y,
    )


def holding_state(
    config: ControllerConfig,
    effort: Optional[float] = None,
    position: float = 2.5,
    p_hold: float = 2.5,
    cop_ref: Optional[float] = 120.0,
    cumulative_dp_slip: float = 0.0,
) -> ControllerState:
    return ControllerState(
        phase=Phase.HOLDING,
        effort=config.e_init if effort is None else effort,
        position=position,
        p_hold=p_hold,
        cop_ref=cop_ref,
        cumulative_dp_slip=cumulative_dp_slip,
        cycle_index=0,
    )
