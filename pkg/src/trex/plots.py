"""Render a five-panel trace figure from a command log.

SVG output is kept byte-reproducible: fixed hash salt, no embedded date.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .calibration import CalibrationProfile
from .metrics import CommandRow

_SVG_SALT = "trex-trace"


def render_trace_svg(
    rows: Sequence[CommandRow], profile: CalibrationProfile, out_path: Path
) -> None:
    plt.rcParams["svg.hashsalt"] = _SVG_SALT

    fig, axes = plt.subplots(5, 1, figsize=(10, 12), sharex=True)
    ax_sy, ax_effort, ax_pos, ax_fn, ax_cop = axes

    t = [r.cycle for r in rows]

    ax_sy.set_ylabel("shear px/frame")
    ax_effort.set_ylabel("effort")
    ax_pos.set_ylabel("position mm")
    ax_fn.set_ylabel("normal proxy")
    ax_cop.set_ylabel("cop shift px")
    ax_cop.set_xlabel("cycle")

    if rows:
        ax_sy.plot(t, [r.sy_raw_l for r in rows], lw=0.7, label="left")
        ax_sy.plot(t, [r.sy_raw_r for r in rows], lw=0.7, label="right")
        ax_sy.axhline(profile.theta_s, color="tab:red", lw=0.8, ls="--", label="slip threshold")
        ax_sy.legend(loc="upper right", fontsize=8)

        ax_effort.plot(t, [r.effort for r in rows], lw=0.9, color="tab:purple")
        fired_cycles = [r.cycle for r in rows if r.fired]
        fired_efforts = [r.effort for r in rows if r.fired]
        if fired_cycles:
            ax_effort.plot(fired_cycles, fired_efforts, ".", ms=3, color="tab:red")

        ax_pos.plot(t, [r.position for r in rows], lw=0.9, color="tab:green")

        ax_fn.plot(t, [r.fn_ema_max for r in rows], lw=0.9, color="tab:blue")
        ax_fn.axhline(profile.f_lim, color="tab:red", lw=0.8, ls="--", label="force limit")
        ax_fn.legend(loc="upper right", fontsize=8)

        # shift relative to the tracked reference; gaps where either is absent
        shift = [
            r.mean_cop_y - r.cop_ref
            if r.mean_cop_y is not None and r.cop_ref is not None
            else float("nan")
            for r in rows
        ]
        ax_cop.plot(t, shift, lw=0.9, color="tab:orange")
        ax_cop.axhline(profile.theta_c, color="tab:red", lw=0.8, ls="--", label="release threshold")
        ax_cop.legend(loc="upper right", fontsize=8)

    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
