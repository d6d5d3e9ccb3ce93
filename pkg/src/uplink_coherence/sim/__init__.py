"""Deterministic uplink simulator producing the four telemetry streams."""
from .models import (
    ChannelState, CqiReporter, GnbParams, UeState, ar1_fading, cqi_from_quality, cqi_report,
    step_power_control,
)
from .run import (
    RunBundle, SimConfig, SlotBatch, SpectrumCells, apply_manipulation, emit_mac_trace,
    emit_phy_report, emit_spectrum_frame, simulate_run,
)
from .scenario import ScenarioError, ScenarioSpec, load_scenario

__all__ = [
    "ChannelState", "CqiReporter", "GnbParams", "UeState", "ar1_fading", "cqi_from_quality",
    "cqi_report", "step_power_control", "RunBundle", "SimConfig", "SlotBatch", "SpectrumCells",
    "apply_manipulation", "emit_mac_trace", "emit_phy_report", "emit_spectrum_frame",
    "simulate_run", "ScenarioError", "ScenarioSpec", "load_scenario",
]
