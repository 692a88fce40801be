"""Cooperative bistatic MIMO-OFDM sensing.

Simulates echo tensors for multi-target low-altitude scenes, estimates
per-link range, Doppler and angle of arrival with a Vandermonde-structured
CP decomposition, and fuses links into 3-D target states.
"""
from .fusion import FusionConfig, cooperative_fusion
from .geometry import ArrayConfig, Scenario, WaveformConfig, build_default_scenario
from .params import LinkConfig, LinkMeasurement, estimate_link_parameters
from .tensor import estimate_factors, plan_smoothing
from .waveform import NoiseConfig, design_region_beamformer, simulate_received_tensor

__version__ = "0.1.0"

__all__ = [
    "ArrayConfig", "FusionConfig", "LinkConfig", "LinkMeasurement", "NoiseConfig", "Scenario",
    "WaveformConfig", "build_default_scenario", "cooperative_fusion", "design_region_beamformer",
    "estimate_factors", "estimate_link_parameters", "plan_smoothing", "simulate_received_tensor",
]
