"""Broadband DOA estimation from STFT phase maps: room simulation, noise-trained CNN, SRP-PHAT baseline."""

from .geometry import (ArrayGeometry, DoaGrid, PerturbationSpec, apply_perturbation, build_grid, build_ula,
                       class_of_angle, farfield_delays, middle_mic_perturbation)
from .room import (Placement, Rir, RoomSpec, convolve_signal, decay_time, render_array, rt60_to_reflection,
                   simulate_rir)
from .stft import Spectrogram, StftParams, forward_dft, phase_map, phase_maps, stft

__version__ = "0.1.0"

__all__ = [
    "ArrayGeometry", "DoaGrid", "PerturbationSpec", "Placement", "Rir", "RoomSpec", "Spectrogram",
    "StftParams", "apply_perturbation", "build_grid", "build_ula", "class_of_angle", "convolve_signal",
    "decay_time", "farfield_delays", "forward_dft", "middle_mic_perturbation", "phase_map",
    "phase_maps", "render_array", "rt60_to_reflection", "simulate_rir", "stft",
]
