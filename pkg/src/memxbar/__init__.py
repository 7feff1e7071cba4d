"""Behavioral memristor-crossbar simulator with closed-loop programming and training."""

from .backend import Backend, DirectBackend, ProtocolBackend, open_backend
from .device import CrossbarModel, MemristorCell, PulseCommand, VariabilitySpec, apply_pulse, new_crossbar
from .programming import ArrayReport, Method, ProgramReport, VipiConfig, program_array

__version__ = "0.1.0"

__all__ = [
    "ArrayReport", "Backend", "CrossbarModel", "DirectBackend", "MemristorCell", "Method",
    "ProgramReport", "ProtocolBackend", "PulseCommand", "VariabilitySpec", "VipiConfig",
    "apply_pulse", "new_crossbar", "open_backend", "program_array",
]
