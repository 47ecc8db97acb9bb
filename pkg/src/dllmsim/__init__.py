"""Serving-engine core and discrete-event simulator for diffusion LLM inference."""

from .core import HardwareProfile, Phase, Request, ServeConfig

__all__ = ["HardwareProfile", "Phase", "Request", "ServeConfig"]
__version__ = "0.1.0"
