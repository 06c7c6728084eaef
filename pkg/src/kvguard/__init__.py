"""Simulated bit flips in a shared prefix KV cache, and a checksum defence against them."""

from kvguard.engine import Engine, Request, ToyModelConfig, build_model
from kvguard.faultlab import Lab, LabConfig, run_trial
from kvguard.integrity import IntegrityConfig

__all__ = ["Engine", "IntegrityConfig", "Lab", "LabConfig", "Request", "ToyModelConfig", "build_model", "run_trial"]
__version__ = "0.1.0"
