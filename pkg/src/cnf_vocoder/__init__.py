"""Conditional continuous normalizing flow vocoder.

Waveforms are mapped to Gaussian latents by a stack of neural-ODE blocks
driven by gated dilated convolutions conditioned on a mel-spectrogram.
"""
from .flow import CNFVocoder, ModelConfig, count_parameters
from .odeint import Method, OdeProblem, SolverConfig, solve

__all__ = ["CNFVocoder", "ModelConfig", "count_parameters", "Method", "OdeProblem",
           "SolverConfig", "solve"]
__version__ = "0.1.0"
