"""Generative speech enhancement toolkit: mixture simulation, denoising
distillation of a masked-prediction encoder, dual-stream vocoding and probes."""

__version__ = "0.1.0"

SAMPLE_RATE = 16000
