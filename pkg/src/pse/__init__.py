"""Streaming personalised speech enhancement.

A causal transformer encoder with two speaker-conditioning decoder
variants: static-embedding concatenation and cross-attention over
enrolment hidden states. Includes a desk-scale train/evaluate/stream
toolchain on synthetic speakers or WAV directories.
"""

__version__ = "0.1.0"
