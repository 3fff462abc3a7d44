"""Transport waveform synthesis through a low-pass filter chain, and
estimation of per-transport coherence fidelity from Ramsey and tracking data."""

__version__ = "0.1.0"
