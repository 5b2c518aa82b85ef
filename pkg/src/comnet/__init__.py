"""Model-driven OFDM receiver (ComNet) with conventional and data-driven baselines."""

__version__ = "0.1.0"
