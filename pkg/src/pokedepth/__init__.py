"""Self-supervised depth estimation from simulated poke labels."""

__version__ = "0.1.0"
