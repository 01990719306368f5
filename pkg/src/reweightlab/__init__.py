"""Meta-reweighting laboratory for noisy-label training."""

__version__ = "0.1.0"
