"""Sequential recommendation with a learned behaviour sampler."""

__version__ = "0.1.0"
