"""Guided diffusion on 2-D toy data: standard vs guidance-aware training objectives."""

__version__ = "0.1.0"
