"""Diffusion LMS over fading wireless links: simulator, theory and harness."""

__version__ = "0.1.0"
