"""Shallow bump-network solver for parabolic PDEs by per-step energy minimisation."""

__version__ = "0.1.0"
