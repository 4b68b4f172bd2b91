"""Neural Langevin dynamics: energy-based latent SDE VAEs with landscape analysis."""

__version__ = "0.1.0"
