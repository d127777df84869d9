"""facetex: a latent face-texture generator with explicit pose and expression
control, trained and evaluated entirely on synthetic data."""

__version__ = "0.1.0"
