"""Channel estimation with a predictive foundation model and a ViT pilot network."""

__version__ = "0.1.0"
