"""Latent graph attention on feature maps, with baselines and a cost model."""
__version__ = "0.1.0"
