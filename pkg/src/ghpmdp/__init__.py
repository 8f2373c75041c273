"""Latent-variable model-based RL over families of hidden-parameter MDPs."""

__version__ = "0.1.0"
