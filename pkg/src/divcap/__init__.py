"""Diverse audio captioning via adversarial training."""

__version__ = "0.1.0"
