"""Unpaired MRI-to-CT translation with cycle-consistent critics, perceptual loss and coordinate channels."""

__version__ = "0.1.0"
