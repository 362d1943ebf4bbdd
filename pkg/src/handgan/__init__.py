"""Unpaired synthetic-to-real hand image translation with multi-scale perceptual discriminators."""

__version__ = "0.1.0"
