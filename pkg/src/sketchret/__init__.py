"""Sketch-to-shape retrieval with fitting-gap adaptive triplet margins."""

__version__ = "0.1.0"
