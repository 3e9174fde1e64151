"""Foothold evaluation and selection for quadruped locomotion.

Analytic labeling of elevation-map patches, a small encoder-decoder
network trained to reproduce the labels, and the argmin selection rule
that turns either into a foothold decision.
"""

__version__ = "0.1.0"
