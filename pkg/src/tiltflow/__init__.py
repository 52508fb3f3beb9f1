"""Simulation and verification of a Gaussian-tilt measure-valued flow.

The flow embeds a centered measure in Brownian motion: the tilted measure
collapses to a point at a random time T and the Brownian position at T has
the law of the original measure.
"""
__version__ = "0.1.0"
