"""Slow-fast visual-force diffusion policy testbed.

A unified diffusion policy that consumes low-rate visual/state context and a
high-rate force stream through a causally masked transformer, trained with a
compliance-derived auxiliary target, and exercised end to end in a planar
quasi-static contact simulator.
"""

__version__ = "0.1.0"
