"""vnelab: an online virtual network embedding workbench.

Discrete-event network simulator, constraint-checked embedding core with an
exhaustive oracle, and a trainable graph-policy solver with size-conditioned
meta-training and curriculum scheduling.
"""

__version__ = "0.1.0"
