"""Distributional policy evaluation on a categorical return grid.

Submodules: ``measures`` (grid measures and metrics), ``mdp`` (tabular models),
``bellman`` (distributional operator, DDP, Neumann inverse), ``inference``
(confidence sets and delta-method intervals), ``oracle`` (rollout checks) and
``cli`` (experiment runner).
"""

__version__ = "0.1.0"
