"""Reachability-corrected latent world models on small grid mazes.

Modules: ``env`` (grids and the BFS oracle), ``data`` (trajectories, segments,
reachability pairs), ``model`` (encoder, dynamics, reach head), ``train``
(objective and optimiser), ``planner`` (gated CEM and MPC), ``analysis``
(bound checks), ``evaluate`` (success rates and timing) and ``cli``.
"""

__version__ = "0.1.0"
