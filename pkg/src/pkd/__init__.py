"""Preference-driven knowledge distillation for text-attributed graphs.

A desk-scale library and CLI: disagreement-ranked node selection for oracle
annotation, teacher retraining on the expanded label set, PPO-driven per-node
teacher assignment, and three-term distillation into a compact student GNN.
"""

__version__ = "0.1.0"
