"""Regularized domain expansion for small feed-forward classifiers.

Implements weight-constraint adaptation (WCA), elastic weight consolidation
(EWC), soft KL-divergence distillation (SKLD) and the hybrid SKLD-EWC
objective, with an experiment harness for forgetting curves, trade-off
sweeps and method comparison reports.
"""

__version__ = "0.1.0"
