"""Entropy-regularized distribution-alignment pseudo-label learning on point clouds."""
