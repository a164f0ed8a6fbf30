"""Differentiable sparse-grid operations and the reverse-mode engine."""
