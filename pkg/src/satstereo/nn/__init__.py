"""Differentiable stereo core."""
