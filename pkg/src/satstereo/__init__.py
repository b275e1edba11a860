"""Satellite stereo toolkit, from RPC imagery to a fused surface model."""
__version__ = "0.1.0"
