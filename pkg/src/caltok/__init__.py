"""Fisheye adaptation of a frozen transformer depth estimator.

A compact, fully self-contained pipeline: radial fisheye geometry with an
exact numerical inverse, inverse-mapping image/depth warps, a small
vision transformer with hand-written gradients, trainable calibration
tokens that modulate its latents through attention, and the
self-supervised undo-warp objective that trains them from perspective
scenes alone.
"""

__version__ = "0.1.0"
