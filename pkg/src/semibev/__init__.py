"""Semi-supervised bird's-eye-view segmentation from a single front camera.

A small numpy autodiff library drives a Mean Teacher with horizontal-flip
consistency and conjoint rotation, trained on a synthetic pinhole world.
"""
__version__ = "0.1.0"
