"""
craftalign - Composite reward filtering and advantage-weighted fine-tuning

A modular Python library that curates a self-generated training pool with several
reward signals, fine-tunes a small conditional denoising-diffusion model with a
group-advantage-weighted SFT loss, and numerically checks how that loss relates to
group-based reinforcement learning.
Every stochastic step is seeded from a documented derivation, so runs are bit-reproducible.
"""

import logging

__version__ = "0.1.0"

# Default logging configuration for the craftalign package.
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s"
)

# Users can override this configuration in their own scripts if desired.
