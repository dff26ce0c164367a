"""Desk-scale score-distillation text-to-3D engine.

Conditional radiance field prior, differentiable color/normal volume
rendering, SDS and VSD objectives with low-rank proxies, and weighted
concept composition, all checked against analytic toy denoiser oracles.
"""

__version__ = "0.1.0"
