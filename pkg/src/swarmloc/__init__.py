"""Multi-robot visual-range relative localization toolkit.

A swarm simulator produces ranges, anonymous bearing detections, and noisy
odometry; a graph-attention match network with Sinkhorn partial assignment
associates detections with robot identities and predicts relative
positions with covariances; a differentiable pose-graph optimizer fuses
everything into 6-DoF relative poses. Training, baselines, metrics, and a
decentralized per-robot runtime round out the system.
"""

from . import eval, geom, matchnet, pgo, runtime, sim, tensor, tgeom, train

__all__ = [
    "eval",
    "geom",
    "matchnet",
    "pgo",
    "runtime",
    "sim",
    "tensor",
    "tgeom",
    "train",
]

__version__ = "0.1.0"
