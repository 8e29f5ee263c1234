"""regionmatch: few-shot image classification by region-level feature matching.

A small convolutional backbone embeds images into spatial feature maps;
support-image regions are matched against query maps with a pluggable
similarity metric, and a weighting head combines the per-region scores into
one similarity per support/query pair. Training is episodic (N-way K-shot)
with an MSE objective. Post-hoc tools export saliency overlays for query
images and per-region importance statistics for whole classes.
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad", "__version__"]
