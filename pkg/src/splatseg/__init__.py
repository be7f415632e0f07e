"""Semantic segmentation of Gaussian-splat scenes from rendered views and 3D features.

Subpackages are plain modules: ``tensor`` (autodiff), ``scene`` (PLY and
Gaussian parameters), ``camera``, ``raster`` (tile rasterizer and its
backward pass), ``vi_features`` (point encoder, contrastive training),
``fusion`` (dual-branch network, losses, training loops), ``metrics``
and ``cli``.
"""

__version__ = "0.1.0"
