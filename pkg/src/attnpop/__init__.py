"""Attention-based popularity prediction for social-media videos.

Submodules:
  tensor    dense float64 arrays with reverse-mode autodiff
  layers    dense / attention / recurrent building blocks
  model     video, headline, and fused predictors plus checkpoints
  gradcam   class activation heatmaps and attention reports
  data      manifests, word vectors, feature stores, labeling, splits
  training  loss, optimizer, training loop, evaluation, random search
  synth     deterministic synthetic corpora for end-to-end checks
  cli       command-line front end
"""

from .backend import available as available_backends, use as use_backend

__version__ = "0.1.0"

__all__ = ["available_backends", "use_backend", "__version__"]
