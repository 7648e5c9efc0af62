"""Desk-scale no-reference image quality toolkit.

Two self-supervised representation pathways (a similarity-weighted contrastive
loss over distorted versions of a scene, and a group-contrastive loss against
fixed good/bad anchor embeddings), plus zero-shot and few-label quality
predictors with a rank-correlation evaluation harness.
"""

from . import frmetrics, harness, highlevel, imaging, lowlevel, nnet  # noqa: F401

__version__ = "0.1.0"
