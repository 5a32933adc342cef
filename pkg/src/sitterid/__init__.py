"""Sitter verification toolkit.

Implements the full desk-scale pipeline for identity verification over
embedding manifests: synthetic corpus generation and identity-disjoint
splitting, a small transformer encoder with LoRA adaptation sites, a
linear-head adapter for fixed backbone embeddings, triplet-loss training
with hard negative mining, normalized-concatenation embedding fusion, and
biometric evaluation (EER, TAR@FAR, ROC).
"""

__version__ = "0.1.0"
