"""Embedding-level fusion: normalize per source, concatenate, renormalize.

For unit-normalized inputs the fused cosine similarity is exactly the
arithmetic mean of the per-source cosines, regardless of per-source
dimensions; dimension imbalance does NOT reweight sources. An optional
per-source weight knob exists (weight w scales a source's block, so scores
become a w^2-weighted mean of cosines) but defaults to 1 everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np


@dataclass(frozen=True)
class FusionSpec:
    """Ordered list of source tags to fuse; order is part of the contract."""

    sources: tuple[str, ...]
    dims: tuple[int, ...] = ()
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.sources:
            raise ValueError("fusion needs at least one source")
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "dims", tuple(self.dims))
        ws = tuple(self.weights) if self.weights else (1.0,) * len(self.sources)
        if len(ws) != len(self.sources):
            raise ValueError("weights must match sources")
        if any(w <= 0 for w in ws):
            raise ValueError("weights must be positive")
        object.__setattr__(self, "weights", ws)
        if self.dims and len(self.dims) != len(self.sources):
            raise ValueError("dims must match sources")

    @property
    def tag(self) -> str:
        """Source tag recording the fusion, e.g. ``fused[clip-lora+fr-base]``."""
        return f"fused[{'+'.join(self.sources)}]"

    @property
    def fused_dim(self) -> int:
        if not self.dims:
            raise ValueError("fusion spec has no recorded dims")
        return sum(self.dims)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """``v / ||v||``; rejects the zero vector."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def _in_spec_order(vectors, spec: FusionSpec) -> list[np.ndarray]:
    if isinstance(vectors, Mapping):
        missing = [s for s in spec.sources if s not in vectors]
        if missing:
            raise ValueError(f"missing source(s) for fusion: {missing}")
        parts = [vectors[s] for s in spec.sources]
    else:
        parts = list(vectors)
        if len(parts) != len(spec.sources):
            raise ValueError(f"expected {len(spec.sources)} vectors, got {len(parts)}")
    if spec.dims:
        for s, d, p in zip(spec.sources, spec.dims, parts):
            p = np.asarray(p).reshape(-1)
            if p.shape[0] != d:
                raise ValueError(f"source {s!r}: dim {p.shape[0]} != declared {d}")
    return parts


def fuse(vectors, spec: FusionSpec) -> np.ndarray:
    """Per-source L2 normalize, concatenate in spec order, renormalize.

    ``vectors`` is either a mapping from source tag to vector or a sequence
    already in spec order. Output is a unit vector of the summed dimension.
    """
    parts = _in_spec_order(vectors, spec)
    blocks = [w * l2_normalize(p) for w, p in zip(spec.weights, parts)]
    return l2_normalize(np.concatenate(blocks))


def fused_score(item_a, item_b, spec: FusionSpec) -> float:
    """Cosine similarity between the two items' fused embeddings."""
    fa = fuse(item_a, spec)
    fb = fuse(item_b, spec)
    return float(np.dot(fa, fb))
