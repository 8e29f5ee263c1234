"""Region-level matching between support and query feature maps.

The support map is decomposed into h*w region vectors (row-major over
spatial cells). Each region is compared against every spatial column of
the query map under a pluggable similarity metric, giving an h x w
similarity map per region; max pooling each map yields the region score
vector. The matcher is parameter-free: it registers no trainable state.

Metrics (symmetric in their vector arguments):
    cosine    dot / (|a||b| + eps); zero vectors score 0 (dead region guard)
    tanimoto  dot / (|a||b| - dot + eps); the denominator vanishes exactly
              for parallel vectors, so near-parallel pairs (denominator
              below eps) are defined to score 1 (0 when the dot is ~0,
              i.e. zero vectors)
    expdist   exp(-d) with d = sqrt(|a-b|^2 + eps), in (0, 1]
    invdist   1 / (1 + d), same d, in (0, 1]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import FeatureMap
from .modules import Module
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    exp,
    index_select,
    matmul,
    mul,
    relu,
    reshape,
    sqrt,
    tmax,
    transpose,
    tsum,
)

METRICS = ("cosine", "tanimoto", "expdist", "invdist")


@dataclass(frozen=True)
class SimilarityMetric:
    """Metric variant plus the epsilon guard used in its denominators."""

    name: str = "cosine"
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.name not in METRICS:
            raise ValueError(f"unknown metric {self.name!r}; choose from {METRICS}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon guard must be positive, got {self.epsilon}")


@dataclass
class RegionVector:
    """The C-dim feature column at one spatial cell (row-major index)."""

    index: int
    values: Tensor


@dataclass
class RegionSimilarityMap:
    """Similarity of one support region against every query cell."""

    index: int
    values: Tensor  # (h, w)


@dataclass
class RegionScores:
    """Per-region max over the similarity map: how well each support part
    matches anywhere in the query."""

    values: Tensor  # (h*w,)


def decompose(fm: FeatureMap) -> list[RegionVector]:
    """Split a feature map into its h*w region vectors, row-major.

    Concatenating the vectors in order reconstructs the map exactly.
    """
    c, h, w = fm.values.shape
    cols = transpose(reshape(fm.values, (c, h * w)), (1, 0))  # (h*w, C)
    return [
        RegionVector(index=i, values=reshape(index_select(cols, 0, [i]), (c,)))
        for i in range(h * w)
    ]


def _pairwise_similarity(s_cols: Tensor, q_cols: Tensor, metric: SimilarityMetric) -> Tensor:
    """Similarity of every row of ``s_cols`` (A,C) against every row of
    ``q_cols`` (B,C) under ``metric``; returns (A,B). Differentiable."""
    a, c = s_cols.shape
    b = q_cols.shape[0]
    eps = metric.epsilon
    dots = matmul(s_cols, transpose(q_cols, (1, 0)))  # (A,B)
    s_sq = reshape(tsum(mul(s_cols, s_cols), axis=1), (a, 1))
    q_sq = reshape(tsum(mul(q_cols, q_cols), axis=1), (1, b))

    if metric.name == "cosine":
        denom = mul(sqrt(s_sq), sqrt(q_sq)) + eps
        return dots / denom
    if metric.name == "tanimoto":
        prod = mul(sqrt(s_sq), sqrt(q_sq))
        raw = prod - dots  # >= 0 by Cauchy-Schwarz
        smooth = dots / (raw + eps)
        near_parallel = (raw.data < eps).astype(dots.dtype)
        positive = (dots.data > eps).astype(dots.dtype)
        keep = Tensor(1.0 - near_parallel)
        return mul(smooth, keep) + Tensor(near_parallel * positive)
    # distance-based variants share d = sqrt(|a-b|^2 + eps)
    d2 = relu(s_sq + q_sq - 2.0 * dots)  # relu clears negative rounding residue
    d = sqrt(d2 + eps)
    if metric.name == "expdist":
        return exp(-d)
    return 1.0 / (1.0 + d)


def _spatial_columns(maps: Tensor) -> Tensor:
    """(N,C,h,w) -> (N*h*w, C) rows in (sample, row-major cell) order."""
    n, c, h, w = maps.shape
    return reshape(transpose(reshape(maps, (n, c, h * w)), (0, 2, 1)), (n * h * w, c))


def match_pairs(
    support: Tensor, query: Tensor, metric: SimilarityMetric
) -> tuple[Tensor, Tensor]:
    """Match every support map against every query map in one shot.

    Args:
        support: (S, C, h, w) feature maps.
        query: (Q, C, h, w) feature maps, same C/h/w.

    Returns:
        scores: (S, Q, h*w) region score vectors.
        maps: (S, Q, h*w, h, w) region similarity maps.
    """
    support, query = as_tensor(support), as_tensor(query)
    if support.ndim != 4 or query.ndim != 4:
        raise ShapeError(f"match_pairs expects 4-D batches, got {support.shape}, {query.shape}")
    if support.shape[1:] != query.shape[1:]:
        raise ShapeError(
            f"support {tuple(support.shape[1:])} and query {tuple(query.shape[1:])} "
            "feature maps are not shape-compatible"
        )
    s, c, h, w = support.shape
    q = query.shape[0]
    hw = h * w
    sim = _pairwise_similarity(_spatial_columns(support), _spatial_columns(query), metric)
    sim = transpose(reshape(sim, (s, hw, q, hw)), (0, 2, 1, 3))  # (S,Q,hw_s,hw_q)
    scores = tmax(sim, axis=-1)
    maps = reshape(sim, (s, q, hw, h, w))
    return scores, maps


def similarity_map(
    region: RegionVector, query: FeatureMap, metric: SimilarityMetric
) -> RegionSimilarityMap:
    """Similarity of one support region against every query spatial cell."""
    c, h, w = query.values.shape
    if region.values.shape != (c,):
        raise ShapeError(
            f"region vector has length {region.values.shape}, query has {c} channels"
        )
    sim = _pairwise_similarity(
        reshape(region.values, (1, c)), _spatial_columns(reshape(query.values, (1, c, h, w))), metric
    )
    return RegionSimilarityMap(index=region.index, values=reshape(sim, (h, w)))


def match(
    support: FeatureMap, query: FeatureMap, metric: SimilarityMetric
) -> tuple[RegionScores, list[RegionSimilarityMap]]:
    """Region scores plus the underlying similarity maps for one pair."""
    if support.values.shape != query.values.shape:
        raise ShapeError(
            f"support map {support.values.shape} and query map {query.values.shape} differ"
        )
    c, h, w = support.values.shape
    scores, maps = match_pairs(
        reshape(support.values, (1, c, h, w)), reshape(query.values, (1, c, h, w)), metric
    )
    maps_flat = reshape(maps, (h * w, h, w))
    region_maps = [
        RegionSimilarityMap(index=i, values=reshape(index_select(maps_flat, 0, [i]), (h, w)))
        for i in range(h * w)
    ]
    return RegionScores(values=reshape(scores, (h * w,))), region_maps


class RegionMatcher(Module):
    """Module face of the matcher; registers zero trainable parameters."""

    def __init__(self, metric: SimilarityMetric):
        super().__init__()
        self.metric = metric

    def forward(self, support: Tensor, query: Tensor):
        return match_pairs(support, query, self.metric)
