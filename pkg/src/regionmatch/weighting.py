"""Region weighting: combine region scores into one similarity per pair.

Three interchangeable variants produce the nonnegative weight vector:

* ``fixed``: every region weighs 1/(h*w), so combining is the plain mean.
* ``learnable``: one free vector shared across tasks, kept strictly
  positive through a softplus reparameterization.
* ``meta``: a small 1x1-conv network reads the channel concatenation of
  the support and query maps and emits a weight per region, adapting the
  weighting to each individual pair.

The final similarity is the inner product of the weight vector with the
region scores, so each region's contribution to the decision is exactly
weight * score (attribution completeness).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backbone import FeatureMap
from .modules import BatchNorm2d, Conv2d, Module
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    index_select,
    mul,
    relu,
    reshape,
    softplus,
    tsum,
)

HEAD_KINDS = ("fixed", "learnable", "meta")


@dataclass
class RegionWeight:
    """Nonnegative per-region coefficients plus their provenance."""

    values: Tensor  # (h*w,)
    kind: str = "meta"


@dataclass
class SimilarityScore:
    value: Tensor  # scalar

    def item(self) -> float:
        return float(self.value.data)


@dataclass
class MetaLearnerConfig:
    """Structure of the weight-generating network.

    Input channel count must be twice the backbone channel count (support
    and query maps concatenated channel-wise); each block is a 1x1 conv
    followed by batch norm and relu, ending at one output channel whose
    h x w plane flattens into the weight vector.
    """

    in_channels: int
    hidden_channels: int = 64
    out_channels: int = 1


class MetaWeightNet(Module):
    def __init__(self, config: MetaLearnerConfig, rng=None, dtype=np.float32):
        super().__init__()
        self.config = config
        self.conv1 = Conv2d(config.in_channels, config.hidden_channels, 1, rng=rng, dtype=dtype)
        self.norm1 = BatchNorm2d(config.hidden_channels, dtype=dtype)
        self.conv2 = Conv2d(config.hidden_channels, config.out_channels, 1, rng=rng, dtype=dtype)
        self.norm2 = BatchNorm2d(config.out_channels, dtype=dtype)

    def forward(self, pairs: Tensor) -> Tensor:
        """(P, 2C, h, w) concatenated pairs -> (P, h*w) nonnegative weights."""
        if pairs.ndim != 4:
            raise ShapeError(f"meta learner expects (P,2C,h,w), got {pairs.shape}")
        if pairs.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"meta learner configured for {self.config.in_channels} input channels, "
                f"got {pairs.shape[1]}"
            )
        x = relu(self.norm1(self.conv1(pairs)))
        x = relu(self.norm2(self.conv2(x)))
        p = pairs.shape[0]
        return reshape(x, (p, pairs.shape[2] * pairs.shape[3]))


def meta_weight(support: FeatureMap, query: FeatureMap, net: MetaWeightNet) -> RegionWeight:
    """Generate the weight for one support/query pair (order-sensitive)."""
    if support.values.shape != query.values.shape:
        raise ShapeError(
            f"support {support.values.shape} and query {query.values.shape} maps differ"
        )
    c, h, w = support.values.shape
    pair = concat(
        [reshape(support.values, (1, c, h, w)), reshape(query.values, (1, c, h, w))], axis=1
    )
    return RegionWeight(values=reshape(net(pair), (h * w,)), kind="meta")


def fixed_weight(h: int, w: int, dtype=np.float32) -> RegionWeight:
    """Uniform weight 1/(h*w) per region; combining equals the score mean."""
    if h < 1 or w < 1:
        raise ValueError(f"grid must be at least 1x1, got {h}x{w}")
    return RegionWeight(values=Tensor(np.full(h * w, 1.0 / (h * w), dtype=dtype)), kind="fixed")


class LearnableWeight(Module):
    """Free per-region weights, strictly positive via softplus."""

    def __init__(self, n_regions: int, dtype=np.float32):
        super().__init__()
        self.raw = Tensor(np.zeros(n_regions), requires_grad=True, dtype=dtype)

    def forward(self) -> RegionWeight:
        return RegionWeight(values=softplus(self.raw), kind="learnable")


def combine(weight: RegionWeight, scores) -> SimilarityScore:
    """Inner product of weight and region scores; linear in both arguments."""
    score_values = scores.values if hasattr(scores, "values") else scores
    if weight.values.shape != score_values.shape:
        raise ShapeError(
            f"weight length {weight.values.shape} != scores length {score_values.shape}"
        )
    return SimilarityScore(value=tsum(mul(weight.values, score_values)))


# --- batched heads used by the training loop -------------------------------------

class FixedHead(Module):
    kind = "fixed"

    def __init__(self, n_regions: int, dtype=np.float32):
        super().__init__()
        self.n_regions = n_regions
        self._dtype = dtype

    def forward(self, support_feats: Tensor, query_feats: Tensor) -> Tensor:
        s, q = support_feats.shape[0], query_feats.shape[0]
        return Tensor(
            np.full((s, q, self.n_regions), 1.0 / self.n_regions, dtype=self._dtype)
        )


class LearnableHead(Module):
    kind = "learnable"

    def __init__(self, n_regions: int, dtype=np.float32):
        super().__init__()
        self.weight = LearnableWeight(n_regions, dtype=dtype)

    def forward(self, support_feats: Tensor, query_feats: Tensor) -> Tensor:
        w = self.weight().values
        return reshape(w, (1, 1, w.shape[0]))  # broadcasts over (S, Q, hw)


class MetaHead(Module):
    kind = "meta"

    def __init__(self, channels: int, hidden: int = 64, rng=None, dtype=np.float32):
        super().__init__()
        self.net = MetaWeightNet(
            MetaLearnerConfig(in_channels=2 * channels, hidden_channels=hidden),
            rng=rng, dtype=dtype,
        )

    def forward(self, support_feats: Tensor, query_feats: Tensor) -> Tensor:
        s, c, h, w = support_feats.shape
        q = query_feats.shape[0]
        sup_idx = np.repeat(np.arange(s), q)
        qry_idx = np.tile(np.arange(q), s)
        pairs = concat(
            [
                index_select(support_feats, 0, sup_idx),
                index_select(query_feats, 0, qry_idx),
            ],
            axis=1,
        )  # (S*Q, 2C, h, w)
        return reshape(self.net(pairs), (s, q, h * w))


def build_head(
    kind: str,
    channels: int,
    n_regions: int,
    hidden: int = 64,
    rng=None,
    dtype=np.float32,
) -> Module:
    if kind == "fixed":
        return FixedHead(n_regions, dtype=dtype)
    if kind == "learnable":
        return LearnableHead(n_regions, dtype=dtype)
    if kind == "meta":
        return MetaHead(channels, hidden=hidden, rng=rng, dtype=dtype)
    raise ValueError(f"unknown head {kind!r}; choose from {HEAD_KINDS}")
