"""Temporal pooling forwards: statistic pooling and multi-query multi-head
attention (MQMHA) pooling.

Both reduce a (T, D) frame matrix to a fixed vector of attention-weighted
means and standard deviations.  Statistic pooling is the uniform-attention
special case, computed through the same weighted-moment kernel so the
Q=H=1, zero-parameter MQMHA reduction is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

STD_EPS = 1e-10


def _weighted_moments(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """[weighted mean ‖ weighted std] per dimension; weights sum to 1."""
    mean = weights @ x
    var = weights @ (x - mean) ** 2
    return np.concatenate([mean, np.sqrt(var + STD_EPS)])


def statistic_pooling(frames: np.ndarray) -> np.ndarray:
    """Per-dimension mean and population std of the frames, concatenated."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise DataError(f"expected a (T>=1, D) frame matrix, got shape {frames.shape}")
    T = frames.shape[0]
    return _weighted_moments(frames, np.full(T, 1.0 / T))


@dataclass
class PoolingParams:
    """Attention parameters: one linear scorer per (query, head) on the head's
    feature slice, shared across time."""

    num_queries: int
    num_heads: int
    score_weights: np.ndarray  # (Q, H, D // H)
    score_bias: np.ndarray     # (Q, H)

    def __post_init__(self):
        self.score_weights = np.asarray(self.score_weights, dtype=np.float64)
        self.score_bias = np.asarray(self.score_bias, dtype=np.float64)
        if self.num_queries < 1 or self.num_heads < 1:
            raise DataError("query and head counts must be positive")
        if self.score_weights.shape[:2] != (self.num_queries, self.num_heads):
            raise DataError(f"score weights shape {self.score_weights.shape} does not match "
                            f"Q={self.num_queries}, H={self.num_heads}")
        if self.score_bias.shape != (self.num_queries, self.num_heads):
            raise DataError(f"score bias shape {self.score_bias.shape} does not match "
                            f"Q={self.num_queries}, H={self.num_heads}")

    @classmethod
    def zeros(cls, dim: int, num_queries: int = 1, num_heads: int = 1) -> "PoolingParams":
        if dim % num_heads:
            raise DataError(f"dim {dim} not divisible by {num_heads} heads")
        return cls(num_queries, num_heads,
                   np.zeros((num_queries, num_heads, dim // num_heads)),
                   np.zeros((num_queries, num_heads)))

    @classmethod
    def random(cls, dim: int, num_queries: int, num_heads: int, rng,
               scale: float = 0.5) -> "PoolingParams":
        if dim % num_heads:
            raise DataError(f"dim {dim} not divisible by {num_heads} heads")
        return cls(num_queries, num_heads,
                   scale * rng.standard_normal((num_queries, num_heads, dim // num_heads)),
                   scale * rng.standard_normal((num_queries, num_heads)))


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x))
    return e / e.sum()


def mqmha_pooling(frames: np.ndarray, params: PoolingParams) -> np.ndarray:
    """Multi-query multi-head attention pooling.

    Per (query, head): softmax attention over time on the head's D/H feature
    slice, emitting the attention-weighted mean and std of that slice.  All
    Q*H blocks are concatenated, giving Q*H*(2*D/H) outputs.  There is no
    positional encoding, so the result is invariant to frame permutation.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise DataError(f"expected a (T>=1, D) frame matrix, got shape {frames.shape}")
    D = frames.shape[1]
    Q, H = params.num_queries, params.num_heads
    if D % H:
        raise DataError(f"feature dim {D} not divisible by {H} heads")
    d = D // H
    out = []
    for q in range(Q):
        for h in range(H):
            piece = frames[:, h * d:(h + 1) * d]
            att = _softmax(piece @ params.score_weights[q, h] + params.score_bias[q, h])
            out.append(_weighted_moments(piece, att))
    return np.concatenate(out)
