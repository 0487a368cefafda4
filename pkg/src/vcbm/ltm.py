"""Learnable token merging.

Tokens are softly assigned to K learnable cluster centres using a weighted
sum of cosine feature distance, normalized spatial distance and normalized
temporal distance; merged tokens are the assignment-weighted means of the
tokens. Everything is built from tape ops so gradients reach the centres,
their positions, the distance weights and the tokens themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tape
from .encoder import TokenSet
from .tape import Tensor

S_MAX = math.sqrt(2.0)
T_MAX = 1.0


@dataclass
class ClusterParams:
    centers: Tensor  # (K, Dim')
    positions: Tensor  # (K, 3) learnable (x, y, t)
    weight_logits: Tensor  # (3,) -> (alpha, beta, gamma) by softmax
    s_max: float = S_MAX
    t_max: float = T_MAX

    @classmethod
    def init(cls, rng: np.random.Generator, k: int, dim: int) -> "ClusterParams":
        if k < 1:
            raise ValueError(f"need at least one cluster, got K={k}")
        centers = rng.normal(0.0, np.sqrt(1.0 / dim), size=(k, dim))
        positions = rng.uniform(0.0, 1.0, size=(k, 3))
        return cls(
            tape.parameter(centers, "ltm.centers"),
            tape.parameter(positions, "ltm.positions"),
            tape.parameter(np.zeros(3), "ltm.weight_logits"),
        )

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    def distance_weights(self) -> Tensor:
        return tape.softmax(self.weight_logits, axis=0)


@dataclass
class Assignment:
    weights: Tensor  # (..., N, K)
    distances: Tensor  # (..., N, K)


@dataclass
class MergedTokenSet:
    features: Tensor  # (..., K, Dim')
    coords: Tensor  # (..., K, 3)
    assignment: Assignment

    @property
    def k(self) -> int:
        return self.features.shape[-2]


def check_cluster_count(k: int, n: int) -> None:
    if k < 1 or (k > 1 and k > n // 2):
        raise ValueError(f"K={k} clusters is not compact for N={n} tokens (need K <= N/2 or K = 1)")


def _unit_rows(x) -> Tensor:
    return tape.divide(x, tape.l2_norm(x, axis=-1, keepdims=True))


def feature_distance(tokens: TokenSet, clusters: ClusterParams, centers=None) -> Tensor:
    """1 - cos(token, centre); ``(..., N, K)``."""
    centers = clusters.centers if centers is None else centers
    if tokens.dim != centers.shape[-1]:
        raise ValueError(f"token width {tokens.dim} != centre width {centers.shape[-1]}")
    cos = tape.matmul(_unit_rows(tokens.features), _unit_rows(centers), transpose_b=True)
    return tape.sub(1.0, cos)


def _coord_delta(tokens: TokenSet, positions: Tensor, cols) -> Tensor:
    # coords (N, 1, c) against positions (..., 1, K, c) -> (..., N, K, c)
    pos = tape.gather(positions, cols, axis=-1)
    lead = pos.shape[:-2]
    pos = tape.reshape(pos, lead + (1,) + pos.shape[-2:])
    pts = Tensor(tokens.coords[:, None, cols])
    return tape.sub(pts, pos)


def spatial_distance(tokens: TokenSet, clusters: ClusterParams, positions=None) -> Tensor:
    positions = clusters.positions if positions is None else positions
    d = tape.l2_norm(_coord_delta(tokens, positions, [0, 1]), axis=-1)
    return tape.scalar_mul(d, 1.0 / clusters.s_max)


def temporal_distance(tokens: TokenSet, clusters: ClusterParams, positions=None) -> Tensor:
    # |dt| as a guarded one-element norm, so it stays differentiable at dt = 0
    positions = clusters.positions if positions is None else positions
    d = tape.l2_norm(_coord_delta(tokens, positions, [2]), axis=-1)
    return tape.scalar_mul(d, 1.0 / clusters.t_max)


def composite_distance(tokens: TokenSet, clusters: ClusterParams, centers=None, positions=None) -> Tensor:
    w = clusters.distance_weights()
    alpha, beta, gamma = (tape.gather(w, [i], axis=0) for i in range(3))
    d = tape.mul(alpha, feature_distance(tokens, clusters, centers))
    d = tape.add(d, tape.mul(beta, spatial_distance(tokens, clusters, positions)))
    return tape.add(d, tape.mul(gamma, temporal_distance(tokens, clusters, positions)))


def soft_assign(distances: Tensor) -> Tensor:
    return tape.softmax(tape.negate(distances), axis=-1)


def update_centers(tokens: TokenSet, weights: Tensor) -> tuple[Tensor, Tensor]:
    """Weighted means of token features and coords, one row per cluster."""
    lead = weights.shape[:-2]
    n = tokens.n
    ones = Tensor(np.ones(lead + (n, 1)))
    mass = tape.matmul(weights, ones, transpose_a=True)  # (..., K, 1)
    feats = tape.divide(tape.matmul(weights, tokens.features, transpose_a=True), mass)
    coords = tape.divide(tape.matmul(weights, Tensor(tokens.coords), transpose_a=True), mass)
    return feats, coords


def merge(tokens: TokenSet, clusters: ClusterParams, iterations: int = 1) -> MergedTokenSet:
    """Soft-cluster ``tokens`` into K merged tokens (cluster-index order).

    With ``iterations > 1`` the merged features/coords of one pass act as
    the centres/positions of the next; the learnable parameters themselves
    are never overwritten.
    """
    check_cluster_count(clusters.k, tokens.n)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    centers, positions = None, None
    for _ in range(iterations):
        dist = composite_distance(tokens, clusters, centers, positions)
        weights = soft_assign(dist)
        feats, coords = update_centers(tokens, weights)
        centers, positions = feats, coords
    return MergedTokenSet(feats, coords, Assignment(weights, dist))
