"""Label-anchored t-SNE and the frame-shuffling severity sweep."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .metrics import TABLE_COLUMNS
from .schema import EGO_EXPLANATIONS
from .synthdata import check_severity

log = logging.getLogger(__name__)

EARLY_EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250


def explanation_anchors(features, masks) -> tuple[np.ndarray, np.ndarray]:
    """Masked mean feature per explanation.

    Returns ``(anchors, present)``; anchors of explanations with no active
    sample are left at zero and flagged ``False`` in ``present``.
    """
    feats = np.asarray(features, dtype=np.float64)
    m = np.asarray(masks, dtype=np.float64)
    if feats.ndim != 2 or m.ndim != 2 or feats.shape[0] != m.shape[0]:
        raise ValueError(f"features {feats.shape} and masks {m.shape} do not align")
    if not np.isin(m, (0.0, 1.0)).all():
        raise ValueError("masks must be 0/1 indicators")
    counts = m.sum(axis=0)
    present = counts > 0
    anchors = np.zeros((m.shape[1], feats.shape[1]))
    anchors[present] = (m.T @ feats)[present] / counts[present, None]
    return anchors, present


def _sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_affinities(d: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 100) -> np.ndarray:
    # binary search on the Gaussian precision of each row to hit log(perplexity) entropy
    n = d.shape[0]
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d[i], i)
        lo, hi, beta = 0.0, np.inf, 1.0
        for _ in range(max_iter):
            w = np.exp(-(di - di.min()) * beta)
            sw = w.sum()
            h = np.log(sw) + beta * np.sum((di - di.min()) * w) / sw
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        p[i, np.arange(n) != i] = w / sw
    return p


@dataclass
class TSNEResult:
    coords: np.ndarray
    kl_checkpoints: list[tuple[int, float]] = field(default_factory=list)


def tsne_embed(
    vectors,
    perplexity: float = 30.0,
    iterations: int = 1000,
    seed: int = 0,
    learning_rate: float = 200.0,
    checkpoint_every: int = 50,
) -> TSNEResult:
    """Exact t-SNE to two dimensions.

    Early exaggeration (x12) runs for the first 250 iterations with momentum
    0.5, then momentum 0.8; gains follow the usual delta-bar-delta rule. KL
    checkpoints are recorded only after the exaggeration phase, where the
    objective is the true one.
    """
    x = np.array(vectors, dtype=np.float64)
    n = x.shape[0]
    if x.ndim != 2 or n < 3:
        raise ValueError(f"need at least 3 vectors, got shape {x.shape}")
    if not perplexity < (n - 1) / 3:
        raise ValueError(f"perplexity {perplexity} too large for {n} points (need < {(n - 1) / 3:.3g})")
    rng = np.random.default_rng(seed)
    _, counts = np.unique(x, axis=0, return_counts=True)
    if (counts > 1).any():
        log.info("t-SNE: %d duplicate vectors jittered by 1e-6", int(np.sum(counts - 1)))
        x = x + rng.normal(0.0, 1e-6, size=x.shape)

    cond = _row_affinities(_sq_dists(x), perplexity)
    p = np.maximum((cond + cond.T) / (2.0 * n), 1e-12)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    result = TSNEResult(y)

    for it in range(iterations):
        exaggerate = it < EXAGGERATION_ITERS
        pp = p * EARLY_EXAGGERATION if exaggerate else p
        num = 1.0 / (1.0 + _sq_dists(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        pq = (pp - q) * num
        grad = 4.0 * (np.diag(pq.sum(axis=1)) - pq) @ y
        momentum = 0.5 if exaggerate else 0.8
        same = np.sign(grad) == np.sign(velocity)
        gains = np.maximum(np.where(same, gains * 0.8, gains + 0.2), 0.01)
        velocity = momentum * velocity - learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
        done = it + 1
        if not exaggerate and (done % checkpoint_every == 0 or done == iterations):
            mask = ~np.eye(n, dtype=bool)
            kl = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
            result.kl_checkpoints.append((done, kl))
    result.coords = y
    return result


@dataclass
class AnchoredEmbedding:
    points: np.ndarray  # (T, 2)
    anchors: np.ndarray  # (17, 2); NaN rows for absent labels
    anchor_features: np.ndarray  # (17, d)
    mask_matrix: np.ndarray  # (T, 17)
    present: np.ndarray  # (17,) bool
    kl_checkpoints: list = field(default_factory=list)


def anchored_embedding(features, masks, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0) -> AnchoredEmbedding:
    """Embed samples and the present label anchors jointly."""
    feats = np.asarray(features, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    anchor_feats, present = explanation_anchors(feats, masks)
    stacked = np.vstack([feats, anchor_feats[present]])
    res = tsne_embed(stacked, perplexity, iterations, seed)
    n = feats.shape[0]
    anchors = np.full((masks.shape[1], 2), np.nan)
    anchors[present] = res.coords[n:]
    return AnchoredEmbedding(res.coords[:n], anchors, anchor_feats, masks, present, res.kl_checkpoints)


def write_embedding(path, emb: AnchoredEmbedding, sample_ids: Sequence[str], label_names: Sequence[str] = EGO_EXPLANATIONS) -> int:
    """CSV rows (id, kind, label, x, y): samples carry their bit string, anchors the label name."""
    if len(sample_ids) != emb.points.shape[0]:
        raise ValueError("one id per embedded sample required")
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "kind", "label", "x", "y"])
        for sid, bits, (x, y) in zip(sample_ids, emb.mask_matrix, emb.points):
            w.writerow([sid, "sample", "".join(str(int(b)) for b in bits), repr(float(x)), repr(float(y))])
            rows += 1
        for k in np.flatnonzero(emb.present):
            x, y = emb.anchors[k]
            w.writerow([f"anchor{k:02d}", "anchor", label_names[k], repr(float(x)), repr(float(y))])
            rows += 1
    return rows


def severity_sweep(results: dict[int, dict]) -> list[dict]:
    """Order per-severity metric rows by increasing s, rejecting invalid s."""
    rows = []
    for s in sorted(results):
        check_severity(s)
        rows.append({"severity": s, **{k: results[s][k] for k in TABLE_COLUMNS}})
    return rows


def write_sweep(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["severity", *TABLE_COLUMNS])
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})

