"""Training objectives: identity CE, batch-hard triplet, pseudo-mirror consistency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

LOG_GUARD = 1e-12


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.3
    lambda_tri: float = 1.0
    lambda_rel: float = 0.5
    pair_policy: str = "all"  # "all" | "sampled"
    num_pairs: int = 256
    triplet_mode: str = "batch_hard"  # "batch_hard" | "random"

    def __post_init__(self):
        for name in ("margin", "lambda_tri", "lambda_rel"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"LossConfig.{name} must be finite and >= 0, got {v}")
        if self.pair_policy not in ("all", "sampled"):
            raise ConfigError(f"unknown pair_policy {self.pair_policy!r}")
        if self.triplet_mode not in ("batch_hard", "random"):
            raise ConfigError(f"unknown triplet_mode {self.triplet_mode!r}")
        if self.pair_policy == "sampled" and self.num_pairs < 1:
            raise ConfigError("num_pairs must be >= 1 for the sampled pair policy")


def id_loss(posteriors, labels) -> Tensor:
    """Mean negative log posterior of the true identity."""
    p = T.as_tensor(posteriors)
    labels = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or labels.shape != (p.shape[0],):
        raise ShapeError(f"id_loss: posteriors {p.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= p.shape[1]):
        raise ContractError(f"id_loss: labels must lie in [0, {p.shape[1]})")
    picked = T.gather(p, np.arange(labels.size), labels)
    return T.neg(T.mean(T.log(T.add(picked, LOG_GUARD))))


def euclidean_distances(z) -> Tensor:
    return T.sqrt(T.pairwise_sq_dists(z, z))


def triplet_indices(dist: np.ndarray, labels: np.ndarray, mode: str = "batch_hard", rng=None):
    """Positive and negative partner of every anchor.

    batch_hard: farthest same-identity sample and nearest other-identity
    sample (first index on ties). random: uniform picks from each set.
    """
    labels = np.asarray(labels)
    n = labels.size
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    for a in range(n):
        if not pos_mask[a].any():
            raise ContractError(f"anchor {a} (label {labels[a]}) has no positive in the batch")
        if not neg_mask[a].any():
            raise ContractError(f"anchor {a} (label {labels[a]}) has no negative in the batch")
    if mode == "batch_hard":
        pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
        neg = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
    elif mode == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        pos = np.array([rng.choice(np.flatnonzero(pos_mask[a])) for a in range(n)])
        neg = np.array([rng.choice(np.flatnonzero(neg_mask[a])) for a in range(n)])
    else:
        raise ConfigError(f"unknown triplet mode {mode!r}")
    return pos, neg


def batch_hard_triplet(z_hat, labels, margin: float, mode: str = "batch_hard", rng=None) -> Tensor:
    """Mean over anchors of relu(d(a, p) - d(a, n) + margin)."""
    z_hat = T.as_tensor(z_hat)
    labels = np.asarray(labels)
    if z_hat.ndim != 2 or labels.shape != (z_hat.shape[0],):
        raise ShapeError(f"triplet: embeddings {z_hat.shape} vs labels {labels.shape}")
    dist = euclidean_distances(z_hat)
    pos, neg = triplet_indices(dist.data, labels, mode, rng)
    anchors = np.arange(labels.size)
    d_ap = T.gather(dist, anchors, pos)
    d_an = T.gather(dist, anchors, neg)
    return T.mean(T.relu(T.add(T.sub(d_ap, d_an), margin)))


def supervised_loss(posteriors, z_hat, labels, cfg: LossConfig, rng=None) -> Tensor:
    loss = id_loss(posteriors, labels)
    if cfg.lambda_tri == 0:
        return loss
    tri = batch_hard_triplet(z_hat, labels, cfg.margin, cfg.triplet_mode, rng)
    return T.add(loss, T.mul(tri, cfg.lambda_tri))


def pmr_point_loss(z_hat, z_mirror) -> Tensor:
    """Mean squared L2 distance between each embedding and its mirror."""
    a, b = T.as_tensor(z_hat), T.as_tensor(z_mirror)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"pmr_point_loss: shapes {a.shape} and {b.shape} differ")
    return T.mean(T.sum_(T.square(T.sub(a, b)), axis=1))


def all_pairs(n: int) -> np.ndarray:
    i, j = np.triu_indices(n, k=1)
    return np.stack([i, j], axis=1)


def sample_pairs(n: int, count: int, rng) -> np.ndarray:
    pairs = all_pairs(n)
    if count >= len(pairs):
        return pairs
    return pairs[np.sort(rng.choice(len(pairs), size=count, replace=False))]


def relational_loss(z_hat, z_mirror, pairs) -> Tensor:
    """Mean absolute change of pairwise distances between the two embedding sets."""
    a, b = T.as_tensor(z_hat), T.as_tensor(z_mirror)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"relational_loss: shapes {a.shape} and {b.shape} differ")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise ContractError("relational_loss: pair set is empty")
    if pairs.min() < 0 or pairs.max() >= a.shape[0]:
        raise ContractError(f"relational_loss: pair indices must lie in [0, {a.shape[0]})")
    d = T.gather(euclidean_distances(a), pairs[:, 0], pairs[:, 1])
    d_m = T.gather(euclidean_distances(b), pairs[:, 0], pairs[:, 1])
    return T.mean(T.abs_(T.sub(d, d_m)))


def pmr_terms(z_hat, z_mirror, cfg: LossConfig, rng=None) -> tuple[Tensor, Tensor | None]:
    """(point term, relational term); the relational term is None when lambda_rel == 0."""
    point = pmr_point_loss(z_hat, z_mirror)
    if cfg.lambda_rel == 0:
        return point, None
    n = T.as_tensor(z_hat).shape[0]
    if cfg.pair_policy == "all":
        pairs = all_pairs(n)
    else:
        pairs = sample_pairs(n, cfg.num_pairs, rng if rng is not None else np.random.default_rng(0))
    return point, relational_loss(z_hat, z_mirror, pairs)


def pmr_loss(z_hat, z_mirror, cfg: LossConfig, rng=None) -> Tensor:
    point, rel = pmr_terms(z_hat, z_mirror, cfg, rng)
    return point if rel is None else T.add(point, T.mul(rel, cfg.lambda_rel))


def total_loss(sup, pmr, lambda_pmr: float) -> Tensor:
    if lambda_pmr < 0:
        raise ContractError("lambda_pmr must be >= 0")
    return T.add(sup, T.mul(pmr, float(lambda_pmr)))
