"""Intermediate-domain features from mixed per-domain channel statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .model import embed, l2_normalize
from .tensor import Tensor

DEFAULT_EPS = 1e-5


@dataclass(frozen=True, eq=False)
class ChannelStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.shape != sigma.shape or mu.ndim != 1:
            raise ShapeError(f"ChannelStats: mu {mu.shape} and sigma {sigma.shape} must be equal 1-d")
        if np.any(sigma < 0):
            raise ContractError("ChannelStats: sigma must be non-negative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def channels(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True, eq=False)
class MixWeights:
    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        check_simplex(a, 1e-9)
        object.__setattr__(self, "alpha", a)

    @classmethod
    def uniform(cls, k: int) -> "MixWeights":
        return cls(np.full(k, 1.0 / k))

    def __len__(self):
        return self.alpha.shape[0]


def check_simplex(alpha: np.ndarray, tol: float) -> None:
    if alpha.size == 0:
        raise ContractError("mixing weights are empty")
    if np.any(alpha < -tol) or abs(alpha.sum() - 1.0) > tol:
        raise ContractError(f"mixing weights {alpha.tolist()} are off the simplex (tol {tol})")


def _alpha_array(alpha) -> np.ndarray:
    return alpha.alpha if isinstance(alpha, MixWeights) else np.asarray(alpha, dtype=np.float64).reshape(-1)


def channel_stats(f) -> ChannelStats:
    """Per-channel mean and population std over the batch axis."""
    data = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ShapeError(f"channel_stats needs a non-empty (batch, channels) map, got {data.shape}")
    return ChannelStats(data.mean(axis=0), data.std(axis=0))


def normalize_content(f, eps: float = DEFAULT_EPS) -> Tensor:
    """(f - mu(f)) / (sigma(f) + eps), differentiable through f's own statistics."""
    f = T.as_tensor(f)
    mu = T.mean(f, axis=0, keepdims=True)
    sigma = T.std(f, axis=0, keepdims=True)
    return T.div(T.sub(f, mu), T.add(sigma, eps))


def statistics_transfer(f_content, donor: ChannelStats, eps: float = DEFAULT_EPS) -> Tensor:
    """Re-style ``f_content`` so its channels carry the donor's mean and std.

    Donor statistics are constants; gradients flow only into ``f_content``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    f = T.as_tensor(f_content)
    if f.ndim != 2 or f.shape[1] != donor.channels:
        raise ShapeError(f"statistics_transfer: content {f.shape} vs donor with {donor.channels} channels")
    return T.add(T.mul(normalize_content(f, eps), donor.sigma), donor.mu)


def aggregate_stats(stats: Sequence[ChannelStats], alpha) -> ChannelStats:
    a = _alpha_array(alpha)
    if len(stats) != a.shape[0]:
        raise ContractError(f"{len(stats)} donor statistics but {a.shape[0]} weights")
    mu = sum(w * s.mu for w, s in zip(a, stats))
    sigma = sum(w * s.sigma for w, s in zip(a, stats))
    return ChannelStats(mu, np.maximum(sigma, 0.0))


def multi_source_mix(f, stats: Sequence[ChannelStats], alpha, eps: float = DEFAULT_EPS) -> Tensor:
    """Weighted sum of one statistics transfer per donor domain."""
    a = _alpha_array(alpha)
    check_simplex(a, 1e-6)
    if len(stats) != a.shape[0]:
        raise ContractError(f"{len(stats)} donor statistics but {a.shape[0]} weights")
    f = T.as_tensor(f)
    for s in stats:
        if s.channels != f.shape[1]:
            raise ShapeError(f"donor has {s.channels} channels, features have {f.shape[1]}")
    normed = normalize_content(f, eps)
    out = None
    for w, s in zip(a, stats):
        term = T.mul(T.add(T.mul(normed, s.sigma), s.mu), float(w))
        out = term if out is None else T.add(out, term)
    return out


def intermediate_embed(params: Mapping, f_tilde) -> Tensor:
    return l2_normalize(embed(params, f_tilde))


def intermediate_features(
    f: Tensor,
    domains: np.ndarray,
    alpha,
    domain_ids: Sequence[int],
    eps: float = DEFAULT_EPS,
    exclude_own: bool = False,
    donor_stats: Mapping[int, ChannelStats] | None = None,
) -> Tensor:
    """Build the intermediate-domain batch from a mixed-domain feature batch.

    Each domain's sub-batch is normalized by its own statistics and re-styled
    with the alpha-weighted aggregate of the (detached) per-domain donor
    statistics. Weights of domains absent from the batch, and of the anchor's
    own domain when ``exclude_own`` is set, are dropped and the rest
    renormalized. Rows come back in their original order.

    ``donor_stats`` (domain id -> stats) replaces the batch estimates, which
    pins the donors when the same map is evaluated at perturbed inputs.
    """
    f = T.as_tensor(f)
    a = _alpha_array(alpha)
    domain_ids = list(domain_ids)
    if a.shape[0] != len(domain_ids):
        raise ContractError(f"{a.shape[0]} mixing weights for {len(domain_ids)} domains")
    domains = np.asarray(domains)
    unknown = set(domains.tolist()) - set(domain_ids)
    if unknown:
        raise ContractError(f"batch rows belong to unknown domains {sorted(unknown)}")
    present = [k for k, d in enumerate(domain_ids) if np.any(domains == d)]
    if donor_stats is None:
        stats = {k: channel_stats(f.data[domains == domain_ids[k]]) for k in present}
    else:
        stats = {k: donor_stats[domain_ids[k]] for k in present}

    parts, order = [], []
    for k in present:
        rows = np.flatnonzero(domains == domain_ids[k])
        donors = [j for j in present if not (exclude_own and j == k)] or [k]
        w = a[donors]
        w = w / w.sum() if w.sum() > 0 else np.full(len(donors), 1.0 / len(donors))
        donor = aggregate_stats([stats[j] for j in donors], w)
        parts.append(statistics_transfer(T.take_rows(f, rows), donor, eps))
        order.append(rows)
    order = np.concatenate(order)
    mixed = T.concat_rows(parts)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    return T.take_rows(mixed, inverse)
