"""Feedback controller for the mixing weights and the consistency strength.

Two signals drive it: the mean prediction entropy on intermediate-domain
samples and the variance of the flattened loss gradient. Each is divided by a
decayed running maximum before use.

Mixing-weight modes
-------------------
``literal``
    Subtract the same scalar signal from every weight and project back onto
    the simplex. A uniform shift of a simplex point projects back to the
    point itself, so this mode never changes alpha. It is kept so the rule
    can be tested as stated.
``per_domain``
    Replace the scalar entropy with one entropy per source domain (computed
    on that domain's intermediate sub-batch). Domains whose mixed samples are
    harder to classify lose weight. This is the training default.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .msidg import MixWeights, check_simplex

NORMALIZER_FLOOR = 1e-12
ALPHA_MODES = ("literal", "per_domain")


@dataclass(frozen=True)
class ControllerConfig:
    eta_alpha: float = 0.05
    eta_lambda: float = 0.05
    lambda_max: float = 1.0
    lambda_init: float = 0.1
    decay: float = 0.99
    mode: str = "per_domain"

    def __post_init__(self):
        if self.mode not in ALPHA_MODES:
            raise ConfigError(f"unknown controller mode {self.mode!r}; expected one of {ALPHA_MODES}")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must lie in (0, 1]")
        if self.lambda_max < 0 or not 0 <= self.lambda_init <= self.lambda_max:
            raise ConfigError("need 0 <= lambda_init <= lambda_max")
        if self.eta_alpha < 0 or self.eta_lambda < 0:
            raise ConfigError("controller step sizes must be >= 0")


@dataclass(frozen=True, eq=False)
class ControllerState:
    alpha: np.ndarray
    lambda_pmr: float
    e_max: float = NORMALIZER_FLOOR
    v_max: float = NORMALIZER_FLOOR
    eta_alpha: float = 0.05
    eta_lambda: float = 0.05
    lambda_max: float = 1.0
    decay: float = 0.99
    updates: int = field(default=0, compare=False)

    @classmethod
    def initial(cls, num_domains: int, cfg: ControllerConfig) -> "ControllerState":
        return cls(
            alpha=MixWeights.uniform(num_domains).alpha,
            lambda_pmr=cfg.lambda_init,
            eta_alpha=cfg.eta_alpha,
            eta_lambda=cfg.eta_lambda,
            lambda_max=cfg.lambda_max,
            decay=cfg.decay,
        )

    def check(self) -> None:
        check_simplex(np.asarray(self.alpha), 1e-9)
        if not 0 <= self.lambda_pmr <= self.lambda_max:
            raise ContractError(f"lambda_pmr {self.lambda_pmr} outside [0, {self.lambda_max}]")


def batch_entropy(posteriors) -> float:
    """Mean Shannon entropy (nats) of the rows, with 0 log 0 taken as 0."""
    p = np.asarray(getattr(posteriors, "data", posteriors), dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ContractError(f"batch_entropy needs a non-empty (batch, classes) array, got {p.shape}")
    if np.any(p < 0):
        raise ContractError("batch_entropy: negative probabilities")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ContractError("batch_entropy: rows must sum to 1")
    safe = np.where(p > 0, p, 1.0)
    # + 0.0 turns the -0.0 of all one-hot rows into 0.0
    return float(-(p * np.log(safe)).sum(axis=1).mean()) + 0.0


def gradient_variance(grads: Mapping[str, np.ndarray] | Sequence[np.ndarray]) -> float:
    """Population variance of all gradient components flattened together."""
    arrays = list(grads.values()) if isinstance(grads, Mapping) else list(grads)
    if not arrays:
        raise ContractError("gradient_variance: no gradients")
    flat = np.concatenate([np.asarray(g, dtype=np.float64).reshape(-1) for g in arrays])
    if flat.size == 0:
        raise ContractError("gradient_variance: gradients are empty")
    return float(flat.var())


def update_normalizers(state: ControllerState, E: float, V: float) -> ControllerState:
    e_max = max(state.decay * state.e_max, float(E), NORMALIZER_FLOOR)
    v_max = max(state.decay * state.v_max, float(V), NORMALIZER_FLOOR)
    return replace(state, e_max=e_max, v_max=v_max)


def simplex_project(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ContractError("simplex_project: empty vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u * k > css - 1.0)[0][-1]
    tau = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def normalized_signal(state: ControllerState, E, V: float):
    return np.asarray(E, dtype=np.float64) / state.e_max + V / state.v_max


def update_alpha(
    state: ControllerState,
    E: float,
    V: float,
    mode: str = "literal",
    domain_entropies: Sequence[float] | None = None,
) -> ControllerState:
    if mode == "literal":
        signal = normalized_signal(state, E, V) * np.ones_like(state.alpha)
    elif mode == "per_domain":
        if domain_entropies is None or len(domain_entropies) != len(state.alpha):
            raise ContractError("per_domain mode needs one entropy per domain")
        signal = normalized_signal(state, domain_entropies, V)
    else:
        raise ConfigError(f"unknown controller mode {mode!r}; expected one of {ALPHA_MODES}")
    alpha = simplex_project(state.alpha - state.eta_alpha * signal)
    return replace(state, alpha=alpha)


def update_lambda(state: ControllerState, E: float, V: float) -> ControllerState:
    step = state.eta_lambda * float(normalized_signal(state, E, V))
    lam = float(np.clip(state.lambda_pmr + step, 0.0, state.lambda_max))
    return replace(state, lambda_pmr=lam)


def controller_step(
    state: ControllerState,
    E: float,
    V: float,
    mode: str,
    domain_entropies: Sequence[float] | None = None,
    update_weights: bool = True,
) -> ControllerState:
    """Normalizers, then alpha, then lambda, as one feedback update."""
    state = update_normalizers(state, E, V)
    if update_weights:
        state = update_alpha(state, E, V, mode, domain_entropies)
    state = update_lambda(state, E, V)
    return replace(state, updates=state.updates + 1)
