"""Supervised pre-training, intermediate-domain training and source-free refinement."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import DomainDataset, Sample, batch_arrays, derive_rng, pk_sample
from .dfc import ControllerConfig, ControllerState, batch_entropy, controller_step, gradient_variance
from .errors import ConfigError, ContractError, TrainingError
from .losses import LossConfig, batch_hard_triplet, id_loss, pmr_terms
from .metrics import kmeans
from .model import ModelConfig, classify, forward, init_params, l2_normalize, embed
from .msidg import DEFAULT_EPS, intermediate_embed, intermediate_features
from .tensor import GradientTape

log = logging.getLogger(__name__)

CSV_BASE_COLUMNS = (
    "stage",
    "epoch",
    "step",
    "loss_total",
    "loss_id",
    "loss_tri",
    "loss_pmr_point",
    "loss_rel",
    "entropy",
    "grad_var",
    "lambda_pmr",
    "e_max",
    "v_max",
)


@dataclass(frozen=True)
class TrainConfig:
    epochs_sup: int = 30
    epochs_aida: int = 20
    epochs_sf: int = 10
    P: int = 8
    K_inst: int = 4
    steps_per_epoch: int = 0  # 0: one pass worth of samples
    lr_sup: float = 3.0e-4
    lr_aida: float = 3.0e-4
    lr_sf: float = 1.0e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    classify_on_raw: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    use_msidg: bool = True
    use_pmr: bool = True
    use_dfc: bool = True
    lambda_aug: float = 1.0  # weight of the supervised loss on intermediate embeddings
    msidg_eps: float = DEFAULT_EPS
    exclude_own_domain: bool = False
    sf_clusters: int = 2
    sf_exclude_own: bool = True
    sf_consistency: float = 1.0
    sf_pseudo_labels: bool = True
    sf_pseudo_k: int = 32
    sf_temperature: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs_sup", "epochs_aida", "epochs_sf", "steps_per_epoch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"TrainConfig.{name} must be >= 0")
        for name in ("lr_sup", "lr_aida", "lr_sf", "adam_eps", "msidg_eps", "sf_temperature"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"TrainConfig.{name} must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam decay rates must lie in [0, 1)")
        if self.lambda_aug < 0 or self.sf_consistency < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.sf_clusters < 1 or self.sf_pseudo_k < 1:
            raise ConfigError("cluster counts must be >= 1")


@dataclass(frozen=True, eq=False)
class AdamMoments:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamMoments":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class TrainState:
    params: dict
    moments: AdamMoments
    controller: ControllerState
    domain_ids: tuple[int, ...]
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)  # one dict per optimizer step
    epoch_log: list = field(default_factory=list)  # one dict per epoch

    def copy(self) -> "TrainState":
        return TrainState(
            params={k: v.copy() for k, v in self.params.items()},
            moments=AdamMoments(
                {k: v.copy() for k, v in self.moments.m.items()},
                {k: v.copy() for k, v in self.moments.v.items()},
                self.moments.t,
            ),
            controller=self.controller,
            domain_ids=self.domain_ids,
            epoch=self.epoch,
            step=self.step,
            history=list(self.history),
            epoch_log=list(self.epoch_log),
        )


def optimizer_step(params, grads, moments: AdamMoments, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new (params, moments)."""
    t = moments.t + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in params:
        g = grads[name]
        m = beta1 * moments.m[name] + (1.0 - beta1) * g
        v = beta2 * moments.v[name] + (1.0 - beta2) * (g * g)
        new_p[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamMoments(new_m, new_v, t)


def init_state(config: TrainConfig, sources: Sequence[DomainDataset]) -> TrainState:
    if not sources:
        raise ContractError("training needs at least one source domain")
    labels = np.concatenate([ds.labels for ds in sources])
    label_sets = [set(ds.labels.tolist()) for ds in sources]
    for i in range(len(label_sets)):
        for j in range(i + 1, len(label_sets)):
            if label_sets[i] & label_sets[j]:
                raise ContractError(f"source domains {i} and {j} share identity labels; run make_disjoint first")
    mcfg = ModelConfig(
        feature_dim=sources[0].spec.feature_dim,
        hidden_dims=tuple(config.hidden_dims),
        embed_dim=config.embed_dim,
        num_classes=int(labels.max()) + 1,
    )
    params = init_params(mcfg, derive_rng(config.seed, "init"))
    return TrainState(
        params=params,
        moments=AdamMoments.zeros_like(params),
        controller=ControllerState.initial(len(sources), config.controller),
        domain_ids=tuple(ds.spec.domain_id for ds in sources),
    )


def steps_per_epoch(config: TrainConfig, num_samples: int) -> int:
    if config.steps_per_epoch:
        return config.steps_per_epoch
    return max(1, num_samples // (config.P * config.K_inst))


def _check_finite(loss: float, grads: Mapping[str, np.ndarray], stage: str, step: int):
    if not math.isfinite(loss):
        raise TrainingError(f"{stage}: loss became {loss} at step {step}", stage, step)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"{stage}: non-finite gradient for {name} at step {step}", stage, step)


def _row(stage, state: TrainState, **values) -> dict:
    row = {c: "" for c in CSV_BASE_COLUMNS}
    row.update(stage=stage, epoch=state.epoch, step=state.step)
    row.update(lambda_pmr=state.controller.lambda_pmr, e_max=state.controller.e_max, v_max=state.controller.v_max)
    for k, a in enumerate(state.controller.alpha):
        row[f"alpha_{k + 1}"] = float(a)
    row.update({k: (float(v) if v is not None else "") for k, v in values.items()})
    return row


def _sup_terms(p, z_hat, y, cfg: LossConfig):
    l_id = id_loss(p, y)
    l_tri = batch_hard_triplet(z_hat, y, cfg.margin, cfg.triplet_mode) if cfg.lambda_tri > 0 else None
    total = l_id if l_tri is None else T.add(l_id, T.mul(l_tri, cfg.lambda_tri))
    return total, l_id, l_tri


def _val(t):
    return None if t is None else t.item()


def _run_epochs(state, config, n_epochs, stage, lr, sample_batch, step_fn, n_steps):
    for _ in range(n_epochs):
        rng = derive_rng(config.seed, "sf-batches" if stage == "sf" else "batches", state.epoch)
        losses, correct, seen = [], 0, 0
        for _ in range(n_steps):
            batch = sample_batch(rng)
            tape = GradientTape()
            P = tape.watch_all(state.params)
            loss, extras = step_fn(P, batch, state)
            grads = tape.gradient(loss)
            _check_finite(loss.item(), grads, stage, state.step)
            new_params, state.moments = optimizer_step(
                state.params, grads, state.moments, lr, config.beta1, config.beta2, config.adam_eps
            )
            state.params = new_params
            after = extras.pop("after", None)
            if after is not None:
                after(grads)
            state.step += 1
            state.history.append(_row(stage, state, loss_total=loss.item(), **extras.get("log", {})))
            losses.append(loss.item())
            correct += extras.get("correct", 0)
            seen += extras.get("seen", 0)
        state.epoch_log.append(
            {
                "stage": stage,
                "epoch": state.epoch,
                "mean_loss": math.fsum(losses) / len(losses),
                "train_acc": correct / seen if seen else float("nan"),
            }
        )
        log.info("%s epoch %d: loss %.4f", stage, state.epoch, state.epoch_log[-1]["mean_loss"])
        state.epoch += 1
    return state


def stage1_supervised(config: TrainConfig, sources: Sequence[DomainDataset], state: TrainState | None = None) -> TrainState:
    """Identity classification plus triplet training on the labeled sources."""
    state = init_state(config, sources) if state is None else state.copy()
    n = sum(len(ds) for ds in sources)

    def sample(rng):
        return pk_sample(sources, config.P, config.K_inst, rng, domain_balanced=len(sources) > 1)

    def step(P, batch, st):
        x, y, _, _ = batch_arrays(batch)
        _, _, z_hat, p = forward(P, x, config.classify_on_raw)
        total, l_id, l_tri = _sup_terms(p, z_hat, y, config.loss)
        correct = int((p.data.argmax(axis=1) == y).sum())
        return total, {"log": {"loss_id": _val(l_id), "loss_tri": _val(l_tri)}, "correct": correct, "seen": len(y)}

    return _run_epochs(state, config, config.epochs_sup, "sup", config.lr_sup, sample, step, steps_per_epoch(config, n))


def stage2_aida(state: TrainState, config: TrainConfig, sources: Sequence[DomainDataset]) -> TrainState:
    """Supervised training on original and intermediate-domain embeddings,
    consistency regularization, and controller feedback after every step."""
    state = state.copy()
    n = sum(len(ds) for ds in sources)
    domain_ids = state.domain_ids
    if tuple(ds.spec.domain_id for ds in sources) != domain_ids:
        raise ContractError("stage 2 sources differ from the ones the state was initialized with")
    lcfg = config.loss

    def sample(rng):
        return pk_sample(sources, config.P, config.K_inst, rng, domain_balanced=len(sources) > 1)

    def step(P, batch, st):
        x, y, dom, _ = batch_arrays(batch)
        f, _, z_hat, p = forward(P, x, config.classify_on_raw)
        sup, l_id, l_tri = _sup_terms(p, z_hat, y, lcfg)
        loss = sup
        logged = {"loss_id": _val(l_id), "loss_tri": _val(l_tri)}
        ctrl = st.controller
        p_mix = None
        if config.use_msidg:
            f_mix = intermediate_features(f, dom, ctrl.alpha, domain_ids, config.msidg_eps, config.exclude_own_domain)
            z_mix = embed(P, f_mix)
            zt_hat = l2_normalize(z_mix)
            p_mix = classify(P, z_mix if config.classify_on_raw else zt_hat)
            if config.lambda_aug > 0:
                aug, _, _ = _sup_terms(p_mix, zt_hat, y, lcfg)
                loss = T.add(loss, T.mul(aug, config.lambda_aug))
            if config.use_pmr and ctrl.lambda_pmr > 0:
                point, rel = pmr_terms(z_hat, zt_hat, lcfg)
                pmr = point if rel is None else T.add(point, T.mul(rel, lcfg.lambda_rel))
                loss = T.add(loss, T.mul(pmr, ctrl.lambda_pmr))
                logged.update(loss_pmr_point=point.item(), loss_rel=_val(rel))
        probs = (p_mix if p_mix is not None else p).data

        def after(grads):
            E = batch_entropy(probs)
            V = gradient_variance(grads)
            logged.update(entropy=E, grad_var=V)
            if config.use_dfc:
                per_dom = [batch_entropy(probs[dom == d]) if np.any(dom == d) else E for d in domain_ids]
                st.controller = controller_step(
                    st.controller, E, V, config.controller.mode, per_dom, update_weights=config.use_msidg
                )
                st.controller.check()

        correct = int((p.data.argmax(axis=1) == y).sum())
        return loss, {"log": logged, "after": after, "correct": correct, "seen": len(y)}

    return _run_epochs(state, config, config.epochs_aida, "aida", config.lr_aida, sample, step, steps_per_epoch(config, n))


def _target_array(target) -> np.ndarray:
    if isinstance(target, DomainDataset):
        return target.features
    if len(target) and isinstance(target[0], Sample):
        return np.stack([s.raw_vector for s in target])
    return np.asarray(target, dtype=np.float64)


def sf_refine(state: TrainState, config: TrainConfig, target) -> TrainState:
    """Target-only refinement.

    Only the model state and unlabeled target vectors are visible here. Each
    batch is split into pseudo-domains by k-means on its features; every
    pseudo-domain is re-styled with the other clusters' statistics and the
    embeddings are tied to their re-styled mirrors. The controller keeps
    adapting the consistency strength.
    """
    state = state.copy()
    # fresh optimizer: moments accumulated on source batches stay behind
    state.moments = AdamMoments.zeros_like(state.params)
    x_all = _target_array(target)
    batch_size = config.P * config.K_inst
    if x_all.shape[0] < 2:
        raise ContractError("source-free refinement needs at least two target samples")
    batch_size = min(batch_size, x_all.shape[0])
    n_steps = steps_per_epoch(config, x_all.shape[0])
    lcfg = config.loss
    centroids = None
    pseudo = None

    def sample(rng):
        nonlocal centroids, pseudo
        if config.sf_pseudo_labels and (pseudo is None or sample.calls % n_steps == 0):
            emb = l2_normalize(embed(state.params, forward(state.params, x_all)[0])).data
            k = min(config.sf_pseudo_k, x_all.shape[0])
            pseudo = kmeans(emb, k, rng)
            centroids = np.stack([emb[pseudo == c].mean(axis=0) for c in range(k)])
            centroids /= np.maximum(np.linalg.norm(centroids, axis=1, keepdims=True), 1e-12)
        sample.calls += 1
        return rng.choice(x_all.shape[0], size=batch_size, replace=False), rng

    sample.calls = 0

    def step(P, batch, st):
        idx, rng = batch
        x = x_all[idx]
        f, _, z_hat, _ = forward(P, x, config.classify_on_raw)
        k = min(config.sf_clusters, len(idx))
        clusters = kmeans(f.data, k, rng)
        f_mix = intermediate_features(
            f, clusters, np.full(k, 1.0 / k), list(range(k)), config.msidg_eps, exclude_own=config.sf_exclude_own and k > 1
        )
        zt_hat = intermediate_embed(P, f_mix)
        p_mix = classify(P, zt_hat)
        point, rel = pmr_terms(z_hat, zt_hat, lcfg)
        pmr = point if rel is None else T.add(point, T.mul(rel, lcfg.lambda_rel))
        weight = config.sf_consistency * st.controller.lambda_pmr
        loss = T.mul(pmr, weight)
        logged = {"loss_pmr_point": point.item(), "loss_rel": _val(rel)}
        if config.sf_pseudo_labels:
            logits = T.div(T.matmul(z_hat, T.Tensor(centroids.T)), config.sf_temperature)
            l_id = id_loss(T.softmax(logits), pseudo[idx])
            loss = T.add(loss, l_id)
            logged["loss_id"] = l_id.item()

        def after(grads):
            E = batch_entropy(p_mix.data)
            V = gradient_variance(grads)
            logged.update(entropy=E, grad_var=V)
            st.controller = controller_step(st.controller, E, V, config.controller.mode, update_weights=False)
            st.controller.check()

        return loss, {"log": logged, "after": after}

    return _run_epochs(state, config, config.epochs_sf, "sf", config.lr_sf, sample, step, n_steps)


def train(config: TrainConfig, sources: Sequence[DomainDataset], stages: str = "all") -> TrainState:
    """Stage 1 then stage 2; ``stages`` is one of all, sup, aida."""
    if stages not in ("all", "sup", "aida"):
        raise ConfigError(f"unknown stage selection {stages!r}")
    state = init_state(config, sources)
    if stages in ("all", "sup"):
        state = stage1_supervised(config, sources, state)
    if stages in ("all", "aida"):
        state = stage2_aida(state, config, sources)
    return state


def checkpoint_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors = dict(state.params)
    tensors["controller.alpha"] = np.asarray(state.controller.alpha)
    tensors["controller.lambda_pmr"] = np.array(state.controller.lambda_pmr)
    return tensors


def state_from_checkpoint(tensors: Mapping[str, np.ndarray], config: TrainConfig) -> TrainState:
    """Fresh optimizer and normalizers around stored parameters."""
    from .model import check_params, model_params

    params = {k: np.array(v) for k, v in model_params(tensors).items()}
    check_params(params)
    ctrl = ControllerState.initial(1, config.controller)
    if "controller.alpha" in tensors:
        ctrl = replace(ctrl, alpha=np.array(tensors["controller.alpha"]))
    if "controller.lambda_pmr" in tensors:
        ctrl = replace(ctrl, lambda_pmr=float(tensors["controller.lambda_pmr"]))
    return TrainState(
        params=params,
        moments=AdamMoments.zeros_like(params),
        controller=ctrl,
        domain_ids=tuple(range(len(ctrl.alpha))),
    )
