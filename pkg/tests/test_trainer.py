import dataclasses
import inspect

import numpy as np
import pytest

from aida.data import DomainSpec, generate_domain, make_disjoint
from aida.dfc import ControllerConfig
from aida.errors import ConfigError, ContractError, TrainingError
from aida.losses import LossConfig
from aida.metrics import evaluate_embeddings
from aida.model import embed_numpy
from aida.protocol import benchmark
from aida.config import DataConfig
from aida.trainer import (
    CSV_BASE_COLUMNS,
    AdamMoments,
    TrainConfig,
    checkpoint_tensors,
    init_state,
    optimizer_step,
    sf_refine,
    stage1_supervised,
    stage2_aida,
    state_from_checkpoint,
    steps_per_epoch,
    train,
)


def same_params(a, b):
    return set(a) == set(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_zero_epochs_returns_initial_state(tiny_domains, tiny_cfg):
    sources, _ = tiny_domains
    cfg = dataclasses.replace(tiny_cfg, epochs_sup=0)
    init = init_state(cfg, sources)
    out = stage1_supervised(cfg, sources, init)
    assert same_params(out.params, init.params) and out.step == 0 and out.history == []


def test_same_seed_is_bitwise_reproducible(tiny_domains, tiny_cfg):
    sources, _ = tiny_domains
    a, b = train(tiny_cfg, sources), train(tiny_cfg, sources)
    assert same_params(a.params, b.params)
    assert a.history == b.history


def test_history_has_one_row_per_step(tiny_domains, tiny_cfg):
    sources, _ = tiny_domains
    state = train(tiny_cfg, sources)
    n = sum(len(s) for s in sources)
    expected = (tiny_cfg.epochs_sup + tiny_cfg.epochs_aida) * steps_per_epoch(tiny_cfg, n)
    assert state.step == len(state.history) == expected
    assert [r["step"] for r in state.history] == list(range(1, expected + 1))
    assert set(CSV_BASE_COLUMNS) <= set(state.history[0])
    assert len(state.epoch_log) == tiny_cfg.epochs_sup + tiny_cfg.epochs_aida


def test_stage_selection(tiny_domains, tiny_cfg):
    sources, _ = tiny_domains
    assert {r["stage"] for r in train(tiny_cfg, sources, "sup").history} == {"sup"}
    assert {r["stage"] for r in train(tiny_cfg, sources, "aida").history} == {"aida"}
    with pytest.raises(ConfigError):
        train(tiny_cfg, sources, "later")


def test_overlapping_labels_rejected(tiny_cfg):
    spec = DomainSpec(domain_id=0, num_identities=3, samples_per_identity=2, num_cameras=1, feature_dim=4)
    a = generate_domain(spec)
    b = generate_domain(dataclasses.replace(spec, domain_id=1))
    with pytest.raises(ContractError, match="make_disjoint"):
        init_state(tiny_cfg, [a, b])


def test_id_loss_decreases_on_separable_toy():
    domains = make_disjoint(
        [
            generate_domain(DomainSpec(domain_id=k, num_identities=1, samples_per_identity=4, num_cameras=2, feature_dim=6, noise_sigma=0.05, seed=k))
            for k in range(4)
        ]
    )
    cfg = TrainConfig(epochs_sup=40, P=4, K_inst=2, hidden_dims=(16,), embed_dim=8, lr_sup=1e-2, loss=LossConfig(lambda_tri=0.0), seed=0)
    state = stage1_supervised(cfg, domains)
    losses = [e["mean_loss"] for e in state.epoch_log]
    assert losses[-1] < 0.5 * losses[0]
    assert state.epoch_log[-1]["train_acc"] == 1.0


def test_degenerate_stage2_continues_stage1(tiny_domains, tiny_cfg):
    sources, _ = tiny_domains
    cfg = dataclasses.replace(
        tiny_cfg, use_dfc=False, lambda_aug=0.0, controller=ControllerConfig(lambda_init=0.0), epochs_sup=2, epochs_aida=2
    )
    two_stage = train(cfg, sources)
    sup_only = train(dataclasses.replace(cfg, epochs_sup=4), sources, "sup")
    assert same_params(two_stage.params, sup_only.params)


def test_controller_invariants_hold_every_step(tiny_domains, tiny_cfg):
    sources, _ = tiny_domains
    state = train(tiny_cfg, sources)
    for row in state.history:
        alpha = np.array([row[f"alpha_{k + 1}"] for k in range(3)])
        assert np.all(alpha >= 0) and abs(alpha.sum() - 1) <= 1e-9
        assert 0 <= row["lambda_pmr"] <= tiny_cfg.controller.lambda_max


def test_high_entropy_domain_loses_weight():
    # domain 2 is pure noise, so its intermediate samples stay hard to classify
    specs = [DomainSpec(domain_id=k, num_identities=6, samples_per_identity=4, num_cameras=2, feature_dim=8, noise_sigma=0.1, seed=k) for k in range(2)]
    specs.append(DomainSpec(domain_id=2, num_identities=6, samples_per_identity=4, num_cameras=2, feature_dim=8, noise_sigma=3.0, seed=2))
    sources = make_disjoint([generate_domain(s) for s in specs])
    cfg = TrainConfig(epochs_sup=3, epochs_aida=6, P=6, K_inst=2, hidden_dims=(16,), embed_dim=8, seed=1)
    state = train(cfg, sources)
    trace = [r["alpha_3"] for r in state.history if r["stage"] == "aida"]
    assert trace[-1] < 1 / 3
    assert trace[-1] < trace[0]


def test_nan_aborts_with_context(tiny_domains, tiny_cfg):
    sources, _ = tiny_domains
    state = init_state(tiny_cfg, sources)
    state.params["head.bias"] = np.full_like(state.params["head.bias"], np.nan)
    with pytest.raises(TrainingError) as info:
        stage1_supervised(tiny_cfg, sources, state)
    assert info.value.stage == "sup" and info.value.step == 0


def test_adam_zero_gradient_is_a_no_op():
    params = {"a": np.array([1.0, -2.0]), "b": np.array(0.5)}
    new, moments = optimizer_step(params, {k: np.zeros_like(v) for k, v in params.items()}, AdamMoments.zeros_like(params), 0.1)
    assert same_params(new, params) and moments.t == 1


def test_adam_parameter_order_is_irrelevant():
    rng = np.random.default_rng(0)
    params = {"a": rng.normal(size=3), "b": rng.normal(size=2)}
    grads = {"a": rng.normal(size=3), "b": rng.normal(size=2)}
    fwd, _ = optimizer_step(params, grads, AdamMoments.zeros_like(params), 0.01)
    rev_params = dict(reversed(list(params.items())))
    rev, _ = optimizer_step(rev_params, grads, AdamMoments.zeros_like(rev_params), 0.01)
    assert same_params(fwd, rev)


def test_sf_refine_signature_is_source_free():
    assert list(inspect.signature(sf_refine).parameters) == ["state", "config", "target"]


def test_sf_refine_zero_epochs_and_zero_weights(tiny_domains, tiny_cfg):
    sources, target = tiny_domains
    state = train(tiny_cfg, sources)
    out = sf_refine(state, dataclasses.replace(tiny_cfg, epochs_sf=0), target.features)
    assert same_params(out.params, state.params)
    inert = dataclasses.replace(tiny_cfg, sf_consistency=0.0, sf_pseudo_labels=False, epochs_sf=2)
    out = sf_refine(state, inert, target.features)
    assert same_params(out.params, state.params)
    assert {r["stage"] for r in out.history[state.step :]} == {"sf"}


def test_sf_refine_keeps_alpha_and_bounds_lambda(tiny_domains, tiny_cfg):
    sources, target = tiny_domains
    state = train(tiny_cfg, sources)
    out = sf_refine(state, tiny_cfg, target.features)
    np.testing.assert_array_equal(out.controller.alpha, state.controller.alpha)
    assert 0 <= out.controller.lambda_pmr <= tiny_cfg.controller.lambda_max


def test_checkpoint_state_round_trip(tiny_domains, tiny_cfg):
    sources, _ = tiny_domains
    state = train(tiny_cfg, sources, "sup")
    back = state_from_checkpoint(checkpoint_tensors(state), tiny_cfg)
    assert same_params(back.params, state.params)
    np.testing.assert_array_equal(back.controller.alpha, state.controller.alpha)
    assert back.controller.lambda_pmr == state.controller.lambda_pmr


def test_train_config_validation():
    for kw in (dict(epochs_sup=-1), dict(lr_sup=0.0), dict(beta1=1.0), dict(lambda_aug=-1.0), dict(sf_clusters=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


@pytest.mark.slow
def test_refinement_improves_target_map_on_most_seeds():
    data = DataConfig(num_sources=3, num_identities=20, samples_per_identity=10, num_cameras=3, feature_dim=32)
    wins = 0
    for seed in range(5):
        sources, target = benchmark(data, seed)
        cfg = TrainConfig(seed=seed)
        state = train(cfg, sources)
        ev = lambda s: evaluate_embeddings(embed_numpy(s.params, target.features), target.labels, target.cameras).map  # noqa: E731
        wins += ev(sf_refine(state, cfg, target.features)) >= ev(state)
    assert wins >= 4
