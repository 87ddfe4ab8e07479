"""Acceptance suite: one recorded PASS/FAIL line per criterion.

Each test records its verdict through the ``verdict`` fixture before
asserting, so the summary at the end of a run lists every criterion even when
some fail. Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import csv
import json
import math
import shutil
import time
from pathlib import Path

import numpy as np

from aida import tensor as T
from aida.cli import main
from aida.data import load_dataset
from aida.dfc import ControllerConfig, ControllerState, batch_entropy, controller_step, simplex_project, update_alpha
from aida.losses import LossConfig, all_pairs, batch_hard_triplet, id_loss, pmr_loss, pmr_point_loss, relational_loss, supervised_loss, total_loss
from aida.metrics import RetrievalSplit, average_precision, cmc, mean_ap
from aida.model import ModelConfig, classify, embed, forward, init_params, l2_normalize, load_checkpoint
from aida.msidg import ChannelStats, aggregate_stats, channel_stats, intermediate_features, multi_source_mix, statistics_transfer
from aida.oracles import brute_force_cmc, brute_force_map, grid_project
from aida.tensor import finite_diff_check
from aida.trainer import TrainConfig, sf_refine, state_from_checkpoint

KINK_TOL = 1e-3
LABELS = np.array([0, 0, 1, 1, 2, 2, 1, 0])
DOMAINS = np.array([0, 0, 0, 0, 1, 1, 1, 1])
MARGIN = 0.3


# -- kink guards ------------------------------------------------------------------


def _dists(z):
    return np.sqrt(((z[:, None, :] - z[None, :, :]) ** 2).sum(-1))


def _triplet_margin(z, labels, margin=MARGIN):
    """Distance to the nearest non-differentiable point of batch-hard mining."""
    d = _dists(z)
    worst = np.inf
    for i in range(len(z)):
        pos = np.sort(d[i, (labels == labels[i]) & (np.arange(len(z)) != i)])[::-1]
        neg = np.sort(d[i, labels != labels[i]])
        for s in (pos, neg):
            if len(s) > 1:
                worst = min(worst, abs(s[0] - s[1]))
        worst = min(worst, abs(pos[0] - neg[0] + margin))
    return worst


def _relational_margin(a, b):
    i, j = all_pairs(len(a)).T
    da, db = _dists(a)[i, j], _dists(b)[i, j]
    return min(np.abs(da - db).min(), da.min(), db.min())


def _unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _donors(P, x):
    f = forward(P, x)[0].data
    return {d: channel_stats(f[DOMAINS == d]) for d in (0, 1)}


def _msidg_total(P, x, alpha, donors):
    # donor statistics are constants of the map (detached in training), so
    # the perturbed evaluations must see the same donors as the taped one
    lcfg = LossConfig()
    f, _, z_hat, p = forward(P, x)
    sup = supervised_loss(p, z_hat, LABELS, lcfg)
    zt_hat = l2_normalize(embed(P, intermediate_features(f, DOMAINS, alpha, [0, 1], donor_stats=donors)))
    aug = supervised_loss(classify(P, zt_hat), zt_hat, LABELS, lcfg)
    return total_loss(T.add(sup, T.mul(aug, 0.5)), pmr_loss(z_hat, zt_hat, lcfg), 0.7)


def _msidg_margin(P, x, alpha):
    pre = x @ P["backbone.0.weight"] + P["backbone.0.bias"]
    f, _, z_hat, _ = forward(P, x)
    zt = l2_normalize(embed(P, intermediate_features(f, DOMAINS, alpha, [0, 1]))).data
    return min(np.abs(pre).min(), _triplet_margin(z_hat.data, LABELS), _triplet_margin(zt, LABELS), _relational_margin(z_hat.data, zt))


def _instance(seed, build, margin):
    """First draw from the seed's stream whose kink margin clears KINK_TOL."""
    rng = np.random.default_rng(seed)
    for attempt in range(50):
        inst = build(rng)
        if margin(inst) > KINK_TOL:
            return inst, attempt
    raise RuntimeError(f"no kink-free instance for seed {seed}")


# -- criteria ---------------------------------------------------------------------


def test_criterion_01_gradients(verdict):
    t0 = time.perf_counter()
    worst = {k: 0.0 for k in ("id_loss", "triplet", "pmr_point", "relational", "total_msidg")}
    redraws = 0
    mcfg = ModelConfig(feature_dim=5, hidden_dims=(6,), embed_dim=4, num_classes=3)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(8, 3)) * 2
        worst["id_loss"] = max(worst["id_loss"], finite_diff_check(lambda P: id_loss(T.softmax(P["l"]), LABELS), {"l": logits}))

        z, k = _instance(seed, lambda r: r.normal(size=(8, 4)), lambda z: _triplet_margin(_unit(z), LABELS))
        redraws += k
        err = finite_diff_check(lambda P: batch_hard_triplet(l2_normalize(P["z"]), LABELS, MARGIN), {"z": z})
        worst["triplet"] = max(worst["triplet"], err)

        a, b = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
        err = finite_diff_check(lambda P: pmr_point_loss(l2_normalize(P["a"]), l2_normalize(P["b"])), {"a": a, "b": b})
        worst["pmr_point"] = max(worst["pmr_point"], err)

        (a, b), k = _instance(seed + 10_000, lambda r: (r.normal(size=(8, 4)), r.normal(size=(8, 4))), lambda ab: _relational_margin(_unit(ab[0]), _unit(ab[1])))
        redraws += k
        err = finite_diff_check(lambda P: relational_loss(l2_normalize(P["a"]), l2_normalize(P["b"]), all_pairs(8)), {"a": a, "b": b})
        worst["relational"] = max(worst["relational"], err)

        # near a vertex of the simplex the mirrors of one domain are almost the
        # originals, which puts the relational term on its |.| kink
        (params, x, alpha), k = _instance(
            seed + 20_000,
            lambda r: (init_params(mcfg, r), r.normal(size=(8, 5)), r.dirichlet(np.ones(2))),
            lambda pxa: _msidg_margin(*pxa),
        )
        redraws += k
        donors = _donors(params, x)
        err = finite_diff_check(lambda P: _msidg_total(P, x, alpha, donors), params)
        worst["total_msidg"] = max(worst["total_msidg"], err)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {redraws} kink redraws; {elapsed:.1f} s"
    assert verdict(1, "gradient correctness", ok, detail)


def _random_map(rng):
    n, c = int(rng.integers(4, 40)), int(rng.integers(1, 12))
    return rng.normal(rng.uniform(-3, 3, c), rng.uniform(0.5, 3, c), size=(n, c))


def test_criterion_02_statistics_transfer(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(500):
        f = _random_map(rng)
        c = f.shape[1]
        donor = ChannelStats(rng.uniform(-3, 3, c), rng.uniform(0.05, 3, c))
        out = channel_stats(statistics_transfer(f, donor, eps=1e-5))
        worst = max(worst, np.abs(out.mu - donor.mu).max(), np.abs(out.sigma - donor.sigma).max())
    identity = 0.0
    for _ in range(500):
        f = _random_map(rng)
        identity = max(identity, np.abs(statistics_transfer(f, channel_stats(f), eps=1e-5).data - f).max())
    ok = worst < 1e-4 and identity < 1e-6
    detail = f"donor stats max dev {worst:.1e} (< 1e-4), identity donor max dev {identity:.1e} (< 1e-6)"
    assert verdict(2, "statistics transfer", ok, detail)


def test_criterion_03_mixing_equivalence(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(500):
        K = (2, 3, 5)[i % 3]
        f = _random_map(rng)
        c = f.shape[1]
        stats = [ChannelStats(rng.uniform(-3, 3, c), rng.uniform(0.05, 3, c)) for _ in range(K)]
        alpha = rng.dirichlet(np.ones(K))
        per_donor = multi_source_mix(f, stats, alpha).data
        aggregated = statistics_transfer(f, aggregate_stats(stats, alpha)).data
        worst = max(worst, np.abs(per_donor - aggregated).max())
    assert verdict(3, "mixing equivalence", worst < 1e-12, f"max abs deviation {worst:.1e} (< 1e-12)")


def test_criterion_04_simplex_projection(verdict):
    rng = np.random.default_rng(4)
    grid_dev = constraint = 0.0
    for _ in range(200):
        v = rng.normal(0.3, 1.0, 3)
        p = simplex_project(v)
        grid_dev = max(grid_dev, np.abs(p - grid_project(v, 1e-3)).max())
        constraint = max(constraint, -p.min(), abs(p.sum() - 1.0))
    ok = grid_dev < 2e-3 and constraint <= 1e-12
    assert verdict(4, "simplex projection", ok, f"grid L-inf {grid_dev:.1e} (< 2e-3), constraint violation {constraint:.1e} (<= 1e-12)")


def _controller(rng, K, alpha=None):
    state = ControllerState.initial(K, ControllerConfig(eta_alpha=float(rng.uniform(0.01, 0.5))))
    return ControllerState(
        alpha=rng.dirichlet(np.ones(K)) if alpha is None else alpha,
        lambda_pmr=state.lambda_pmr,
        e_max=float(rng.uniform(0.1, 5)),
        v_max=float(rng.uniform(0.1, 5)),
        eta_alpha=state.eta_alpha,
        eta_lambda=state.eta_lambda,
        lambda_max=state.lambda_max,
        decay=state.decay,
    )


def test_criterion_05_literal_mode_degeneracy(verdict):
    rng = np.random.default_rng(5)
    literal = 0.0
    unchanged = 0
    for _ in range(1000):
        K = int(rng.integers(2, 6))
        state = _controller(rng, K)
        E, V = rng.uniform(0, 5), rng.uniform(0, 5)
        literal = max(literal, np.abs(update_alpha(state, E, V, "literal").alpha - state.alpha).max())
        ents = rng.uniform(0, 5, K)
        if np.ptp(ents) > 0 and np.array_equal(update_alpha(state, E, V, "per_domain", ents).alpha, state.alpha):
            unchanged += 1
    ok = literal <= 1e-12 and unchanged == 0
    detail = f"literal max change {literal:.1e} (<= 1e-12); per_domain left alpha unchanged in {unchanged}/1000 cases"
    assert verdict(5, "literal-mode degeneracy", ok, detail)


def test_criterion_06_lambda_bounds(verdict):
    rng = np.random.default_rng(6)
    escapes = drift = 0
    for _ in range(10_000):
        lam_max = float(rng.uniform(0.05, 2))
        cfg = ControllerConfig(eta_lambda=float(rng.uniform(0, 1)), lambda_max=lam_max, lambda_init=float(rng.uniform(0, lam_max)))
        state = ControllerState.initial(3, cfg)
        for _ in range(8):
            state = controller_step(state, rng.uniform(0, 3), rng.exponential(2.0), "per_domain", rng.uniform(0, 3, 3))
            escapes += not 0.0 <= state.lambda_pmr <= lam_max
        still = ControllerState.initial(3, cfg)
        for _ in range(4):
            still = controller_step(still, 0.0, 0.0, "per_domain", np.zeros(3))
        drift += still.lambda_pmr != cfg.lambda_init
    ok = escapes == 0 and drift == 0
    assert verdict(6, "lambda bounds", ok, f"{escapes} out-of-range values in 80,000 updates; {drift}/10,000 drifted under zero signal")


def test_criterion_07_entropy(verdict):
    rng = np.random.default_rng(7)
    one_hot = max(batch_entropy(np.eye(C)[rng.integers(0, C, 5)]) for C in range(1, 30))
    uniform = max(abs(batch_entropy(np.full((4, C), 1.0 / C)) - math.log(C)) for C in range(1, 200))
    out_of_range = 0
    for _ in range(1000):
        C = int(rng.integers(1, 50))
        p = rng.dirichlet(np.full(C, rng.uniform(0.05, 5)), size=int(rng.integers(1, 10)))
        e = batch_entropy(p)
        out_of_range += not 0.0 <= e <= math.log(C) + 1e-12
    ok = one_hot == 0.0 and uniform <= 1e-12 and out_of_range == 0
    detail = f"one-hot max {one_hot!r}, uniform max dev {uniform:.1e}, {out_of_range}/1000 outside [0, ln C]"
    assert verdict(7, "entropy", ok, detail)


def test_criterion_08_metric_oracles(verdict):
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(1000):
        nq, ng, n_ids, dim = int(rng.integers(1, 21)), int(rng.integers(1, 31)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
        split = RetrievalSplit(
            rng.integers(-2, 3, size=(nq, dim)).astype(float),
            rng.integers(0, n_ids, nq),
            rng.integers(0, 3, nq),
            rng.integers(-2, 3, size=(ng, dim)).astype(float),
            rng.integers(0, n_ids, ng),
            rng.integers(0, 3, ng),
        )
        curve, valid = brute_force_cmc(split)
        res = cmc(split)
        mismatches += res.num_valid != valid or res.curve.tolist() != curve or mean_ap(split) != brute_force_map(split)
    worked = average_precision(np.array([True, False, True]))
    ok = mismatches == 0 and worked == 5 / 6
    assert verdict(8, "metric oracles", ok, f"{mismatches}/1000 mismatches; worked AP {worked!r}")


PIPELINE_CONFIG = {
    "format_version": 1,
    "seed": 9,
    "data": {"num_sources": 3, "num_identities": 8, "samples_per_identity": 6, "feature_dim": 16},
    "train": {"epochs_sup": 3, "epochs_aida": 2, "epochs_sf": 2, "P": 4, "K_inst": 3, "hidden_dims": [24], "embed_dim": 8},
}


def _pipeline(root: Path, monkeypatch) -> dict[str, bytes]:
    root.mkdir()
    monkeypatch.chdir(root)
    Path("cfg.json").write_text(json.dumps(PIPELINE_CONFIG))
    codes = [
        main(["gen-data", "--config", "cfg.json", "--out", "data"]),
        main(["train", "--config", "cfg.json", "--data", "data", "--out", "run"]),
        main(["adapt", "--config", "cfg.json", "--checkpoint", "run/checkpoint.aida", "--target", "data/target.json", "--out", "run"]),
        main(["eval", "--config", "cfg.json", "--checkpoint", "run/checkpoint_adapted.aida", "--dataset", "data/target.json", "--out", "run"]),
    ]
    assert codes == [0, 0, 0, 0]
    return {p.name: p.read_bytes() for p in sorted((root / "run").iterdir()) if p.suffix in (".aida", ".csv")}


def test_criterion_09_determinism(tmp_path, monkeypatch, verdict):
    first = _pipeline(tmp_path / "a", monkeypatch)
    second = _pipeline(tmp_path / "b", monkeypatch)
    differing = sorted(k for k in first if first[k] != second.get(k))
    ok = first.keys() == second.keys() and not differing and "checkpoint_adapted.aida" in first
    assert verdict(9, "determinism", ok, f"{len(first)} checkpoints and CSVs compared, differing: {differing or 'none'}")


def test_criterion_10_ablation_direction(tmp_path, verdict):
    t0 = time.perf_counter()
    assert main(["ablate", "--out", str(tmp_path)]) == 0
    elapsed = time.perf_counter() - t0
    with (tmp_path / "ablation_runs.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert sorted({int(r["seed"]) for r in rows}) == [0, 1, 2, 3, 4]
    mean = {s: float(np.mean([float(r["map"]) for r in rows if r["setting"] == s])) for s in "ABCD"}
    ok = mean["B"] >= mean["A"] and mean["C"] >= mean["A"] and elapsed < 600
    detail = ", ".join(f"{s} {v:.4f}" for s, v in mean.items()) + f" mean target mAP; {elapsed:.0f} s"
    assert verdict(10, "ablation direction", ok, detail)


def test_criterion_11_source_free_guard(tmp_path, monkeypatch, verdict):
    monkeypatch.chdir(tmp_path)
    Path("cfg.json").write_text(json.dumps(PIPELINE_CONFIG))
    assert main(["gen-data", "--config", "cfg.json", "--out", "data"]) == 0
    assert main(["train", "--config", "cfg.json", "--data", "data", "--out", "run"]) == 0
    guarded = dict(PIPELINE_CONFIG, paths={"sources": ["data/source_0.json"]})
    Path("guarded.json").write_text(json.dumps(guarded))
    base = ["adapt", "--checkpoint", "run/checkpoint.aida", "--target", "data/target.json", "--out", "blocked"]
    refusals = [
        main([*base, "--config", "guarded.json"]),
        main([*base, "--config", "cfg.json", "--data", "data"]),
    ]
    blocked_output = Path("blocked", "checkpoint_adapted.aida").exists()

    target = load_dataset("data/target.json")
    shutil.copy("data/target.json", "target.json")
    for p in Path("data").glob("source_*.json"):
        p.unlink()
    rc = main(["adapt", "--config", "cfg.json", "--checkpoint", "run/checkpoint.aida", "--target", "target.json", "--out", "adapted"])
    tcfg = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in PIPELINE_CONFIG["train"].items()})
    state = sf_refine(state_from_checkpoint(load_checkpoint("run/checkpoint.aida"), tcfg), tcfg, target.features)
    ok = refusals == [3, 3] and not blocked_output and rc == 0 and Path("adapted", "checkpoint_adapted.aida").exists()
    ok = ok and all(np.isfinite(v).all() for v in state.params.values())
    detail = f"adapt with sources exits {refusals}, adapt and sf_refine after deleting sources: exit {rc}, finite params"
    assert verdict(11, "source-free guard", ok, detail)
