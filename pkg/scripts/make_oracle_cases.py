"""Regenerate tests/fixtures/oracle_cases.json.

Inputs are drawn from a fixed seed; every expected value comes from the
pure-Python evaluators in ``aida.oracles.ORACLES``.

    python scripts/make_oracle_cases.py [--out PATH]
"""

from __future__ import annotations

import argparse
import math
from pathlib import Path

import numpy as np

from aida.oracles import ORACLES, OracleCase, save_cases

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "oracle_cases.json"


def _case(name, op, inputs, provenance="DERIVED", tolerance=1e-12):
    return OracleCase(name, op, inputs, ORACLES[op](inputs), provenance, tolerance)


def build_cases(seed: int = 20240) -> list[OracleCase]:
    rng = np.random.default_rng(seed)
    r = lambda *shape: rng.standard_normal(shape).round(6).tolist()  # noqa: E731

    sigmas = np.abs(rng.standard_normal((3, 6))).round(6) + 0.1
    split = {
        "query_emb": r(6, 3),
        "query_ids": rng.integers(0, 4, 6).tolist(),
        "query_cams": rng.integers(0, 2, 6).tolist(),
        "gallery_emb": r(10, 3),
        "gallery_ids": rng.integers(0, 4, 10).tolist(),
        "gallery_cams": rng.integers(0, 2, 10).tolist(),
    }
    blobs = np.concatenate([rng.normal(0, 0.05, (5, 2)), rng.normal(10, 0.05, (5, 2))]).round(6).tolist()
    layers = [
        (r(4, 5), r(5)),
        (r(5, 3), r(3)),
    ]
    return [
        _case("variance_two_values", "population_variance", {"values": [1.0, 3.0]}),
        _case("l2_normalize_3_4", "l2_normalize", {"rows": [[3.0, 4.0]]}),
        _case("softmax_random", "softmax", {"logits": r(3, 5)}),
        _case("softmax_zeros", "softmax", {"logits": [[0.0, 0.0, 0.0]]}, "TRIVIAL"),
        _case("channel_stats_1234", "channel_stats", {"column": [1.0, 2.0, 3.0, 4.0]}),
        _case(
            "mix_three_donors",
            "mix_aggregated",
            {"f": r(4, 6), "mus": r(3, 6), "sigmas": sigmas.tolist(), "alpha": [0.2, 0.3, 0.5], "eps": 1e-5},
        ),
        _case("id_loss_half_quarter", "id_loss", {"posteriors": [[0.5, 0.5], [0.25, 0.75]], "labels": [0, 0]}, tolerance=1e-9),
        _case(
            "triplet_single_anchor",
            "triplet_anchor_terms",
            {"points": [[0.0], [0.5], [-0.4], [-1.0]], "labels": [0, 0, 1, 1], "margin": 0.3},
        ),
        _case(
            "triplet_random",
            "triplet_batch_hard",
            {"points": r(8, 4), "labels": [0, 0, 1, 1, 2, 2, 3, 3], "margin": 0.3},
        ),
        _case("pmr_orthogonal", "pmr_point", {"a": [[1.0, 0.0]], "b": [[0.0, 1.0]]}),
        _case("pmr_antipodal", "pmr_point", {"a": [[1.0, 0.0]], "b": [[-1.0, 0.0]]}),
        _case(
            "relational_three_points",
            "relational",
            {"a": [[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]], "b": [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], "pairs": [[0, 1], [0, 2], [1, 2]]},
        ),
        _case("entropy_half_half", "batch_entropy", {"posteriors": [[0.5, 0.5]]}),
        _case("grad_var_1_3", "gradient_variance", {"grads": [[1.0, 3.0]]}),
        _case("running_max_decay_one", "running_max", {"values": [0.3, 0.1, 0.7, 0.2, 0.9, 0.5], "start": 1e-12}),
        _case("project_uniform", "simplex_project", {"v": [0.5, 0.5, 0.5]}),
        _case("project_corner", "simplex_project", {"v": [2.0, 0.0, 0.0]}),
        _case("project_random", "simplex_project", {"v": r(5)}),
        _case(
            "alpha_literal_noop",
            "alpha_literal",
            {"alpha": [0.2, 0.3, 0.5], "E": 0.8, "V": 0.01, "e_max": 1.0, "v_max": 0.02, "eta": 0.05},
        ),
        _case(
            "alpha_per_domain_three",
            "alpha_per_domain",
            {"alpha": [1 / 3, 1 / 3, 1 / 3], "entropies": [0.2, 0.3, 0.9], "V": 0.01, "e_max": 1.0, "v_max": 0.02, "eta": 0.05},
        ),
        _case(
            "lambda_half_signals",
            "lambda_update",
            {"lambda": 0.1, "eta": 0.05, "E": 0.5, "V": 0.5, "e_max": 1.0, "v_max": 1.0, "lambda_max": 1.0},
        ),
        _case("ap_ranks_1_3", "average_precision", {"matches": [True, False, True, False]}),
        _case("cmc_map_random", "cmc_map", split),
        _case("nmi_four_points", "nmi", {"a": [0, 0, 1, 1], "b": [0, 0, 0, 1]}),
        _case("silhouette_two_blobs", "silhouette", {"points": blobs, "labels": [0] * 5 + [1] * 5}),
        _case("distance_orthogonal", "distance", {"query": [[1.0, 0.0]], "gallery": [[0.0, 1.0]]}),
        _case(
            "adam_one_step",
            "adam_scalar",
            {"param": 1.0, "grad": 0.5, "lr": 0.1, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
        ),
        _case("disjoint_3_2", "disjoint_labels", {"counts": [3, 2]}),
        _case("tiny_net_forward", "reference_forward", {"x": r(3, 4), "layers": layers}),
    ]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = ap.parse_args()
    cases = build_cases()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_cases(cases, args.out)
    print(f"wrote {len(cases)} cases to {args.out}")


if __name__ == "__main__":
    main()
