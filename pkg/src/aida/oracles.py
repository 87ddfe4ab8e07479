"""Slow, obviously-correct reference implementations used to check the fast paths.

Nothing here is used by training; the functions exist so tests (and ports to
other languages) can regenerate expected values instead of trusting frozen
numbers. Oracle cases are stored as JSON, one object per case:

    {"name": str, "op": str, "inputs": {...}, "expected": any,
     "provenance": "PAPER" | "TRIVIAL" | "DERIVED", "tolerance": float}
"""

from __future__ import annotations

import importlib
import itertools
import json
import math
from fractions import Fraction
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ContractError, FormatError

PROVENANCE_TAGS = ("PAPER", "TRIVIAL", "DERIVED")


@dataclass
class OracleCase:
    name: str
    op: str
    inputs: dict
    expected: Any
    provenance: str
    tolerance: float

    def __post_init__(self):
        if self.provenance not in PROVENANCE_TAGS:
            raise FormatError(f"case {self.name!r}: provenance must be one of {PROVENANCE_TAGS}")
        if self.provenance == "DERIVED" and not self.tolerance > 0:
            raise FormatError(f"case {self.name!r}: DERIVED cases need a positive tolerance")


def save_cases(cases: Sequence[OracleCase], path: str | Path) -> None:
    Path(path).write_text(json.dumps([asdict(c) for c in cases], indent=1) + "\n")


def load_cases(path: str | Path) -> list[OracleCase]:
    return [OracleCase(**d) for d in json.loads(Path(path).read_text())]


# -- retrieval ------------------------------------------------------------------


def _euclid(a: Sequence[float], b: Sequence[float]) -> float:
    return math.sqrt(sum((x - y) * (x - y) for x, y in zip(a, b)))


def brute_force_rank(split) -> list[list[int] | None]:
    """Ranked gallery indices per query after dropping same-id/same-camera entries.

    Ties in distance go to the lower gallery index. A query with no remaining
    correct match yields ``None``.
    """
    g_emb = np.asarray(split.gallery_emb).tolist()
    g_ids = list(np.asarray(split.gallery_ids).tolist())
    g_cams = list(np.asarray(split.gallery_cams).tolist())
    out: list[list[int] | None] = []
    for q, qid, qcam in zip(np.asarray(split.query_emb).tolist(), np.asarray(split.query_ids).tolist(), np.asarray(split.query_cams).tolist()):
        scored = sorted((_euclid(q, g), j) for j, g in enumerate(g_emb))
        ranked = [j for _, j in scored if not (g_ids[j] == qid and g_cams[j] == qcam)]
        out.append(ranked if any(g_ids[j] == qid for j in ranked) else None)
    return out


def brute_force_cmc(split) -> tuple[list[float], int]:
    """(curve over ranks 1..len(gallery), number of valid queries)."""
    ranked = brute_force_rank(split)
    g_ids = list(np.asarray(split.gallery_ids).tolist())
    n_gallery = len(g_ids)
    firsts = []
    for qid, lst in zip(np.asarray(split.query_ids).tolist(), ranked):
        if lst is None:
            continue
        firsts.append(next(r for r, j in enumerate(lst, start=1) if g_ids[j] == qid))
    if not firsts:
        return [0.0] * n_gallery, 0
    return [sum(1 for f in firsts if f <= k) / len(firsts) for k in range(1, n_gallery + 1)], len(firsts)


def brute_force_map(split) -> float:
    ranked = brute_force_rank(split)
    g_ids = list(np.asarray(split.gallery_ids).tolist())
    aps = []
    for qid, lst in zip(np.asarray(split.query_ids).tolist(), ranked):
        if lst is None:
            continue
        hits = [r for r, j in enumerate(lst, start=1) if g_ids[j] == qid]
        aps.append(float(sum(Fraction(i + 1, r) for i, r in enumerate(hits)) / len(hits)))
    return math.fsum(aps) / len(aps) if aps else 0.0


# -- simplex --------------------------------------------------------------------


def grid_project(v, step: float) -> np.ndarray:
    """Nearest point of the simplex grid with spacing ``step`` (K <= 3)."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    k = v.size
    if not 1 <= k <= 3:
        raise ContractError("grid_project supports 1 <= K <= 3")
    n = int(round(1.0 / step))
    if k == 1:
        return np.ones(1)
    i = np.arange(n + 1)
    if k == 2:
        cand = np.stack([i, n - i], axis=1) / n
    else:
        a, b = np.meshgrid(i, i, indexing="ij")
        keep = a + b <= n
        cand = np.stack([a[keep], b[keep], n - a[keep] - b[keep]], axis=1) / n
    return cand[np.argmin(((cand - v) ** 2).sum(axis=1))]


# -- calculus -------------------------------------------------------------------


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def population_variance(values: Sequence[float]) -> float:
    m = math.fsum(values) / len(values)
    return math.fsum((v - m) ** 2 for v in values) / len(values)


def softmax_direct(row: Sequence[float]) -> list[float]:
    e = [math.exp(v) for v in row]
    s = math.fsum(e)
    return [x / s for x in e]


def contingency_nmi(a: Sequence, b: Sequence) -> float:
    """NMI (arithmetic normalization) from an explicit contingency table."""
    n = len(a)
    pairs = {}
    for x, y in zip(a, b):
        pairs[(x, y)] = pairs.get((x, y), 0) + 1
    ca = {x: sum(1 for v in a if v == x) for x in set(a)}
    cb = {y: sum(1 for v in b if v == y) for y in set(b)}
    mi = math.fsum(c / n * math.log(c * n / (ca[x] * cb[y])) for (x, y), c in pairs.items())
    ha = -math.fsum(c / n * math.log(c / n) for c in ca.values())
    hb = -math.fsum(c / n * math.log(c / n) for c in cb.values())
    if ha == 0 and hb == 0:
        return 1.0
    return mi / (0.5 * (ha + hb))


def naive_silhouette(points: Sequence[Sequence[float]], labels: Sequence) -> float:
    n = len(points)
    if len(set(labels)) < 2:
        return 0.0
    total = 0.0
    for i in range(n):
        own = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not own:
            continue
        a = sum(_euclid(points[i], points[j]) for j in own) / len(own)
        b = min(
            sum(_euclid(points[i], points[j]) for j in range(n) if labels[j] == c)
            / sum(1 for j in range(n) if labels[j] == c)
            for c in set(labels)
            if c != labels[i]
        )
        total += 0.0 if max(a, b) == 0 else (b - a) / max(a, b)
    return total / n


def fold_max(values: Sequence[float], start: float = 0.0) -> list[float]:
    """Running maxima, the decay=1 limit of the controller normalizers."""
    return list(itertools.accumulate(values, max, initial=start))[1:]


# -- equation map ---------------------------------------------------------------


def equation_map() -> dict:
    """Mapping from the method's numbered equations and algorithm lines to operations."""
    text = resources.files("aida").joinpath("resources/equation_map.json").read_text()
    return json.loads(text)


def resolve_operation(dotted: str):
    module, _, attr = dotted.rpartition(".")
    return getattr(importlib.import_module(module), attr)


# -- case registry --------------------------------------------------------------
# Each evaluator recomputes a case's expected value from its inputs with plain
# Python arithmetic, independent of the vectorized code under test.


def bisection_project(v: Sequence[float], iters: int = 200) -> list[float]:
    """Simplex projection by bisection on the threshold tau of sum(max(v - tau, 0)) = 1."""
    lo, hi = min(v) - 1.0, max(v)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if math.fsum(max(x - mid, 0.0) for x in v) > 1.0:
            lo = mid
        else:
            hi = mid
    tau = 0.5 * (lo + hi)
    return [max(x - tau, 0.0) for x in v]


def _pairwise(points):
    return [[_euclid(p, q) for q in points] for p in points]


def _triplet_terms(points, labels, margin):
    d = _pairwise(points)
    terms = []
    for a, la in enumerate(labels):
        d_ap = max(d[a][j] for j, l in enumerate(labels) if l == la and j != a)
        d_an = min(d[a][j] for j, l in enumerate(labels) if l != la)
        terms.append(max(d_ap - d_an + margin, 0.0))
    return terms


def _reference_forward(inputs):
    x, layers = inputs["x"], inputs["layers"]
    h = [list(row) for row in x]
    for li, (w, b) in enumerate(layers):
        h = [[math.fsum(row[i] * w[i][j] for i in range(len(row))) + b[j] for j in range(len(b))] for row in h]
        if li < len(layers) - 1:
            h = [[max(v, 0.0) for v in row] for row in h]
    return h


def _aggregated_mix(inputs):
    f, mus, sigmas, alpha, eps = inputs["f"], inputs["mus"], inputs["sigmas"], inputs["alpha"], inputs["eps"]
    n, c = len(f), len(f[0])
    out = [[0.0] * c for _ in range(n)]
    for j in range(c):
        col = [f[i][j] for i in range(n)]
        mu = math.fsum(col) / n
        sd = math.sqrt(population_variance(col))
        mu_mix = math.fsum(a * m[j] for a, m in zip(alpha, mus))
        sd_mix = math.fsum(a * s[j] for a, s in zip(alpha, sigmas))
        for i in range(n):
            out[i][j] = sd_mix * (col[i] - mu) / (sd + eps) + mu_mix
    return out


def _split_of(inputs):
    from types import SimpleNamespace

    return SimpleNamespace(**{k: np.asarray(v) if k.endswith(("ids", "cams")) else np.asarray(v, dtype=np.float64).reshape(len(v), -1) for k, v in inputs.items()})


def _adam_scalar(inputs):
    p, g, lr, b1, b2, eps = (inputs[k] for k in ("param", "grad", "lr", "beta1", "beta2", "eps"))
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    m_hat = m / (1 - b1)
    v_hat = v / (1 - b2)
    return p - lr * m_hat / (math.sqrt(v_hat) + eps)


def _disjoint_ranges(inputs):
    out, offset = [], 0
    for c in inputs["counts"]:
        out.append(list(range(offset, offset + c)))
        offset += c
    return out


ORACLES: dict[str, Callable[[dict], Any]] = {
    "population_variance": lambda i: population_variance(i["values"]),
    "l2_normalize": lambda i: [[x / math.sqrt(math.fsum(v * v for v in row)) for x in row] for row in i["rows"]],
    "softmax": lambda i: [softmax_direct(r) for r in i["logits"]],
    "channel_stats": lambda i: [math.fsum(i["column"]) / len(i["column"]), math.sqrt(population_variance(i["column"]))],
    "mix_aggregated": _aggregated_mix,
    "id_loss": lambda i: -math.fsum(math.log(row[y]) for row, y in zip(i["posteriors"], i["labels"])) / len(i["labels"]),
    "triplet_batch_hard": lambda i: math.fsum(_triplet_terms(i["points"], i["labels"], i["margin"])) / len(i["labels"]),
    "triplet_anchor_terms": lambda i: _triplet_terms(i["points"], i["labels"], i["margin"]),
    "pmr_point": lambda i: math.fsum(_euclid(a, b) ** 2 for a, b in zip(i["a"], i["b"])) / len(i["a"]),
    "relational": lambda i: math.fsum(
        abs(_pairwise(i["a"])[p][q] - _pairwise(i["b"])[p][q]) for p, q in i["pairs"]
    ) / len(i["pairs"]),
    "batch_entropy": lambda i: math.fsum(
        -math.fsum(p * math.log(p) for p in row if p > 0) for row in i["posteriors"]
    ) / len(i["posteriors"]),
    "gradient_variance": lambda i: population_variance([v for g in i["grads"] for v in g]),
    "running_max": lambda i: fold_max(i["values"], i["start"]),
    "simplex_project": lambda i: bisection_project(i["v"]),
    "alpha_literal": lambda i: bisection_project([a - i["eta"] * (i["E"] / i["e_max"] + i["V"] / i["v_max"]) for a in i["alpha"]]),
    "alpha_per_domain": lambda i: bisection_project(
        [a - i["eta"] * (e / i["e_max"] + i["V"] / i["v_max"]) for a, e in zip(i["alpha"], i["entropies"])]
    ),
    "lambda_update": lambda i: min(max(i["lambda"] + i["eta"] * (i["E"] / i["e_max"] + i["V"] / i["v_max"]), 0.0), i["lambda_max"]),
    "average_precision": lambda i: (lambda hits: float(sum(Fraction(k + 1, r) for k, r in enumerate(hits)) / len(hits)))(
        [r for r, m in enumerate(i["matches"], start=1) if m]
    ),
    "cmc_map": lambda i: {"curve": brute_force_cmc(_split_of(i))[0], "map": brute_force_map(_split_of(i))},
    "nmi": lambda i: contingency_nmi(i["a"], i["b"]),
    "silhouette": lambda i: naive_silhouette(i["points"], i["labels"]),
    "distance": lambda i: [[_euclid(a, b) for b in i["gallery"]] for a in i["query"]],
    "adam_scalar": _adam_scalar,
    "disjoint_labels": _disjoint_ranges,
    "reference_forward": _reference_forward,
}


def evaluate_case(case: OracleCase) -> Any:
    if case.op not in ORACLES:
        raise FormatError(f"case {case.name!r}: no oracle for op {case.op!r}")
    return ORACLES[case.op](case.inputs)
