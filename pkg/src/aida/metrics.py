"""Retrieval (CMC, mAP) and clustering (k-means, NMI, silhouette) metrics."""

from __future__ import annotations

import json
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ClusteringError, ShapeError

MAX_KMEANS_ITERS = 100
MAX_RESEEDS = 3


@dataclass(frozen=True, eq=False)
class RetrievalSplit:
    query_emb: np.ndarray
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery_emb: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray

    def __post_init__(self):
        q, g = np.asarray(self.query_emb), np.asarray(self.gallery_emb)
        if q.ndim != 2 or g.ndim != 2 or (q.size and g.size and q.shape[1] != g.shape[1]):
            raise ShapeError(f"query {q.shape} and gallery {g.shape} embeddings do not conform")
        if len(self.query_ids) != len(q) or len(self.query_cams) != len(q):
            raise ShapeError("query ids/cams must match the number of query embeddings")
        if len(self.gallery_ids) != len(g) or len(self.gallery_cams) != len(g):
            raise ShapeError("gallery ids/cams must match the number of gallery embeddings")


@dataclass(frozen=True)
class CMCResult:
    curve: np.ndarray  # curve[k-1] = fraction of valid queries matched within top k
    num_valid: int
    num_skipped: int

    def rank(self, k: int) -> float:
        if self.curve.size == 0:
            return 0.0
        return float(self.curve[min(k, self.curve.size) - 1])


@dataclass
class MetricsReport:
    rank1: float
    rank5: float
    rank10: float
    map: float
    nmi: float
    silhouette: float
    num_queries: int = 0
    num_skipped: int = 0
    loss_traces: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def distance_matrix(query, gallery) -> np.ndarray:
    """Euclidean distances between every query row and every gallery row."""
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ShapeError(f"distance_matrix: shapes {q.shape} and {g.shape} do not conform")
    diff = q[:, None, :] - g[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _ranked_matches(split: RetrievalSplit):
    """Per query: boolean match vector over the filtered, ranked gallery (None if no valid match)."""
    dist = distance_matrix(split.query_emb, split.gallery_emb)
    g_ids = np.asarray(split.gallery_ids)
    g_cams = np.asarray(split.gallery_cams)
    out = []
    for i in range(len(split.query_ids)):
        order = np.argsort(dist[i], kind="stable")
        same_id = g_ids[order] == split.query_ids[i]
        junk = same_id & (g_cams[order] == split.query_cams[i])
        matches = same_id[~junk]
        out.append(matches if matches.any() else None)
    return out


def cmc(split: RetrievalSplit) -> CMCResult:
    """Cumulative matching characteristic with same-identity same-camera exclusion."""
    ranked = _ranked_matches(split)
    valid = [m for m in ranked if m is not None]
    length = len(split.gallery_ids)
    if not valid or length == 0:
        return CMCResult(np.zeros(length), 0, len(ranked))
    hits = np.zeros(length, dtype=np.int64)
    for m in valid:
        hits[int(np.argmax(m)) :] += 1
    return CMCResult(hits / len(valid), len(valid), len(ranked) - len(valid))


def average_precision(matches: np.ndarray) -> float:
    """Mean of precision@r over the ranks r of the relevant items.

    Summed in exact rationals, so e.g. hits at ranks 1 and 3 give exactly
    the float nearest 5/6.
    """
    hit_ranks = np.flatnonzero(matches) + 1
    return float(sum(Fraction(i + 1, int(r)) for i, r in enumerate(hit_ranks.tolist())) / len(hit_ranks))


def mean_ap(split: RetrievalSplit) -> float:
    aps = [average_precision(m) for m in _ranked_matches(split) if m is not None]
    return math.fsum(aps) / len(aps) if aps else 0.0


def kmeans(x, k: int, seed: int | np.random.Generator = 0, max_iters: int = MAX_KMEANS_ITERS) -> np.ndarray:
    """Lloyd's algorithm from a seeded farthest-point start.

    An empty cluster gets the point farthest from its current centroid; the
    third re-seed in one run raises ClusteringError.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if x.ndim != 2 or n == 0:
        raise ShapeError(f"kmeans needs a non-empty (n, dim) array, got {x.shape}")
    if not 1 <= k <= n:
        raise ClusteringError(f"kmeans: k={k} must lie in [1, {n}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    centers = [int(rng.integers(n))]
    closest = ((x - x[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(closest))
        centers.append(nxt)
        closest = np.minimum(closest, ((x - x[nxt]) ** 2).sum(axis=1))
    centroids = x[centers].copy()

    assign = None
    reseeds = 0
    for _ in range(max_iters):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d2, axis=1)
        counts = np.bincount(new, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            reseeds += 1
            if reseeds >= MAX_RESEEDS:
                raise ClusteringError(f"kmeans: cluster(s) {empty.tolist()} stayed empty after re-seeding")
            err = d2[np.arange(n), new]
            for c in empty:
                far = int(np.argmax(err))
                centroids[c] = x[far]
                err[far] = -1.0
            assign = None
            continue
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            centroids[c] = x[assign == c].mean(axis=0)
    if assign is None:
        assign = new
    return assign


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return -math.fsum((p * np.log(p)).tolist())


def nmi(assignments, true_labels) -> float:
    """Mutual information normalized by the arithmetic mean of the two entropies."""
    a = np.asarray(assignments)
    b = np.asarray(true_labels)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"nmi: label arrays {a.shape} and {b.shape} differ")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    h_a = _entropy(table.sum(axis=1))
    h_b = _entropy(table.sum(axis=0))
    if h_a == 0 and h_b == 0:
        return 1.0
    n = table.sum()
    nz = table > 0
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))
    # fsum is order-free, which makes the score exactly symmetric
    mi = math.fsum((table[nz] / n * np.log(table[nz] * n / outer[nz])).tolist())
    denom = 0.5 * (h_a + h_b)
    return float(np.clip(mi / denom, 0.0, 1.0))


def silhouette(x, assignments) -> float:
    """Mean silhouette; singleton clusters score 0 and a single cluster gives 0."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(assignments)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ShapeError(f"silhouette: points {x.shape} vs assignments {labels.shape}")
    clusters = np.unique(labels)
    if clusters.size < 2:
        return 0.0
    dist = distance_matrix(x, x)
    scores = np.zeros(x.shape[0])
    members = {c: labels == c for c in clusters}
    for i in range(x.shape[0]):
        own = members[labels[i]]
        if own.sum() == 1:
            continue
        a = dist[i, own].sum() / (own.sum() - 1)
        b = min(dist[i, m].mean() for c, m in members.items() if c != labels[i])
        top = max(a, b)
        scores[i] = 0.0 if top == 0 else (b - a) / top
    return float(scores.mean())


def query_gallery_split(emb, ids, cams) -> RetrievalSplit:
    """Per identity, the first sample seen from each camera is a query; the rest form the gallery."""
    emb = np.asarray(emb, dtype=np.float64)
    ids = np.asarray(ids)
    cams = np.asarray(cams)
    seen = set()
    is_query = np.zeros(len(ids), dtype=bool)
    for i, key in enumerate(zip(ids.tolist(), cams.tolist())):
        if key not in seen:
            seen.add(key)
            is_query[i] = True
    return RetrievalSplit(emb[is_query], ids[is_query], cams[is_query], emb[~is_query], ids[~is_query], cams[~is_query])


def evaluate_embeddings(emb, ids, cams, seed: int = 0, loss_traces: dict | None = None) -> MetricsReport:
    """Full report for one evaluated domain; clustering uses k = number of identities."""
    split = query_gallery_split(emb, ids, cams)
    curve = cmc(split)
    k = len(np.unique(ids))
    assign = kmeans(emb, k, seed)
    return MetricsReport(
        rank1=curve.rank(1),
        rank5=curve.rank(5),
        rank10=curve.rank(10),
        map=mean_ap(split),
        nmi=nmi(assign, ids),
        silhouette=silhouette(emb, assign),
        num_queries=curve.num_valid,
        num_skipped=curve.num_skipped,
        loss_traces=dict(loss_traces or {}),
    )


def average_reports(reports: list[MetricsReport]) -> MetricsReport:
    keys = ("rank1", "rank5", "rank10", "map", "nmi", "silhouette")
    vals = {k: math.fsum(getattr(r, k) for r in reports) / len(reports) for k in keys}
    return MetricsReport(
        **vals,
        num_queries=sum(r.num_queries for r in reports),
        num_skipped=sum(r.num_skipped for r in reports),
    )
