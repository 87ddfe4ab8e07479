"""Synthetic multi-domain Re-ID style datasets and identity-balanced sampling."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, FormatError, SamplingError

DATASET_FORMAT_VERSION = 1
SAMPLE_FIELDS = ("raw_vector", "identity_label", "domain_id", "camera_id")


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for one consumer of the root seed.

    String keys are hashed with crc32 so the split is stable across runs.
    """
    entropy = [int(seed)]
    for k in keys:
        entropy.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    num_identities: int
    samples_per_identity: int
    num_cameras: int
    feature_dim: int
    style_scale: tuple[float, ...] = ()
    style_offset: tuple[float, ...] = ()
    camera_jitter: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_identities", "samples_per_identity", "num_cameras", "feature_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"DomainSpec.{name} must be >= 1")
        if self.samples_per_identity < 2:
            raise ContractError("DomainSpec.samples_per_identity must be >= 2 (positive pairs)")
        scale = tuple(float(s) for s in self.style_scale) or (1.0,) * self.feature_dim
        offset = tuple(float(o) for o in self.style_offset) or (0.0,) * self.feature_dim
        if len(scale) != self.feature_dim or len(offset) != self.feature_dim:
            raise ContractError("style_scale/style_offset must have feature_dim entries")
        if any(s <= 0 for s in scale):
            raise ContractError("style scales must be > 0")
        if self.camera_jitter < 0 or self.noise_sigma < 0:
            raise ContractError("camera_jitter and noise_sigma must be >= 0")
        object.__setattr__(self, "style_scale", scale)
        object.__setattr__(self, "style_offset", offset)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown DomainSpec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["style_scale"] = list(self.style_scale)
        d["style_offset"] = list(self.style_offset)
        return d


@dataclass(frozen=True)
class Sample:
    raw_vector: np.ndarray
    identity_label: int
    domain_id: int
    camera_id: int


@dataclass(frozen=True)
class DomainDataset:
    spec: DomainSpec
    samples: tuple[Sample, ...] = field(repr=False)

    def __len__(self):
        return len(self.samples)

    @property
    def features(self) -> np.ndarray:
        return np.stack([s.raw_vector for s in self.samples])

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.identity_label for s in self.samples], dtype=np.int64)

    @property
    def cameras(self) -> np.ndarray:
        return np.array([s.camera_id for s in self.samples], dtype=np.int64)

    @property
    def identities(self) -> list[int]:
        return sorted({s.identity_label for s in self.samples})


def generate_domain(spec: DomainSpec) -> DomainDataset:
    """Draw one domain: identity prototypes pushed through the domain's affine style.

    sample = scale * (prototype + noise) + offset + camera_offset
    """
    rng = derive_rng(spec.seed, "domain", spec.domain_id)
    D = spec.feature_dim
    prototypes = rng.standard_normal((spec.num_identities, D))
    cam_dirs = rng.standard_normal((spec.num_cameras, D))
    cam_dirs /= np.maximum(np.linalg.norm(cam_dirs, axis=1, keepdims=True), 1e-12)
    cam_offsets = spec.camera_jitter * cam_dirs
    scale = np.array(spec.style_scale)
    offset = np.array(spec.style_offset)

    samples = []
    for ident in range(spec.num_identities):
        cam_start = int(rng.integers(spec.num_cameras))
        noise = rng.standard_normal((spec.samples_per_identity, D)) * spec.noise_sigma
        for j in range(spec.samples_per_identity):
            cam = (cam_start + j) % spec.num_cameras
            vec = scale * (prototypes[ident] + noise[j]) + offset + cam_offsets[cam]
            vec.flags.writeable = False
            samples.append(Sample(vec, ident, spec.domain_id, cam))
    return DomainDataset(spec, tuple(samples))


def make_disjoint(domains: Sequence[DomainDataset]) -> list[DomainDataset]:
    """Shift identity labels so each domain owns a separate contiguous label range."""
    if not domains:
        raise ContractError("make_disjoint needs at least one domain")
    out = []
    offset = 0
    for ds in domains:
        ids = ds.identities
        remap = {old: offset + i for i, old in enumerate(ids)}
        samples = tuple(replace(s, identity_label=remap[s.identity_label]) for s in ds.samples)
        out.append(DomainDataset(ds.spec, samples))
        offset += len(ids)
    return out


def pk_sample(
    datasets: DomainDataset | Sequence[DomainDataset],
    P: int,
    K_inst: int,
    seed: int | np.random.Generator,
    domain_balanced: bool = False,
) -> list[Sample]:
    """Identity-balanced batch of ``P`` identities x ``K_inst`` instances.

    With ``domain_balanced`` the P identities are spread round-robin over the
    domains so every domain appears in the batch whenever P >= #domains.
    """
    if isinstance(datasets, DomainDataset):
        datasets = [datasets]
    if P < 2 or K_inst < 2:
        raise SamplingError(f"pk_sample needs P >= 2 and K_inst >= 2, got P={P}, K_inst={K_inst}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    pools: list[dict[int, list[Sample]]] = []
    for ds in datasets:
        pool: dict[int, list[Sample]] = {}
        for s in ds.samples:
            pool.setdefault(s.identity_label, []).append(s)
        pools.append({i: v for i, v in sorted(pool.items()) if len(v) >= K_inst})

    if domain_balanced:
        quota = [P // len(pools) + (1 if k < P % len(pools) else 0) for k in range(len(pools))]
        for k, (q, pool) in enumerate(zip(quota, pools)):
            if len(pool) < q:
                raise SamplingError(
                    f"domain {k} has {len(pool)} identities with >= {K_inst} instances, batch needs {q}"
                )
        chosen = []
        for q, pool in zip(quota, pools):
            ids = list(pool)
            chosen += [pool[ids[i]] for i in rng.choice(len(ids), size=q, replace=False)]
    else:
        merged = {i: v for pool in pools for i, v in pool.items()}
        if len(merged) < P:
            raise SamplingError(
                f"only {len(merged)} identities have >= {K_inst} instances, batch needs P={P}"
            )
        ids = list(merged)
        chosen = [merged[ids[i]] for i in rng.choice(len(ids), size=P, replace=False)]

    batch = []
    for inst in chosen:
        pick = rng.choice(len(inst), size=K_inst, replace=False)
        batch += [inst[j] for j in pick]
    return batch


def batch_arrays(batch: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(features, labels, domain ids, camera ids) of a list of samples."""
    x = np.stack([s.raw_vector for s in batch])
    y = np.array([s.identity_label for s in batch], dtype=np.int64)
    dom = np.array([s.domain_id for s in batch], dtype=np.int64)
    cam = np.array([s.camera_id for s in batch], dtype=np.int64)
    return x, y, dom, cam


def benchmark_specs(
    num_sources: int,
    num_identities: int,
    samples_per_identity: int,
    num_cameras: int,
    feature_dim: int,
    seed: int,
    shift_scale: float = 1.0,
    camera_jitter: float = 0.3,
    noise_sigma: float = 0.5,
) -> tuple[list[DomainSpec], DomainSpec]:
    """Source specs plus one target spec whose style lies outside the sources' hull.

    Scales are log-normal around 1, offsets Gaussian. The target offset is the
    source centroid pushed along a direction orthogonal to the source span,
    and its scale is the source geometric mean stretched away from 1.
    """
    rng = derive_rng(seed, "benchmark")
    log_scales = rng.normal(0.0, 0.35 * shift_scale, size=(num_sources, feature_dim))
    offsets = rng.normal(0.0, 1.0 * shift_scale, size=(num_sources, feature_dim))

    centroid = offsets.mean(axis=0)
    direction = rng.standard_normal(feature_dim)
    span = offsets - centroid
    if num_sources > 1:
        q, _ = np.linalg.qr(span.T)
        direction -= q @ (q.T @ direction)
    direction /= np.linalg.norm(direction)
    radius = np.linalg.norm(span, axis=1).max() if num_sources > 1 else 1.0
    target_offset = centroid + 1.5 * max(radius, shift_scale) * direction
    target_log_scale = 1.5 * log_scales.mean(axis=0) + rng.normal(0.0, 0.35 * shift_scale, feature_dim)

    def spec(k, ls, off):
        return DomainSpec(
            domain_id=k,
            num_identities=num_identities,
            samples_per_identity=samples_per_identity,
            num_cameras=num_cameras,
            feature_dim=feature_dim,
            style_scale=tuple(np.exp(ls).tolist()),
            style_offset=tuple(off.tolist()),
            camera_jitter=camera_jitter,
            noise_sigma=noise_sigma,
            seed=int(derive_rng(seed, "domain-seed", k).integers(2**31)),
        )

    sources = [spec(k, log_scales[k], offsets[k]) for k in range(num_sources)]
    return sources, spec(num_sources, target_log_scale, target_offset)


# -- JSON persistence -----------------------------------------------------------


def dataset_to_json(ds: DomainDataset) -> str:
    doc = {
        "format_version": DATASET_FORMAT_VERSION,
        "spec": ds.spec.to_dict(),
        "sample_fields": list(SAMPLE_FIELDS),
        "samples": [
            [s.raw_vector.tolist(), int(s.identity_label), int(s.domain_id), int(s.camera_id)]
            for s in ds.samples
        ],
    }
    # repr-based float output round-trips float64 exactly
    return json.dumps(doc, separators=(",", ":"))


def dataset_from_json(text: str) -> DomainDataset:
    doc = json.loads(text)
    if doc.get("format_version") != DATASET_FORMAT_VERSION:
        raise FormatError(f"unsupported dataset format_version {doc.get('format_version')!r}")
    if doc.get("sample_fields") != list(SAMPLE_FIELDS):
        raise FormatError(f"unexpected sample_fields {doc.get('sample_fields')!r}")
    spec = DomainSpec.from_dict(doc["spec"])
    samples = []
    for vec, label, dom, cam in doc["samples"]:
        arr = np.array(vec, dtype=np.float64)
        if arr.shape != (spec.feature_dim,):
            raise FormatError(f"sample vector has shape {arr.shape}, expected ({spec.feature_dim},)")
        arr.flags.writeable = False
        samples.append(Sample(arr, int(label), int(dom), int(cam)))
    return DomainDataset(spec, tuple(samples))


def save_dataset(ds: DomainDataset, path: str | Path) -> None:
    Path(path).write_text(dataset_to_json(ds))


def load_dataset(path: str | Path) -> DomainDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return dataset_from_json(path.read_text())
