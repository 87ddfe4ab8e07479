"""MLP backbone, embedding head, L2 normalization and identity classifier."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import DegenerateEmbeddingError, FormatError, ShapeError
from .tensor import Tensor

EPS_NORM = 1e-12
CHECKPOINT_MAGIC = b"AIDACKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    num_classes: int = 2
    classify_on_raw: bool = False


def backbone_layer_names(num_layers: int) -> list[tuple[str, str]]:
    return [(f"backbone.{i}.weight", f"backbone.{i}.bias") for i in range(num_layers)]


def init_params(cfg: ModelConfig, seed: int | np.random.Generator) -> dict[str, np.ndarray]:
    """He-normal weights (variance 2/fan_in), zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dims = [cfg.feature_dim, *cfg.hidden_dims]
    params: dict[str, np.ndarray] = {}

    def affine(wname, bname, fan_in, fan_out):
        params[wname] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        params[bname] = np.zeros(fan_out)

    for (w, b), (i, o) in zip(backbone_layer_names(len(cfg.hidden_dims)), zip(dims[:-1], dims[1:])):
        affine(w, b, i, o)
    affine("head.weight", "head.bias", dims[-1], cfg.embed_dim)
    affine("classifier.weight", "classifier.bias", cfg.embed_dim, cfg.num_classes)
    return params


def _num_backbone_layers(params: Mapping) -> int:
    n = 0
    while f"backbone.{n}.weight" in params:
        n += 1
    return n


def check_params(params: Mapping[str, np.ndarray]) -> None:
    """Raise ShapeError unless the layer shapes chain and all values are finite."""
    n = _num_backbone_layers(params)
    names = [*backbone_layer_names(n), ("head.weight", "head.bias"), ("classifier.weight", "classifier.bias")]
    prev = None
    for w, b in names:
        W, B = np.asarray(_data(params[w])), np.asarray(_data(params[b]))
        if W.ndim != 2 or B.shape != (W.shape[1],):
            raise ShapeError(f"{w}/{b}: bad shapes {W.shape}, {B.shape}")
        if prev is not None and W.shape[0] != prev:
            raise ShapeError(f"{w}: expects {W.shape[0]} inputs, previous layer gives {prev}")
        if not (np.isfinite(W).all() and np.isfinite(B).all()):
            raise ShapeError(f"{w}/{b}: non-finite values")
        prev = W.shape[1]


def _data(p):
    return p.data if isinstance(p, Tensor) else p


def _t(p):
    return p if isinstance(p, Tensor) else Tensor(p)


def _affine(x, W, b):
    return T.add(T.matmul(x, _t(W)), _t(b))


def extract_features(params: Mapping, x) -> Tensor:
    """Backbone output (affine layers with ReLU in between, none after the last)."""
    x = T.as_tensor(x)
    n = _num_backbone_layers(params)
    if n == 0:
        raise ShapeError("params contain no backbone layers")
    in_dim = _data(params["backbone.0.weight"]).shape[0]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ShapeError(f"extract_features: expected (batch, {in_dim}) input, got {x.shape}")
    h = x
    for i, (w, b) in enumerate(backbone_layer_names(n)):
        h = _affine(h, params[w], params[b])
        if i < n - 1:
            h = T.relu(h)
    return h


def embed(params: Mapping, f) -> Tensor:
    f = T.as_tensor(f)
    in_dim = _data(params["head.weight"]).shape[0]
    if f.ndim != 2 or f.shape[1] != in_dim:
        raise ShapeError(f"embed: expected (batch, {in_dim}) features, got {f.shape}")
    return _affine(f, params["head.weight"], params["head.bias"])


def l2_normalize(z, eps: float = EPS_NORM) -> Tensor:
    z = T.as_tensor(z)
    norms = T.l2_norm(z, keepdims=True)
    bad = np.flatnonzero(norms.data.reshape(-1) <= eps)
    if bad.size:
        raise DegenerateEmbeddingError(f"embedding rows {bad.tolist()} have norm <= {eps}")
    return T.div(z, norms)


def logits(params: Mapping, z_hat) -> Tensor:
    z_hat = T.as_tensor(z_hat)
    in_dim = _data(params["classifier.weight"]).shape[0]
    if z_hat.ndim != 2 or z_hat.shape[1] != in_dim:
        raise ShapeError(f"classify: expected (batch, {in_dim}) embeddings, got {z_hat.shape}")
    return _affine(z_hat, params["classifier.weight"], params["classifier.bias"])


def classify(params: Mapping, z_hat) -> Tensor:
    """Posteriors over the union identity space (softmax of classifier logits)."""
    return T.softmax(logits(params, z_hat))


def forward(params: Mapping, x, classify_on_raw: bool = False) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Returns (features, raw embedding, normalized embedding, posteriors)."""
    f = extract_features(params, x)
    z = embed(params, f)
    z_hat = l2_normalize(z)
    p = classify(params, z if classify_on_raw else z_hat)
    return f, z, z_hat, p


def embed_numpy(params: Mapping, x: np.ndarray) -> np.ndarray:
    """Normalized embeddings of a raw batch, without recording anything."""
    plain = {k: _data(v) for k, v in params.items()}
    return l2_normalize(embed(plain, extract_features(plain, x))).data


# -- checkpoints ----------------------------------------------------------------
# layout: magic(8) | version u32 | count u32 | per tensor:
#   name_len u32 | name utf-8 | rank u32 | dims u64 * rank | data <f8 * prod(dims)


def checkpoint_bytes(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(_data(tensors[name]), dtype="<f8", order="C")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def checkpoint_from_bytes(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != CHECKPOINT_MAGIC:
        raise FormatError("not an aida checkpoint (bad magic)")
    pos = 8

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError("checkpoint truncated")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = read("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = read("<I")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = read("<I")
        dims = read(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if pos + 8 * n > len(buf):
            raise FormatError("checkpoint truncated")
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * n
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint payload")
    return tensors


def save_checkpoint(tensors: Mapping[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return checkpoint_from_bytes(path.read_bytes())


def model_params(tensors: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Strip non-model entries (controller state etc.) from a checkpoint dict."""
    return {k: v for k, v in tensors.items() if k.split(".")[0] in ("backbone", "head", "classifier")}
