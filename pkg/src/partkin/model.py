"""Set-prediction attention network over point clouds with per-part decoder heads.

A fixed budget of learnable part queries attends to the point cloud through
B blocks of (query self-attention, query-from-points cross-attention,
points-from-queries cross-attention), each sub-module being pre-layer-norm
multi-head attention plus a residual MLP on the stream it updated.  There is
deliberately no point-point self-attention, so no N x N intermediate ever
exists and dense clouds stay affordable.

Decoder heads read the final latents: per-(point, query) segmentation
logits, per-(query, query) parent logits, and per-query motion type, ranges
and unit directions.  Revolute axis locations are over-parameterized: a
pair head predicts, for any (point, query) pair, the axis point closest to
that input point; votes are aggregated downstream by a median.

Point order note: the forward pass internally sorts points into a canonical
lexicographic order and scatters per-point outputs back, so reductions over
points always accumulate in the same order.  This makes point-permutation
equivariance bitwise exact, which the test suite relies on.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .geometry import PointCloud
from .tensor import Tensor

PAIR_CHUNK = 16384  # untracked forward evaluates pair heads in chunks this size


class NumericalError(ArithmeticError):
    """Raised when a forward pass produces non-finite activations."""


@dataclass(frozen=True)
class ModelConfig:
    working_dim: int = 64
    blocks: int = 2
    heads: int = 4
    max_parts: int = 8
    feature_dim: int = 0
    mlp_hidden: int = 128
    head_hidden: int = 64

    def __post_init__(self):
        if self.working_dim % self.heads != 0:
            raise ValueError(
                f"working_dim {self.working_dim} not divisible by heads {self.heads}"
            )
        if self.max_parts < 1:
            raise ValueError("max_parts must be >= 1")
        if self.feature_dim < 0:
            raise ValueError("feature_dim must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


def _weight_shapes(config: ModelConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    """Single source of truth for every learnable tensor's name and shape."""
    d, h = config.working_dim, config.mlp_hidden
    hh = config.head_hidden

    def mlp2(prefix: str, d_in: int, d_hidden: int, d_out: int):
        yield f"{prefix}.w1", (d_in, d_hidden)
        yield f"{prefix}.b1", (d_hidden,)
        yield f"{prefix}.w2", (d_hidden, d_out)
        yield f"{prefix}.b2", (d_out,)

    def lnorm(prefix: str):
        yield f"{prefix}.gamma", (d,)
        yield f"{prefix}.beta", (d,)

    yield from mlp2("embed.pos", 3, d, d)
    yield from mlp2("embed.nrm", 3, d, d)
    if config.feature_dim > 0:
        yield from mlp2("embed.feat", config.feature_dim, d, d)
    yield "queries", (config.max_parts, d)

    for b in range(config.blocks):
        for sub, cross in (("qsa", False), ("q_from_p", True), ("p_from_q", True)):
            prefix = f"block{b}.{sub}"
            yield from lnorm(f"{prefix}.ln_q")
            if cross:
                yield from lnorm(f"{prefix}.ln_kv")
            for w in ("wq", "wk", "wv", "wo"):
                yield f"{prefix}.{w}", (d, d)
            for bias in ("bq", "bk", "bv", "bo"):
                yield f"{prefix}.{bias}", (d,)
            yield from lnorm(f"{prefix}.mlp.ln")
            yield from mlp2(f"{prefix}.mlp", d, h, d)

    yield from lnorm("final.ln_p")
    yield from lnorm("final.ln_q")

    yield "head.seg.proj_p", (d, d)
    yield "head.seg.proj_q", (d, d)
    yield from mlp2("head.seg.pair", 2 * d, hh, 1)
    yield from mlp2("head.kin", 2 * d, hh, 1)
    yield from mlp2("head.type", d, hh, 4)
    yield from mlp2("head.prange", d, hh, 2)
    yield from mlp2("head.rrange", d, hh, 2)
    yield from mlp2("head.pdir", d, hh, 3)
    yield from mlp2("head.rdir", d, hh, 3)
    yield from mlp2("head.axis_point", 2 * d, hh, 3)


def count_params(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in _weight_shapes(config))


class ModelWeights:
    """Named parameter tensors for one config, plus checkpoint I/O."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "ModelWeights":
        """Seeded init: queries ~ N(0, 0.02), matrices fan-in uniform, LN identity."""
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        for name, shape in _weight_shapes(config):
            if name == "queries":
                data = rng.normal(0.0, 0.02, shape)
            elif name.endswith(".gamma"):
                data = np.ones(shape)
            elif name.endswith((".beta", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo")):
                data = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(shape[0])
                data = rng.uniform(-bound, bound, shape)
            params[name] = Tensor(data, requires_grad=True)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def all_finite(self) -> bool:
        return all(np.isfinite(p.data).all() for p in self.params.values())

    def save(self, path) -> None:
        T.save_weights(path, self.params)
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(self.config.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "ModelWeights":
        with open(str(path) + ".json", "r", encoding="utf-8") as fh:
            config = ModelConfig.from_json(json.load(fh))
        params = T.load_weights(path)
        expected = dict(_weight_shapes(config))
        if set(params) != set(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            raise ValueError(f"checkpoint/config mismatch: missing={missing}, extra={extra}")
        for name, shape in expected.items():
            if params[name].shape != tuple(shape):
                raise ValueError(
                    f"checkpoint tensor {name} has shape {params[name].shape}, "
                    f"config wants {tuple(shape)}"
                )
        return cls(config, params)


# ---------------------------------------------------------------------------
# forward building blocks


def _mlp2(x: Tensor, w, prefix: str) -> Tensor:
    hidden = T.gelu(T.add(T.matmul(x, w[f"{prefix}.w1"]), w[f"{prefix}.b1"]))
    return T.add(T.matmul(hidden, w[f"{prefix}.w2"]), w[f"{prefix}.b2"])


def _embed(positions, normals, features, w: ModelWeights) -> Tensor:
    out = T.add(
        _mlp2(Tensor(positions), w, "embed.pos"),
        _mlp2(Tensor(normals), w, "embed.nrm"),
    )
    if w.config.feature_dim > 0:
        out = T.add(out, _mlp2(Tensor(features), w, "embed.feat"))
    return out


def embed_points(points: PointCloud, weights: ModelWeights) -> Tensor:
    """Per-point latents: summed position/normal/feature MLP embeddings (N, D)."""
    if points.feature_dim != weights.config.feature_dim:
        raise T.ShapeError(
            f"embed_points: cloud feature dim {points.feature_dim} != "
            f"model feature dim {weights.config.feature_dim}"
        )
    return _embed(points.positions, points.normals, points.features, weights)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return T.transpose(T.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, h * dh))


def _attend(stream: Tensor, kv_in: Tensor, q_in: Tensor, w, prefix: str, heads: int) -> Tensor:
    """Pre-LN multi-head attention + residual; `q_in`/`kv_in` already normalized."""
    d = q_in.shape[1]
    q = _split_heads(T.add(T.matmul(q_in, w[f"{prefix}.wq"]), w[f"{prefix}.bq"]), heads)
    k = _split_heads(T.add(T.matmul(kv_in, w[f"{prefix}.wk"]), w[f"{prefix}.bk"]), heads)
    v = _split_heads(T.add(T.matmul(kv_in, w[f"{prefix}.wv"]), w[f"{prefix}.bv"]), heads)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d // heads))
    attn = T.softmax(scores, axis=-1)
    mixed = _merge_heads(T.matmul(attn, v))
    out = T.add(T.matmul(mixed, w[f"{prefix}.wo"]), w[f"{prefix}.bo"])
    return T.add(stream, out)


def _ln(x: Tensor, w, prefix: str) -> Tensor:
    return T.layer_norm(x, w[f"{prefix}.gamma"], w[f"{prefix}.beta"], axis=-1)


def _sub_module(stream_q, stream_kv, w, prefix: str, heads: int, self_attn: bool) -> Tensor:
    q_in = _ln(stream_q, w, f"{prefix}.ln_q")
    kv_in = q_in if self_attn else _ln(stream_kv, w, f"{prefix}.ln_kv")
    updated = _attend(stream_q, kv_in, q_in, w, prefix, heads)
    return T.add(updated, _mlp2(_ln(updated, w, f"{prefix}.mlp.ln"), w, f"{prefix}.mlp"))


def _pair_scores(a: Tensor, b: Tensor, w, prefix: str, out_dim: int) -> Tensor:
    """MLP over all (row of a, row of b) concatenations -> (len(a), len(b), out_dim).

    The first linear layer splits over the concatenation, so only the
    (n, m, hidden) activation is ever materialized.
    """
    d = a.shape[1]
    w1, b1 = w[f"{prefix}.w1"], w[f"{prefix}.b1"]
    part_a = T.matmul(a, T.slice_axis(w1, 0, 0, d))
    part_b = T.matmul(b, T.slice_axis(w1, 0, d, 2 * d))
    n, m = part_a.shape[0], part_b.shape[0]
    h = part_a.shape[1]
    hidden = T.gelu(
        T.add(T.add(T.reshape(part_a, (n, 1, h)), T.reshape(part_b, (1, m, h))), b1)
    )
    return T.add(T.matmul(hidden, w[f"{prefix}.w2"]), w[f"{prefix}.b2"])


def _seg_logits(p_lat: Tensor, q_lat: Tensor, w: ModelWeights) -> Tensor:
    """Dot product of projected latents plus a pair-MLP bias term: (N, P_max)."""
    d = p_lat.shape[1]
    dot = T.mul(
        T.matmul(T.matmul(p_lat, w["head.seg.proj_p"]),
                 T.transpose(T.matmul(q_lat, w["head.seg.proj_q"]))),
        1.0 / math.sqrt(d),
    )
    n, m = dot.shape
    if T.active_tape() is None and n > PAIR_CHUNK:
        chunks = []
        for start in range(0, n, PAIR_CHUNK):
            block = T.gather_rows(p_lat, np.arange(start, min(start + PAIR_CHUNK, n)))
            chunks.append(T.reshape(_pair_scores(block, q_lat, w, "head.seg.pair", 1), (-1, m)))
        pair = T.concat(chunks, axis=0)
    else:
        pair = T.reshape(_pair_scores(p_lat, q_lat, w, "head.seg.pair", 1), (n, m))
    return T.add(dot, pair)


@dataclass
class NetworkOutput:
    """Raw head outputs plus the latents the axis-vote head needs.

    ``seg_logits`` rows follow the input point order.  Axis-location votes
    are not materialized as an N x P_max x 3 block; request them per
    (point, query) pair via :meth:`axis_votes`.
    """

    seg_logits: Tensor
    kin_logits: Tensor
    type_logits: Tensor
    prismatic_range: Tensor
    revolute_range: Tensor
    prismatic_dir: Tensor
    revolute_dir: Tensor
    latent_points: Tensor
    latent_queries: Tensor
    weights: ModelWeights

    def axis_votes(self, point_ids: Sequence[int], query_ids: Sequence[int]) -> Tensor:
        """Votes x~(j,i): the axis point of query i closest to input point j; (k, 3)."""
        p = T.gather_rows(self.latent_points, np.asarray(point_ids, np.int64))
        q = T.gather_rows(self.latent_queries, np.asarray(query_ids, np.int64))
        pair = T.concat([p, q], axis=1)
        return _mlp2(pair, self.weights, "head.axis_point")


def axis_vote(latent_point: Tensor, latent_query: Tensor, weights: ModelWeights) -> np.ndarray:
    """Single (point, query) axis-location vote as a 3-vector."""
    pair = T.concat([T.reshape(latent_point, (1, -1)), T.reshape(latent_query, (1, -1))], axis=1)
    return _mlp2(pair, weights, "head.axis_point").data.reshape(3)


def forward(points: PointCloud, weights: ModelWeights) -> NetworkOutput:
    """Run the full network on a point cloud.

    Points are processed in a canonical lexicographic order (see module
    docstring) and per-point outputs are scattered back to input order.
    """
    config = weights.config
    n = len(points)
    if n < 1:
        raise ValueError("forward: empty point cloud")
    if points.feature_dim != config.feature_dim:
        raise T.ShapeError(
            f"forward: cloud feature dim {points.feature_dim} != "
            f"model feature dim {config.feature_dim}"
        )

    cols = [points.positions[:, i] for i in range(3)]
    cols += [points.normals[:, i] for i in range(3)]
    cols += [points.features[:, i] for i in range(points.feature_dim)]
    perm = np.lexsort(tuple(reversed(cols)))
    inv = np.argsort(perm)

    p_lat = _embed(
        points.positions[perm], points.normals[perm], points.features[perm], weights
    )
    q_lat = weights["queries"]

    for b in range(config.blocks):
        q_lat = _sub_module(q_lat, None, weights, f"block{b}.qsa", config.heads, True)
        q_lat = _sub_module(q_lat, p_lat, weights, f"block{b}.q_from_p", config.heads, False)
        p_lat = _sub_module(p_lat, q_lat, weights, f"block{b}.p_from_q", config.heads, False)
        if not (np.isfinite(q_lat.data).all() and np.isfinite(p_lat.data).all()):
            raise NumericalError(f"non-finite activation after block {b}")

    p_lat = _ln(p_lat, weights, "final.ln_p")
    q_lat = _ln(q_lat, weights, "final.ln_q")

    m = config.max_parts
    seg = T.gather_rows(_seg_logits(p_lat, q_lat, weights), inv)
    kin = T.reshape(_pair_scores(q_lat, q_lat, weights, "head.kin", 1), (m, m))
    return NetworkOutput(
        seg_logits=seg,
        kin_logits=kin,
        type_logits=_mlp2(q_lat, weights, "head.type"),
        prismatic_range=_mlp2(q_lat, weights, "head.prange"),
        revolute_range=_mlp2(q_lat, weights, "head.rrange"),
        prismatic_dir=T.l2_normalize(_mlp2(q_lat, weights, "head.pdir"), axis=-1),
        revolute_dir=T.l2_normalize(_mlp2(q_lat, weights, "head.rdir"), axis=-1),
        latent_points=T.gather_rows(p_lat, inv),
        latent_queries=q_lat,
        weights=weights,
    )
