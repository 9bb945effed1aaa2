"""Differentiable encoders mapping a feature matrix to an embedding vector.

Two small architectures share one MLP trunk:

* ``stats-mlp``: per-coefficient mean and standard deviation over frames
  (a 2F statistics vector), then an MLP. Invariant to frame order.
* ``attention-mlp``: one single-head self-attention layer over frames
  with sinusoidal position encoding, mean-pooled, then the same MLP.
  Position encoding makes it sensitive to frame order.

Inputs may also be plain feature vectors (synthetic tasks); those feed
the MLP directly with no pooling.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    GraphError,
    Tensor,
    concat,
    matmul,
    mean_reduce,
    reshape,
    rows,
    softmax,
    softplus,
    sqrt,
    stack,
    transpose,
)

ARCHITECTURES = ("stats-mlp", "attention-mlp")


@dataclass
class EncoderConfig:
    architecture: str = "stats-mlp"
    embed_dim: int = 64
    hidden_dims: tuple = (128, 128)
    feature_dim: int = 13
    vector_input: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(
                f"unknown architecture {self.architecture!r}, expected one of {ARCHITECTURES}"
            )
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")

    @property
    def mlp_input_dim(self):
        if self.vector_input:
            return self.feature_dim
        if self.architecture == "stats-mlp":
            return 2 * self.feature_dim
        return self.feature_dim  # attention output keeps feature width

    def to_dict(self):
        return {
            "architecture": self.architecture,
            "embed_dim": self.embed_dim,
            "hidden_dims": list(self.hidden_dims),
            "feature_dim": self.feature_dim,
            "vector_input": self.vector_input,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden_dims"] = tuple(d["hidden_dims"])
        return cls(**d)


def _xavier(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(config):
    """Glorot-uniform weights, zero biases; deterministic in the seed.

    Draw order is fixed (attention projections first, then MLP layers in
    depth order) so identical configs give bit-identical parameters.
    """
    rng = np.random.default_rng(config.seed)
    params = {}
    if config.architecture == "attention-mlp" and not config.vector_input:
        f = config.feature_dim
        for name in ("attn.wq", "attn.wk", "attn.wv"):
            params[name] = _xavier(rng, f, f)
    dims = [config.mlp_input_dim, *config.hidden_dims, config.embed_dim]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"mlp.{i}.w"] = _xavier(rng, a, b)
        params[f"mlp.{i}.b"] = np.zeros(b)
    return params


def param_count(params):
    return sum(int(np.asarray(p).size) for p in params.values())


def sinusoidal_positions(n_frames, width):
    """Standard sin/cos position encoding; handles odd widths."""
    pos = np.arange(n_frames, dtype=np.float64)[:, None]
    k = np.arange(width)
    angle = pos / np.power(10000.0, 2.0 * (k // 2) / width)
    return np.where(k % 2 == 0, np.sin(angle), np.cos(angle))


def _features_array(x):
    frames = getattr(x, "frames", x)
    return np.asarray(frames, dtype=np.float64)


def _bind(params, graph):
    """Bind parameter arrays as named graph inputs; pass bound Tensors through."""
    out = {}
    for name, arr in params.items():
        if isinstance(arr, Tensor):
            if arr.graph is not graph:
                raise GraphError(f"parameter {name!r} lives on a different graph")
            out[name] = arr
        else:
            out[name] = graph.input_or_get(name, arr)
    return out


def _mlp(x, bound, n_layers):
    h = x
    for i in range(n_layers):
        h = matmul(h, bound[f"mlp.{i}.w"]) + bound[f"mlp.{i}.b"]
        if i < n_layers - 1:
            h = softplus(h)
    return h


def _pooled_stats(mat, graph):
    """Mean and population std per coefficient over frames; shape (2F,)."""
    m = mean_reduce(mat, axis=0)
    dev = mat - m
    var = mean_reduce(dev * dev, axis=0)
    return concat([m, sqrt(var)])


def _attention_pool(mat, bound, graph):
    t, f = mat.shape
    a = mat + graph.constant(sinusoidal_positions(t, f))
    q = matmul(a, bound["attn.wq"])
    k = matmul(a, bound["attn.wk"])
    v = matmul(a, bound["attn.wv"])
    scores = matmul(q, transpose(k)) * (1.0 / np.sqrt(float(f)))
    return mean_reduce(matmul(softmax(scores, axis=-1), v), axis=0)


def _n_layers(params):
    n = 0
    while f"mlp.{n}.w" in params:
        n += 1
    return n


def embed_batch(features, params, graph):
    """Embed a list of feature matrices/vectors; returns a (B, d) Tensor.

    Row i equals ``embed(features[i])``: vectors of equal length share a
    single MLP pass, frame matrices are pooled per sample first.
    """
    if not features:
        raise ValueError("embed_batch of an empty list")
    bound = _bind(params, graph)
    n_layers = _n_layers(params)
    in_dim = params["mlp.0.w"].shape[0]
    attention = "attn.wq" in params
    arrays = [_features_array(x) for x in features]

    if all(a.ndim == 1 for a in arrays):
        widths = {a.shape[0] for a in arrays}
        if widths != {in_dim}:
            raise GraphError(
                f"vector inputs of width {sorted(widths)} do not match "
                f"encoder input dimension {in_dim}"
            )
        x = graph.constant(np.stack(arrays))
        return _mlp(x, bound, n_layers)

    pooled = []
    for a in arrays:
        if a.ndim != 2 or a.shape[0] < 1:
            raise GraphError(f"expected a (frames, coeffs) matrix, got shape {a.shape}")
        mat = graph.constant(a)
        if attention:
            pooled.append(_attention_pool(mat, bound, graph))
        else:
            pooled.append(_pooled_stats(mat, graph))
    x = stack(pooled, axis=0)
    if x.shape[1] != in_dim:
        raise GraphError(
            f"pooled width {x.shape[1]} does not match encoder input dimension {in_dim}"
        )
    return _mlp(x, bound, n_layers)


def embed(features, params, graph):
    """Embed one clip (or vector); returns a (d,) Tensor on ``graph``."""
    out = embed_batch([features], params, graph)
    return reshape(rows(out, 0, 1), (out.shape[1],))


def embed_batch_values(features, params):
    """Plain-ndarray embeddings via a throwaway graph (evaluation path)."""
    from .autodiff import DiffGraph

    return embed_batch(features, params, DiffGraph()).data
