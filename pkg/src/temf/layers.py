"""Neural building blocks: embedding fusion, positional encodings,
transformer encoder blocks, additive attention, dense layers, Adam.

Layers are parameter holders; calling them replays the forward graph on
the autodiff engine, so gradients come for free. Every layer exposes
``parameters()`` as (name, tensor) pairs for the optimizer and for
checkpointing.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ParseError, ShapeError
from .tensor import Tensor

LAYER_NORM_EPS = 1e-5


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: Sequence[int]) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


def sinusoidal_pe(length: int, dim: int) -> np.ndarray:
    """Fixed sine/cosine position table: sin on even columns, cos on odd."""
    if dim % 2 != 0:
        raise ContractError(f"positional encoding dimension must be even, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    k = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * k / dim)
    pe = np.empty((length, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


# ---------------------------------------------------------------------------
# embeddings


class EmbeddingTable:
    """token -> row lookup over a [V x D] matrix.

    Unknown tokens resolve to ``oov_vector`` (zeros unless overridden) and
    never fail. When ``trainable`` the matrix participates in backprop.
    """

    def __init__(self, tokens: Sequence[str], matrix: np.ndarray,
                 trainable: bool = False, oov_vector: np.ndarray | None = None,
                 name: str = "embedding"):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(tokens):
            raise ShapeError(f"embedding matrix {matrix.shape} does not match "
                             f"{len(tokens)} tokens")
        self.tokens = list(tokens)
        self.vocab = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.vocab) != len(self.tokens):
            raise ContractError("embedding tokens contain duplicates")
        self.matrix = Tensor(matrix, requires_grad=trainable, name=f"{name}.matrix")
        self.oov_vector = (np.zeros(matrix.shape[1]) if oov_vector is None
                           else np.asarray(oov_vector, dtype=np.float64))
        self.trainable = bool(trainable)
        self.name = name

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __contains__(self, token: str) -> bool:
        return token in self.vocab

    def lookup(self, token: str) -> np.ndarray:
        idx = self.vocab.get(token)
        return self.oov_vector if idx is None else self.matrix.data[idx]

    @classmethod
    def random(cls, tokens: Sequence[str], dim: int, rng: np.random.Generator,
               trainable: bool = True, name: str = "embedding") -> "EmbeddingTable":
        matrix = xavier_uniform(rng, dim, dim, (len(tokens), dim))
        return cls(tokens, matrix, trainable=trainable, name=name)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(self.matrix.name, self.matrix)] if self.trainable else []


def load_embedding_table(path, trainable: bool = False,
                         name: str = "embedding") -> EmbeddingTable:
    """Read the word-per-line text format: ``token v1 v2 ... vD``.

    An optional first line ``V D`` (exactly two integer columns) is
    recognized as a size header and skipped.
    """
    tokens: list[str] = []
    rows: list[np.ndarray] = []
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2:
                try:
                    int(parts[0]), int(parts[1])
                    continue  # size header
                except ValueError:
                    pass
            if len(parts) < 2:
                raise ParseError(f"{path}:{lineno}: expected 'token v1 ... vD'")
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric vector entry ({exc})")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ParseError(f"{path}:{lineno}: expected {dim} values, got {vec.size}")
            tokens.append(parts[0])
            rows.append(vec)
    if not tokens:
        raise ParseError(f"{path}: no embedding rows found")
    return EmbeddingTable(tokens, np.stack(rows), trainable=trainable, name=name)


def fused_embed(tokens: Sequence[str], table_a: EmbeddingTable,
                table_b: EmbeddingTable | None, max_len: int
                ) -> tuple[Tensor, np.ndarray]:
    """Embed a token sequence as a zero-padded [max_len x D] block.

    With two tables each row is the mean of the two lookups; with one it
    is the plain lookup. Returns (embeddings, mask) where mask flags the
    real (non-padding) positions. Unknown tokens embed as the OOV vector
    but are still masked as real.
    """
    if max_len <= 0:
        raise ContractError(f"max_len must be positive, got {max_len}")
    if table_b is not None and table_b.dim != table_a.dim:
        raise ShapeError(f"embedding dims differ: {table_a.dim} vs {table_b.dim}")
    dim = table_a.dim
    kept = list(tokens)[:max_len]
    mask = np.zeros(max_len, dtype=bool)
    mask[:len(kept)] = True
    if not kept:
        return Tensor(np.zeros((max_len, dim))), mask

    def table_rows(table: EmbeddingTable) -> Tensor:
        idx = np.array([table.vocab.get(t, 0) for t in kept], dtype=np.int64)
        known = np.array([t in table.vocab for t in kept], dtype=np.float64)
        rows = T.gather_rows(table.matrix, idx)
        if not known.all():
            rows = T.mul(rows, Tensor(np.repeat(known[:, None], dim, axis=1)))
            oov = np.outer(1.0 - known, table.oov_vector)
            if oov.any():
                rows = T.add(rows, Tensor(oov))
        return rows

    emb = table_rows(table_a)
    if table_b is not None:
        emb = T.scale(T.add(emb, table_rows(table_b)), 0.5)
    if len(kept) < max_len:
        emb = T.concat([emb, Tensor(np.zeros((max_len - len(kept), dim)))], axis=0)
    return emb, mask


# ---------------------------------------------------------------------------
# dense layers


def dense(x: Tensor, w: Tensor, b: Tensor | None, activation: str = "none") -> Tensor:
    """activation(x @ w + b) for a matrix or single-vector x."""
    vector_in = x.data.ndim == 1
    if vector_in:
        x = T.reshape(x, [1, x.shape[0]])
    out = T.matmul(x, w)
    if b is not None:
        out = T.add(out, b)
    if activation == "relu":
        out = T.relu(out)
    elif activation == "softmax":
        out = T.softmax(out, axis=1)
    elif activation != "none":
        raise ContractError(f"unknown activation {activation!r}")
    if vector_in:
        out = T.reshape(out, [out.shape[1]])
    return out


class Dense:
    """Learned affine map with an optional activation."""

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 activation: str = "none", bias: bool = True):
        self.name = name
        self.activation = activation
        self.w = Tensor(xavier_uniform(rng, d_in, d_out, (d_in, d_out)),
                        requires_grad=True, name=f"{name}.w")
        self.b = (Tensor(np.zeros(d_out), requires_grad=True, name=f"{name}.b")
                  if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.w, self.b, self.activation)

    def parameters(self) -> list[tuple[str, Tensor]]:
        params = [(self.w.name, self.w)]
        if self.b is not None:
            params.append((self.b.name, self.b))
        return params


class LayerNorm:
    def __init__(self, name: str, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True, name=f"{name}.gain")
        self.bias = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, eps=LAYER_NORM_EPS)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(self.gain.name, self.gain), (self.bias.name, self.bias)]


# ---------------------------------------------------------------------------
# additive attention


class AdditiveAttention:
    """Score keys against a query through a one-hidden-layer network.

    score_i = w3 . tanh(query @ w1 + key_i @ w2); weights are the masked
    softmax of the scores and the context is the weight-sum of the keys.
    """

    def __init__(self, name: str, d_query: int, d_key: int, d_attn: int,
                 rng: np.random.Generator):
        self.name = name
        self.d_attn = d_attn
        self.w1 = Tensor(xavier_uniform(rng, d_query, d_attn, (d_query, d_attn)),
                         requires_grad=True, name=f"{name}.w1")
        self.w2 = Tensor(xavier_uniform(rng, d_key, d_attn, (d_key, d_attn)),
                         requires_grad=True, name=f"{name}.w2")
        self.w3 = Tensor(xavier_uniform(rng, d_attn, 1, (d_attn,)),
                         requires_grad=True, name=f"{name}.w3")

    def __call__(self, query: Tensor, keys: Tensor, mask: np.ndarray
                 ) -> tuple[Tensor, Tensor]:
        if query.data.ndim != 1 or keys.data.ndim != 2:
            raise ShapeError(f"additive attention expects a query vector and a key "
                             f"matrix, got {query.shape} and {keys.shape}")
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ContractError(f"{self.name}: every key position is masked")
        q_hidden = T.reshape(T.matmul(T.reshape(query, [1, query.shape[0]]), self.w1),
                             [self.d_attn])
        hidden = T.tanh(T.add(T.matmul(keys, self.w2), q_hidden))
        scores = T.reshape(T.matmul(hidden, T.reshape(self.w3, [self.d_attn, 1])),
                           [keys.shape[0]])
        weights = T.softmax(scores, axis=0, mask=mask)
        context = T.reshape(T.matmul(T.reshape(weights, [1, keys.shape[0]]), keys),
                            [keys.shape[1]])
        return weights, context

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(t.name, t) for t in (self.w1, self.w2, self.w3)]


# ---------------------------------------------------------------------------
# transformer encoder block


class TransformerBlock:
    """Pre-norm encoder block: x + MHA(LN(x)), then x + FFN(LN(x)).

    Padding positions contribute no attention weight as keys, and the
    block zeroes their rows on output so they stay inert downstream.
    """

    def __init__(self, name: str, dim: int, heads: int, ffn_dim: int,
                 rng: np.random.Generator):
        if dim % heads != 0:
            raise ContractError(f"model dim {dim} not divisible by {heads} heads")
        self.name = name
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Tensor(xavier_uniform(rng, dim, dim, (dim, dim)),
                         requires_grad=True, name=f"{name}.wq")
        self.wk = Tensor(xavier_uniform(rng, dim, dim, (dim, dim)),
                         requires_grad=True, name=f"{name}.wk")
        self.wv = Tensor(xavier_uniform(rng, dim, dim, (dim, dim)),
                         requires_grad=True, name=f"{name}.wv")
        self.wo = Tensor(xavier_uniform(rng, dim, dim, (dim, dim)),
                         requires_grad=True, name=f"{name}.wo")
        self.norm_attn = LayerNorm(f"{name}.norm_attn", dim)
        self.norm_ffn = LayerNorm(f"{name}.norm_ffn", dim)
        self.ffn_in = Dense(f"{name}.ffn_in", dim, ffn_dim, rng, activation="relu")
        self.ffn_out = Dense(f"{name}.ffn_out", ffn_dim, dim, rng)

    def attend(self, x: Tensor, mask: np.ndarray,
               dropout_rate: float = 0.0,
               rng: np.random.Generator | None = None) -> Tensor:
        """Multi-head scaled dot-product self-attention over ``x``."""
        q = T.matmul(x, self.wq)
        k = T.matmul(x, self.wk)
        v = T.matmul(x, self.wv)
        sizes = [self.head_dim] * self.heads
        q_heads = T.split(q, sizes, axis=1)
        k_heads = T.split(k, sizes, axis=1)
        v_heads = T.split(v, sizes, axis=1)
        pooled = []
        inv_sqrt = 1.0 / math.sqrt(self.head_dim)
        for qh, kh, vh in zip(q_heads, k_heads, v_heads):
            scores = T.scale(T.matmul(qh, T.transpose(kh)), inv_sqrt)
            weights = T.softmax(scores, axis=1, mask=mask)
            if dropout_rate > 0.0:
                weights = T.dropout(weights, dropout_rate, rng)
            pooled.append(T.matmul(weights, vh))
        return T.matmul(T.concat(pooled, axis=1), self.wo)

    def __call__(self, x: Tensor, mask: np.ndarray,
                 dropout_rate: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
        mask = np.asarray(mask, dtype=bool)
        if x.shape != (mask.size, self.dim):
            raise ShapeError(f"{self.name}: input {x.shape} does not match mask size "
                             f"{mask.size} and dim {self.dim}")
        if not mask.any():
            raise ContractError(f"{self.name}: input is entirely padding")
        attn = self.attend(self.norm_attn(x), mask, dropout_rate, rng)
        x = T.add(x, attn)
        f = self.ffn_out(self.ffn_in(self.norm_ffn(x)))
        if dropout_rate > 0.0:
            f = T.dropout(f, dropout_rate, rng)
        x = T.add(x, f)
        if mask.all():
            return x
        return T.mul(x, Tensor(np.repeat(mask[:, None].astype(np.float64),
                                         self.dim, axis=1)))

    def parameters(self) -> list[tuple[str, Tensor]]:
        params = [(t.name, t) for t in (self.wq, self.wk, self.wv, self.wo)]
        for part in (self.norm_attn, self.norm_ffn, self.ffn_in, self.ffn_out):
            params.extend(part.parameters())
        return params


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam over named parameter tensors."""

    def __init__(self, params: Sequence[tuple[str, Tensor]], lr: float = 2e-5,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        correct1 = 1.0 - self.beta1 ** self.step_count
        correct2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise ContractError(f"non-finite gradient in parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)
