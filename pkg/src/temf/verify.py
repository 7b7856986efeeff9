"""Gradient-fidelity suite: every engine operation, every layer, and the
assembled model, each checked against central finite differences.

The end-to-end check runs the full loss on a two-sentence note at the
small verification configuration (dim 8, 2 heads, 4 tokens, 3 sentences)
with coordinate subsampling, and treats coordinates whose gradients sit
below the finite-difference noise floor as zero (see
:func:`temf.tensor.grad_check`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import Note, Sentence
from .layers import AdditiveAttention, Dense, EmbeddingTable, TransformerBlock
from .tensor import Tensor, grad_check

OP_THRESHOLD = 1e-6
LAYER_THRESHOLD = 1e-6
END_TO_END_THRESHOLD = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.threshold

    def format(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<28s} max_rel_err={self.max_error:9.3e}  "
                f"threshold={self.threshold:.0e}  {verdict}")


def _weighted_total(t: Tensor, weight: Tensor) -> Tensor:
    return T.reduce_sum(T.reshape(T.mul(t, weight), [t.size]), axis=0)


def operation_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (4, 5)), requires_grad=True)
    same = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    vec = Tensor(rng.uniform(-2, 2, (4,)), requires_grad=True)
    gain = Tensor(rng.uniform(0.5, 1.5, (4,)), requires_grad=True)
    bias = Tensor(rng.uniform(-0.5, 0.5, (4,)), requires_grad=True)
    logits = Tensor(rng.uniform(-1, 1, (2,)), requires_grad=True)
    w34 = Tensor(rng.uniform(-2, 2, (3, 4)))
    w35 = Tensor(rng.uniform(-2, 2, (3, 5)))
    w54 = Tensor(rng.uniform(-1, 1, (5, 4)))
    mask = np.array([True, False, True, True])
    idx = rng.integers(0, 3, size=5)
    onehot = np.array([0.0, 1.0])

    cases = [
        ("op.matmul", lambda: _weighted_total(T.matmul(a, b), w35), [a, b]),
        ("op.add", lambda: _weighted_total(T.add(a, same), w34), [a, same]),
        ("op.add_broadcast", lambda: _weighted_total(T.add(a, vec), w34), [a, vec]),
        ("op.sub", lambda: _weighted_total(T.sub(a, same), w34), [a, same]),
        ("op.mul", lambda: _weighted_total(T.mul(a, same), w34), [a, same]),
        ("op.scale", lambda: _weighted_total(T.scale(a, 1.37), w34), [a]),
        ("op.tanh", lambda: _weighted_total(T.tanh(a), w34), [a]),
        ("op.relu", lambda: _weighted_total(T.relu(a), w34), [a]),
        ("op.softmax", lambda: _weighted_total(T.softmax(a, axis=1), w34), [a]),
        ("op.softmax_masked",
         lambda: _weighted_total(T.softmax(a, axis=1, mask=mask), w34), [a]),
        ("op.layer_norm",
         lambda: _weighted_total(T.layer_norm(a, gain, bias), w34), [a, gain, bias]),
        ("op.reduce_sum",
         lambda: T.reduce_sum(T.reduce_sum(T.mul(a, w34), axis=0), axis=0), [a]),
        ("op.reduce_mean",
         lambda: T.reduce_sum(T.reduce_mean(T.mul(a, w34), axis=1), axis=0), [a]),
        ("op.max_pool",
         lambda: T.reduce_sum(T.max_pool(a, axis=0), axis=0), [a]),
        ("op.max_pool_masked",
         lambda: T.reduce_sum(T.max_pool(a, axis=1, mask=mask), axis=0), [a]),
        ("op.concat",
         lambda: _weighted_total(T.concat([a, same], axis=0),
                                 T.concat([w34, w34], axis=0)), [a, same]),
        ("op.split",
         lambda: _weighted_total(T.split(a, [1, 3], axis=1)[1],
                                 T.split(w34, [1, 3], axis=1)[1]), [a]),
        ("op.transpose",
         lambda: _weighted_total(T.transpose(a), T.transpose(w34)), [a]),
        ("op.reshape",
         lambda: _weighted_total(T.reshape(a, [2, 6]), T.reshape(w34, [2, 6])), [a]),
        ("op.gather_rows",
         lambda: _weighted_total(T.gather_rows(a, idx), w54), [a]),
        ("op.dropout",
         lambda: _weighted_total(
             T.dropout(a, 0.4, np.random.default_rng(seed + 7)), w34), [a]),
        ("op.cross_entropy",
         lambda: T.cross_entropy(T.softmax(logits, axis=0), onehot), [logits]),
        ("op.mse", lambda: T.mse(a, same), [a, same]),
    ]
    return [CheckResult(name, grad_check(fn, params, eps=1e-5), OP_THRESHOLD)
            for name, fn, params in cases]


def layer_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    layer = Dense("dense", 4, 3, rng, activation="relu")
    x = Tensor(rng.uniform(-2, 2, (5, 4)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (5, 3)))
    results.append(CheckResult(
        "layer.dense",
        grad_check(lambda: _weighted_total(layer(x), w),
                   [x, layer.w, layer.b], eps=1e-4),
        LAYER_THRESHOLD))

    att = AdditiveAttention("att", 3, 3, 4, rng)
    query = Tensor(rng.uniform(-1, 1, (3,)), requires_grad=True)
    keys = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
    w_ctx = Tensor(rng.uniform(-1, 1, (3,)))
    mask = np.array([True, True, False, True])

    def att_loss():
        _, context = att(query, keys, mask)
        return T.reduce_sum(T.mul(context, w_ctx), axis=0)

    results.append(CheckResult(
        "layer.additive_attention",
        grad_check(att_loss, [query, keys, att.w1, att.w2, att.w3], eps=1e-4),
        LAYER_THRESHOLD))

    block = TransformerBlock("blk", 6, 2, 8, rng)
    x_blk = Tensor(rng.uniform(-1, 1, (3, 6)), requires_grad=True)
    blk_mask = np.array([True, True, False])
    w_blk = Tensor(rng.uniform(-1, 1, (3, 6)))
    results.append(CheckResult(
        "layer.transformer_block",
        grad_check(lambda: _weighted_total(block(x_blk, blk_mask), w_blk),
                   [x_blk] + [p for _, p in block.parameters()], eps=1e-4),
        LAYER_THRESHOLD))

    table_a = EmbeddingTable(["u", "v", "w"], rng.uniform(-1, 1, (3, 4)),
                             trainable=True, name="ta")
    table_b = EmbeddingTable(["u", "x"], rng.uniform(-1, 1, (2, 4)),
                             trainable=True, name="tb")
    w_emb = Tensor(rng.uniform(-1, 1, (3, 4)))

    def emb_loss():
        from .layers import fused_embed
        emb, _ = fused_embed(["u", "v", "x"], table_a, table_b, max_len=3)
        return _weighted_total(emb, w_emb)

    results.append(CheckResult(
        "layer.fused_embed",
        grad_check(emb_loss, [table_a.matrix, table_b.matrix], eps=1e-4),
        LAYER_THRESHOLD))
    return results


def verification_note() -> Note:
    return Note(id="verify", sentences=[
        Sentence(tokens=["fil000", "fil001", "fil002"], emotion="emo_01",
                 temporal="past"),
        Sentence(tokens=["fil003", "fil004"], emotion="emo_02", temporal="future"),
    ], pb=1, tb=0)


def end_to_end_check(seed: int = 0, coords_per_param: int = 3) -> CheckResult:
    from .model import ModelConfig, TemfModel, forward, loss

    config = ModelConfig(n=3, c=4, dim=8, ffn_dim=16, heads=2, head_hidden=8,
                         attention_dim=8, dropout=0.0, seed=seed)
    note = verification_note()
    vocab = sorted({tok for s in note.sentences for tok in s.tokens})
    rng = np.random.default_rng([seed, 0])
    table = EmbeddingTable.random(vocab, config.dim, rng, trainable=True,
                                  name="embed.a")
    model = TemfModel(config, table, None, rng)

    def f():
        return loss(forward(model, note), note.pb, note.tb, config)[0]

    err = grad_check(f, [p for _, p in model.all_parameters()], eps=1e-4,
                     max_coords_per_param=coords_per_param,
                     rng=np.random.default_rng(seed), atol=1e-5)
    return CheckResult("model.end_to_end", err, END_TO_END_THRESHOLD)


def run_all(seed: int = 0) -> list[CheckResult]:
    results = operation_checks(seed)
    results.extend(layer_checks(seed))
    results.append(end_to_end_check(seed))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [r.format() for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return "\n".join(lines)
