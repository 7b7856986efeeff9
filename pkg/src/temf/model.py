"""End-to-end model: document encoder, shared sentence encoder, context
and label-query attention fusion, hierarchical abstraction, twin task
heads, composite loss, training loop, prediction, and checkpoints.

Labels travel with the input: each sentence's temporal-orientation and
emotion labels select the query embeddings for the two label-attention
passes, for training and inference alike. Ablation modes drop one of the
label-attention paths and substitute a masked mean over the context-aware
sentence sequence.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import (DEFAULT_EMOTIONS, TEMPORAL_LABELS, Note, Sentence,
                     corpus_vocabulary)
from .errors import ContractError, ShapeError, VocabularyError
from .layers import (AdditiveAttention, Adam, Dense, EmbeddingTable,
                     TransformerBlock, sinusoidal_pe, xavier_uniform)
from .tensor import Tensor

CHECKPOINT_FORMAT = "TEMF-CKPT-1"
ABLATION_MODES = ("full", "no_temporal", "no_emotion")


@dataclass
class ModelConfig:
    """Every architectural and training hyperparameter in one place."""

    n: int = 13                    # max sentences consumed per note
    c: int = 15                    # max tokens per sentence (17 for code-mixed)
    dim: int = 300
    ffn_dim: int = 600
    heads: int = 5
    sentence_layers: int = 2
    doc_encoder_layers: int = 2
    doc_abstract_layers: int = 1
    attention_dim: int | None = None   # defaults to dim
    head_hidden: int = 128
    num_classes: int = 2
    alpha: float = 1.0             # PB loss weight
    beta: float = 1.0              # TB loss weight
    diff_loss_enabled: bool = True
    diff_loss_normalize: bool = False
    ablation: str = "full"
    dropout: float = 0.1
    learning_rate: float = 2e-5
    batch_size: int = 4
    epochs: int = 6
    seed: int = 0
    emotion_vocab: tuple[str, ...] = DEFAULT_EMOTIONS
    trainable_embeddings: bool = True

    def resolved_attention_dim(self) -> int:
        return self.dim if self.attention_dim is None else self.attention_dim

    def validate(self) -> None:
        if self.dim % self.heads != 0:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 2 != 0:
            raise ContractError(f"dim must be even for positional encodings")
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("loss weights alpha/beta must be non-negative")
        if self.ablation not in ABLATION_MODES:
            raise ContractError(f"ablation {self.ablation!r} not one of "
                                f"{list(ABLATION_MODES)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout {self.dropout} outside [0, 1)")
        for name in ("n", "c", "ffn_dim", "head_hidden", "batch_size", "epochs",
                     "sentence_layers", "doc_encoder_layers", "doc_abstract_layers"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.num_classes != 2:
            raise ContractError("task heads are binary (num_classes must be 2)")
        if len(self.emotion_vocab) < 1:
            raise ContractError("emotion vocabulary is empty")


@dataclass
class ForwardTrace:
    """Intermediate representations of one note's forward pass."""

    rho: Tensor                    # document-encoder vector
    rho_proj: Tensor               # its projection for the differential loss
    te: list[Tensor]               # per-sentence encoder sequences
    te_context: list[Tensor]       # after document-context infusion
    phi_temporal: list[Tensor]
    phi_emotion: list[Tensor]
    sentence_vectors: list[Tensor]
    delta: Tensor                  # abstraction transformer output, per sentence
    delta_pooled: Tensor           # max-pooled document vector
    logits: dict[str, Tensor]
    probs: dict[str, Tensor]


class TemfModel:
    """Parameter container; the forward functions below operate on it."""

    def __init__(self, config: ModelConfig, table_a: EmbeddingTable,
                 table_b: EmbeddingTable | None, rng: np.random.Generator):
        config.validate()
        if table_a.dim != config.dim:
            raise ShapeError(f"embedding table dim {table_a.dim} != model dim "
                             f"{config.dim}")
        if table_b is not None and table_b.dim != config.dim:
            raise ShapeError(f"second table dim {table_b.dim} != model dim "
                             f"{config.dim}")
        self.config = config
        self.table_a = table_a
        self.table_b = table_b
        dim, attn_dim = config.dim, config.resolved_attention_dim()

        self.cls_vector = Tensor(xavier_uniform(rng, dim, dim, (dim,)),
                                 requires_grad=True, name="doc.cls")
        self.doc_blocks = [TransformerBlock(f"doc.block{i}", dim, config.heads,
                                            config.ffn_dim, rng)
                           for i in range(config.doc_encoder_layers)]
        self.sentence_blocks = [TransformerBlock(f"sent.block{i}", dim, config.heads,
                                                 config.ffn_dim, rng)
                                for i in range(config.sentence_layers)]
        self.context_attention = AdditiveAttention("attn.context", dim, dim,
                                                   attn_dim, rng)

        self.temporal_attention = None
        self.temporal_embeddings: dict[str, Tensor] = {}
        if config.ablation != "no_temporal":
            self.temporal_attention = AdditiveAttention("attn.temporal", dim, dim,
                                                        attn_dim, rng)
            self.temporal_embeddings = {
                label: self._label_embedding(f"label.temporal.{label}", label, rng)
                for label in TEMPORAL_LABELS}

        self.emotion_attention = None
        self.emotion_embeddings: dict[str, Tensor] = {}
        if config.ablation != "no_emotion":
            self.emotion_attention = AdditiveAttention("attn.emotion", dim, dim,
                                                       attn_dim, rng)
            self.emotion_embeddings = {
                label: self._label_embedding(f"label.emotion.{label}", label, rng)
                for label in config.emotion_vocab}

        self.sentence_dense = Dense("sent.fuse", 2 * dim, dim, rng, activation="relu")
        self.abstract_blocks = [TransformerBlock(f"abstract.block{i}", dim,
                                                 config.heads, config.ffn_dim, rng)
                                for i in range(config.doc_abstract_layers)]
        self.diff_projection = Dense("doc.diff_proj", dim, dim, rng, bias=False)
        self.head_projection = Dense("doc.head_proj", dim, config.head_hidden, rng,
                                     bias=False)
        self.heads = {}
        for task in ("pb", "tb"):
            self.heads[task] = {
                "hidden": Dense(f"head.{task}.hidden", dim, config.head_hidden, rng,
                                activation="relu"),
                "out": Dense(f"head.{task}.out", config.head_hidden,
                             config.num_classes, rng),
            }

        # fixed position tables, sliced per use
        self._pe_words = sinusoidal_pe(config.n * config.c + 1, dim)
        self._pe_sentences = sinusoidal_pe(config.n, dim)

    def _label_embedding(self, name: str, label: str,
                         rng: np.random.Generator) -> Tensor:
        """Seed a label query from the word's embedding row when available."""
        dim = self.config.dim
        if label in self.table_a:
            vec = self.table_a.lookup(label).copy()
        else:
            vec = xavier_uniform(rng, dim, dim, (dim,))
        return Tensor(vec, requires_grad=True, name=name)

    @classmethod
    def build(cls, config: ModelConfig, notes: Sequence[Note] | None = None,
              table_a: EmbeddingTable | None = None,
              table_b: EmbeddingTable | None = None) -> "TemfModel":
        """Construct a seeded model, deriving random embedding tables from the
        corpus vocabulary when none are supplied (a second table is added
        automatically for corpora containing code-mixed notes)."""
        rng = np.random.default_rng([config.seed, 0])
        if table_a is None:
            if notes is None:
                raise ContractError("need either an embedding table or a corpus "
                                    "to derive one from")
            vocab = corpus_vocabulary(notes)
            table_a = EmbeddingTable.random(vocab, config.dim, rng,
                                            trainable=config.trainable_embeddings,
                                            name="embed.a")
            if table_b is None and any(n.language_mode == "code_mixed" for n in notes):
                table_b = EmbeddingTable.random(vocab, config.dim, rng,
                                                trainable=config.trainable_embeddings,
                                                name="embed.b")
        return cls(config, table_a, table_b, rng)

    def parameters(self) -> list[tuple[str, Tensor]]:
        """Model parameters, excluding embedding tables (vocab-dependent)."""
        params: list[tuple[str, Tensor]] = [(self.cls_vector.name, self.cls_vector)]
        for block in self.doc_blocks + self.sentence_blocks + self.abstract_blocks:
            params.extend(block.parameters())
        params.extend(self.context_attention.parameters())
        if self.temporal_attention is not None:
            params.extend(self.temporal_attention.parameters())
            params.extend((t.name, t) for t in self.temporal_embeddings.values())
        if self.emotion_attention is not None:
            params.extend(self.emotion_attention.parameters())
            params.extend((t.name, t) for t in self.emotion_embeddings.values())
        params.extend(self.sentence_dense.parameters())
        params.extend(self.diff_projection.parameters())
        params.extend(self.head_projection.parameters())
        for task in ("pb", "tb"):
            params.extend(self.heads[task]["hidden"].parameters())
            params.extend(self.heads[task]["out"].parameters())
        return params

    def all_parameters(self) -> list[tuple[str, Tensor]]:
        """Model parameters plus any trainable embedding matrices."""
        params = self.parameters()
        params.extend(self.table_a.parameters())
        if self.table_b is not None:
            params.extend(self.table_b.parameters())
        return params

    def parameter_state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.all_parameters()}

    def load_parameter_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.all_parameters():
            if name not in state:
                raise ContractError(f"parameter {name!r} missing from state")
            if state[name].shape != p.data.shape:
                raise ShapeError(f"parameter {name!r}: stored shape "
                                 f"{state[name].shape} != model shape {p.data.shape}")
            p.data[...] = state[name]


# ---------------------------------------------------------------------------
# forward pass


def encode_document(model: TemfModel, note: Note, training: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Flatten the note's tokens, prepend the classification vector, run the
    document encoder blocks, and return the classification position."""
    config = model.config
    tokens = [tok for s in note.sentences for tok in s.tokens]
    tokens = tokens[:config.n * config.c]
    if not tokens:
        raise ContractError(f"note {note.id!r} has no tokens to encode")
    from .layers import fused_embed

    emb, _ = fused_embed(tokens, model.table_a, model.table_b, len(tokens))
    x = T.concat([T.reshape(model.cls_vector, [1, config.dim]), emb], axis=0)
    x = T.add(x, Tensor(model._pe_words[:len(tokens) + 1]))
    mask = np.ones(len(tokens) + 1, dtype=bool)
    rate = config.dropout if training else 0.0
    for block in model.doc_blocks:
        x = block(x, mask, rate, rng)
    return T.reshape(T.split(x, [1, len(tokens)], axis=0)[0], [config.dim])


def encode_sentence(model: TemfModel, sentence: Sentence, training: bool = False,
                    rng: np.random.Generator | None = None
                    ) -> tuple[Tensor, np.ndarray]:
    """Token embeddings + positions through the shared sentence encoder."""
    if not sentence.tokens:
        raise ContractError("cannot encode a sentence with no tokens")
    config = model.config
    from .layers import fused_embed

    emb, mask = fused_embed(sentence.tokens, model.table_a, model.table_b, config.c)
    x = T.add(emb, Tensor(model._pe_words[:config.c]))
    rate = config.dropout if training else 0.0
    for block in model.sentence_blocks:
        x = block(x, mask, rate, rng)
    return x, mask


def context_infuse(model: TemfModel, rho: Tensor, te: Tensor,
                   mask: np.ndarray) -> Tensor:
    """Add the document-context attention vector to every real position."""
    _, phi = model.context_attention(rho, te, mask)
    spread = T.matmul(Tensor(mask[:, None].astype(np.float64)),
                      T.reshape(phi, [1, model.config.dim]))
    return T.add(te, spread)


def masked_mean(te_context: Tensor, mask: np.ndarray) -> Tensor:
    """Ablation substitute for a label-attention context vector."""
    count = int(np.asarray(mask, dtype=bool).sum())
    if count == 0:
        raise ContractError("masked mean over an all-padding sequence")
    return T.scale(T.reduce_sum(te_context, axis=0), 1.0 / count)


def label_attend(model: TemfModel, kind: str, label: str, te_context: Tensor,
                 mask: np.ndarray, sentence_index: int) -> Tensor:
    """Attend over the sentence with the label's query embedding."""
    attention = getattr(model, f"{kind}_attention")
    embeddings = getattr(model, f"{kind}_embeddings")
    if label not in embeddings:
        raise VocabularyError(
            f"sentence {sentence_index}: unknown {kind} label {label!r}; "
            f"valid labels: {sorted(embeddings)}")
    _, phi = attention(embeddings[label], te_context, mask)
    return phi


def forward(model: TemfModel, note: Note, training: bool = False,
            rng: np.random.Generator | None = None) -> ForwardTrace:
    config = model.config
    if not note.sentences:
        raise ContractError(f"note {note.id!r} has no sentences")
    if training and config.dropout > 0.0 and rng is None:
        raise ContractError("training forward with dropout needs an rng")
    sentences = note.sentences[:config.n]

    rho = encode_document(model, note, training, rng)
    rho_proj = model.diff_projection(rho)

    te_list, te_c_list, phi_t_list, phi_e_list, s_vecs = [], [], [], [], []
    for index, sentence in enumerate(sentences):
        te, mask = encode_sentence(model, sentence, training, rng)
        te_c = context_infuse(model, rho, te, mask)
        if model.temporal_attention is not None:
            phi_t = label_attend(model, "temporal", sentence.temporal, te_c, mask,
                                 index)
        else:
            phi_t = masked_mean(te_c, mask)
        if model.emotion_attention is not None:
            phi_e = label_attend(model, "emotion", sentence.emotion, te_c, mask,
                                 index)
        else:
            phi_e = masked_mean(te_c, mask)
        s_vec = model.sentence_dense(T.concat([phi_t, phi_e], axis=0))
        te_list.append(te)
        te_c_list.append(te_c)
        phi_t_list.append(phi_t)
        phi_e_list.append(phi_e)
        s_vecs.append(s_vec)

    stacked = T.concat([T.reshape(v, [1, config.dim]) for v in s_vecs], axis=0)
    stacked = T.add(stacked, Tensor(model._pe_sentences[:len(s_vecs)]))
    note_mask = np.ones(len(s_vecs), dtype=bool)
    rate = config.dropout if training else 0.0
    delta = stacked
    for block in model.abstract_blocks:
        delta = block(delta, note_mask, rate, rng)
    delta_pooled = T.max_pool(delta, axis=0, mask=note_mask)

    logits, probs = {}, {}
    for task in ("pb", "tb"):
        hidden = T.add(model.heads[task]["hidden"](delta_pooled),
                       model.head_projection(rho))
        logits[task] = model.heads[task]["out"](hidden)
        probs[task] = T.softmax(logits[task], axis=0)
    return ForwardTrace(rho=rho, rho_proj=rho_proj, te=te_list,
                        te_context=te_c_list, phi_temporal=phi_t_list,
                        phi_emotion=phi_e_list, sentence_vectors=s_vecs,
                        delta=delta, delta_pooled=delta_pooled,
                        logits=logits, probs=probs)


# ---------------------------------------------------------------------------
# loss


def loss(trace: ForwardTrace, y_pb: int, y_tb: int, config: ModelConfig
         ) -> tuple[Tensor, dict[str, float]]:
    """Weighted task cross-entropies plus the representation-alignment term.

    The total is assembled as (alpha * L_pb + beta * L_tb) + L_diff in that
    exact order, so the reported components always recompose bit-identically.
    """
    for name, y in (("pb", y_pb), ("tb", y_tb)):
        if y not in (0, 1):
            raise ContractError(f"{name} label must be 0 or 1, got {y!r}")
    onehot = np.eye(config.num_classes)
    ce_pb = T.cross_entropy(trace.probs["pb"], onehot[y_pb])
    ce_tb = T.cross_entropy(trace.probs["tb"], onehot[y_tb])
    task_total = T.add(T.scale(ce_pb, config.alpha), T.scale(ce_tb, config.beta))
    if config.diff_loss_enabled:
        diff = T.mse(trace.delta_pooled, trace.rho_proj)
        if config.diff_loss_normalize:
            diff = T.scale(diff, 1.0 / config.dim)
        total = T.add(task_total, diff)
        diff_value = diff.item()
    else:
        total = task_total
        diff_value = 0.0
    return total, {"pb": ce_pb.item(), "tb": ce_tb.item(),
                   "diff": diff_value, "total": total.item()}


# ---------------------------------------------------------------------------
# training and prediction


def predict(model: TemfModel, note: Note) -> dict:
    """Deterministic argmax prediction; dropout is disabled."""
    trace = forward(model, note, training=False)
    out = {}
    for task in ("pb", "tb"):
        p = trace.probs[task].data
        out[task] = int(np.argmax(p))
        out[f"{task}_probs"] = p.copy()
    return out


def _validation_score(model: TemfModel, notes: Sequence[Note]) -> float:
    from .metrics import macro_f1

    truth = {"pb": [], "tb": []}
    pred = {"pb": [], "tb": []}
    for note in notes:
        outcome = predict(model, note)
        for task in ("pb", "tb"):
            truth[task].append(getattr(note, task))
            pred[task].append(outcome[task])
    return 0.5 * (macro_f1(truth["pb"], pred["pb"]) + macro_f1(truth["tb"], pred["tb"]))


def train(model: TemfModel, notes: Sequence[Note],
          validation: Sequence[Note] | None = None) -> list[dict]:
    """Mini-batch Adam training; returns the per-epoch history.

    When a validation split is given, the parameters of the epoch with the
    best mean validation macro-F1 are restored at the end; otherwise the
    final epoch's parameters stand.
    """
    config = model.config
    notes = list(notes)
    if not notes:
        raise ContractError("training corpus is empty")
    for note in notes:
        note.validate()
    optimizer = Adam(model.all_parameters(), lr=config.learning_rate)
    rng = np.random.default_rng([config.seed, 1])
    history: list[dict] = []
    best_score, best_state, best_epoch = -1.0, None, -1

    for epoch in range(config.epochs):
        order = rng.permutation(len(notes))
        sums = {"pb": 0.0, "tb": 0.0, "diff": 0.0, "total": 0.0}
        for start in range(0, len(order), config.batch_size):
            batch = [notes[i] for i in order[start:start + config.batch_size]]
            optimizer.zero_grad()
            batch_total: Tensor | None = None
            for note in batch:
                trace = forward(model, note, training=True, rng=rng)
                note_loss, components = loss(trace, note.pb, note.tb, config)
                if not np.isfinite(components["total"]):
                    raise ContractError(
                        f"non-finite loss at epoch {epoch}, batch note {note.id!r}")
                batch_total = (note_loss if batch_total is None
                               else T.add(batch_total, note_loss))
                for key in sums:
                    sums[key] += components[key]
            T.scale(batch_total, 1.0 / len(batch)).backward()
            optimizer.step()

        entry = {"epoch": epoch}
        entry.update({key: value / len(notes) for key, value in sums.items()})
        if validation:
            score = _validation_score(model, validation)
            entry["val_macro_f1"] = score
            if score > best_score:
                best_score, best_epoch = score, epoch
                best_state = model.parameter_state()
        history.append(entry)

    if validation and best_state is not None:
        model.load_parameter_state(best_state)
        history.append({"best_epoch": best_epoch, "best_val_macro_f1": best_score})
    return history


# ---------------------------------------------------------------------------
# checkpoints


def _encode_array(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape),
            "data": base64.b64encode(data.tobytes()).decode("ascii")}


def _decode_array(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return arr.reshape(entry["shape"]).copy()


def _encode_table(table: EmbeddingTable | None) -> dict | None:
    if table is None:
        return None
    return {"name": table.name, "tokens": table.tokens,
            "trainable": table.trainable,
            "matrix": _encode_array(table.matrix.data),
            "oov": _encode_array(table.oov_vector)}


def _decode_table(entry: dict | None) -> EmbeddingTable | None:
    if entry is None:
        return None
    return EmbeddingTable(entry["tokens"], _decode_array(entry["matrix"]),
                          trainable=entry["trainable"],
                          oov_vector=_decode_array(entry["oov"]),
                          name=entry["name"])


def save_checkpoint(model: TemfModel, path) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "params": {name: _encode_array(p.data) for name, p in model.parameters()},
        "embeddings": {"table_a": _encode_table(model.table_a),
                       "table_b": _encode_table(model.table_b)},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path) -> TemfModel:
    from .errors import ParseError

    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: not a valid checkpoint ({exc.msg})")
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path}: unsupported checkpoint format "
                         f"{payload.get('format')!r}, expected {CHECKPOINT_FORMAT}")
    config_dict = dict(payload["config"])
    config_dict["emotion_vocab"] = tuple(config_dict["emotion_vocab"])
    config = ModelConfig(**config_dict)
    table_a = _decode_table(payload["embeddings"]["table_a"])
    table_b = _decode_table(payload["embeddings"]["table_b"])
    model = TemfModel(config, table_a, table_b,
                      np.random.default_rng([config.seed, 0]))
    stored = payload["params"]
    model_names = [name for name, _ in model.parameters()]
    missing = set(model_names) - set(stored)
    unknown = set(stored) - set(model_names)
    if missing or unknown:
        raise ParseError(f"{path}: parameter names do not match the configuration "
                         f"(missing {sorted(missing)}, unknown {sorted(unknown)})")
    for name, p in model.parameters():
        arr = _decode_array(stored[name])
        if arr.shape != p.data.shape:
            raise ShapeError(f"{path}: parameter {name!r} has shape {arr.shape}, "
                             f"expected {p.data.shape}")
        p.data[...] = arr
    return model
