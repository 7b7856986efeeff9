"""Corpus data model, line-delimited JSON I/O, and a synthetic generator.

The generator plants a recoverable class signal through three separately
tunable channels (tokens, temporal labels, emotion labels) while keeping
the population-level statistics pinned to configured targets: label
rates, the temporal past/present/future mix, and mean sentence/note
lengths. Tokens are abstract pool strings, not real vocabulary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, ParseError, VocabularyError

TEMPORAL_LABELS = ("past", "present", "future")
DEFAULT_EMOTIONS = tuple(f"emo_{i:02d}" for i in range(1, 16))

# Disjoint token pools. Class-bearing pools are small enough to be learned
# from a few hundred notes; fillers carry no label information.
BURDEN_POOL = tuple(f"brd{i:03d}" for i in range(200))
ISOLATION_POOL = tuple(f"iso{i:03d}" for i in range(200))
NEUTRAL_POOL = tuple(f"ntr{i:03d}" for i in range(200))
FILLER_POOL = tuple(f"fil{i:03d}" for i in range(400))
CODE_MIX_POOL = tuple(f"cmx{i:03d}" for i in range(400))


@dataclass
class Sentence:
    tokens: list[str]
    emotion: str
    temporal: str

    def validate(self) -> None:
        if not self.tokens:
            raise ContractError("sentence has no tokens")
        if self.temporal not in TEMPORAL_LABELS:
            raise VocabularyError(f"temporal label {self.temporal!r} not in "
                                  f"{list(TEMPORAL_LABELS)}")
        if not self.emotion or self.emotion != self.emotion.lower():
            raise VocabularyError(f"emotion label {self.emotion!r} must be a "
                                  "non-empty lowercase string")


@dataclass
class Note:
    id: str
    sentences: list[Sentence]
    pb: int
    tb: int
    language_mode: str = "en"

    def validate(self) -> None:
        if not self.sentences:
            raise ContractError(f"note {self.id!r} has no sentences")
        if self.pb not in (0, 1) or self.tb not in (0, 1):
            raise VocabularyError(f"note {self.id!r}: pb/tb labels must be 0 or 1")
        if self.language_mode not in ("en", "code_mixed"):
            raise VocabularyError(f"note {self.id!r}: unknown language mode "
                                  f"{self.language_mode!r}")
        for sentence in self.sentences:
            sentence.validate()


# ---------------------------------------------------------------------------
# generator


@dataclass
class GeneratorConfig:
    """Targets and knobs for synthetic corpus generation.

    ``signal`` scales all three class-signal channels; each channel can be
    pinned separately (``None`` means inherit ``signal``). Channel
    strength 0 makes that channel carry no label information.
    """

    note_count: int = 364
    pb_rate: float = 55 / 364
    tb_rate: float = 60 / 364
    joint_rate: float = 0.0467
    temporal_mix: tuple[float, float, float] = (0.3087, 0.4166, 0.2747)
    mean_note_len: float = 13.0
    mean_sentence_len: float | None = None  # default depends on language_mode
    language_mode: str = "en"
    signal: float = 1.0
    token_signal: float | None = None
    temporal_signal: float | None = None
    emotion_signal: float | None = None
    emotions: tuple[str, ...] = DEFAULT_EMOTIONS
    seed: int = 0
    # restricts filler variety; tiny pools make label-conditioned attention
    # patterns over neutral tokens decodable (single-channel corpora)
    filler_pool_size: int | None = None
    # per-class tilts applied to temporal_mix at full channel strength; each
    # sums to zero (negatives absorb the complement) so the population
    # marginal stays on target at any strength
    pb_tilt: tuple[float, float, float] = (-0.24, 0.04, 0.20)
    tb_tilt: tuple[float, float, float] = (0.20, 0.04, -0.24)

    def resolved_sentence_len(self) -> float:
        if self.mean_sentence_len is not None:
            return self.mean_sentence_len
        return 16.73 if self.language_mode == "code_mixed" else 14.96

    def channel(self, name: str) -> float:
        value = getattr(self, f"{name}_signal")
        return self.signal if value is None else value

    def validate(self) -> None:
        if self.note_count < 1:
            raise ContractError(f"note_count must be >= 1, got {self.note_count}")
        for name in ("pb_rate", "tb_rate", "joint_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ContractError(f"{name} {value} outside [0, 1]")
        if self.joint_rate > min(self.pb_rate, self.tb_rate) + 1e-12:
            raise ContractError(f"joint_rate {self.joint_rate} exceeds "
                                f"min(pb_rate, tb_rate)")
        if self.neither_share() < -1e-12:
            raise ContractError("label rates leave negative mass for unlabeled notes")
        mix = np.asarray(self.temporal_mix, dtype=np.float64)
        if mix.shape != (3,) or abs(mix.sum() - 1.0) > 1e-6 or (mix < 0).any():
            raise ContractError(f"temporal_mix {self.temporal_mix} is not a "
                                "3-way distribution")
        for name in ("signal", "token_signal", "temporal_signal", "emotion_signal"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ContractError(f"{name} {value} outside [0, 1]")
        if self.language_mode not in ("en", "code_mixed"):
            raise ContractError(f"unknown language_mode {self.language_mode!r}")
        if self.mean_note_len < 1.0 or self.resolved_sentence_len() < 1.0:
            raise ContractError("mean lengths must be at least 1")
        if len(self.emotions) < 2:
            raise ContractError("need at least 2 emotion labels")
        for name in ("pb_tilt", "tb_tilt"):
            tilt = np.asarray(getattr(self, name), dtype=np.float64)
            if tilt.shape != (3,) or abs(tilt.sum()) > 1e-9:
                raise ContractError(f"{name} must be 3 values summing to 0")
        for combo in self.temporal_tables().values():
            if (combo < -1e-12).any() or (combo > 1.0).any():
                raise ContractError(
                    "temporal tilts push a class distribution outside [0, 1]; "
                    "lower temporal_signal or adjust temporal_mix")

    def neither_share(self) -> float:
        return 1.0 - self.pb_rate - self.tb_rate + self.joint_rate

    def temporal_tables(self) -> dict[tuple[int, int], np.ndarray]:
        """Per-(pb, tb) temporal distributions whose mixture equals the target."""
        strength = self.channel("temporal")
        mix = np.asarray(self.temporal_mix, dtype=np.float64)
        t_pb = strength * np.asarray(self.pb_tilt, dtype=np.float64)
        t_tb = strength * np.asarray(self.tb_tilt, dtype=np.float64)
        neither = self.neither_share()
        if neither > 1e-9:
            t_neg = -(self.pb_rate * t_pb + self.tb_rate * t_tb) / neither
        else:
            t_neg = np.zeros(3)
        return {
            (0, 0): np.clip(mix + t_neg, 0.0, 1.0),
            (1, 0): np.clip(mix + t_pb, 0.0, 1.0),
            (0, 1): np.clip(mix + t_tb, 0.0, 1.0),
            (1, 1): np.clip(mix + t_pb + t_tb, 0.0, 1.0),
        }


def clipped_geometric_param(target_mean: float, cap: int) -> float:
    """Success probability p such that E[min(Geom(p), cap)] == target_mean.

    E[min(X, cap)] = (1 - q^cap) / (1 - q) with q = 1 - p, increasing in q;
    solved by bisection.
    """
    if not 1.0 < target_mean < cap:
        raise ContractError(f"target mean {target_mean} not attainable with cap {cap}")

    def clipped_mean(q: float) -> float:
        return (1.0 - q ** cap) / (1.0 - q)

    lo, hi = 1e-12, 1.0 - 1e-12
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if clipped_mean(mid) < target_mean:
            lo = mid
        else:
            hi = mid
    return 1.0 - 0.5 * (lo + hi)


def _sample_length(rng: np.random.Generator, p: float, cap: int) -> int:
    return int(min(rng.geometric(p), cap))


def generate(config: GeneratorConfig) -> list[Note]:
    """Sample a corpus matching the configured statistics and planted signal."""
    config.validate()
    rng = np.random.default_rng(config.seed)

    label_combos = [(0, 0), (1, 0), (0, 1), (1, 1)]
    combo_probs = np.array([
        config.neither_share(),
        config.pb_rate - config.joint_rate,
        config.tb_rate - config.joint_rate,
        config.joint_rate,
    ])
    combo_probs = np.clip(combo_probs, 0.0, None)
    combo_probs = combo_probs / combo_probs.sum()
    temporal_tables = {combo: table / table.sum()
                       for combo, table in config.temporal_tables().items()}

    note_cap = max(2, int(round(2 * config.mean_note_len)))
    sent_cap = max(2, int(round(2 * config.resolved_sentence_len())))
    note_p = clipped_geometric_param(config.mean_note_len, note_cap)
    sent_p = clipped_geometric_param(config.resolved_sentence_len(), sent_cap)

    token_strength = config.channel("token")
    emotion_strength = config.channel("emotion")
    emotions = list(config.emotions)
    quarter = max(1, len(emotions) // 4)
    pb_emotions = emotions[:quarter]
    tb_emotions = emotions[quarter:2 * quarter]
    if config.language_mode == "code_mixed":
        fillers = FILLER_POOL + CODE_MIX_POOL
    else:
        fillers = FILLER_POOL
    if config.filler_pool_size is not None:
        if config.filler_pool_size < 2:
            raise ContractError("filler_pool_size must be at least 2")
        fillers = fillers[:config.filler_pool_size]

    def pick(pool: Sequence[str]) -> str:
        return pool[rng.integers(0, len(pool))]

    notes: list[Note] = []
    for i in range(config.note_count):
        pb, tb = label_combos[rng.choice(len(label_combos), p=combo_probs)]
        temporal_p = temporal_tables[(pb, tb)]
        if pb and tb:
            class_pools = (BURDEN_POOL, ISOLATION_POOL)
            class_emotions = (pb_emotions, tb_emotions)
        elif pb:
            class_pools = (BURDEN_POOL,)
            class_emotions = (pb_emotions,)
        elif tb:
            class_pools = (ISOLATION_POOL,)
            class_emotions = (tb_emotions,)
        else:
            class_pools = (NEUTRAL_POOL,)
            class_emotions = (emotions,)

        sentences = []
        for _ in range(_sample_length(rng, note_p, note_cap)):
            tokens = []
            for _ in range(_sample_length(rng, sent_p, sent_cap)):
                if rng.random() < token_strength:
                    tokens.append(pick(class_pools[rng.integers(0, len(class_pools))]))
                else:
                    tokens.append(pick(fillers))
            if rng.random() < emotion_strength:
                emotion = pick(class_emotions[rng.integers(0, len(class_emotions))])
            else:
                emotion = pick(emotions)
            temporal = TEMPORAL_LABELS[rng.choice(3, p=temporal_p)]
            sentences.append(Sentence(tokens=tokens, emotion=emotion, temporal=temporal))
        notes.append(Note(id=f"note_{i:05d}", sentences=sentences, pb=pb, tb=tb,
                          language_mode=config.language_mode))

    for note in notes:
        note.validate()
    return notes


PB_MARKERS = ("mka", "mkb")
TB_MARKERS = ("mkc", "mkd")


def generate_label_coupled_corpus(note_count: int, channel: str = "temporal",
                                  seed: int = 0, mean_note_len: float = 9.0,
                                  filler_pool_size: int = 8) -> list[Note]:
    """Corpus whose only class signal is a label-token correlation.

    Every sentence carries one marker token per task plus filler. In
    positive notes the marker agrees with the sentence's ``channel`` label
    (one marker per label value); in negative notes it disagrees. Marker
    and label marginals stay uniform everywhere, so the token bag alone
    and the label sequence alone are both uninformative: only a model
    that can couple the channel's labels with the tokens can recover the
    class. The other channel's labels are uniform noise.
    """
    if channel not in ("temporal", "emotion"):
        raise ContractError(f"channel must be temporal or emotion, got {channel!r}")
    rng = np.random.default_rng(seed)
    fillers = FILLER_POOL[:max(2, filler_pool_size)]
    values = ("past", "future") if channel == "temporal" else ("emo_01", "emo_02")
    note_cap = max(2, int(round(2 * mean_note_len)))
    note_p = clipped_geometric_param(mean_note_len, note_cap)

    notes = []
    for i in range(note_count):
        pb = int(rng.random() < 0.5)
        tb = int(rng.random() < 0.5)
        sentences = []
        for _ in range(_sample_length(rng, note_p, note_cap)):
            side = int(rng.integers(0, 2))
            value = values[side]
            pb_marker = PB_MARKERS[side if pb else 1 - side]
            tb_marker = TB_MARKERS[side if tb else 1 - side]
            tokens = [pb_marker, tb_marker,
                      fillers[rng.integers(0, len(fillers))]]
            if channel == "temporal":
                temporal, emotion = value, DEFAULT_EMOTIONS[rng.integers(0, 2)]
            else:
                emotion = value
                temporal = TEMPORAL_LABELS[rng.integers(0, 2)]
            sentences.append(Sentence(tokens=tokens, emotion=emotion,
                                      temporal=temporal))
        notes.append(Note(id=f"note_{i:05d}", sentences=sentences, pb=pb, tb=tb))
    for note in notes:
        note.validate()
    return notes


# ---------------------------------------------------------------------------
# file I/O: one JSON record per line


def save_corpus(notes: Iterable[Note], path) -> None:
    seen: set[str] = set()
    with open(path, "w", encoding="utf-8") as fh:
        for note in notes:
            note.validate()
            if note.id in seen:
                raise ContractError(f"duplicate note id {note.id!r}")
            seen.add(note.id)
            record = {
                "id": note.id,
                "language_mode": note.language_mode,
                "pb": note.pb,
                "tb": note.tb,
                "sentences": [
                    {"tokens": s.tokens, "emotion": s.emotion, "temporal": s.temporal}
                    for s in note.sentences
                ],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_corpus(path) -> list[Note]:
    notes: list[Note] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid record ({exc.msg})")
            if not isinstance(record, dict):
                raise ParseError(f"{path}:{lineno}: expected an object per line")
            for field_name in ("id", "pb", "tb", "sentences"):
                if field_name not in record:
                    raise ParseError(f"{path}:{lineno}: missing field {field_name!r}")
            sentences = []
            for j, s in enumerate(record["sentences"]):
                for field_name in ("tokens", "emotion", "temporal"):
                    if field_name not in s:
                        raise ParseError(f"{path}:{lineno}: sentence {j} missing "
                                         f"field {field_name!r}")
                sentences.append(Sentence(tokens=list(s["tokens"]),
                                          emotion=s["emotion"],
                                          temporal=s["temporal"]))
            note = Note(id=record["id"], sentences=sentences,
                        pb=record["pb"], tb=record["tb"],
                        language_mode=record.get("language_mode", "en"))
            note.validate()
            if note.id in seen:
                raise ContractError(f"{path}:{lineno}: duplicate note id {note.id!r}")
            seen.add(note.id)
            notes.append(note)
    return notes


# ---------------------------------------------------------------------------
# aggregate statistics


@dataclass
class CorpusStats:
    note_count: int
    sentence_count: int
    token_count: int
    pb_count: int
    tb_count: int
    joint_count: int
    pb_rate: float
    tb_rate: float
    joint_rate: float
    temporal_counts: dict[str, int] = field(default_factory=dict)
    temporal_fractions: dict[str, float] = field(default_factory=dict)
    mean_sentence_len: float = 0.0
    mean_note_len: float = 0.0
    emotion_counts: dict[str, int] = field(default_factory=dict)

    def format(self) -> str:
        lines = [
            f"notes: {self.note_count}",
            f"sentences: {self.sentence_count}",
            f"tokens: {self.token_count}",
            f"pb: {self.pb_count} ({self.pb_rate:.4f})",
            f"tb: {self.tb_count} ({self.tb_rate:.4f})",
            f"pb&tb: {self.joint_count} ({self.joint_rate:.4f})",
            "temporal: " + ", ".join(
                f"{label} {self.temporal_counts[label]} "
                f"({self.temporal_fractions[label]:.4f})"
                for label in TEMPORAL_LABELS),
            f"mean sentence length: {self.mean_sentence_len:.2f}",
            f"mean note length: {self.mean_note_len:.2f}",
            f"emotion labels: {len(self.emotion_counts)}",
        ]
        return "\n".join(lines)


def corpus_stats(notes: Sequence[Note]) -> CorpusStats:
    if not notes:
        raise ContractError("corpus is empty")
    sentence_count = sum(len(n.sentences) for n in notes)
    token_count = sum(len(s.tokens) for n in notes for s in n.sentences)
    temporal_counts = {label: 0 for label in TEMPORAL_LABELS}
    emotion_counts: dict[str, int] = {}
    for note in notes:
        for sentence in note.sentences:
            temporal_counts[sentence.temporal] += 1
            emotion_counts[sentence.emotion] = emotion_counts.get(sentence.emotion, 0) + 1
    pb_count = sum(n.pb for n in notes)
    tb_count = sum(n.tb for n in notes)
    joint_count = sum(n.pb & n.tb for n in notes)
    return CorpusStats(
        note_count=len(notes),
        sentence_count=sentence_count,
        token_count=token_count,
        pb_count=pb_count,
        tb_count=tb_count,
        joint_count=joint_count,
        pb_rate=pb_count / len(notes),
        tb_rate=tb_count / len(notes),
        joint_rate=joint_count / len(notes),
        temporal_counts=temporal_counts,
        temporal_fractions={label: count / sentence_count
                            for label, count in temporal_counts.items()},
        mean_sentence_len=token_count / sentence_count,
        mean_note_len=sentence_count / len(notes),
        emotion_counts=emotion_counts,
    )


def corpus_vocabulary(notes: Sequence[Note]) -> list[str]:
    """Sorted set of every token appearing in the corpus."""
    vocab = {token for note in notes for s in note.sentences for token in s.tokens}
    return sorted(vocab)


def emotion_vocabulary(notes: Sequence[Note]) -> list[str]:
    """Emotion labels present in the corpus, default vocabulary first."""
    present = {s.emotion for note in notes for s in note.sentences}
    ordered = [label for label in DEFAULT_EMOTIONS if label in present]
    ordered.extend(sorted(present.difference(DEFAULT_EMOTIONS)))
    return ordered
