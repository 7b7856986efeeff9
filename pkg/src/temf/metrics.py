"""Evaluation protocol: macro-F1, Fleiss kappa, stratified k-fold
cross-validation with repeated runs, ablation comparison, and context
length sweeps.

Fold x run jobs are independent; ``jobs > 1`` fans them out over a
process pool and results are aggregated in deterministic (run, fold)
order regardless of completion order.
"""

from __future__ import annotations

import csv
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .corpus import Note
from .errors import ContractError

TASKS = ("pb", "tb")


# ---------------------------------------------------------------------------
# classification metric


def _binary_f1(y_true: np.ndarray, y_pred: np.ndarray, positive: int) -> float:
    tp = int(np.sum((y_pred == positive) & (y_true == positive)))
    fp = int(np.sum((y_pred == positive) & (y_true != positive)))
    fn = int(np.sum((y_pred != positive) & (y_true == positive)))
    if tp == 0:
        # covers the class-absent-everywhere convention: F1 = 0
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


def macro_f1(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    """Unweighted mean of the per-class F1 scores over classes {0, 1}.

    A class absent from both truth and prediction contributes F1 = 0.
    """
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    if t.shape != p.shape or t.ndim != 1:
        raise ContractError(f"label sequences differ in shape: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise ContractError("empty label sequences")
    for arr, side in ((t, "truth"), (p, "prediction")):
        if not np.isin(arr, (0, 1)).all():
            raise ContractError(f"{side} labels must all be 0 or 1")
    return 0.5 * (_binary_f1(t, p, 0) + _binary_f1(t, p, 1))


# ---------------------------------------------------------------------------
# annotator agreement


@dataclass
class AgreementMatrix:
    """Rating counts: one row per item, one column per category."""

    counts: np.ndarray
    raters_per_item: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[1] < 2:
            raise ContractError(f"agreement matrix must be [items x >=2 categories], "
                                f"got {self.counts.shape}")
        if self.raters_per_item < 2:
            raise ContractError(f"need >= 2 raters, got {self.raters_per_item}")
        if (self.counts < 0).any():
            raise ContractError("agreement counts must be non-negative")
        sums = self.counts.sum(axis=1)
        bad = np.nonzero(sums != self.raters_per_item)[0]
        if bad.size:
            raise ContractError(f"row {bad[0]} sums to {sums[bad[0]]}, expected "
                                f"{self.raters_per_item} raters")


def fleiss_kappa(matrix: AgreementMatrix) -> float | None:
    """Chance-corrected multi-rater agreement.

    Returns None when expected agreement is 1 (every rater always picked
    the same single category), where kappa is undefined.
    """
    counts = matrix.counts.astype(np.float64)
    n_items, _ = counts.shape
    r = float(matrix.raters_per_item)
    p_item = ((counts * counts).sum(axis=1) - r) / (r * (r - 1.0))
    p_mean = p_item.mean()
    category_share = counts.sum(axis=0) / (n_items * r)
    p_expected = float((category_share * category_share).sum())
    if p_expected >= 1.0:
        return None
    return float((p_mean - p_expected) / (1.0 - p_expected))


def load_agreement_csv(path) -> AgreementMatrix:
    """Read a counts CSV whose first line is a ``r=<int>`` header."""
    from .errors import ParseError

    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if not lines or not lines[0].startswith("r="):
        raise ParseError(f"{path}:1: expected a 'r=<raters>' header line")
    try:
        raters = int(lines[0][2:])
    except ValueError:
        raise ParseError(f"{path}:1: malformed rater count {lines[0]!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rows.append([int(v) for v in line.split(",")])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-integer count in {line!r}")
        if len(rows[-1]) != len(rows[0]):
            raise ParseError(f"{path}:{lineno}: ragged row length")
    if not rows:
        raise ParseError(f"{path}: no count rows")
    return AgreementMatrix(np.array(rows), raters_per_item=raters)


# ---------------------------------------------------------------------------
# cross-validation protocol


def stratified_kfold(notes: Sequence[Note], k: int, seed: int) -> list[list[int]]:
    """Partition note indices into k folds stratified on the joint (pb, tb)
    stratum; falls back to pb-only stratification (with a warning) when a
    non-empty stratum is smaller than k.
    """
    if k < 2:
        raise ContractError(f"k must be >= 2, got {k}")
    if len(notes) < k:
        raise ContractError(f"corpus of {len(notes)} notes cannot fill {k} folds")

    def group(key_fn):
        strata: dict[tuple, list[int]] = {}
        for idx in order:
            strata.setdefault(key_fn(notes[idx]), []).append(idx)
        return strata

    rng = np.random.default_rng(seed)
    order = [int(i) for i in rng.permutation(len(notes))]
    strata = group(lambda n: (n.pb, n.tb))
    if any(0 < len(members) < k for members in strata.values()):
        warnings.warn("a (pb, tb) stratum is smaller than k; stratifying on pb only",
                      stacklevel=2)
        strata = group(lambda n: (n.pb,))

    folds: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for key in sorted(strata):
        members = strata[key]
        for j, idx in enumerate(members):
            folds[(offset + j) % k].append(idx)
        offset = (offset + len(members)) % k
    return [sorted(fold) for fold in folds]


@dataclass
class CvResult:
    """Fold-level macro-F1 rows plus per-task aggregates."""

    rows: list[dict] = field(default_factory=list)  # run, fold, task, f1

    def scores(self, task: str) -> list[float]:
        return [row["f1"] for row in self.rows if row["task"] == task]

    def mean(self, task: str) -> float:
        return float(np.mean(self.scores(task)))

    def std(self, task: str) -> float:
        return float(np.std(self.scores(task)))

    def summary(self) -> dict[str, tuple[float, float]]:
        return {task: (self.mean(task), self.std(task)) for task in TASKS}


def _derive_seed(base: int, run: int, fold: int) -> int:
    return int(np.random.SeedSequence([base, run, fold]).generate_state(1)[0])


def _train_and_score_fold(args) -> list[dict]:
    """One (run, fold) job: train on k-2 folds, select on 1, test on 1.

    With k == 2 there is no spare fold to rotate into the validation role,
    so training uses the single remaining fold and keeps the final epoch.
    """
    notes, config, folds, run, fold_idx = args
    from .model import TemfModel, predict, train

    k = len(folds)
    val_idx = (fold_idx + 1) % k if k >= 3 else None
    test_ids = folds[fold_idx]
    val_ids = folds[val_idx] if val_idx is not None else []
    train_ids = [i for f in range(k) if f not in (fold_idx, val_idx) for i in folds[f]]

    fold_config = replace(config, seed=_derive_seed(config.seed, run, fold_idx))
    model = TemfModel.build(fold_config, [notes[i] for i in train_ids])
    train(model, [notes[i] for i in train_ids],
          validation=[notes[i] for i in val_ids] if val_ids else None)

    rows = []
    for task in TASKS:
        truth, pred = [], []
        for i in test_ids:
            note = notes[i]
            outcome = predict(model, note)
            truth.append(getattr(note, task))
            pred.append(outcome[task])
        rows.append({"run": run, "fold": fold_idx, "task": task,
                     "f1": macro_f1(truth, pred)})
    return rows


def run_cv(notes: Sequence[Note], config, k: int = 10, runs: int = 5,
           jobs: int = 1) -> CvResult:
    """k-fold cross-validation repeated ``runs`` times with per-run reshuffles.

    Within each run one training fold rotates into the validation role for
    best-epoch selection; macro-F1 is measured on the held-out test fold.
    """
    notes = list(notes)
    jobs_spec = []
    for run in range(runs):
        folds = stratified_kfold(notes, k, seed=config.seed + run)
        for fold_idx in range(k):
            jobs_spec.append((notes, config, folds, run, fold_idx))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_train_and_score_fold, jobs_spec))
    else:
        chunks = [_train_and_score_fold(spec) for spec in jobs_spec]

    result = CvResult()
    for chunk in sorted(chunks, key=lambda rows: (rows[0]["run"], rows[0]["fold"])):
        result.rows.extend(chunk)
    return result


def ablation_compare(notes: Sequence[Note], base_config, k: int = 10,
                     runs: int = 5, jobs: int = 1) -> dict[str, CvResult]:
    """run_cv under each ablation mode with otherwise identical settings."""
    table = {}
    for mode in ("full", "no_temporal", "no_emotion"):
        table[mode] = run_cv(notes, replace(base_config, ablation=mode),
                             k=k, runs=runs, jobs=jobs)
    return table


def context_sweep(notes: Sequence[Note], config, lengths: Sequence[int] = (5, 10, 13, 15, 20),
                  k: int = 10, runs: int = 5, jobs: int = 1) -> dict[int, CvResult]:
    """run_cv with the sentence budget n overridden per sweep length."""
    if any(length < 1 for length in lengths):
        raise ContractError(f"sweep lengths must be positive, got {list(lengths)}")
    return {int(length): run_cv(notes, replace(config, n=int(length)),
                                k=k, runs=runs, jobs=jobs)
            for length in lengths}


# ---------------------------------------------------------------------------
# results file


def write_results_csv(path, results: "CvResult | dict", label_column: str | None = None,
                      config_echo: dict | None = None) -> None:
    """Tabular fold scores plus a trailing '#'-prefixed summary block.

    ``results`` is either one CvResult or a {label: CvResult} mapping, in
    which case ``label_column`` (e.g. mode or length) is prepended.
    ``config_echo`` is appended as a comment line for reproducibility.
    """
    if isinstance(results, CvResult):
        table = {None: results}
        columns = ["run", "fold", "task", "f1"]
    else:
        if not label_column:
            raise ContractError("a labeled results table needs a label_column name")
        table = results
        columns = [label_column, "run", "fold", "task", "f1"]

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for label, result in table.items():
            for row in result.rows:
                record = [row["run"], row["fold"], row["task"], f"{row['f1']:.6f}"]
                if label is not None:
                    record.insert(0, label)
                writer.writerow(record)
        for label, result in table.items():
            for task, (mean, std) in result.summary().items():
                tag = f"{label_column}={label} " if label is not None else ""
                fh.write(f"# summary {tag}task={task} mean={mean:.6f} "
                         f"std={std:.6f} folds={len(result.scores(task))}\n")
        if config_echo is not None:
            import json

            fh.write(f"# config {json.dumps(config_echo, sort_keys=True)}\n")
