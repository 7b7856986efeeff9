"""Command-line entry point: corpus generation, training, evaluation,
gradient verification, and agreement metrics, driven by flags plus an
optional JSON config file (flags win over file values).

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .corpus import (GeneratorConfig, corpus_stats, generate, load_corpus,
                     save_corpus)
from .errors import ContractError, ParseError, ShapeError, VocabularyError
from .layers import load_embedding_table
from .metrics import (ablation_compare, context_sweep, fleiss_kappa,
                      load_agreement_csv, macro_f1, run_cv, write_results_csv)
from .model import (ModelConfig, TemfModel, load_checkpoint, predict,
                    save_checkpoint, train)


class UsageError(Exception):
    """Bad flags, bad config file, or unreadable inputs."""


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# configuration keys accepted in a --config file, by consumer
GENERATOR_KEYS = {"notes": "note_count", "pb_rate": "pb_rate", "tb_rate": "tb_rate",
                  "joint_rate": "joint_rate", "signal": "signal",
                  "token_signal": "token_signal", "temporal_signal": "temporal_signal",
                  "emotion_signal": "emotion_signal", "language_mode": "language_mode",
                  "mean_note_len": "mean_note_len",
                  "mean_sentence_len": "mean_sentence_len"}
MODEL_KEYS = {"n": "n", "c": "c", "dim": "dim", "ffn_dim": "ffn_dim",
              "heads": "heads", "sentence_layers": "sentence_layers",
              "doc_encoder_layers": "doc_encoder_layers",
              "doc_abstract_layers": "doc_abstract_layers",
              "attention_dim": "attention_dim", "head_hidden": "head_hidden",
              "alpha": "alpha", "beta": "beta",
              "diff_loss_enabled": "diff_loss_enabled",
              "diff_loss_normalize": "diff_loss_normalize",
              "ablation": "ablation", "dropout": "dropout",
              "lr": "learning_rate", "batch_size": "batch_size",
              "epochs": "epochs", "trainable_embeddings": "trainable_embeddings"}
PATH_KEYS = {"corpus", "checkpoint", "results", "out", "embeddings_a",
             "embeddings_b"}
PROTOCOL_KEYS = {"cv", "runs", "sweep", "seed", "jobs"}
KNOWN_KEYS = set(GENERATOR_KEYS) | set(MODEL_KEYS) | PATH_KEYS | PROTOCOL_KEYS


def load_config_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc.msg}")
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(data) - KNOWN_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys {unknown}; known keys: "
                         f"{sorted(KNOWN_KEYS)}")
    return data


class Settings:
    """Merged view over CLI flags and the config file; flags win."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file = load_config_file(args.config) if args.config else {}

    def get(self, key: str, default=None):
        value = getattr(self.args, key, None)
        if value is not None:
            return value
        if key in self.file:
            return self.file[key]
        return default

    def require(self, key: str, hint: str):
        value = self.get(key)
        if value is None:
            raise UsageError(f"missing {hint}; pass --{key.replace('_', '-')} "
                             f"or set {key!r} in the config file")
        return value

    def dataclass_kwargs(self, mapping: dict[str, str]) -> dict:
        kwargs = {}
        for key, field_name in mapping.items():
            value = self.get(key)
            if value is not None:
                kwargs[field_name] = value
        return kwargs

    def generator_config(self) -> GeneratorConfig:
        kwargs = self.dataclass_kwargs(GENERATOR_KEYS)
        kwargs["seed"] = int(self.get("seed", 0))
        try:
            config = GeneratorConfig(**kwargs)
            config.validate()
        except (ContractError, TypeError) as exc:
            raise UsageError(f"invalid generator configuration: {exc}")
        return config

    def model_config(self) -> ModelConfig:
        kwargs = self.dataclass_kwargs(MODEL_KEYS)
        kwargs["seed"] = int(self.get("seed", 0))
        try:
            config = ModelConfig(**kwargs)
            config.validate()
        except (ContractError, TypeError) as exc:
            raise UsageError(f"invalid model configuration: {exc}")
        return config

    def jobs(self) -> int:
        return int(self.get("jobs", os.cpu_count() or 1))

    def echo(self, extra: dict) -> dict:
        merged = dict(self.file)
        merged.update(extra)
        return merged


def _load_corpus_checked(path):
    try:
        return load_corpus(path)
    except FileNotFoundError:
        raise UsageError(f"corpus file not found: {path}")


def _load_tables(settings: Settings, config: ModelConfig):
    table_a = table_b = None
    path_a = settings.get("embeddings_a")
    path_b = settings.get("embeddings_b")
    if path_b and not path_a:
        raise UsageError("--embeddings-b requires --embeddings-a")
    if path_a:
        table_a = load_embedding_table(path_a, name="embed.a")
        if table_a.dim != config.dim:
            raise UsageError(f"embeddings at {path_a} have dim {table_a.dim}, "
                             f"model dim is {config.dim}")
    if path_b:
        table_b = load_embedding_table(path_b, name="embed.b")
        if table_b.dim != config.dim:
            raise UsageError(f"embeddings at {path_b} have dim {table_b.dim}, "
                             f"model dim is {config.dim}")
    return table_a, table_b


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(settings: Settings) -> int:
    out = settings.require("out", "output corpus path")
    config = settings.generator_config()
    notes = generate(config)
    save_corpus(notes, out)
    print(f"wrote {len(notes)} notes to {out}")
    print("config: " + json.dumps(dataclasses.asdict(config), sort_keys=True))
    print(corpus_stats(notes).format())
    return 0


def cmd_train(settings: Settings) -> int:
    corpus_path = settings.require("corpus", "training corpus path")
    checkpoint_path = settings.require("checkpoint", "checkpoint output path")
    notes = _load_corpus_checked(corpus_path)
    if not notes:
        raise UsageError(f"corpus at {corpus_path} is empty")
    config = settings.model_config()
    table_a, table_b = _load_tables(settings, config)
    model = TemfModel.build(config, notes, table_a, table_b)
    history = train(model, notes)
    for entry in history:
        if "epoch" in entry:
            print(f"epoch {entry['epoch']}: L_pb={entry['pb']:.6f} "
                  f"L_tb={entry['tb']:.6f} L_diff={entry['diff']:.6f} "
                  f"total={entry['total']:.6f}")
    save_checkpoint(model, checkpoint_path)
    print(f"checkpoint written to {checkpoint_path}")
    return 0


def _single_eval(settings: Settings, notes) -> int:
    model = load_checkpoint(settings.get("checkpoint"))
    truth = {"pb": [], "tb": []}
    pred = {"pb": [], "tb": []}
    for note in notes:
        outcome = predict(model, note)
        for task in ("pb", "tb"):
            truth[task].append(getattr(note, task))
            pred[task].append(outcome[task])
    from .metrics import CvResult

    result = CvResult(rows=[{"run": 0, "fold": 0, "task": task,
                             "f1": macro_f1(truth[task], pred[task])}
                            for task in ("pb", "tb")])
    results_path = settings.get("results")
    if results_path:
        write_results_csv(results_path, result,
                          config_echo=settings.echo(
                              {"checkpoint": str(settings.get("checkpoint"))}))
    for task in ("pb", "tb"):
        print(f"{task} macro-F1: {result.mean(task):.4f}")
    return 0


def cmd_eval(settings: Settings) -> int:
    corpus_path = settings.require("corpus", "evaluation corpus path")
    notes = _load_corpus_checked(corpus_path)
    if not notes:
        raise UsageError(f"corpus at {corpus_path} is empty")
    if settings.get("checkpoint") and not settings.get("cv"):
        return _single_eval(settings, notes)

    config = settings.model_config()
    k = int(settings.get("cv", 10))
    runs = int(settings.get("runs", 5))
    jobs = settings.jobs()
    results_path = settings.get("results")
    echo = settings.echo({"cv": k, "runs": runs,
                          "model": dataclasses.asdict(config)})

    sweep_arg = settings.get("sweep")
    if sweep_arg:
        if isinstance(sweep_arg, str):
            lengths = [int(v) for v in sweep_arg.split(",") if v.strip()]
        else:
            lengths = [int(v) for v in sweep_arg]
        table = context_sweep(notes, config, lengths=lengths, k=k, runs=runs,
                              jobs=jobs)
        if results_path:
            write_results_csv(results_path, table, label_column="length",
                              config_echo=echo)
        for length, result in table.items():
            for task, (mean, std) in result.summary().items():
                print(f"n={length} {task}: {mean:.4f} +/- {std:.4f}")
        return 0

    if settings.args.ablation_compare:
        table = ablation_compare(notes, config, k=k, runs=runs, jobs=jobs)
        if results_path:
            write_results_csv(results_path, table, label_column="mode",
                              config_echo=echo)
        for mode, result in table.items():
            for task, (mean, std) in result.summary().items():
                print(f"{mode} {task}: {mean:.4f} +/- {std:.4f}")
        return 0

    result = run_cv(notes, config, k=k, runs=runs, jobs=jobs)
    if results_path:
        write_results_csv(results_path, result, config_echo=echo)
    for task, (mean, std) in result.summary().items():
        print(f"{task} macro-F1 over {k}-fold x {runs} runs: "
              f"{mean:.4f} +/- {std:.4f}")
    return 0


def cmd_gradcheck(settings: Settings) -> int:
    from .verify import format_report, run_all

    results = run_all(int(settings.get("seed", 0)))
    print(format_report(results))
    return 0 if all(r.passed for r in results) else 2


def cmd_kappa(settings: Settings) -> int:
    matrix = load_agreement_csv(settings.args.matrix)
    kappa = fleiss_kappa(matrix)
    if kappa is None:
        print("undefined (Pe=1)")
    else:
        print(f"{kappa:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> CliParser:
    parser = CliParser(prog="temf",
                       description="temporal- and emotion-assisted multitask "
                                   "note classifier")
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--seed", type=int, help="master random seed")
    parser.add_argument("--jobs", type=int, help="parallel fold workers")

    # the same globals are accepted after the subcommand; SUPPRESS keeps the
    # subparser from clobbering values parsed at the root
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-corpus", help="write a synthetic corpus",
                         parents=[common])
    gen.add_argument("--out", help="output corpus path (JSON lines)")
    gen.add_argument("--notes", type=int, help="number of notes")
    gen.add_argument("--signal", type=float, help="overall signal strength in [0,1]")
    for channel in ("token", "temporal", "emotion"):
        gen.add_argument(f"--{channel}-signal", type=float, dest=f"{channel}_signal",
                         help=f"override the {channel} channel strength")
    gen.add_argument("--pb-rate", type=float, dest="pb_rate")
    gen.add_argument("--tb-rate", type=float, dest="tb_rate")
    gen.add_argument("--joint-rate", type=float, dest="joint_rate")
    gen.add_argument("--language-mode", choices=("en", "code_mixed"),
                     dest="language_mode")
    gen.add_argument("--mean-note-len", type=float, dest="mean_note_len")
    gen.add_argument("--mean-sentence-len", type=float, dest="mean_sentence_len")

    def add_model_flags(command):
        command.add_argument("--corpus", help="corpus file")
        command.add_argument("--n", type=int, help="max sentences per note")
        command.add_argument("--c", type=int, help="max tokens per sentence")
        command.add_argument("--dim", type=int)
        command.add_argument("--ffn-dim", type=int, dest="ffn_dim")
        command.add_argument("--heads", type=int)
        command.add_argument("--attention-dim", type=int, dest="attention_dim")
        command.add_argument("--head-hidden", type=int, dest="head_hidden")
        command.add_argument("--alpha", type=float)
        command.add_argument("--beta", type=float)
        command.add_argument("--ablation",
                             choices=("full", "no_temporal", "no_emotion"))
        command.add_argument("--dropout", type=float)
        command.add_argument("--lr", type=float)
        command.add_argument("--batch-size", type=int, dest="batch_size")
        command.add_argument("--epochs", type=int)
        command.add_argument("--embeddings-a", dest="embeddings_a",
                             help="word-embedding text file (primary)")
        command.add_argument("--embeddings-b", dest="embeddings_b",
                             help="word-embedding text file (secondary)")

    tr = sub.add_parser("train", help="train and write a checkpoint",
                        parents=[common])
    add_model_flags(tr)
    tr.add_argument("--checkpoint", help="checkpoint output path")

    ev = sub.add_parser("eval", help="cross-validate or evaluate a checkpoint",
                        parents=[common])
    add_model_flags(ev)
    ev.add_argument("--checkpoint", help="checkpoint to evaluate (single-eval mode)")
    ev.add_argument("--results", help="results CSV output path")
    ev.add_argument("--cv", type=int, help="number of folds")
    ev.add_argument("--runs", type=int, help="repeated CV runs")
    ev.add_argument("--sweep", help="comma-separated context lengths")
    ev.add_argument("--ablation-compare", action="store_true",
                    dest="ablation_compare",
                    help="compare full/no_temporal/no_emotion")

    sub.add_parser("gradcheck", help="run the gradient verification suite",
                   parents=[common])

    kp = sub.add_parser("kappa", help="Fleiss kappa of an agreement-count CSV",
                        parents=[common])
    kp.add_argument("matrix", help="counts CSV with a r=<int> header line")

    return parser


DISPATCH = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "kappa": cmd_kappa,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        settings = Settings(args)
    except UsageError as exc:
        print(f"temf: error: {exc}", file=sys.stderr)
        return 1
    try:
        return DISPATCH[args.command](settings)
    except UsageError as exc:
        print(f"temf: error: {exc}", file=sys.stderr)
        return 1
    except (ParseError, VocabularyError) as exc:
        print(f"temf: error: {exc}", file=sys.stderr)
        return 1
    except (ContractError, ShapeError) as exc:
        print(f"temf: failure: {exc}", file=sys.stderr)
        return 2
    except np.linalg.LinAlgError as exc:
        print(f"temf: numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
