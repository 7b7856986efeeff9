"""Metric oracles, fold protocol, and cross-validation harness tests."""

import numpy as np
import pytest

from temf.corpus import GeneratorConfig, generate
from temf.errors import ContractError, ParseError
from temf.metrics import (AgreementMatrix, CvResult, ablation_compare,
                          context_sweep, fleiss_kappa, load_agreement_csv,
                          macro_f1, run_cv, stratified_kfold, write_results_csv)
from temf.model import ModelConfig


def smoke_model_config(**kwargs):
    base = dict(n=2, c=3, dim=8, ffn_dim=16, heads=2, head_hidden=8,
                attention_dim=8, dropout=0.0, learning_rate=1e-3, epochs=1,
                batch_size=4, seed=0)
    base.update(kwargs)
    return ModelConfig(**base)


def smoke_corpus(count=16, seed=21):
    return generate(GeneratorConfig(note_count=count, seed=seed, mean_note_len=2.0,
                                    mean_sentence_len=3.0, pb_rate=0.5, tb_rate=0.5,
                                    joint_rate=0.25))


# ---------------------------------------------------------------------------
# macro F1


def test_macro_f1_perfect_predictions():
    assert macro_f1([0, 1, 0, 1], [0, 1, 0, 1]) == 1.0


def test_macro_f1_hand_confusion_matrix():
    assert macro_f1([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.5, abs=1e-12)


def test_macro_f1_majority_prediction_on_skewed_split():
    y_true = [0] * 70 + [1] * 30
    y_pred = [0] * 100
    assert macro_f1(y_true, y_pred) == pytest.approx(7 / 17, abs=1e-12)


def test_macro_f1_absent_class_scores_zero():
    # both sides all-zero: class 1 absent everywhere, contributes F1 = 0
    assert macro_f1([0, 0], [0, 0]) == pytest.approx(0.5)


def test_macro_f1_symmetric_under_relabeling():
    rng = np.random.default_rng(0)
    for _ in range(25):
        t = rng.integers(0, 2, 30)
        p = rng.integers(0, 2, 30)
        assert macro_f1(t, p) == pytest.approx(macro_f1(1 - t, 1 - p), abs=1e-12)


def test_macro_f1_matches_sklearn():
    from sklearn.metrics import f1_score

    rng = np.random.default_rng(1)
    for _ in range(50):
        t = rng.integers(0, 2, 40)
        p = rng.integers(0, 2, 40)
        mine = macro_f1(t, p)
        theirs = f1_score(t, p, average="macro", zero_division=0)
        assert mine == pytest.approx(theirs, abs=1e-12)


def test_macro_f1_contract_errors():
    with pytest.raises(ContractError):
        macro_f1([0, 1], [0])
    with pytest.raises(ContractError):
        macro_f1([0, 2], [0, 1])
    with pytest.raises(ContractError):
        macro_f1([], [])


# ---------------------------------------------------------------------------
# Fleiss kappa


def test_kappa_unanimous_items_give_exactly_one():
    m = AgreementMatrix(np.array([[3, 0], [0, 3], [3, 0]]), raters_per_item=3)
    assert fleiss_kappa(m) == 1.0


def test_kappa_two_item_unanimous():
    assert fleiss_kappa(AgreementMatrix([[3, 0], [0, 3]], 3)) == 1.0


def test_kappa_hand_computed_negative_case():
    kappa = fleiss_kappa(AgreementMatrix([[2, 1], [1, 2]], 3))
    assert kappa == pytest.approx(-1 / 3, abs=1e-9)


def test_kappa_undefined_when_expected_agreement_is_one():
    assert fleiss_kappa(AgreementMatrix([[3, 0], [3, 0]], 3)) is None


def test_kappa_invariant_to_item_and_category_permutations():
    rng = np.random.default_rng(2)
    counts = rng.multinomial(4, [0.3, 0.5, 0.2], size=12)
    base = fleiss_kappa(AgreementMatrix(counts, 4))
    item_perm = counts[rng.permutation(12)]
    cat_perm = counts[:, rng.permutation(3)]
    assert fleiss_kappa(AgreementMatrix(item_perm, 4)) == pytest.approx(base, abs=1e-12)
    assert fleiss_kappa(AgreementMatrix(cat_perm, 4)) == pytest.approx(base, abs=1e-12)


def test_kappa_matches_statsmodels():
    from statsmodels.stats.inter_rater import fleiss_kappa as sm_kappa

    rng = np.random.default_rng(3)
    for _ in range(20):
        counts = rng.multinomial(5, [0.25, 0.25, 0.5], size=10)
        mine = fleiss_kappa(AgreementMatrix(counts, 5))
        theirs = sm_kappa(counts)
        assert mine == pytest.approx(theirs, abs=1e-10)


def test_agreement_matrix_contract_errors():
    with pytest.raises(ContractError, match="row 1"):
        AgreementMatrix([[2, 1], [2, 2]], 3)
    with pytest.raises(ContractError):
        AgreementMatrix([[1, 1]], 1)


def test_load_agreement_csv(tmp_path):
    path = tmp_path / "counts.csv"
    path.write_text("r=3\n2,1\n1,2\n")
    matrix = load_agreement_csv(path)
    assert matrix.raters_per_item == 3
    assert fleiss_kappa(matrix) == pytest.approx(-1 / 3)
    bad = tmp_path / "bad.csv"
    bad.write_text("r=3\n2,x\n")
    with pytest.raises(ParseError, match=":2"):
        load_agreement_csv(bad)
    headless = tmp_path / "headless.csv"
    headless.write_text("2,1\n")
    with pytest.raises(ParseError, match="header"):
        load_agreement_csv(headless)


# ---------------------------------------------------------------------------
# stratified k-fold


def test_kfold_partitions_364_notes_into_balanced_folds():
    notes = generate(GeneratorConfig(seed=8))
    folds = stratified_kfold(notes, k=10, seed=0)
    sizes = sorted(len(f) for f in folds)
    assert set(sizes) <= {36, 37} and sum(sizes) == 364
    flat = [i for fold in folds for i in fold]
    assert sorted(flat) == list(range(364))


def test_kfold_same_seed_identical():
    notes = generate(GeneratorConfig(note_count=120, seed=9))
    assert stratified_kfold(notes, 5, seed=4) == stratified_kfold(notes, 5, seed=4)
    assert stratified_kfold(notes, 5, seed=4) != stratified_kfold(notes, 5, seed=5)


def test_kfold_stratification_keeps_pb_rate():
    notes = generate(GeneratorConfig(seed=10))
    global_rate = sum(n.pb for n in notes) / len(notes)
    for fold in stratified_kfold(notes, 10, seed=1):
        rate = sum(notes[i].pb for i in fold) / len(fold)
        assert rate == pytest.approx(global_rate, abs=0.03)


@pytest.mark.filterwarnings("ignore:a \\(pb, tb\\) stratum is smaller")
def test_kfold_partition_invariants_over_seeds():
    for seed in range(10):
        notes = generate(GeneratorConfig(note_count=97, seed=seed))
        folds = stratified_kfold(notes, 10, seed=seed)
        flat = sorted(i for fold in folds for i in fold)
        assert flat == list(range(97))
        assert max(len(f) for f in folds) - min(len(f) for f in folds) <= 1


def test_kfold_small_stratum_degrades_with_warning():
    notes = generate(GeneratorConfig(note_count=40, seed=11, pb_rate=0.4,
                                     tb_rate=0.4, joint_rate=0.05))
    with pytest.warns(UserWarning, match="stratum"):
        folds = stratified_kfold(notes, 8, seed=0)
    assert sorted(i for f in folds for i in f) == list(range(40))


def test_kfold_contract_errors():
    notes = generate(GeneratorConfig(note_count=5, seed=12))
    with pytest.raises(ContractError):
        stratified_kfold(notes, 1, seed=0)
    with pytest.raises(ContractError):
        stratified_kfold(notes, 6, seed=0)


# ---------------------------------------------------------------------------
# cross-validation harness


def test_run_cv_smoke_two_folds():
    notes = smoke_corpus()
    result = run_cv(notes, smoke_model_config(), k=2, runs=1)
    assert len(result.rows) == 4  # 2 folds x 2 tasks
    assert {row["task"] for row in result.rows} == {"pb", "tb"}
    assert {row["fold"] for row in result.rows} == {0, 1}
    summary = result.summary()
    assert set(summary) == {"pb", "tb"}
    for mean, std in summary.values():
        assert 0.0 <= mean <= 1.0 and std >= 0.0


def test_run_cv_is_reproducible():
    notes = smoke_corpus()
    a = run_cv(notes, smoke_model_config(), k=2, runs=2)
    b = run_cv(notes, smoke_model_config(), k=2, runs=2)
    assert a.rows == b.rows


def test_run_cv_parallel_jobs_match_serial():
    notes = smoke_corpus()
    serial = run_cv(notes, smoke_model_config(), k=2, runs=1, jobs=1)
    parallel = run_cv(notes, smoke_model_config(), k=2, runs=1, jobs=2)
    assert serial.rows == parallel.rows


def test_ablation_compare_shapes_and_shared_seeds():
    notes = smoke_corpus()
    table = ablation_compare(notes, smoke_model_config(), k=2, runs=1)
    assert set(table) == {"full", "no_temporal", "no_emotion"}
    for result in table.values():
        assert len(result.rows) == 4


def test_context_sweep_overrides_note_budget():
    notes = smoke_corpus()
    sweep = context_sweep(notes, smoke_model_config(), lengths=[1, 3], k=2, runs=1)
    assert set(sweep) == {1, 3}
    for result in sweep.values():
        assert len(result.rows) == 4
    with pytest.raises(ContractError):
        context_sweep(notes, smoke_model_config(), lengths=[0], k=2, runs=1)


def test_context_sweep_default_lengths():
    import inspect

    from temf.metrics import context_sweep as sweep_fn
    defaults = inspect.signature(sweep_fn).parameters["lengths"].default
    assert tuple(defaults) == (5, 10, 13, 15, 20)


def test_results_csv_schema(tmp_path):
    result = CvResult(rows=[
        {"run": 0, "fold": 0, "task": "pb", "f1": 0.5},
        {"run": 0, "fold": 0, "task": "tb", "f1": 0.25},
    ])
    path = tmp_path / "results.csv"
    write_results_csv(path, result)
    lines = path.read_text().splitlines()
    assert lines[0] == "run,fold,task,f1"
    assert lines[1] == "0,0,pb,0.500000"
    assert any(line.startswith("# summary task=pb") for line in lines)

    labeled = tmp_path / "ablation.csv"
    write_results_csv(labeled, {"full": result}, label_column="mode")
    lines = labeled.read_text().splitlines()
    assert lines[0] == "mode,run,fold,task,f1"
    assert lines[1].startswith("full,0,0,pb")
