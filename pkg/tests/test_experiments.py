from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segxfer.experiments import (
    DiceRow,
    ExperimentConfig,
    compare_modes,
    dice_table,
    fold_partition,
    format_comparison,
    format_dice_table,
    job_keys,
    make_split_plan,
    prediction_filename,
    read_dice_csv,
    read_predictions,
    run_sweep,
    seg_cross_validation,
    write_dice_csv,
)
from segxfer.metrics import MetricsRecord, read_records_csv
from segxfer.nets import build_segnet
from segxfer.phantom import LABELS, CorpusConfig, build_corpus
from segxfer.training import TrainConfig


@pytest.fixture(scope="module")
def mini_corpus():
    return build_corpus(CorpusConfig.desk(size=32, patients=8, slices=(2, 3), positives=6))


@pytest.fixture(scope="module")
def mini_config():
    tiny = TrainConfig(batch_size=4, batches_per_epoch=2, epochs=2, seed=0)
    return ExperimentConfig.desk(
        modes=("IMG", "CONCAT"),
        n_pos=(1, 2),
        repetitions=2,
        folds=2,
        pos_pool=2,
        pos_test=3,
        levels=2,
        n=2,
        seg_train=tiny,
        cls_train=tiny,
    )


@pytest.fixture(scope="module")
def mini_segnet():
    return build_segnet(n=2, N=6, levels=2, size=32, seed=1)


# ---------------------------------------------------------------- folds and splits


@settings(max_examples=40, deadline=None)
@given(n=st.integers(4, 40), folds=st.integers(2, 4), seed=st.integers(0, 10**6))
def test_fold_partition_is_a_partition(n, folds, seed):
    patients = [f"p{i:03d}" for i in range(n)]
    groups = fold_partition(patients, folds, seed)
    flat = [p for g in groups for p in g]
    assert sorted(flat) == patients
    assert max(map(len, groups)) - min(map(len, groups)) <= 1
    assert groups == fold_partition(list(reversed(patients)), folds, seed)


def test_fold_partition_too_few():
    with pytest.raises(ValueError):
        fold_partition(["a", "b"], 4, 0)


def _check_plan(plan, corpus, config):
    assert not set(plan.seg_train_patients) & set(plan.cls_patients)
    assert set(plan.seg_train_patients) | set(plan.cls_patients) == set(corpus.patients)
    tr = {corpus.normals[i].patient_id for i in plan.neg_train}
    te = {corpus.normals[i].patient_id for i in plan.neg_test}
    assert tr and te and not tr & te and (tr | te) <= set(plan.cls_patients)
    assert not set(plan.neg_train) & set(plan.neg_test)
    assert not set(plan.pos_pool) & set(plan.pos_test)
    assert len(plan.pos_pool) == config.pos_pool and len(plan.pos_test) == config.pos_test


def test_split_plan_disjointness_over_seeds(mini_corpus, mini_config):
    for seed in range(1000):
        cfg = replace(mini_config, seed=seed)
        for disease in ("effusion", "septal"):
            _check_plan(make_split_plan(cfg, mini_corpus, disease, seed % 7), mini_corpus, cfg)


def test_two_patient_split_never_leaves_a_half_empty():
    # 4 folds over 8 patients leaves two classification patients of 4-5 slices
    corpus = build_corpus(CorpusConfig.desk(size=32, patients=8, slices=(4, 5), positives=6))
    cfg = ExperimentConfig.desk(pos_pool=2, pos_test=3)
    for rep in range(20):
        _check_plan(make_split_plan(cfg, corpus, "effusion", rep), corpus, cfg)


def test_split_plan_nested_positives(mini_corpus, mini_config):
    plan = make_split_plan(mini_config, mini_corpus, "effusion", 0)
    assert plan.positives_for(1) == plan.positives_for(2)[:1]
    with pytest.raises(ValueError):
        plan.positives_for(3)


def test_split_plan_is_deterministic(mini_corpus, mini_config):
    a = make_split_plan(mini_config, mini_corpus, "septal", 1)
    assert a == make_split_plan(mini_config, mini_corpus, "septal", 1)


def test_split_plan_needs_positives(mini_corpus, mini_config):
    with pytest.raises(ValueError):
        make_split_plan(replace(mini_config, pos_test=10), mini_corpus, "effusion", 0)


def test_paper_profile_defaults():
    cfg = ExperimentConfig.paper()
    assert cfg.n_pos == tuple(range(1, 11)) and cfg.repetitions == 10 and len(cfg.modes) == 5
    assert len(job_keys(cfg)) == 2 * 5 * 10 * 10


def test_prediction_filename_is_path_safe():
    assert prediction_filename(("effusion", "IMG+CONCAT", 3, 0)) == "effusion_IMG-CONCAT_npos03_rep00.tsv"


# ---------------------------------------------------------------- sweeps


@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory, mini_corpus, mini_config, mini_segnet):
    out = tmp_path_factory.mktemp("sweep")
    run_sweep(mini_config, mini_segnet, mini_corpus, out_dir=out)
    return out


def test_sweep_writes_every_job(sweep_dir, mini_config):
    records = read_records_csv(sweep_dir / "sweep.csv")
    assert [r.key for r in records] == job_keys(mini_config)
    assert len(list((sweep_dir / "predictions").glob("*.tsv"))) == len(records)


def test_records_recompute_from_predictions(sweep_dir):
    for r in read_records_csv(sweep_dir / "sweep.csv"):
        preds = read_predictions(sweep_dir / "predictions" / prediction_filename(r.key))
        assert sum(p.truth for p in preds) == 3
        again = MetricsRecord.from_predictions(*r.key, [p.predicted for p in preds], [p.truth for p in preds])
        assert again == r
        assert all(p.predicted == int(p.prob > 0.5) for p in preds)


def test_sweep_is_deterministic(tmp_path, sweep_dir, mini_corpus, mini_config, mini_segnet):
    run_sweep(mini_config, mini_segnet, mini_corpus, out_dir=tmp_path)
    assert (tmp_path / "sweep.csv").read_bytes() == (sweep_dir / "sweep.csv").read_bytes()


def test_sweep_resumes_by_key(tmp_path, sweep_dir, mini_corpus, mini_config, mini_segnet, monkeypatch):
    lines = (sweep_dir / "sweep.csv").read_text().splitlines(keepends=True)
    (tmp_path / "sweep.csv").write_text("".join(lines[:4]))
    import segxfer.experiments as ex

    calls = []
    real = ex.run_job
    monkeypatch.setattr(ex, "run_job", lambda *a: calls.append(a[3:]) or real(*a))
    run_sweep(mini_config, mini_segnet, mini_corpus, out_dir=tmp_path)
    assert len(calls) == len(job_keys(mini_config)) - 3
    assert (tmp_path / "sweep.csv").read_bytes() == (sweep_dir / "sweep.csv").read_bytes()


def test_sweep_needs_segnet_for_seg_modes(mini_corpus, mini_config):
    with pytest.raises(ValueError):
        run_sweep(mini_config, None, mini_corpus)


def test_img_only_sweep_without_segnet(mini_corpus, mini_config):
    cfg = replace(mini_config, modes=("IMG",), n_pos=(1,), repetitions=1, diseases=("septal",))
    (rec,) = run_sweep(cfg, None, mini_corpus)
    assert rec.key == ("septal", "IMG", 1, 0)


# ---------------------------------------------------------------- comparisons


def rec(mode, kappa, k=1, rep=0, disease="effusion"):
    return MetricsRecord(disease, mode, k, rep, 0.5, 1.0, kappa)


def test_compare_modes_ranking_and_flag():
    rows = compare_modes([rec("IMG", 0.1), rec("SEG", 0.3), rec("CONCAT", 0.5), rec("CONCAT", 0.7, rep=1)])
    (row,) = rows
    assert row.ranking == ["CONCAT", "SEG", "IMG"]
    assert row.kappa["CONCAT"] == pytest.approx(0.6)
    assert row.concat_seg_img is True
    assert "CONCAT>=SEG>=IMG: yes" in format_comparison(rows)


def test_compare_modes_tie_goes_to_earlier_mode():
    (row,) = compare_modes([rec("CONCAT", 0.4), rec("IMG", 0.4)], mode_order=["CONCAT", "IMG"])
    assert row.ranking == ["CONCAT", "IMG"]
    (row,) = compare_modes([rec("CONCAT", 0.4), rec("IMG", 0.4)])
    assert row.ranking == ["IMG", "CONCAT"]


def test_compare_single_mode_has_no_flag():
    (row,) = compare_modes([rec("SEG", 0.2)])
    assert row.ranking == ["SEG"] and row.concat_seg_img is None


def test_compare_groups_by_disease_and_npos():
    rows = compare_modes([rec("IMG", 0.1, k=1), rec("IMG", 0.2, k=2), rec("IMG", 0.3, disease="septal")])
    assert [(r.disease, r.n_pos) for r in rows] == [("effusion", 1), ("effusion", 2), ("septal", 1)]


# ---------------------------------------------------------------- dice tables


def test_dice_table_and_csv(tmp_path):
    rows = [DiceRow(f, 8, label, 0.8 + 0.1 * f) for f in range(2) for label in LABELS]
    table = dice_table(rows)
    assert table[8]["LV"][0] == pytest.approx(0.85)
    assert table[8]["LV"][1] == pytest.approx(np.std([0.8, 0.9], ddof=1))
    assert "85±7%" in format_dice_table(rows)
    write_dice_csv(tmp_path / "d.csv", rows)
    assert read_dice_csv(tmp_path / "d.csv") == rows


def test_seg_cross_validation_rows(mini_corpus, mini_config, tmp_path):
    rows = seg_cross_validation(mini_corpus, mini_config, n_values=(2,), folds=[1], checkpoint_dir=tmp_path)
    assert [r.label for r in rows] == list(LABELS)
    assert all(r.fold == 1 and r.n == 2 and 0 <= r.dice <= 1 for r in rows)
    assert (tmp_path / "segnet_fold1_n2.ckpt").exists()
