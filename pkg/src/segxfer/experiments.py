"""Segmentation cross-validation and unbalanced classification sweeps.

The classifier negatives are the test patients of one segmentation fold, so
the segnet never saw them; positives come from their own virtual patients.
All randomness is derived from the master seed and the job key.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import (
    MetricsRecord,
    SWEEP_COLUMNS,
    aggregate,
    dice_per_label,
    format_record,
    mean_std,
    read_records_csv,
)
from .nets import (
    ALL_MODES,
    DESK_CLS_DENSE,
    DESK_CLS_WIDTHS,
    PAPER_CLS_DENSE,
    PAPER_CLS_WIDTHS,
    Checkpoint,
    FeatureMode,
    predict_labels,
)
from .phantom import DISEASES, LABELS, NUM_LABELS, Corpus
from .training import TrainConfig, extract_features, fit_clsnet, predict_proba, train_segnet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    profile: str = "desk"
    n: int = 8
    modes: tuple[str, ...] = tuple(m.value for m in ALL_MODES)
    n_pos: tuple[int, ...] = tuple(range(1, 11))
    repetitions: int = 10
    seed: int = 0
    folds: int = 4
    seg_fold: int = 0
    pos_pool: int = 10
    pos_test: int = 20
    diseases: tuple[str, ...] = DISEASES
    levels: int = 4
    seg_train: TrainConfig = field(default_factory=TrainConfig.for_segnet)
    cls_train: TrainConfig = field(default_factory=TrainConfig.for_clsnet)

    @classmethod
    def desk(cls, seed: int = 0, **kw) -> "ExperimentConfig":
        return cls(profile="desk", n=kw.pop("n", 8), seed=seed, **kw)

    @classmethod
    def paper(cls, seed: int = 0, **kw) -> "ExperimentConfig":
        kw.setdefault("seg_train", TrainConfig.for_segnet("paper"))
        kw.setdefault("cls_train", TrainConfig.for_clsnet("paper"))
        return cls(profile="paper", n=kw.pop("n", 16), seed=seed, **kw)

    @property
    def cls_widths(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if self.profile == "paper":
            return PAPER_CLS_WIDTHS, PAPER_CLS_DENSE
        return DESK_CLS_WIDTHS, DESK_CLS_DENSE


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _disease_index(disease: str) -> int:
    return DISEASES.index(disease)


def _mode_index(mode: str) -> int:
    return [m.value for m in ALL_MODES].index(FeatureMode.parse(mode).value)


# --------------------------------------------------------------------------
# Segmentation cross-validation
# --------------------------------------------------------------------------


def fold_partition(patients: Sequence[str], folds: int, seed: int) -> list[list[str]]:
    """Deal shuffled patients into ``folds`` test groups (a function of the seed only)."""
    patients = sorted(patients)
    if len(patients) < folds:
        raise ValueError(f"need at least {folds} patients for {folds}-fold cross-validation, got {len(patients)}")
    order = _rng(seed, 0xF01D).permutation(len(patients))
    groups = [[] for _ in range(folds)]
    for i, p in enumerate(order):
        groups[i % folds].append(patients[p])
    return [sorted(g) for g in groups]


@dataclass
class DiceRow:
    fold: int
    n: int
    label: str
    dice: float


def evaluate_segmentation(ckpt: Checkpoint, images: np.ndarray, label_maps: np.ndarray) -> np.ndarray:
    """Per-label Dice averaged over the given slices."""
    pred = predict_labels(ckpt, images)
    per_slice = np.array([dice_per_label(p, t, ckpt.spec.N) for p, t in zip(pred, label_maps)])
    return per_slice.mean(axis=0)


def seg_cross_validation(
    corpus: Corpus,
    config: ExperimentConfig,
    n_values: Sequence[int] = (8, 16, 32, 64),
    folds: Sequence[int] | None = None,
    checkpoint_dir=None,
) -> list[DiceRow]:
    """Train one segnet per (fold, n) on the other folds and score held-out patients."""
    groups = fold_partition(corpus.patients, config.folds, config.seed)
    rows = []
    for fold in folds if folds is not None else range(config.folds):
        test = groups[fold]
        train = [p for p in corpus.patients if p not in set(test)]
        X, Y = Corpus.stack(corpus.normals_of(train))
        Xt, Yt = Corpus.stack(corpus.normals_of(test))
        for n in n_values:
            tc = replace(config.seg_train, seed=seg_seed(config.seed, fold, n))
            ckpt, _ = train_segnet(tc, X, Y, n=n, N=NUM_LABELS, levels=config.levels)
            if checkpoint_dir is not None:
                ckpt.save(Path(checkpoint_dir) / f"segnet_fold{fold}_n{n}.ckpt")
            scores = evaluate_segmentation(ckpt, Xt, Yt)
            rows.extend(DiceRow(fold, n, LABELS[k], float(scores[k])) for k in range(NUM_LABELS))
            log.info("fold %d n=%d dice %s", fold, n, np.round(scores, 3))
    return rows


def seg_seed(master: int, fold: int, n: int) -> int:
    return int(_rng(master, 0x5E6, fold, n).integers(0, 2**31))


def dice_table(rows: Sequence[DiceRow]) -> dict[int, dict[str, tuple[float, float]]]:
    """``{n: {label: (mean, std)}}`` across folds."""
    out: dict[int, dict[str, tuple[float, float]]] = {}
    for n in sorted({r.n for r in rows}):
        out[n] = {}
        for label in LABELS:
            vals = [r.dice for r in rows if r.n == n and r.label == label]
            if vals:
                s = mean_std(vals)
                out[n][label] = (s.mean, s.std)
    return out


def format_dice_table(rows: Sequence[DiceRow]) -> str:
    table = dice_table(rows)
    lines = ["n\t" + "\t".join(LABELS)]
    for n, cells in table.items():
        lines.append(f"{n}\t" + "\t".join(f"{100 * m:.0f}±{100 * s:.0f}%" for m, s in (cells[l] for l in LABELS)))
    return "\n".join(lines)


def write_dice_csv(path, rows: Sequence[DiceRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["fold", "n", "label", "dice"])
        for r in rows:
            w.writerow([r.fold, r.n, r.label, repr(r.dice)])


def read_dice_csv(path) -> list[DiceRow]:
    with open(path, newline="") as f:
        return [DiceRow(int(r["fold"]), int(r["n"]), r["label"], float(r["dice"])) for r in csv.DictReader(f)]


# --------------------------------------------------------------------------
# Split plans
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    disease: str
    repetition: int
    seg_train_patients: tuple[str, ...]
    cls_patients: tuple[str, ...]
    neg_train: tuple[int, ...]  # indices into corpus.normals
    neg_test: tuple[int, ...]
    pos_pool: tuple[int, ...]  # indices into corpus.positives[disease], nested order
    pos_test: tuple[int, ...]

    def positives_for(self, k: int) -> tuple[int, ...]:
        if not 1 <= k <= len(self.pos_pool):
            raise ValueError(f"n_pos={k} outside 1..{len(self.pos_pool)}")
        return self.pos_pool[:k]


def make_split_plan(config: ExperimentConfig, corpus: Corpus, disease: str, repetition: int) -> SplitPlan:
    """Patient-grouped negative halves and nested positive subsets for one repetition."""
    groups = fold_partition(corpus.patients, config.folds, config.seed)
    cls_patients = groups[config.seg_fold]
    seg_train = [p for p in corpus.patients if p not in set(cls_patients)]
    rng = _rng(config.seed, 0x5B1, _disease_index(disease), repetition)

    by_patient: dict[str, list[int]] = {p: [] for p in cls_patients}
    for i, s in enumerate(corpus.normals):
        if s.patient_id in by_patient:
            by_patient[s.patient_id].append(i)
    total = sum(len(v) for v in by_patient.values())
    if len(cls_patients) < 2 or total < 2:
        raise ValueError("need at least two classification patients with slices")
    neg_train, neg_test = [], []
    # a patient joins the training half while its midpoint stays within the
    # first half; the first patient always does and the second never can
    for p in rng.permutation(sorted(cls_patients)):
        fits = len(neg_train) + len(by_patient[p]) / 2 <= total / 2
        (neg_train if fits else neg_test).extend(by_patient[p])
    if not neg_test:
        raise ValueError("classification patients do not split into two halves")

    positives = corpus.positives.get(disease, [])
    need = config.pos_pool + config.pos_test
    if len(positives) < need:
        raise ValueError(f"need {need} {disease} positives, corpus has {len(positives)}")
    perm = rng.permutation(len(positives))
    return SplitPlan(
        disease=disease,
        repetition=repetition,
        seg_train_patients=tuple(seg_train),
        cls_patients=tuple(cls_patients),
        neg_train=tuple(sorted(neg_train)),
        neg_test=tuple(sorted(neg_test)),
        pos_pool=tuple(int(i) for i in perm[: config.pos_pool]),
        pos_test=tuple(sorted(int(i) for i in perm[config.pos_pool : need])),
    )


# --------------------------------------------------------------------------
# Sweeps
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    sample_id: str
    truth: int
    predicted: int
    prob: float


@dataclass
class FeatureBank:
    """Frozen-segnet features per mode for classifier negatives and positives."""

    negatives: dict[str, np.ndarray]
    positives: dict[str, dict[str, np.ndarray]]
    neg_ids: list[str]
    pos_ids: dict[str, list[str]]
    neg_index: dict[int, int]


def build_feature_bank(config: ExperimentConfig, corpus: Corpus, seg_ckpt: Checkpoint | None, modes: Sequence[str], diseases: Sequence[str]) -> FeatureBank:
    groups = fold_partition(corpus.patients, config.folds, config.seed)
    cls_set = set(groups[config.seg_fold])
    idx = [i for i, s in enumerate(corpus.normals) if s.patient_id in cls_set]
    Xn, _ = Corpus.stack([corpus.normals[i] for i in idx])
    negatives, positives = {}, {d: {} for d in diseases}
    for m in modes:
        mode = FeatureMode.parse(m)
        if mode.uses_seg and seg_ckpt is None:
            raise ValueError(f"mode {mode.value} needs a segmentation checkpoint")
        negatives[mode.value] = extract_features(mode, Xn, seg_ckpt)
        for d in diseases:
            Xp, _ = Corpus.stack(corpus.positives[d])
            positives[d][mode.value] = extract_features(mode, Xp, seg_ckpt)
    return FeatureBank(
        negatives=negatives,
        positives=positives,
        neg_ids=[corpus.normals[i].sample_id for i in idx],
        pos_ids={d: [s.sample_id for s in corpus.positives[d]] for d in diseases},
        neg_index={i: j for j, i in enumerate(idx)},
    )


def cls_seed(master: int, disease: str, n_pos: int, repetition: int) -> int:
    # shared across modes so the modes differ only in their inputs
    return int(_rng(master, 0xC15, _disease_index(disease), n_pos, repetition).integers(0, 2**31))


def run_job(config: ExperimentConfig, bank: FeatureBank, plan: SplitPlan, mode: str, n_pos: int) -> tuple[MetricsRecord, list[Prediction]]:
    """Train one classifier and score it on the plan's held-out samples."""
    mode = FeatureMode.parse(mode).value
    neg = bank.negatives[mode]
    pos = bank.positives[plan.disease][mode]
    tr_neg = [bank.neg_index[i] for i in plan.neg_train]
    te_neg = [bank.neg_index[i] for i in plan.neg_test]
    tr_pos = list(plan.positives_for(n_pos))
    te_pos = list(plan.pos_test)
    X = np.concatenate([neg[tr_neg], pos[tr_pos]])
    y = np.concatenate([np.zeros(len(tr_neg), np.int64), np.ones(len(tr_pos), np.int64)])
    tc = replace(config.cls_train, seed=cls_seed(config.seed, plan.disease, n_pos, plan.repetition))
    widths, dense_sizes = config.cls_widths
    ckpt, _, _ = fit_clsnet(tc, X, y, widths=widths, dense_sizes=dense_sizes)
    probs = np.concatenate([predict_proba(ckpt, neg[te_neg]), predict_proba(ckpt, pos[te_pos])])
    truths = np.concatenate([np.zeros(len(te_neg), np.int64), np.ones(len(te_pos), np.int64)])
    preds = (probs > 0.5).astype(np.int64)
    ids = [bank.neg_ids[j] for j in te_neg] + [bank.pos_ids[plan.disease][j] for j in te_pos]
    record = MetricsRecord.from_predictions(plan.disease, mode, n_pos, plan.repetition, preds, truths)
    return record, [Prediction(i, int(t), int(p), float(q)) for i, t, p, q in zip(ids, truths, preds, probs)]


def job_keys(config: ExperimentConfig) -> list[tuple[str, str, int, int]]:
    """Canonical (disease, mode, n_pos, repetition) order used for outputs."""
    return [
        (d, FeatureMode.parse(m).value, k, r)
        for d in config.diseases
        for m in config.modes
        for k in config.n_pos
        for r in range(config.repetitions)
    ]


def prediction_filename(key: tuple[str, str, int, int]) -> str:
    d, m, k, r = key
    return f"{d}_{m.replace('+', '-')}_npos{k:02d}_rep{r:02d}.tsv"


def write_predictions(path, predictions: Sequence[Prediction]) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["sample_id", "truth", "predicted", "prob_positive"])
        for p in predictions:
            w.writerow([p.sample_id, p.truth, p.predicted, repr(p.prob)])
    os.replace(tmp, path)


def read_predictions(path) -> list[Prediction]:
    with open(path, newline="") as f:
        return [
            Prediction(r["sample_id"], int(r["truth"]), int(r["predicted"]), float(r["prob_positive"]))
            for r in csv.DictReader(f, delimiter="\t")
        ]


def write_sweep_csv(path, records: Sequence[MetricsRecord], order: Sequence[tuple]) -> None:
    """Atomically write records in canonical key order."""
    rank = {k: i for i, k in enumerate(order)}
    rows = sorted(records, key=lambda r: rank.get(r.key, len(rank)))
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow(format_record(r))
    os.replace(tmp, path)


_WORKER_STATE: dict = {}


def _init_worker(config, bank, plans):
    _WORKER_STATE.update(config=config, bank=bank, plans=plans)


def _worker(key):
    d, m, k, r = key
    s = _WORKER_STATE
    return key, run_job(s["config"], s["bank"], s["plans"][(d, r)], m, k)


def run_sweep(
    config: ExperimentConfig,
    seg_ckpt: Checkpoint | None,
    corpus: Corpus,
    out_dir=None,
    jobs: int = 1,
    resume: bool = True,
    bank: FeatureBank | None = None,
) -> list[MetricsRecord]:
    """Train and evaluate one classifier per (disease, mode, n_pos, repetition).

    With ``out_dir`` the records go to ``sweep.csv`` (rewritten after every
    finished job so an interrupted run resumes by key) and per-sample
    predictions to ``predictions/``.
    """
    keys = job_keys(config)
    modes = sorted({k[1] for k in keys}, key=_mode_index)
    if any(FeatureMode.parse(m).uses_seg for m in modes) and seg_ckpt is None:
        raise ValueError("a segmentation checkpoint is required for non-IMG modes")
    done: dict[tuple, MetricsRecord] = {}
    sweep_path = pred_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        pred_dir = out_dir / "predictions"
        pred_dir.mkdir(parents=True, exist_ok=True)
        sweep_path = out_dir / "sweep.csv"
        if resume and sweep_path.exists():
            for r in read_records_csv(sweep_path):
                if r.key in set(keys):
                    done[r.key] = r
    todo = [k for k in keys if k not in done]
    if todo:
        if bank is None:
            bank = build_feature_bank(config, corpus, seg_ckpt, modes, config.diseases)
        plans = {(d, r): make_split_plan(config, corpus, d, r) for d in config.diseases for r in range(config.repetitions)}

        def finish(key, result):
            record, preds = result
            done[key] = record
            if out_dir is not None:
                write_predictions(pred_dir / prediction_filename(key), preds)
                write_sweep_csv(sweep_path, list(done.values()), keys)
            log.info("%s tpr=%.2f tnr=%.2f kappa=%.2f", key, record.tpr, record.tnr, record.kappa)

        if jobs > 1:
            with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(config, bank, plans)) as ex:
                for key, result in ex.map(_worker, todo):
                    finish(key, result)
        else:
            for key in todo:
                d, m, k, r = key
                finish(key, run_job(config, bank, plans[(d, r)], m, k))
    if sweep_path is not None:
        write_sweep_csv(sweep_path, list(done.values()), keys)
    return [done[k] for k in keys]


# --------------------------------------------------------------------------
# Mode comparison
# --------------------------------------------------------------------------


@dataclass
class ModeComparison:
    disease: str
    n_pos: int
    kappa: dict[str, float]
    tpr: dict[str, float]
    tnr: dict[str, float]
    ranking: list[str]
    concat_seg_img: bool | None


def compare_modes(records: Sequence[MetricsRecord], mode_order: Sequence[str] | None = None) -> list[ModeComparison]:
    """Rank modes by mean kappa per (disease, n_pos).

    Ties go to the mode listed first in ``mode_order`` (default: canonical
    mode order). ``concat_seg_img`` flags CONCAT >= SEG >= IMG in mean kappa
    when all three are present.
    """
    agg = aggregate(records)
    order = [FeatureMode.parse(m).value for m in (mode_order or [m.value for m in ALL_MODES])]
    present = {m for (_, m, _) in agg}
    order = [m for m in order if m in present] + sorted(present - set(order))
    out = []
    for d, k in sorted({(d, k) for (d, _, k) in agg}):
        cells = {m: agg[(d, m, k)] for m in order if (d, m, k) in agg}
        kappa = {m: s["kappa"].mean for m, s in cells.items()}
        ranking = sorted(kappa, key=lambda m: (-kappa[m], order.index(m)))
        flag = None
        if {"CONCAT", "SEG", "IMG"} <= kappa.keys():
            flag = kappa["CONCAT"] >= kappa["SEG"] >= kappa["IMG"]
        out.append(
            ModeComparison(
                d,
                k,
                kappa,
                {m: s["tpr"].mean for m, s in cells.items()},
                {m: s["tnr"].mean for m, s in cells.items()},
                ranking,
                flag,
            )
        )
    return out


def format_comparison(rows: Sequence[ModeComparison]) -> str:
    lines = []
    for row in rows:
        parts = ", ".join(f"{m} κ={row.kappa[m]:.3f} TPR={row.tpr[m]:.3f} TNR={row.tnr[m]:.3f}" for m in row.ranking)
        flag = "" if row.concat_seg_img is None else f"  CONCAT>=SEG>=IMG: {'yes' if row.concat_seg_img else 'no'}"
        lines.append(f"{row.disease} n_pos={row.n_pos}: {' > '.join(row.ranking)}{flag}\n    {parts}")
    return "\n".join(lines)
