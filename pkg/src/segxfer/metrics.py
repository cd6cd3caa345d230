"""Dice, confusion counts, TPR/TNR, Cohen's kappa and mean±std aggregation."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np


def dice(pred: np.ndarray, truth: np.ndarray, label: int) -> float:
    """Dice overlap of one label; two empty masks count as perfect agreement."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    a = pred == label
    b = truth == label
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def dice_per_label(pred: np.ndarray, truth: np.ndarray, num_labels: int) -> np.ndarray:
    return np.array([dice(pred, truth, k) for k in range(num_labels)])


@dataclass(frozen=True)
class ConfusionMatrix2:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def tpr(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")

    @property
    def tnr(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else float("nan")


def confusion(predictions: Sequence[int], truths: Sequence[int]) -> ConfusionMatrix2:
    p = np.asarray(predictions).astype(bool)
    t = np.asarray(truths).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("confusion needs at least one prediction")
    return ConfusionMatrix2(
        tp=int(np.sum(p & t)),
        fp=int(np.sum(p & ~t)),
        tn=int(np.sum(~p & ~t)),
        fn=int(np.sum(~p & t)),
    )


def cohens_kappa(cm: ConfusionMatrix2) -> float:
    n = cm.total
    if n == 0:
        raise ValueError("kappa of an empty confusion matrix")
    p_o = (cm.tp + cm.tn) / n
    p_e = ((cm.tp + cm.fp) * (cm.tp + cm.fn) + (cm.fn + cm.tn) * (cm.fp + cm.tn)) / n**2
    if p_e == 1:
        return 1.0 if p_o == 1 else 0.0
    return (p_o - p_e) / (1 - p_e)


@dataclass
class MetricsRecord:
    disease: str
    mode: str
    n_pos_train: int
    repetition: int
    tpr: float
    tnr: float
    kappa: float
    dice: tuple[float, ...] | None = field(default=None)

    @classmethod
    def from_predictions(cls, disease, mode, n_pos_train, repetition, predictions, truths) -> "MetricsRecord":
        cm = confusion(predictions, truths)
        return cls(disease, mode, int(n_pos_train), int(repetition), cm.tpr, cm.tnr, cohens_kappa(cm))

    @property
    def key(self) -> tuple[str, str, int, int]:
        return (self.disease, self.mode, self.n_pos_train, self.repetition)


SWEEP_COLUMNS = ("disease", "mode", "n_pos_train", "repetition", "tpr", "tnr", "kappa")


def write_records_csv(path, records: Iterable[MetricsRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in records:
            w.writerow(format_record(r))


def format_record(r: MetricsRecord) -> list[str]:
    return [r.disease, r.mode, str(r.n_pos_train), str(r.repetition), repr(float(r.tpr)), repr(float(r.tnr)), repr(float(r.kappa))]


def read_records_csv(path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(SWEEP_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"sweep CSV lacks columns {sorted(missing)}")
        for row in reader:
            out.append(
                MetricsRecord(
                    row["disease"],
                    row["mode"],
                    int(row["n_pos_train"]),
                    int(row["repetition"]),
                    float(row["tpr"]),
                    float(row["tnr"]),
                    float(row["kappa"]),
                )
            )
    return out


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    count: int


def mean_std(values: Sequence[float]) -> Summary:
    """Mean and sample (n-1) standard deviation; std is 0 for one value."""
    # sorting makes the floating-point result independent of input order
    arr = np.sort(np.asarray(values, dtype=np.float64))
    if arr.size == 0:
        raise ValueError("cannot summarise an empty group")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return Summary(float(arr.mean()), std, int(arr.size))


def aggregate(records: Sequence[MetricsRecord], metrics=("tpr", "tnr", "kappa")) -> dict[tuple[str, str, int], dict[str, Summary]]:
    """Group by (disease, mode, n_pos_train) and summarise each metric."""
    if not records:
        raise ValueError("nothing to aggregate")
    groups: dict[tuple[str, str, int], list[MetricsRecord]] = defaultdict(list)
    for r in records:
        groups[(r.disease, r.mode, r.n_pos_train)].append(r)
    out = {}
    for key in sorted(groups):
        rows = groups[key]
        out[key] = {m: mean_std([getattr(r, m) for r in rows]) for m in metrics}
    return out
