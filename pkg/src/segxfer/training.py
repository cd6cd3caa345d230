"""Weighted cross-entropy losses, Adam, and the two training loops."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from .nets import (
    DESK_CLS_DENSE,
    DESK_CLS_WIDTHS,
    INPUT_SCALE,
    INPUT_SHIFT,
    Checkpoint,
    FeatureMode,
    SegnetOutputs,
    assemble_features,
    build_clsnet,
    build_segnet,
    clsnet_forward,
    segnet_forward,
)
from .tensor import ShapeError, Tape, Tensor, no_tape, softmax_channels, softmax_weighted_nll, weighted_nll

log = logging.getLogger(__name__)

SEG_EXPONENT = 1.0
CLS_EXPONENT = 0.25


# --------------------------------------------------------------------------
# Class weights
# --------------------------------------------------------------------------


def label_frequencies(labels: Iterable, num_labels: int, kind: str = "pixels") -> np.ndarray:
    """Total count of each label over a training set.

    ``kind="pixels"`` takes an iterable of label maps; ``kind="samples"`` an
    iterable of integer sample labels.
    """
    if kind not in ("pixels", "samples"):
        raise ValueError(f"kind must be 'pixels' or 'samples', got {kind!r}")
    f = np.zeros(num_labels, dtype=np.int64)
    seen = False
    if kind == "samples":
        arr = np.asarray(list(labels), dtype=np.int64)
        seen = arr.size > 0
        if seen:
            f += np.bincount(arr, minlength=num_labels)[:num_labels]
    else:
        for m in labels:
            seen = True
            f += np.bincount(np.asarray(m, dtype=np.int64).ravel(), minlength=num_labels)[:num_labels]
    if not seen:
        raise ValueError("cannot compute label frequencies of an empty dataset")
    return f


def class_weights(f: Sequence[float], exponent: float) -> np.ndarray:
    """``w_l = 1 - (f_l / sum_k f_k) ** exponent``."""
    f = np.asarray(f, dtype=np.float64)
    total = f.sum()
    if not total > 0:
        raise ValueError("label frequencies sum to zero")
    return 1.0 - (f / total) ** exponent


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def weighted_cross_entropy_seg(prob_map: Tensor, labels: np.ndarray, w: Sequence[float]) -> Tensor:
    """Pixel-summed weighted cross entropy.

    For ``[N,H,W]`` probabilities the loss is ``-sum_x w[l(x)] log p_l(x)``.
    For a batch ``[B,N,H,W]`` it is the mean over the batch of those sums.
    """
    labels = np.asarray(labels)
    nd = prob_map.data.ndim
    if nd not in (3, 4) or labels.shape != prob_map.shape[:-3] + prob_map.shape[-2:]:
        raise ShapeError(f"labels {labels.shape} do not match probabilities {prob_map.shape}")
    N = prob_map.shape[-3]
    if labels.size and (labels.min() < 0 or labels.max() >= N):
        raise ValueError(f"label values must lie in [0, {N})")
    return weighted_nll(prob_map, labels, np.asarray(w), axis=nd - 3, batched=nd == 4)


def seg_loss_from_logits(logits: Tensor, labels: np.ndarray, w: Sequence[float]) -> Tensor:
    """Same value as ``weighted_cross_entropy_seg(softmax(logits), ...)``, fused for training."""
    labels = np.asarray(labels)
    nd = logits.data.ndim
    if nd not in (3, 4) or labels.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    return softmax_weighted_nll(logits, labels, np.asarray(w), axis=nd - 3, batched=nd == 4)


def weighted_cross_entropy_cls(prob: Tensor, label, w: Sequence[float]) -> Tensor:
    """``-w[l] log p_l`` for a length-2 vector, batch-averaged for ``[B,2]``."""
    label = np.asarray(label)
    nd = prob.data.ndim
    if nd not in (1, 2) or prob.shape[-1] != 2 or label.shape != prob.shape[:-1]:
        raise ShapeError(f"label {label.shape} does not match probabilities {prob.shape}")
    if label.size and not np.isin(label, (0, 1)).all():
        raise ValueError("classification labels must be 0 or 1")
    return weighted_nll(prob, label, np.asarray(w), axis=nd - 1, batched=nd == 2)


def cls_loss_from_logits(logits: Tensor, label, w: Sequence[float]) -> Tensor:
    """Fused counterpart of ``weighted_cross_entropy_cls(softmax(logits), ...)``."""
    label = np.asarray(label)
    nd = logits.data.ndim
    if nd not in (1, 2) or logits.shape[-1] != 2 or label.shape != logits.shape[:-1]:
        raise ShapeError(f"label {label.shape} does not match logits {logits.shape}")
    return softmax_weighted_nll(logits, label, np.asarray(w), axis=nd - 1, batched=nd == 2)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict | None = None
    v: dict | None = None


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One Adam update, applied in place to the entries of ``params`` named in ``grads``."""
    if state.m is None:
        state.m = {k: np.zeros_like(params[k]) for k in grads}
        state.v = {k: np.zeros_like(params[k]) for k in grads}
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {k} {p.shape}")
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


# --------------------------------------------------------------------------
# Training configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    batches_per_epoch: int = 100
    epochs: int = 20
    seed: int = 0
    profile: str = "desk"
    lr: float = 1e-3

    @property
    def steps(self) -> int:
        return self.batches_per_epoch * self.epochs

    @classmethod
    def for_segnet(cls, profile: str = "desk", seed: int = 0, **kw) -> "TrainConfig":
        base = dict(batch_size=10, batches_per_epoch=100, epochs=20)
        return cls(seed=seed, profile=profile, **{**base, **kw})

    @classmethod
    def for_clsnet(cls, profile: str = "desk", seed: int = 0, **kw) -> "TrainConfig":
        base = dict(batch_size=10, batches_per_epoch=10, epochs=20)
        return cls(seed=seed, profile=profile, **{**base, **kw})

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        updates = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ValueError(f"unknown training option {key!r}")
            caster = {"int": int, "float": float, "str": str}[str(types[key])]
            updates[key] = caster(value)
        return replace(base or cls(), **updates)


def write_history_csv(path, history: Sequence[float]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "mean_batch_loss"])
        for i, loss in enumerate(history):
            w.writerow([i + 1, repr(float(loss))])


def _batch_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C]))


def batch_indices(seed: int, n: int, batch_size: int) -> Iterator[np.ndarray]:
    """Endless mini-batches from successive shuffled passes over ``n`` samples.

    Batches run across pass boundaries, so every sample is seen once per pass
    whatever the batch size.
    """
    rng = _batch_rng(seed)
    queue = np.empty(0, dtype=np.int64)
    while True:
        while len(queue) < batch_size:
            queue = np.concatenate([queue, rng.permutation(n)])
        yield queue[:batch_size]
        queue = queue[batch_size:]


# --------------------------------------------------------------------------
# Segmentation training
# --------------------------------------------------------------------------


class DivergenceGuard:
    """Undo a training collapse.

    An epoch whose mean loss is not finite or ends above the first epoch's
    counts as a collapse: the weights and optimiser moments of the best epoch
    come back and training continues on fresh batches. The bad epoch stays in
    the loss history.
    """

    def __init__(self):
        self.first: float | None = None
        self.best_loss = math.inf
        self.best: tuple[dict[str, np.ndarray], AdamState] | None = None
        self.restores = 0

    def after_epoch(self, params: dict[str, np.ndarray], state: AdamState, loss: float) -> AdamState:
        """Return the optimiser state to continue with (a restored copy after a collapse)."""
        if self.first is None and math.isfinite(loss):
            self.first = loss
        if math.isfinite(loss) and loss < self.best_loss:
            self.best_loss = loss
            self.best = ({k: v.copy() for k, v in params.items()}, copy.deepcopy(state))
            return state
        collapsed = not math.isfinite(loss) or (self.first is not None and loss > self.first)
        if not collapsed or self.best is None:
            return state
        saved_params, saved_state = self.best
        for k, v in saved_params.items():
            params[k] = v.copy()
        self.restores += 1
        return copy.deepcopy(saved_state)


def _run_epochs(config: TrainConfig, ckpt: Checkpoint, n_samples: int, loss_fn, what: str, on_epoch=None) -> list[float]:
    """Shared Adam loop over shuffled mini-batches; ``loss_fn(idx, leaves)`` builds the loss."""
    batches = batch_indices(config.seed, n_samples, config.batch_size)
    state = AdamState(lr=config.lr)
    guard = DivergenceGuard()
    history = []
    for epoch in range(config.epochs):
        losses = []
        for _ in range(config.batches_per_epoch):
            leaves = ckpt.tensors(requires_grad=True)
            with Tape() as tape:
                loss = loss_fn(next(batches), leaves)
            trained = {k: t for k, t in leaves.items() if t.requires_grad}
            grads = tape.backward(loss, wrt=trained.values())
            adam_step(ckpt.params, {k: grads[t] for k, t in trained.items()}, state)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
        log.debug("%s epoch %d loss %.4f", what, epoch + 1, history[-1])
        restores = guard.restores
        state = guard.after_epoch(ckpt.params, state, history[-1])
        if guard.restores > restores:
            log.warning("%s epoch %d loss %.4g diverged; restored the best epoch", what, epoch + 1, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return history


def train_segnet(
    config: TrainConfig,
    images: np.ndarray,
    label_maps: np.ndarray,
    n: int = 16,
    N: int = 6,
    levels: int = 4,
    init: Checkpoint | None = None,
    on_epoch=None,
) -> tuple[Checkpoint, list[float]]:
    """Train a segmentation network on normal slices.

    Batches come from shuffled passes over the slices; an epoch is a fixed
    number of batches. Class weights use pixel frequencies of the whole training
    set. A collapsed epoch rolls back to the best weights (see
    ``DivergenceGuard``). Returns the final checkpoint and the per-epoch mean
    batch loss.
    """
    images = np.asarray(images, dtype=np.float32)
    label_maps = np.asarray(label_maps)
    if images.ndim != 4 or len(images) == 0:
        raise ShapeError(f"images must be a non-empty [S,1,H,W] array, got {images.shape}")
    if label_maps.shape != (images.shape[0],) + images.shape[2:]:
        raise ShapeError(f"label maps {label_maps.shape} do not match images {images.shape}")
    size = images.shape[-1]
    ckpt = init.copy() if init is not None else build_segnet(n=n, N=N, levels=levels, size=size, seed=config.seed)
    N = ckpt.spec.N
    w = class_weights(label_frequencies(label_maps, N, "pixels"), SEG_EXPONENT)

    def loss_fn(idx, leaves):
        out = segnet_forward(ckpt, Tensor(images[idx]), params=leaves)
        return seg_loss_from_logits(out.logits, label_maps[idx], w)

    history = _run_epochs(config, ckpt, len(images), loss_fn, "segnet", on_epoch)
    return ckpt, history


# --------------------------------------------------------------------------
# Classification training
# --------------------------------------------------------------------------


def segment_batch(seg_ckpt: Checkpoint, images: np.ndarray, batch: int = 16) -> list[SegnetOutputs]:
    outs = []
    with no_tape():
        for s in range(0, len(images), batch):
            outs.append(segnet_forward(seg_ckpt, Tensor(np.asarray(images[s : s + batch], dtype=np.float32))))
    return outs


def extract_features(mode: FeatureMode | str, images: np.ndarray, seg_ckpt: Checkpoint | None = None, batch: int = 16) -> np.ndarray:
    """Assemble classifier inputs ``[S,C_mode,H,W]`` with the frozen segnet."""
    mode = FeatureMode.parse(mode) if isinstance(mode, str) else mode
    images = np.asarray(images, dtype=np.float32)
    if mode is FeatureMode.IMG:
        return images.copy()
    if seg_ckpt is None:
        raise ValueError(f"feature mode {mode.value} needs a segmentation checkpoint")
    parts = []
    for s, out in zip(range(0, len(images), batch), segment_batch(seg_ckpt, images, batch)):
        parts.append(assemble_features(mode, images[s : s + batch], out).data)
    return np.concatenate(parts).astype(np.float32)


def input_standardisation(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and inverse std of ``[S,C,H,W]`` training features.

    Constant channels keep scale 1 so they stay finite on unseen data.
    """
    f = np.asarray(features, dtype=np.float64)
    mean = f.mean(axis=(0, 2, 3))
    std = f.std(axis=(0, 2, 3))
    scale = np.where(std > 1e-6, 1.0 / np.maximum(std, 1e-6), 1.0)
    return mean.astype(np.float32), scale.astype(np.float32)


def fit_clsnet(
    config: TrainConfig,
    features: np.ndarray,
    labels: np.ndarray,
    widths: tuple[int, ...] = DESK_CLS_WIDTHS,
    dense_sizes: tuple[int, ...] = DESK_CLS_DENSE,
) -> tuple[Checkpoint, list[float], np.ndarray]:
    """Train the classifier on pre-assembled features.

    The inputs are standardised per channel with statistics of ``features``;
    those live in the checkpoint and are not trained. Returns the checkpoint,
    per-epoch loss history, and the class weights used (computed from the
    sample counts with exponent 1/4).
    """
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 4 or len(features) != len(labels):
        raise ShapeError(f"features {features.shape} and labels {labels.shape} disagree")
    if not (labels == 1).any() or not (labels == 0).any():
        raise ValueError("classifier training needs both positive and negative samples")
    w = class_weights(label_frequencies(labels, 2, "samples"), CLS_EXPONENT)
    ckpt = build_clsnet(features.shape[1], widths, dense_sizes, size=features.shape[-1], seed=config.seed)
    ckpt.params[INPUT_SHIFT], ckpt.params[INPUT_SCALE] = input_standardisation(features)

    def loss_fn(idx, leaves):
        logits = clsnet_forward(ckpt, Tensor(features[idx]), params=leaves)
        return cls_loss_from_logits(logits, labels[idx], w)

    history = _run_epochs(config, ckpt, len(features), loss_fn, "clsnet")
    return ckpt, history, w


def train_clsnet(
    config: TrainConfig,
    mode: FeatureMode | str,
    seg_ckpt: Checkpoint | None,
    images: np.ndarray,
    labels: np.ndarray,
    **kw,
) -> tuple[Checkpoint, list[float], np.ndarray]:
    """Train a classifier on one feature combination with the segnet frozen."""
    feats = extract_features(mode, images, seg_ckpt)
    return fit_clsnet(config, feats, labels, **kw)


def predict_proba(ckpt: Checkpoint, features: np.ndarray, batch: int = 32) -> np.ndarray:
    """Positive-class probability per sample."""
    out = []
    with no_tape():
        for s in range(0, len(features), batch):
            logits = clsnet_forward(ckpt, Tensor(np.asarray(features[s : s + batch], dtype=np.float32)))
            out.append(softmax_channels(logits).data[:, 1])
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)
