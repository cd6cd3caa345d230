"""Dense tensors with reverse-mode differentiation over a recorded tape.

Only the operations the segmentation and classification networks need are
provided. Image operations work on ``[C, H, W]`` arrays and also accept a
leading batch axis ``[B, C, H, W]``; the batch axis is never broadcast.

Typical use::

    with Tape() as tape:
        y = elu(conv2d_same(x, k, b))
        loss = tsum(y)
    grads = tape.backward(loss)
    grads[k]  # ndarray shaped like k
"""

from __future__ import annotations

import io
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class UsageError(RuntimeError):
    """Raised on misuse of the tape (e.g. differentiating a foreign tensor)."""


class Tensor:
    """Immutable dense array node.

    The wrapped array is exposed through a read-only view, so the caller's
    buffer (e.g. a parameter updated in place by an optimizer) stays writable
    while the tensor itself cannot be mutated.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        view = arr.view()
        view.flags.writeable = False
        self.data = view
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def _raise_item(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Tape (computation record)
# --------------------------------------------------------------------------


@dataclass
class Entry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: Any
    attrs: dict = field(default_factory=dict)


_OPS: dict[str, tuple[Callable, Callable]] = {}
_active: list["Tape"] = []


# ops whose backward accepts ``needs`` and skips gradients nobody reads
_SKIPS_INPUTS = {"conv2d_same"}


def _register(name: str):
    def deco(cls):
        _OPS[name] = (cls.forward, cls.backward)
        return cls

    return deco


class Tape:
    """Ordered record of applied operations.

    Entries hold references to their inputs, output and saved auxiliaries
    (e.g. max-pool winner indices). Leaves are tensors created with
    ``requires_grad=True``.
    """

    def __init__(self) -> None:
        self.entries: list[Entry] = []
        self._produced: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def record(self, entry: Entry) -> None:
        self._produced[id(entry.output)] = len(self.entries)
        self.entries.append(entry)

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for e in self.entries:
            for t in e.inputs:
                if t.requires_grad and id(t) not in self._produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to leaves.

        Returns a mapping from leaf tensor to gradient array. Every tensor in
        ``wrt`` gets an entry, zero if the loss does not depend on it. Without
        ``wrt`` all ``requires_grad`` leaves seen on the tape are returned.
        """
        if id(loss) not in self._produced:
            raise UsageError("loss tensor was not produced on this tape")
        if loss.data.size != 1:
            raise UsageError(f"loss must be a scalar, got shape {loss.shape}")
        targets = list(wrt) if wrt is not None else self.leaves()
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        stop = self._produced[id(loss)]
        for entry in reversed(self.entries[: stop + 1]):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            _, bwd = _OPS[entry.op]
            arrays = tuple(t.data for t in entry.inputs)
            if entry.op in _SKIPS_INPUTS:
                needs = tuple(t.requires_grad or id(t) in self._produced for t in entry.inputs)
                in_grads = bwd(g, entry.saved, *arrays, needs=needs, **entry.attrs)
            else:
                in_grads = bwd(g, entry.saved, *arrays, **entry.attrs)
            for t, gi in zip(entry.inputs, in_grads):
                if gi is None:
                    continue
                if not t.requires_grad and id(t) not in self._produced:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out: dict[Tensor, np.ndarray] = {}
        for t in targets:
            g = grads.get(id(t))
            out[t] = np.zeros_like(t.data) if g is None else g.astype(t.dtype, copy=False)
        return out

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward from the recorded inputs."""
        outs = []
        for e in self.entries:
            fwd, _ = _OPS[e.op]
            out, _ = fwd(*(t.data for t in e.inputs), **e.attrs)
            outs.append(out)
        return outs


@contextmanager
def no_tape():
    """Temporarily suspend recording (used for frozen feature extraction)."""
    saved = list(_active)
    _active.clear()
    try:
        yield
    finally:
        _active.extend(saved)


def _apply(op: str, *inputs: Tensor, **attrs) -> Tensor:
    fwd, _ = _OPS[op]
    out_arr, saved = fwd(*(t.data for t in inputs), **attrs)
    out = Tensor(out_arr)
    if _active:
        _active[-1].record(Entry(op, inputs, out, saved, attrs))
    return out


# --------------------------------------------------------------------------
# Shape helpers
# --------------------------------------------------------------------------


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [C,H,W] or [B,C,H,W], got shape {x.shape}")


def _unbatch(x: np.ndarray, squeeze: bool) -> np.ndarray:
    return x[0] if squeeze else x


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def _flat_padded(x: np.ndarray, ph: int, pw: int, extra_row: bool) -> np.ndarray:
    """Zero-pad ``[B,C,H,W]`` and lay it out channels-last as ``[B, rows*cols, C]``.

    In this layout the window of kernel offset (i, j) for every output pixel is
    one contiguous slice starting at ``i*cols + j`` (two garbage columns per
    row ride along and are cropped afterwards). ``extra_row`` keeps the last
    slice in bounds.
    """
    B, C, H, W = x.shape
    rows = H + 2 * ph + (1 if extra_row else 0)
    cols = W + 2 * pw
    xf = np.zeros((B, rows, cols, C), dtype=x.dtype)
    xf[:, ph : ph + H, pw : pw + W, :] = x.transpose(0, 2, 3, 1)
    return xf.reshape(B, rows * cols, C)


def _correlate_same(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-padded stride-1 cross-correlation of x [B,C,H,W] with w [O,C,kh,kw].

    Returns the uncropped channels-last result [B,H,W+kw-1,O] and the flat
    padded input for reuse in the backward pass.
    """
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    cols = W + kw - 1
    xf = _flat_padded(x, kh // 2, kw // 2, kw > 1)
    taps = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    span = H * cols
    if C == 1:
        # one GEMM over gathered windows beats kh*kw rank-1 updates
        windows = np.empty((B, span, kh * kw), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                s = i * cols + j
                windows[:, :, i * kw + j] = xf[:, s : s + span, 0]
        out = windows @ taps.reshape(kh * kw, O)
        return out.reshape(B, H, cols, O), xf
    out = np.zeros((B, span, O), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            s = i * cols + j
            out += xf[:, s : s + span] @ taps[i, j]
    return out.reshape(B, H, cols, O), xf


@_register("conv2d_same")
class _Conv2dSame:
    @staticmethod
    def forward(x, w, b):
        xb, squeeze = _as_batch(x)
        if w.ndim != 4 or w.shape[1] != xb.shape[1]:
            raise ShapeError(f"kernel {w.shape} does not match input channels {xb.shape[1]}")
        if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
            raise ShapeError(f"kernel spatial size must be odd, got {w.shape[2:]}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias {b.shape} does not match {w.shape[0]} output channels")
        W = xb.shape[3]
        out, xf = _correlate_same(xb, w)
        out = out[:, :, :W, :] + b
        return _unbatch(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), squeeze), xf

    @staticmethod
    def backward(g, xf, x, w, b, needs=(True, True, True)):
        # exact adjoint of the forward slicing; garbage columns carry zero gradient
        gb, squeeze = _as_batch(g)
        B, O, H, W = gb.shape
        _, C, kh, kw = w.shape
        ph, pw = kh // 2, kw // 2
        cols = W + 2 * pw
        span = H * cols
        ge = np.zeros((B, H, cols, O), dtype=gb.dtype)
        ge[:, :, :W, :] = gb.transpose(0, 2, 3, 1)
        ge = ge.reshape(B, span, O)
        taps_t = w.transpose(2, 3, 0, 1)
        gw = np.zeros((kh, kw, C, O), dtype=w.dtype)
        gxf = np.zeros_like(xf) if needs[0] else None
        for i in range(kh):
            for j in range(kw):
                s = i * cols + j
                if needs[1]:
                    for n in range(B):
                        gw[i, j] += xf[n, s : s + span].T @ ge[n]
                if needs[0]:
                    gxf[:, s : s + span] += ge @ np.ascontiguousarray(taps_t[i, j])
        gx = None
        if needs[0]:
            gx = gxf.reshape(B, -1, cols, C)[:, ph : ph + H, pw : pw + W, :].transpose(0, 3, 1, 2)
            gx = _unbatch(np.ascontiguousarray(gx), squeeze)
        gbias = ge.sum(axis=(0, 1))
        return gx, np.ascontiguousarray(gw.transpose(3, 2, 0, 1)), gbias


def conv2d_same(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation with zero padding of (k-1)/2 per border."""
    return _apply("conv2d_same", x, kernels, bias)


@_register("maxpool2")
class _MaxPool2:
    @staticmethod
    def forward(x):
        xb, squeeze = _as_batch(x)
        B, C, H, W = xb.shape
        if H % 2 or W % 2:
            raise ShapeError(f"maxpool2 needs even spatial dims, got {H}x{W}")
        win = xb.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
        # argmax returns the first maximum: row-major tie-break
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return _unbatch(out, squeeze), idx

    @staticmethod
    def backward(g, idx, x):
        xb, squeeze = _as_batch(x)
        gb, _ = _as_batch(g)
        B, C, H, W = xb.shape
        onehot = idx[..., None] == np.arange(4)
        win = onehot * gb[..., None]
        gx = win.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (_unbatch(gx.astype(xb.dtype, copy=False), squeeze),)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling over disjoint windows."""
    return _apply("maxpool2", x)


def maxpool2_winners(tape: Tape, pooled: Tensor) -> np.ndarray:
    """Winner index (0..3, row-major within the window) saved for ``pooled``."""
    idx = tape._produced.get(id(pooled))
    if idx is None or tape.entries[idx].op != "maxpool2":
        raise UsageError("tensor is not a recorded maxpool2 output")
    return tape.entries[idx].saved


@_register("upsample2")
class _Upsample2:
    @staticmethod
    def forward(x):
        if x.ndim < 2:
            raise ShapeError("upsample2 needs at least two spatial axes")
        return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1), None

    @staticmethod
    def backward(g, saved, x):
        H, W = x.shape[-2:]
        gx = g.reshape(*g.shape[:-2], H, 2, W, 2).sum(axis=(-3, -1))
        return (gx,)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling by repetition."""
    return _apply("upsample2", x)


@_register("concat_channels")
class _Concat:
    @staticmethod
    def forward(*xs):
        if xs[0].ndim not in (3, 4):
            raise ShapeError(f"concat_channels expects [C,H,W] or [B,C,H,W], got {xs[0].shape}")
        axis = xs[0].ndim - 3
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or x.shape[:axis] != ref[:axis] or x.shape[axis + 1 :] != ref[axis + 1 :]:
                raise ShapeError(f"cannot concatenate {x.shape} onto {ref}")
        sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis), sizes

    @staticmethod
    def backward(g, sizes, *xs):
        axis = xs[0].ndim - 3
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=axis))


def concat_channels(*xs: Tensor) -> Tensor:
    """Join tensors along the channel axis, first argument first."""
    return _apply("concat_channels", *xs)


@_register("elu")
class _Elu:
    @staticmethod
    def forward(x):
        # neg is 0 wherever x >= 0, so neg + 1 is the derivative everywhere
        neg = np.expm1(np.minimum(x, 0))
        return np.maximum(x, 0) + neg, neg

    @staticmethod
    def backward(g, neg, x):
        return (g * (neg + 1),)


def elu(x: Tensor) -> Tensor:
    """Exponential linear unit with alpha = 1."""
    return _apply("elu", x)


@_register("softmax_channels")
class _Softmax:
    @staticmethod
    def forward(z, axis):
        e = np.exp(z - z.max(axis=axis, keepdims=True))
        p = e / e.sum(axis=axis, keepdims=True)
        return p, p

    @staticmethod
    def backward(g, p, z, axis):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)


def softmax_channels(logits: Tensor) -> Tensor:
    """Softmax over the channel axis (or over a plain vector / batch of vectors).

    ``[C,H,W]`` and ``[B,C,H,W]`` normalise per pixel; ``[C]`` and ``[B,C]``
    normalise per vector.
    """
    nd = logits.data.ndim
    axis = {1: 0, 2: 1, 3: 0, 4: 1}.get(nd)
    if axis is None:
        raise ShapeError(f"softmax_channels: unsupported rank {nd}")
    return _apply("softmax_channels", logits, axis=axis)


@_register("dense")
class _Dense:
    @staticmethod
    def forward(x, w, b):
        if w.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
            raise ShapeError(f"dense: input {x.shape}, weights {w.shape}, bias {b.shape}")
        return x @ w.T + b, None

    @staticmethod
    def backward(g, saved, x, w, b):
        if x.ndim == 1:
            gw = np.outer(g, x)
            gb = g
        else:
            gw = g.T @ x
            gb = g.sum(axis=0)
        return g @ w, gw, gb


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weights @ x + bias`` for a vector or a batch of row vectors."""
    return _apply("dense", x, weights, bias)


@_register("flatten")
class _Flatten:
    @staticmethod
    def forward(x, batched):
        return (x.reshape(x.shape[0], -1) if batched else x.reshape(-1)), None

    @staticmethod
    def backward(g, saved, x, batched):
        return (g.reshape(x.shape),)


def flatten(x: Tensor, batched: bool = False) -> Tensor:
    return _apply("flatten", x, batched=batched)


@_register("sum")
class _Sum:
    @staticmethod
    def forward(x):
        return np.asarray(x.sum(), dtype=x.dtype), None

    @staticmethod
    def backward(g, saved, x):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements (scalar)."""
    return _apply("sum", x)


@_register("add")
class _Add:
    @staticmethod
    def forward(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return a + b, None

    @staticmethod
    def backward(g, saved, a, b):
        return g, g


def add(a: Tensor, b: Tensor) -> Tensor:
    return _apply("add", a, b)


@_register("channel_affine")
class _ChannelAffine:
    @staticmethod
    def forward(x, shift, scale):
        xb, squeeze = _as_batch(x)
        C = xb.shape[1]
        if shift.shape != (C,) or scale.shape != (C,):
            raise ShapeError(f"channel_affine: {C} channels but shift {shift.shape}, scale {scale.shape}")
        out = (xb - shift[:, None, None]) * scale[:, None, None]
        return _unbatch(out, squeeze), None

    @staticmethod
    def backward(g, saved, x, shift, scale):
        gb, squeeze = _as_batch(g)
        xb, _ = _as_batch(x)
        s = scale[:, None, None]
        gx = _unbatch(gb * s, squeeze)
        gshift = -(gb * s).sum(axis=(0, 2, 3))
        gscale = (gb * (xb - shift[:, None, None])).sum(axis=(0, 2, 3))
        return gx, gshift.astype(shift.dtype), gscale.astype(scale.dtype)


def channel_affine(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """Per-channel ``(x - shift) * scale`` on ``[C,H,W]`` or ``[B,C,H,W]``."""
    return _apply("channel_affine", x, shift, scale)


@_register("weighted_sum")
class _WeightedSum:
    @staticmethod
    def forward(x, weights):
        w = np.asarray(weights, dtype=x.dtype)
        return np.asarray((x * w).sum(), dtype=x.dtype), w

    @staticmethod
    def backward(g, w, x, weights):
        return (g * np.broadcast_to(w, x.shape),)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` with constant weights."""
    return _apply("weighted_sum", x, weights=np.asarray(weights))


@_register("weighted_nll")
class _WeightedNLL:
    """Weighted negative log-likelihood of probabilities at given class indices.

    ``p`` has classes on ``axis``; ``labels`` has the shape of ``p`` without
    that axis. Per-sample sums are averaged over the leading batch axis when
    ``batched`` is set.
    """

    @staticmethod
    def forward(p, labels, weights, axis, batched):
        lab = np.expand_dims(labels, axis)
        p_true = np.take_along_axis(p, lab, axis=axis)
        w = weights[labels].astype(p.dtype)
        clipped = np.maximum(p_true, LOG_CLAMP)
        nll = -(w * np.log(clipped).squeeze(axis))
        total = nll.sum() / (p.shape[0] if batched else 1)
        return np.asarray(total, dtype=p.dtype), (lab, p_true, w)

    @staticmethod
    def backward(g, saved, p, labels, weights, axis, batched):
        lab, p_true, w = saved
        scale = g / (p.shape[0] if batched else 1)
        live = p_true >= LOG_CLAMP
        d_true = np.where(live, -np.expand_dims(w, axis) / np.where(live, p_true, 1), 0) * scale
        gp = np.zeros_like(p)
        np.put_along_axis(gp, lab, d_true.astype(p.dtype), axis=axis)
        return (gp,)


def weighted_nll(p: Tensor, labels: np.ndarray, weights: np.ndarray, axis: int, batched: bool) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    return _apply("weighted_nll", p, labels=labels, weights=np.asarray(weights, dtype=np.float64), axis=axis, batched=batched)


@_register("softmax_weighted_nll")
class _SoftmaxWeightedNLL:
    """Fused softmax + weighted NLL on logits.

    The value matches ``weighted_nll(softmax_channels(z))`` with the log
    clamped below at log(1e-12). The gradient is the plain log-softmax one,
    ``w * (p - onehot)``, even where the clamp is active, so saturated wrong
    pixels keep a learning signal.
    """

    @staticmethod
    def forward(z, labels, weights, axis, batched):
        shifted = z - z.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        lab = np.expand_dims(labels, axis)
        logp_true = np.take_along_axis(shifted, lab, axis=axis) - lse
        w = weights[labels].astype(z.dtype)
        nll = -(w * np.maximum(logp_true, np.log(LOG_CLAMP)).squeeze(axis))
        total = nll.sum() / (z.shape[0] if batched else 1)
        return np.asarray(total, dtype=z.dtype), (shifted, lse, lab, w)

    @staticmethod
    def backward(g, saved, z, labels, weights, axis, batched):
        shifted, lse, lab, w = saved
        scale = g / (z.shape[0] if batched else 1)
        p = np.exp(shifted - lse)
        np.put_along_axis(p, lab, np.take_along_axis(p, lab, axis=axis) - 1, axis=axis)
        return ((p * np.expand_dims(w, axis) * scale).astype(z.dtype, copy=False),)


def softmax_weighted_nll(logits: Tensor, labels: np.ndarray, weights: np.ndarray, axis: int, batched: bool) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    return _apply(
        "softmax_weighted_nll", logits, labels=labels, weights=np.asarray(weights, dtype=np.float64), axis=axis, batched=batched
    )


# --------------------------------------------------------------------------
# Gradient verification
# --------------------------------------------------------------------------


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    max_checks_per_input: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps the input tensors to a scalar tensor. Inputs must be 64-bit.
    Relative error is ``|a - n| / max(1e-8, |a| + |n|)``. When
    ``max_checks_per_input`` is set, that many entries per input are sampled
    (seeded) instead of probing every element.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise UsageError("grad_check requires float64 inputs")
    with Tape() as tape:
        loss = fn(*inputs)
    analytic = tape.backward(loss, wrt=inputs)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, t in enumerate(inputs):
        base = np.array(t.data, dtype=np.float64)
        n = base.size
        if max_checks_per_input is not None and n > max_checks_per_input:
            probe = rng.choice(n, size=max_checks_per_input, replace=False)
        else:
            probe = np.arange(n)
        a_flat = analytic[t].reshape(-1)
        for j in probe:
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy().reshape(-1)
                pert[j] += sign * eps
                args = list(inputs)
                args[i] = Tensor(pert.reshape(base.shape), requires_grad=True)
                vals.append(float(fn(*args).data))
            num = (vals[0] - vals[1]) / (2 * eps)
            a = float(a_flat[j])
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# TNSR file format
# --------------------------------------------------------------------------

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def tensor_to_bytes(arr: np.ndarray | Tensor) -> bytes:
    """Serialise a float32 or uint8 array in the TNSR layout."""
    a = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    code = _DTYPE_CODES.get(a.dtype)
    if code is None:
        raise ValueError(f"TNSR supports float32 and uint8 only, got {a.dtype}")
    if a.ndim > 255:
        raise ValueError("rank too large for TNSR")
    head = TNSR_MAGIC + struct.pack("<BBB", TNSR_VERSION, code, a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes()


def read_tensor_stream(f: io.BufferedIOBase) -> np.ndarray:
    head = f.read(7)
    if len(head) != 7 or head[:4] != TNSR_MAGIC:
        raise ValueError("not a TNSR stream")
    version, code, rank = head[4], head[5], head[6]
    if version != TNSR_VERSION:
        raise ValueError(f"unsupported TNSR version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown TNSR dtype code {code}")
    dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
    dt = _CODE_DTYPES[code].newbyteorder("<")
    count = int(np.prod(dims, dtype=np.int64))
    payload = f.read(count * dt.itemsize)
    if len(payload) != count * dt.itemsize:
        raise ValueError("truncated TNSR payload")
    return np.frombuffer(payload, dtype=dt).astype(_CODE_DTYPES[code]).reshape(dims)


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    return read_tensor_stream(io.BytesIO(buf))


def save_tensor(path, arr: np.ndarray | Tensor) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor_stream(f)
