"""Segmentation and classification network builders.

The segmentation network is a U-shaped encoder/decoder: two 3x3 conv+ELU per
level, 2x2 max pooling with channel doubling on the way down, repetition
upsampling + skip concatenation + two 3x3 conv+ELU on the way up, and a final
1x1 conv to ``N`` label channels. The classifier is VGG-like: conv blocks of
{2, 2, 3, 3, 3} 3x3 convolutions each followed by pooling, then three dense
layers ending in two logits.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    UsageError,
    channel_affine,
    concat_channels,
    conv2d_same,
    dense,
    elu,
    flatten,
    maxpool2,
    no_tape,
    read_tensor_stream,
    softmax_channels,
    tensor_to_bytes,
    upsample2,
)

CLS_BLOCKS = (2, 2, 3, 3, 3)
PAPER_CLS_WIDTHS = (64, 128, 256, 512, 512)
PAPER_CLS_DENSE = (4096, 4096, 2)
DESK_CLS_WIDTHS = (8, 16, 32, 32, 32)
DESK_CLS_DENSE = (64, 64, 2)
INIT_SCHEME = "he_uniform"
# non-trained classifier entries: per-channel input standardisation
INPUT_SHIFT = "input.shift"
INPUT_SCALE = "input.scale"


class ConfigError(ValueError):
    """Raised for network configurations that cannot be built."""


@dataclass(frozen=True)
class NetworkSpec:
    arch: str
    in_channels: int
    size: int
    n: int = 0
    N: int = 0
    levels: int = 0
    widths: tuple[int, ...] = ()
    dense: tuple[int, ...] = ()
    blocks: tuple[int, ...] = ()
    init: str = INIT_SCHEME
    seed: int = 0

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) list of all trainable parameters."""
        shapes: list[tuple[str, tuple[int, ...]]] = []

        def conv(name, cin, cout, k=3):
            shapes.append((f"{name}.w", (cout, cin, k, k)))
            shapes.append((f"{name}.b", (cout,)))

        if self.arch == "segnet":
            cin = self.in_channels
            for i in range(self.levels):
                width = self.n * 2**i
                conv(f"enc{i}.conv1", cin, width)
                conv(f"enc{i}.conv2", width, width)
                cin = width
            width = self.n * 2**self.levels
            conv("bottleneck.conv1", cin, width)
            conv("bottleneck.conv2", width, width)
            for i in reversed(range(self.levels)):
                skip = self.n * 2**i
                conv(f"dec{i}.conv1", width + skip, skip)
                conv(f"dec{i}.conv2", skip, skip)
                width = skip
            conv("final", self.n, self.N, k=1)
        elif self.arch == "clsnet":
            cin = self.in_channels
            for bi, (count, width) in enumerate(zip(self.blocks, self.widths)):
                for ci in range(count):
                    conv(f"block{bi}.conv{ci + 1}", cin, width)
                    cin = width
            side = self.size // 2 ** len(self.blocks)
            din = cin * side * side
            for di, dout in enumerate(self.dense):
                shapes.append((f"fc{di + 1}.w", (dout, din)))
                shapes.append((f"fc{di + 1}.b", (dout,)))
                din = dout
        else:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        return shapes

    def weight_layers(self) -> int:
        return sum(1 for name, _ in self.param_shapes() if name.endswith(".w"))

    def conv_layers(self) -> int:
        return sum(1 for _, shape in self.param_shapes() if len(shape) == 4)

    def parameter_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def skip_wiring(self) -> list[tuple[str, str]]:
        """(encoder conv producing the skip, decoder stage consuming it) pairs."""
        if self.arch != "segnet":
            return []
        return [(f"enc{i}.conv2", f"dec{i}.conv1") for i in range(self.levels)]

    def descriptor(self) -> str:
        items = {
            "arch": self.arch,
            "in_channels": self.in_channels,
            "size": self.size,
            "n": self.n,
            "N": self.N,
            "levels": self.levels,
            "widths": ",".join(map(str, self.widths)),
            "dense": ",".join(map(str, self.dense)),
            "blocks": ",".join(map(str, self.blocks)),
            "init": self.init,
            "seed": self.seed,
        }
        return "\n".join(f"{k}={v}" for k, v in items.items())

    @classmethod
    def from_descriptor(cls, text: str) -> "NetworkSpec":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())

        def ints(key):
            return tuple(int(v) for v in kv.get(key, "").split(",") if v)

        return cls(
            arch=kv["arch"],
            in_channels=int(kv["in_channels"]),
            size=int(kv["size"]),
            n=int(kv.get("n", 0)),
            N=int(kv.get("N", 0)),
            levels=int(kv.get("levels", 0)),
            widths=ints("widths"),
            dense=ints("dense"),
            blocks=ints("blocks"),
            init=kv.get("init", INIT_SCHEME),
            seed=int(kv.get("seed", 0)),
        )


@dataclass
class Checkpoint:
    """Architecture descriptor plus named float32 parameters."""

    spec: NetworkSpec
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def trainable_names(self) -> set[str]:
        return {name for name, _ in self.spec.param_shapes()}

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        """Parameters as tensors; ``requires_grad`` marks only the trained ones."""
        trained = self.trainable_names() if requires_grad else set()
        return {k: Tensor(v, requires_grad=k in trained, name=k) for k, v in self.params.items()}

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.spec, {k: v.copy() for k, v in self.params.items()})

    def to_bytes(self) -> bytes:
        desc = self.spec.descriptor().encode("utf-8")
        out = [CKPT_MAGIC, struct.pack("<B", CKPT_VERSION), struct.pack("<I", len(desc)), desc]
        out.append(struct.pack("<I", len(self.params)))
        for name, arr in self.params.items():
            raw = name.encode("utf-8")
            out += [struct.pack("<I", len(raw)), raw, tensor_to_bytes(np.asarray(arr, dtype=np.float32))]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        f = io.BytesIO(buf)
        if f.read(4) != CKPT_MAGIC:
            raise ValueError("not a CKPT stream")
        (version,) = struct.unpack("<B", f.read(1))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported CKPT version {version}")
        (dlen,) = struct.unpack("<I", f.read(4))
        spec = NetworkSpec.from_descriptor(f.read(dlen).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            params[name] = read_tensor_stream(f)
        return cls(spec, params)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


def init_params(spec: NetworkSpec) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights (bound sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(spec.seed)
    params = {}
    for name, shape in spec.param_shapes():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return params


# --------------------------------------------------------------------------
# Segmentation network
# --------------------------------------------------------------------------


def build_segnet(n: int = 16, N: int = 6, levels: int = 4, size: int = 256, in_channels: int = 1, seed: int = 0) -> Checkpoint:
    if n < 1 or N < 2 or levels < 1:
        raise ConfigError(f"invalid segnet config n={n}, N={N}, levels={levels}")
    if size % 2**levels:
        raise ConfigError(f"input size {size} not divisible by 2^{levels}")
    spec = NetworkSpec("segnet", in_channels=in_channels, size=size, n=n, N=N, levels=levels, seed=seed)
    return Checkpoint(spec, init_params(spec))


class SegnetOutputs(NamedTuple):
    logits: Tensor
    prob_map: Tensor
    concat_features: Tensor

    @property
    def seg_features(self) -> Tensor:
        # the final 1x1 conv output doubles as the SEG feature map
        return self.logits


def _param_tensors(ckpt: Checkpoint, params: Mapping[str, Tensor] | None) -> Mapping[str, Tensor]:
    return params if params is not None else ckpt.tensors()


def _conv_elu(x, p, name):
    return elu(conv2d_same(x, p[f"{name}.w"], p[f"{name}.b"]))


def segnet_forward(ckpt: Checkpoint, image, params: Mapping[str, Tensor] | None = None) -> SegnetOutputs:
    """Run the segmentation network on ``[1,H,W]`` or a batch ``[B,1,H,W]``.

    ``params`` overrides the checkpoint arrays (pass leaf tensors when the
    pass is recorded for training).
    """
    spec = ckpt.spec
    if spec.arch != "segnet":
        raise ConfigError(f"checkpoint is a {spec.arch}, not a segnet")
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim not in (3, 4) or x.shape[-3] != spec.in_channels:
        raise ShapeError(f"segnet expects {spec.in_channels} input channel(s), got shape {x.shape}")
    H, W = x.shape[-2:]
    if H % 2**spec.levels or W % 2**spec.levels:
        raise ShapeError(f"image {H}x{W} not divisible by 2^{spec.levels}")
    p = _param_tensors(ckpt, params)
    skips = []
    for i in range(spec.levels):
        x = _conv_elu(x, p, f"enc{i}.conv1")
        x = _conv_elu(x, p, f"enc{i}.conv2")
        skips.append(x)
        x = maxpool2(x)
    x = _conv_elu(x, p, "bottleneck.conv1")
    x = _conv_elu(x, p, "bottleneck.conv2")
    concat = None
    for i in reversed(range(spec.levels)):
        x = concat_channels(upsample2(x), skips[i])
        if i == 0:
            concat = x
        x = _conv_elu(x, p, f"dec{i}.conv1")
        x = _conv_elu(x, p, f"dec{i}.conv2")
    logits = conv2d_same(x, p["final.w"], p["final.b"])
    return SegnetOutputs(logits, softmax_channels(logits), concat)


def predict_labels(ckpt: Checkpoint, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """Per-pixel argmax label maps for ``[B,1,H,W]`` images."""
    out = []
    with no_tape():
        for s in range(0, len(images), batch):
            res = segnet_forward(ckpt, Tensor(np.asarray(images[s : s + batch], dtype=np.float32)))
            out.append(res.logits.data.argmax(axis=1).astype(np.uint8))
    return np.concatenate(out)


# --------------------------------------------------------------------------
# Classification network
# --------------------------------------------------------------------------


def build_clsnet(
    in_channels: int,
    widths: tuple[int, ...] = DESK_CLS_WIDTHS,
    dense_sizes: tuple[int, ...] = DESK_CLS_DENSE,
    size: int = 64,
    seed: int = 0,
    blocks: tuple[int, ...] = CLS_BLOCKS,
    allocate: bool = True,
) -> Checkpoint:
    """VGG-style two-class classifier.

    With ``allocate=False`` the parameters are left empty, which is handy for
    inspecting the full-size network without materialising its weights.
    """
    spec = clsnet_spec(in_channels, widths, dense_sizes, size, seed, blocks)
    if not allocate:
        return Checkpoint(spec, {})
    # input standardisation starts as the identity; training fits it to the data
    params = {
        INPUT_SHIFT: np.zeros(in_channels, dtype=np.float32),
        INPUT_SCALE: np.ones(in_channels, dtype=np.float32),
        **init_params(spec),
    }
    return Checkpoint(spec, params)


def clsnet_spec(in_channels, widths=DESK_CLS_WIDTHS, dense_sizes=DESK_CLS_DENSE, size=64, seed=0, blocks=CLS_BLOCKS) -> NetworkSpec:
    if len(widths) != len(blocks):
        raise ConfigError("one width per conv block is required")
    if size % 2 ** len(blocks):
        raise ConfigError(f"input size {size} not divisible by 2^{len(blocks)}")
    if not dense_sizes or dense_sizes[-1] != 2:
        raise ConfigError("the last dense layer must have 2 outputs")
    return NetworkSpec(
        "clsnet",
        in_channels=in_channels,
        size=size,
        widths=tuple(widths),
        dense=tuple(dense_sizes),
        blocks=tuple(blocks),
        seed=seed,
    )


def clsnet_feature_shape(spec: NetworkSpec) -> tuple[int, int, int]:
    """Shape of the last pooled map before flattening."""
    side = spec.size // 2 ** len(spec.blocks)
    return (spec.widths[-1], side, side)


def clsnet_forward(ckpt: Checkpoint, x, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Two-class logits for ``[C,H,W]`` (-> ``[2]``) or ``[B,C,H,W]`` (-> ``[B,2]``)."""
    spec = ckpt.spec
    if spec.arch != "clsnet":
        raise ConfigError(f"checkpoint is a {spec.arch}, not a clsnet")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim not in (3, 4) or x.shape[-3] != spec.in_channels or x.shape[-1] != spec.size or x.shape[-2] != spec.size:
        raise ShapeError(f"clsnet expects [{spec.in_channels},{spec.size},{spec.size}] inputs, got {x.shape}")
    batched = x.data.ndim == 4
    p = _param_tensors(ckpt, params)
    if INPUT_SHIFT in p:
        x = channel_affine(x, p[INPUT_SHIFT], p[INPUT_SCALE])
    for bi, count in enumerate(spec.blocks):
        for ci in range(count):
            x = _conv_elu(x, p, f"block{bi}.conv{ci + 1}")
        x = maxpool2(x)
    h = flatten(x, batched=batched)
    n_dense = len(spec.dense)
    for di in range(n_dense):
        h = dense(h, p[f"fc{di + 1}.w"], p[f"fc{di + 1}.b"])
        if di < n_dense - 1:
            h = elu(h)
    return h


# --------------------------------------------------------------------------
# Feature combinations
# --------------------------------------------------------------------------


class FeatureMode(str, enum.Enum):
    IMG = "IMG"
    SEG = "SEG"
    IMG_SEG = "IMG+SEG"
    CONCAT = "CONCAT"
    IMG_CONCAT = "IMG+CONCAT"

    @classmethod
    def parse(cls, text: str) -> "FeatureMode":
        try:
            return cls(text.strip().upper())
        except ValueError:
            raise ValueError(f"unknown feature mode {text!r}; choose from {[m.value for m in cls]}") from None

    @property
    def uses_image(self) -> bool:
        return self in (FeatureMode.IMG, FeatureMode.IMG_SEG, FeatureMode.IMG_CONCAT)

    @property
    def uses_seg(self) -> bool:
        return self is not FeatureMode.IMG

    def channels(self, n: int, N: int) -> int:
        return {
            FeatureMode.IMG: 1,
            FeatureMode.SEG: N,
            FeatureMode.IMG_SEG: N + 1,
            FeatureMode.CONCAT: 3 * n,
            FeatureMode.IMG_CONCAT: 3 * n + 1,
        }[self]


ALL_MODES = tuple(FeatureMode)


def assemble_features(mode: FeatureMode | str, image, seg: SegnetOutputs | None = None) -> Tensor:
    """Classifier input for one feature combination, image channel first.

    The result is a constant tensor: nothing flows back into the
    segmentation network.
    """
    mode = FeatureMode.parse(mode) if isinstance(mode, str) else mode
    img = image if isinstance(image, Tensor) else Tensor(image)
    if mode is FeatureMode.IMG:
        return Tensor(img.data)
    if seg is None:
        raise UsageError(f"feature mode {mode.value} needs segmentation outputs")
    source = seg.logits if mode in (FeatureMode.SEG, FeatureMode.IMG_SEG) else seg.concat_features
    if source.shape[-2:] != img.shape[-2:]:
        raise ShapeError(f"spatial mismatch: image {img.shape}, features {source.shape}")
    with no_tape():
        parts = [Tensor(img.data), Tensor(source.data)] if mode.uses_image else [Tensor(source.data)]
        out = concat_channels(*parts) if len(parts) > 1 else parts[0]
    return Tensor(out.data)
