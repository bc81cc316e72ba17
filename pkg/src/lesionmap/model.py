"""The sequential CNN ("DeskNet"), its forward pass, and weight serialization.

The default network for 3x64x64 input is

    conv3x3(8, pad 1) - relu - maxpool
    conv3x3(16, pad 1) - relu - maxpool
    conv3x3(32, pad 1) - relu          <- designated feature maps
    gap - dropout(0.5) - dense(num_classes) - sigmoid

The activation feeding the global average pool is the feature layer whose
maps drive the class activation heatmaps. Weight files use the DRCNN1
binary format described in `save_weights`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import (
    BuildError,
    DimensionError,
    ParameterMismatchError,
    TruncatedFileError,
    WeightsFormatError,
)

WEIGHTS_MAGIC = b"DRCNN1"


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the sequential network; fields beyond `kind` are per-kind."""

    kind: str  # conv | relu | maxpool | gap | dropout | dense | sigmoid
    channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    p: float = 0.0
    units: int = 0
    name: str = ""


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 3
    input_size: int = 64
    conv_channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    padding: int = 1
    num_classes: int = 5
    dropout_p: float = 0.5


@dataclass
class ForwardPass:
    """Everything one forward run produces, pre- and post-sigmoid."""

    scores: Tensor
    logits: Tensor
    features: Tensor
    tape: Tape


class ModelGraph:
    """Ordered layers plus their parameter store.

    Parameters live in an insertion-ordered dict keyed by "<layer>.<part>"
    (e.g. "conv1.weight"); serialization writes them in that order.
    """

    def __init__(self, config: ModelConfig, layers: list[LayerSpec], params: dict[str, Tensor]):
        self.config = config
        self.layers = layers
        self.params = params
        self.feature_index = self._locate_feature_layer(layers)
        self._validate_shapes()

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.config.input_channels, self.config.input_size, self.config.input_size)

    @staticmethod
    def _locate_feature_layer(layers: list[LayerSpec]) -> int:
        gap_positions = [i for i, l in enumerate(layers) if l.kind == "gap"]
        if len(gap_positions) != 1:
            raise BuildError(f"model needs exactly one gap layer, found {len(gap_positions)}")
        gap_at = gap_positions[0]
        for i in range(gap_at - 1, -1, -1):
            if layers[i].kind == "relu":
                return i
        raise BuildError("no activation layer precedes the gap layer")

    def _validate_shapes(self) -> None:
        shape: tuple = self.input_shape
        for i, layer in enumerate(self.layers):
            where = f"layer {i} ({layer.kind} {layer.name})".strip()
            if layer.kind == "conv":
                c, h, w = shape
                hp, wp = h + 2 * layer.padding, w + 2 * layer.padding
                if layer.kernel > hp or layer.kernel > wp:
                    raise BuildError(f"{where}: kernel {layer.kernel} exceeds input {h}x{w}")
                ho = (hp - layer.kernel) // layer.stride + 1
                wo = (wp - layer.kernel) // layer.stride + 1
                shape = (layer.channels, ho, wo)
            elif layer.kind == "maxpool":
                c, h, w = shape
                if h % 2 or w % 2:
                    raise BuildError(f"{where}: spatial dims {h}x{w} not divisible by 2")
                shape = (c, h // 2, w // 2)
            elif layer.kind == "gap":
                shape = (shape[0],)
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise BuildError(f"{where}: dense needs a flat input, got {shape}")
                if self.params[f"{layer.name}.weight"].shape != (layer.units, shape[0]):
                    raise BuildError(f"{where}: weight does not match input length {shape[0]}")
                shape = (layer.units,)
            # relu / dropout / sigmoid keep their input shape
        if shape != (self.config.num_classes,):
            raise BuildError(f"final output shape {shape} != ({self.config.num_classes},)")

    def feature_shape(self) -> tuple[int, int, int]:
        shape: tuple = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                c, h, w = shape
                ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                shape = (layer.channels, ho, wo)
            elif layer.kind == "maxpool":
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            if i == self.feature_index:
                return shape  # type: ignore[return-value]
        raise BuildError("feature layer index out of range")

    def forward(self, x: Tensor, train_mode: bool = False, seed: int = 0) -> ForwardPass:
        """Run all layers, keeping the feature maps, logits, and the tape."""
        if x.shape != self.input_shape:
            raise DimensionError(f"input shape {x.shape} != expected {self.input_shape}")
        tape = Tape()
        value = x
        features = None
        logits = None
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                value = ad.conv2d(
                    value,
                    self.params[f"{layer.name}.weight"],
                    self.params[f"{layer.name}.bias"],
                    stride=layer.stride,
                    padding=layer.padding,
                    tape=tape,
                )
            elif layer.kind == "relu":
                value = ad.relu(value, tape=tape)
            elif layer.kind == "maxpool":
                value = ad.maxpool2x2(value, tape=tape)
            elif layer.kind == "gap":
                value = ad.global_avg_pool(value, tape=tape)
            elif layer.kind == "dropout":
                value = ad.dropout(value, layer.p, seed + i, train_mode, tape=tape)
            elif layer.kind == "dense":
                value = ad.dense(
                    value,
                    self.params[f"{layer.name}.weight"],
                    self.params[f"{layer.name}.bias"],
                    tape=tape,
                )
                logits = value
            elif layer.kind == "sigmoid":
                value = ad.sigmoid(value, tape=tape)
            else:
                raise BuildError(f"unknown layer kind {layer.kind!r}")
            if i == self.feature_index:
                features = value
        assert features is not None and logits is not None
        return ForwardPass(scores=value, logits=logits, features=features, tape=tape)


def build_model(config: ModelConfig = ModelConfig(), seed: int = 0) -> ModelGraph:
    """Assemble the network and He-uniform initialize its weights from the seed."""
    if config.input_channels < 1 or config.input_size < 1 or config.num_classes < 1:
        raise BuildError(f"invalid config {config}")
    if not config.conv_channels:
        raise BuildError("at least one conv block is required")

    layers: list[LayerSpec] = []
    for i, channels in enumerate(config.conv_channels):
        name = f"conv{i + 1}"
        layers.append(
            LayerSpec(
                "conv",
                channels=channels,
                kernel=config.kernel,
                stride=1,
                padding=config.padding,
                name=name,
            )
        )
        layers.append(LayerSpec("relu"))
        if i < len(config.conv_channels) - 1:
            layers.append(LayerSpec("maxpool"))
    layers.append(LayerSpec("gap"))
    layers.append(LayerSpec("dropout", p=config.dropout_p))
    layers.append(LayerSpec("dense", units=config.num_classes, name="dense"))
    layers.append(LayerSpec("sigmoid"))

    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, Tensor] = {}
    in_ch = config.input_channels
    for layer in layers:
        if layer.kind == "conv":
            fan_in = in_ch * layer.kernel * layer.kernel
            limit = np.sqrt(6.0 / fan_in)
            shape = (layer.channels, in_ch, layer.kernel, layer.kernel)
            params[f"{layer.name}.weight"] = Tensor(rng.uniform(-limit, limit, size=shape))
            params[f"{layer.name}.bias"] = Tensor(np.zeros(layer.channels))
            in_ch = layer.channels
        elif layer.kind == "dense":
            fan_in = in_ch
            limit = np.sqrt(6.0 / fan_in)
            params[f"{layer.name}.weight"] = Tensor(
                rng.uniform(-limit, limit, size=(layer.units, fan_in))
            )
            params[f"{layer.name}.bias"] = Tensor(np.zeros(layer.units))
    return ModelGraph(config, layers, params)


def forward_with_features(
    model: ModelGraph, x: Tensor, train_mode: bool = False, seed: int = 0
) -> tuple[Tensor, Tensor, Tape]:
    """Post-sigmoid class scores, the designated feature maps, and the tape."""
    result = model.forward(x, train_mode=train_mode, seed=seed)
    return result.scores, result.features, result.tape


# ---------------------------------------------------------------------------
# serialization


def save_weights(model: ModelGraph, path: str | Path) -> None:
    """Write parameters as DRCNN1: magic, then per parameter the little-endian
    name length (u32), UTF-8 name, rank (u32), dims (u32 each), float32 data."""
    from .image_io import atomic_write_bytes

    parts = [WEIGHTS_MAGIC]
    for name, tensor in model.params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", tensor.data.ndim))
        parts.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.shape))
        parts.append(tensor.data.astype("<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def _read_exact(data: bytes, pos: int, count: int, path: str) -> tuple[bytes, int]:
    if pos + count > len(data):
        raise TruncatedFileError(f"{path}: weight file ends {pos + count - len(data)} bytes early")
    return data[pos : pos + count], pos + count


def read_weight_entries(path: str | Path) -> dict[str, np.ndarray]:
    """Parse a DRCNN1 file into name -> float32 array, validating framing."""
    data = Path(path).read_bytes()
    if len(data) < len(WEIGHTS_MAGIC):
        raise TruncatedFileError(f"{path}: shorter than the magic string")
    if data[: len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"{path}: bad magic {data[:6]!r}, expected {WEIGHTS_MAGIC!r}")
    pos = len(WEIGHTS_MAGIC)
    entries: dict[str, np.ndarray] = {}
    while pos < len(data):
        raw, pos = _read_exact(data, pos, 4, str(path))
        (name_len,) = struct.unpack("<I", raw)
        raw, pos = _read_exact(data, pos, name_len, str(path))
        name = raw.decode("utf-8")
        raw, pos = _read_exact(data, pos, 4, str(path))
        (rank,) = struct.unpack("<I", raw)
        raw, pos = _read_exact(data, pos, 4 * rank, str(path))
        dims = struct.unpack(f"<{rank}I", raw)
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw, pos = _read_exact(data, pos, 4 * count, str(path))
        if name in entries:
            raise WeightsFormatError(f"{path}: duplicate parameter {name!r}")
        entries[name] = np.frombuffer(raw, dtype="<f4").reshape(dims)
    return entries


def _infer_config(entries: dict[str, np.ndarray], default_input_size: int) -> ModelConfig:
    """Reconstruct a ModelConfig from parameter shapes (input size is not stored)."""
    conv_shapes = []
    i = 1
    while f"conv{i}.weight" in entries:
        conv_shapes.append(entries[f"conv{i}.weight"].shape)
        i += 1
    if not conv_shapes or "dense.weight" not in entries:
        raise ParameterMismatchError(
            f"cannot infer architecture from parameters {sorted(entries)}"
        )
    num_classes, gap_width = entries["dense.weight"].shape
    if gap_width != conv_shapes[-1][0]:
        raise ParameterMismatchError(
            f"dense.weight expects {gap_width} features but conv{len(conv_shapes)} has "
            f"{conv_shapes[-1][0]} channels"
        )
    kernel = conv_shapes[0][2]
    return ModelConfig(
        input_channels=conv_shapes[0][1],
        input_size=default_input_size,
        conv_channels=tuple(s[0] for s in conv_shapes),
        kernel=kernel,
        padding=(kernel - 1) // 2,
        num_classes=num_classes,
    )


def load_weights(path: str | Path, config: ModelConfig | None = None) -> ModelGraph:
    """Rebuild a model from a DRCNN1 file.

    With no config the architecture is inferred from the parameter shapes and
    the input size falls back to the default (the file does not record it).
    With a config every stored name/shape must match it exactly.
    """
    entries = read_weight_entries(path)
    if config is None:
        config = _infer_config(entries, ModelConfig().input_size)
    model = build_model(config, seed=0)
    if set(entries) != set(model.params):
        unknown = sorted(set(entries) - set(model.params))
        missing = sorted(set(model.params) - set(entries))
        raise ParameterMismatchError(
            f"{path}: parameters do not match config (unknown {unknown}, missing {missing})"
        )
    for name, values in entries.items():
        expected = model.params[name].shape
        if values.shape != expected:
            raise ParameterMismatchError(
                f"{path}: parameter {name!r} has shape {values.shape}, config expects {expected}"
            )
        model.params[name] = Tensor(values.astype(np.float64))
    return model


# ---------------------------------------------------------------------------
# config files


def parse_model_config(path: str | Path) -> ModelConfig:
    """Read a plain `key = value` model config file."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()

    known = {
        "input_channels": int,
        "input_size": int,
        "kernel": int,
        "padding": int,
        "num_classes": int,
        "dropout": float,
        "conv_channels": lambda s: tuple(int(v) for v in s.replace(",", " ").split()),
    }
    kwargs: dict = {}
    for key, raw in values.items():
        if key not in known:
            raise ValueError(f"{path}: unknown model config key {key!r}")
        target = "dropout_p" if key == "dropout" else key
        kwargs[target] = known[key](raw)
    return ModelConfig(**kwargs)


def format_model_config(config: ModelConfig) -> str:
    """Inverse of parse_model_config."""
    lines = [
        f"input_channels = {config.input_channels}",
        f"input_size = {config.input_size}",
        "conv_channels = " + ", ".join(str(c) for c in config.conv_channels),
        f"kernel = {config.kernel}",
        f"padding = {config.padding}",
        f"num_classes = {config.num_classes}",
        f"dropout = {config.dropout_p}",
    ]
    return "\n".join(lines) + "\n"
