"""Network roles: source/target classifiers, reconstruction net, checkpoints."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import CorruptFile, EmptyStream, InvalidConfig, ShapeMismatch, VersionMismatch
from .events import EventStream
from .representations import VoxelGrid

CHECKPOINT_MAGIC = b"EVDC"
CHECKPOINT_VERSION = 1


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class _Module:
    params: list[Parameter]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.values.copy() for p in self.params}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            if p.name not in state:
                raise KeyError(f"missing parameter {p.name}")
            arr = np.asarray(state[p.name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{p.name}: {arr.shape} vs {p.shape}")
            p.values[...] = arr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def _weights(self, frozen: bool):
        # frozen: use the current values as constants so no gradient reaches them
        return [p.detach() if frozen else p for p in self.params]


@dataclass
class ClassifierConfig:
    input_dim: int
    hidden_dims: list[int] = field(default_factory=lambda: [64])
    num_classes: int = 4

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        if self.input_dim < 1 or self.num_classes < 1 or any(h < 1 for h in self.hidden_dims):
            raise InvalidConfig("all classifier dims must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim


class Classifier(_Module):
    """ReLU MLP whose last hidden activation is the feature vector."""

    kind = "classifier"

    def __init__(self, config: ClassifierConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        dims = [config.input_dim, *config.hidden_dims]
        self.params = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.params += [Parameter(glorot(rng, a, b), f"l{i}.W"), Parameter(np.zeros(b), f"l{i}.b")]
        self.params += [Parameter(glorot(rng, dims[-1], config.num_classes), "head.W"),
                        Parameter(np.zeros(config.num_classes), "head.b")]

    def forward(self, x, frozen: bool = False) -> tuple[Tensor, Tensor]:
        x = ad.as_tensor(x)
        if x.values.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ShapeMismatch(f"classifier expects (n, {self.config.input_dim}), got {x.shape}")
        w = self._weights(frozen)
        h = x
        for i in range(len(self.config.hidden_dims)):
            h = ad.relu(ad.linear(h, w[2 * i], w[2 * i + 1]))
        return h, ad.linear(h, w[-2], w[-1])

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            _, logits = self.forward(np.asarray(x, dtype=np.float64))
        return np.argmax(logits.values, axis=1)


def classifier_forward(model: Classifier, x) -> tuple[Tensor, Tensor]:
    return model.forward(x)


@dataclass
class ReconConfig:
    height: int
    width: int
    bins: int
    hidden_dims: list[int] = field(default_factory=lambda: [128])

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        if min(self.height, self.width, self.bins) < 1 or any(h < 1 for h in self.hidden_dims):
            raise InvalidConfig("reconstruction dims must be >= 1")

    @property
    def input_dim(self) -> int:
        return self.height * self.width * self.bins

    @property
    def output_dim(self) -> int:
        return self.height * self.width


class ReconstructionNet(_Module):
    """Dense map from a flattened voxel grid to an intensity frame in [0, 1]."""

    kind = "reconstruction"

    def __init__(self, config: ReconConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        dims = [config.input_dim, *config.hidden_dims, config.output_dim]
        self.params = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.params += [Parameter(glorot(rng, a, b), f"l{i}.W"), Parameter(np.zeros(b), f"l{i}.b")]

    def forward(self, x, frozen: bool = False) -> Tensor:
        x = ad.as_tensor(x)
        if x.values.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ShapeMismatch(f"reconstruction expects (n, {self.config.input_dim}), got {x.shape}")
        w = self._weights(frozen)
        h = x
        n_layers = len(w) // 2
        for i in range(n_layers):
            h = ad.linear(h, w[2 * i], w[2 * i + 1])
            if i < n_layers - 1:
                h = ad.relu(h)
        return ad.sigmoid(h)

    __call__ = forward


def reconstruct(net: ReconstructionNet, voxel: VoxelGrid) -> np.ndarray:
    c = net.config
    if voxel.data.shape != (c.height, c.width, c.bins):
        raise ShapeMismatch(f"voxel {voxel.data.shape} vs net ({c.height}, {c.width}, {c.bins})")
    with ad.no_grad():
        out = net.forward(voxel.data.reshape(1, -1))
    return out.values.reshape(c.height, c.width)


def leaky_integration_target(stream: EventStream, tau_us: float) -> np.ndarray:
    """Per-pixel exponentially decayed signed event count at the last timestamp.

    Min-max normalised to [0, 1]; a constant frame maps to zeros.
    """
    if len(stream) == 0:
        raise EmptyStream("leaky integration of an empty stream")
    t = stream.t.astype(np.float64)
    w = stream.p * np.exp(-(t.max() - t) / tau_us)
    frame = np.zeros((stream.height, stream.width))
    np.add.at(frame, (stream.y, stream.x), w)
    lo, hi = frame.min(), frame.max()
    return (frame - lo) / (hi - lo) if hi > lo else np.zeros_like(frame)


# --- checkpoints ----------------------------------------------------------

@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", ckpt.version, len(meta)) + meta
    names = sorted(ckpt.tensors)
    out += struct.pack("<I", len(names))
    for name in names:
        arr = ckpt.tensors[name]
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    for name in names:
        out += np.ascontiguousarray(ckpt.tensors[name], dtype="<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CorruptFile("not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptFile("checksum mismatch (truncated or damaged file)")
    try:
        (meta_len,) = struct.unpack_from("<I", data, 8)
        pos = 12
        meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        header = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            header.append((name, shape))
        tensors = {}
        for name, shape in header:
            n = int(np.prod(shape)) if shape else 1
            tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"malformed checkpoint: {exc}") from None
    if pos != len(data) - 4:
        raise CorruptFile("trailing bytes in checkpoint")
    return Checkpoint(tensors, meta, version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def model_checkpoint(model, extra: Optional[dict] = None) -> Checkpoint:
    meta = {"kind": model.kind, "config": asdict(model.config)}
    if extra:
        meta.update(extra)
    return Checkpoint(model.state_dict(), meta)


def model_from_checkpoint(ckpt: Checkpoint):
    kind = ckpt.meta.get("kind")
    if kind == Classifier.kind:
        model = Classifier(ClassifierConfig(**ckpt.meta["config"]))
    elif kind == ReconstructionNet.kind:
        model = ReconstructionNet(ReconConfig(**ckpt.meta["config"]))
    else:
        raise CorruptFile(f"unknown model kind {kind!r}")
    model.load_state_dict(ckpt.tensors)
    return model


def save_model(path, model, extra: Optional[dict] = None) -> None:
    save_checkpoint(path, model_checkpoint(model, extra))


def load_model(path):
    return model_from_checkpoint(load_checkpoint(path))
