"""Frozen language/vision feature providers and similarity-level distillation.

No encoder runs here. Text features come either from an exported feature
bank file or from a seeded orthonormal stub; visual features come from an
exported per-sample bank or a frozen random projection of surrogate frames.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    CorruptFile,
    DimensionMismatch,
    InvalidConfig,
    InvalidTemperature,
    ShapeMismatch,
    VersionMismatch,
)

BANK_MAGIC = b"EVFB"
BANK_VERSION = 1
KIND_TEXT = 0
KIND_VISUAL = 1
DEFAULT_TEMPLATE = "A photo of [{}]"


def _unit_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norm = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.maximum(norm, 1e-12)


@dataclass
class TextFeatureBank:
    features: np.ndarray  # (K, D), unit rows
    class_names: list[str]
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        self.features = _unit_rows(self.features)
        if self.features.shape[0] != len(self.class_names):
            raise DimensionMismatch("one feature row per class name required")

    @property
    def k(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def prompts(self) -> list[str]:
        return [self.template.format(n) for n in self.class_names]


class RandomProjectionEmbedder:
    """Frozen seeded projection of flattened frames onto unit-norm D-vectors."""

    def __init__(self, input_dim: int, dim: int = 32, seed: int = 0):
        rng = np.random.default_rng([seed, input_dim, dim])
        self.matrix = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(input_dim, dim))
        self.matrix.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def embed(self, frames, ids: Optional[Sequence[str]] = None) -> np.ndarray:
        x = np.asarray(frames.values if isinstance(frames, Tensor) else frames, dtype=np.float64)
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.matrix.shape[0]:
            raise ShapeMismatch(f"embedder expects {self.matrix.shape[0]} inputs, got {x.shape[1]}")
        return _unit_rows(x @ self.matrix)


@dataclass
class PrecomputedEmbedder:
    """Visual features exported by an external encoder, keyed by sample id."""

    features: np.ndarray  # (n, D)
    ids: list[str]

    def __post_init__(self):
        self.features = _unit_rows(self.features)
        if self.features.shape[0] != len(self.ids):
            raise DimensionMismatch("one feature row per sample id required")
        self._index = {sid: i for i, sid in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def embed(self, frames=None, ids: Optional[Sequence[str]] = None) -> np.ndarray:
        if ids is None:
            raise ValueError("precomputed features are looked up by sample id")
        try:
            return self.features[[self._index[i] for i in ids]]
        except KeyError as exc:
            raise KeyError(f"no visual feature for sample {exc.args[0]!r}") from None


def stub_text_features(class_names: Sequence[str], d: int = 32, seed: int = 0,
                       template: str = DEFAULT_TEMPLATE) -> TextFeatureBank:
    """Deterministic orthonormal class embeddings (Gram-Schmidt of Gaussian rows)."""
    k = len(class_names)
    if k < 2:
        raise InvalidConfig("need at least 2 classes")
    if d < k:
        raise InvalidConfig(f"cannot fit {k} orthonormal rows in {d} dims")
    name_key = zlib.crc32("\x1f".join(class_names).encode("utf-8"))
    rng = np.random.default_rng([seed, d, name_key])
    rows = rng.normal(size=(k, d))
    basis = []
    for r in rows:
        for b in basis:
            r = r - (r @ b) * b
        basis.append(r / np.linalg.norm(r))
    return TextFeatureBank(np.asarray(basis), list(class_names), template)


# --- feature bank files ---------------------------------------------------

def write_feature_bank(path, bank) -> None:
    if isinstance(bank, TextFeatureBank):
        kind, names, feats = KIND_TEXT, bank.class_names, bank.features
    elif isinstance(bank, PrecomputedEmbedder):
        kind, names, feats = KIND_VISUAL, bank.ids, bank.features
    else:
        raise TypeError(f"cannot serialise {type(bank).__name__}")
    rows, dim = feats.shape
    out = bytearray(BANK_MAGIC)
    out += struct.pack("<IBII", BANK_VERSION, kind, rows, dim)
    for name in names:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
    out += np.ascontiguousarray(feats, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    Path(path).write_bytes(bytes(out))


def load_feature_bank(path, expected_k: Optional[int] = None):
    """Read a bank file; rows are re-normalised to unit length."""
    data = Path(path).read_bytes()
    if len(data) < 21 or data[:4] != BANK_MAGIC:
        raise CorruptFile("not a feature bank file")
    version, kind, rows, dim = struct.unpack_from("<IBII", data, 4)
    if version != BANK_VERSION:
        raise VersionMismatch(f"feature bank version {version}, expected {BANK_VERSION}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptFile("checksum mismatch (truncated or damaged file)")
    pos = 17
    names = []
    try:
        for _ in range(rows):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            names.append(data[pos:pos + n].decode("utf-8"))
            pos += n
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptFile(f"bad name table: {exc}") from None
    if len(data) - 4 - pos != rows * dim * 4:
        raise CorruptFile("payload length does not match rows x dim")
    feats = np.frombuffer(data, dtype="<f4", count=rows * dim, offset=pos).reshape(rows, dim).astype(np.float64)
    if kind == KIND_TEXT:
        if expected_k is not None and rows != expected_k:
            raise DimensionMismatch(f"bank has {rows} classes, dataset has {expected_k}")
        return TextFeatureBank(feats, names)
    if kind == KIND_VISUAL:
        return PrecomputedEmbedder(feats, names)
    raise CorruptFile(f"unknown bank kind {kind}")


# --- similarity distillation ----------------------------------------------

def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise InvalidTemperature(f"temperature must be > 0, got {tau}")


def gram_softmax(features, tau: float = 1.0) -> Tensor:
    """Row-wise softmax of ``F F^T / tau``."""
    _check_tau(tau)
    f = ad.as_tensor(features)
    return ad.softmax_rows(ad.mul(ad.matmul(f, ad.transpose(f)), 1.0 / tau))


def _teacher_log_gram(features: np.ndarray, tau: float) -> Tensor:
    f = _unit_rows(features)
    with ad.no_grad():
        return ad.log_softmax_rows(f @ f.T / tau).detach()


def loss_vkd(f_s, f_vis, tau: float = 1.0) -> Tensor:
    """KL between the student's feature-similarity rows and the frozen visual ones."""
    _check_tau(tau)
    f_s = ad.as_tensor(f_s)
    f_vis = np.asarray(f_vis.values if isinstance(f_vis, Tensor) else f_vis)
    if f_s.shape[0] != f_vis.shape[0]:
        raise ShapeMismatch(f"{f_s.shape[0]} student rows vs {f_vis.shape[0]} teacher rows")
    student = gram_softmax(ad.normalize_rows(f_s), tau)
    return ad.kl_rows(student, _teacher_log_gram(f_vis, tau))


def loss_pkd(probs, text_bank: TextFeatureBank, tau: float = 1.0) -> Tensor:
    """Prediction-level distillation against text-embedding similarities.

    The teacher embeds each sample as the probability-weighted mix of class
    text features, so both sides are n x n sample-similarity matrices.
    """
    _check_tau(tau)
    probs = ad.as_tensor(probs)
    ad._check_distribution(probs.values)
    if probs.shape[1] != text_bank.k:
        raise ShapeMismatch(f"{probs.shape[1]} classes vs {text_bank.k} text rows")
    student = gram_softmax(ad.normalize_rows(probs), tau)
    z = probs.values @ text_bank.features
    return ad.kl_rows(student, _teacher_log_gram(z, tau))


def loss_kd(f_s, f_vis, probs, text_bank: TextFeatureBank, tau: float = 1.0) -> Tensor:
    return ad.add(loss_pkd(probs, text_bank, tau), loss_vkd(f_s, f_vis, tau))
