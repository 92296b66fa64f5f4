"""Dense tensor representations of an event stream.

All three builders share one temporal kernel: the window is stretched onto
``[0, b-1]`` and every event splits its value linearly between the two
neighbouring bins.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import EmptyStream, InvalidBinCount
from .events import EventStream


class RepresentationKind(enum.IntEnum):
    STACK = 1
    VOXEL = 2
    EST = 3

    @classmethod
    def parse(cls, name) -> "RepresentationKind":
        if isinstance(name, cls):
            return name
        if isinstance(name, int):
            return cls(name)
        return cls[str(name).upper()]


@dataclass(frozen=True)
class StackImage:
    data: np.ndarray  # (H, W, 1)
    count_used: int


@dataclass(frozen=True)
class VoxelGrid:
    data: np.ndarray  # (H, W, B)
    t_min: int
    t_max: int


@dataclass(frozen=True)
class EventSpikeTensor:
    data: np.ndarray  # (H, W, B, 2); channel 0 = positive polarity

    def flatten_for_model(self) -> np.ndarray:
        h, w, b, _ = self.data.shape
        return self.data.reshape(h, w, 2 * b)


def _check(stream: EventStream, b: int | None = None) -> EventStream:
    if len(stream) == 0:
        raise EmptyStream("representation of an empty stream")
    if b is not None and (not isinstance(b, (int, np.integer)) or b < 1):
        raise InvalidBinCount(f"bin count must be a positive integer, got {b!r}")
    return stream.time_sorted()


def temporal_kernel(t: np.ndarray, b: int):
    """Return ``(left_bin, right_weight)`` for timestamps ``t``.

    An event with stretched time ``t*`` puts ``1 - frac(t*)`` into
    ``left_bin`` and ``frac(t*)`` into ``left_bin + 1``. A window with a
    single timestamp maps everything to bin 0.
    """
    t = np.asarray(t, dtype=np.int64)
    t_min, t_max = int(t.min()), int(t.max())
    if t_max == t_min:
        ts = np.zeros(len(t))
    else:
        ts = (t - t_min) / (t_max - t_min) * (b - 1)
    left = np.floor(ts).astype(np.int64)
    return left, ts - left


def _scatter_bilinear(out: np.ndarray, y, x, left, frac, values, extra_idx=()):
    b = out.shape[2]
    np.add.at(out, (y, x, left) + extra_idx, values * (1.0 - frac))
    right = left + 1
    ok = right < b
    sub = tuple(a[ok] for a in extra_idx)
    np.add.at(out, (y[ok], x[ok], right[ok]) + sub, (values * frac)[ok])


def build_stack_image(stream: EventStream, count_threshold: int) -> StackImage:
    """Signed count of the first ``count_threshold`` events, min-max scaled to [0, 1]."""
    s = _check(stream)
    n = min(int(count_threshold), len(s))
    raw = np.zeros((s.height, s.width), dtype=np.float64)
    np.add.at(raw, (s.y[:n], s.x[:n]), s.p[:n].astype(np.float64))
    lo, hi = raw.min(), raw.max()
    img = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
    return StackImage(img[:, :, None], n)


def build_voxel_grid(stream: EventStream, b: int) -> VoxelGrid:
    s = _check(stream, b)
    grid = np.zeros((s.height, s.width, b), dtype=np.float64)
    left, frac = temporal_kernel(s.t, b)
    _scatter_bilinear(grid, s.y, s.x, left, frac, s.p.astype(np.float64))
    return VoxelGrid(grid, int(s.t.min()), int(s.t.max()))


def build_est(stream: EventStream, b: int) -> EventSpikeTensor:
    """Timestamp-measurement spike tensor with one channel per polarity.

    The measurement is the event time relative to the window start, divided
    by the window span (0 when the span is zero).
    """
    s = _check(stream, b)
    est = np.zeros((s.height, s.width, b, 2), dtype=np.float64)
    t_min, t_max = int(s.t.min()), int(s.t.max())
    span = (t_max - t_min) or 1
    measure = (s.t - t_min) / span
    left, frac = temporal_kernel(s.t, b)
    channel = np.where(s.p > 0, 0, 1)
    _scatter_bilinear(est, s.y, s.x, left, frac, measure, (channel,))
    return EventSpikeTensor(est)


def representation_dim(kind, height: int, width: int, b: int) -> int:
    kind = RepresentationKind.parse(kind)
    return height * width * {RepresentationKind.STACK: 1,
                              RepresentationKind.VOXEL: b,
                              RepresentationKind.EST: 2 * b}[kind]


def representation_vector(stream: EventStream, kind, b: int = 4,
                          count_threshold: int = 1_000_000) -> np.ndarray:
    kind = RepresentationKind.parse(kind)
    if kind is RepresentationKind.STACK:
        arr = build_stack_image(stream, count_threshold).data
    elif kind is RepresentationKind.VOXEL:
        arr = build_voxel_grid(stream, b).data
    else:
        arr = build_est(stream, b).flatten_for_model()
    return np.ascontiguousarray(arr).reshape(-1)
