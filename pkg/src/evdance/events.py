"""Event containers, file formats and windowing.

Streams are stored column-wise (numpy arrays for x, y, t, p) since every
downstream consumer is vectorised; :class:`Event` is only the per-record view.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .errors import (
    CoordinateOutOfBounds,
    InvalidConfig,
    MalformedLine,
    MissingHeader,
    NonMonotonicTimestamp,
    TooFewEvents,
    TruncatedRecord,
)

NMNIST_RECORD_BYTES = 5
NMNIST_MAX_TIMESTAMP = (1 << 23) - 1


class Event(NamedTuple):
    x: int
    y: int
    t: int  # microseconds
    p: int  # +1 / -1


@dataclass(frozen=True, eq=False)
class EventStream:
    """An ordered batch of events from one sensor.

    ``x``, ``y``, ``t`` are int64 arrays, ``p`` is an int8 array of +1/-1.
    Timestamps are expected to be non-decreasing but parsed files may break
    that (see :func:`parse_nmnist_binary`); builders sort defensively.
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    width: int
    height: int
    label: Optional[int] = None

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.int64).reshape(-1)
        y = np.ascontiguousarray(self.y, dtype=np.int64).reshape(-1)
        t = np.ascontiguousarray(self.t, dtype=np.int64).reshape(-1)
        p = np.ascontiguousarray(self.p, dtype=np.int8).reshape(-1)
        if not (len(x) == len(y) == len(t) == len(p)):
            raise ValueError("x, y, t, p must have equal lengths")
        if self.width < 1 or self.height < 1:
            raise InvalidConfig(f"bad sensor size {self.width}x{self.height}")
        if len(x) and (x.min() < 0 or x.max() >= self.width or y.min() < 0 or y.max() >= self.height):
            raise CoordinateOutOfBounds(f"event outside {self.width}x{self.height} sensor")
        if len(t) and t.min() < 0:
            raise ValueError("timestamps must be non-negative")
        if len(p) and not np.all((p == 1) | (p == -1)):
            raise ValueError("polarity must be +1 or -1")
        for name, arr in (("x", x), ("y", y), ("t", t), ("p", p)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_events(cls, events: Sequence[Event], width: int, height: int,
                    label: Optional[int] = None) -> "EventStream":
        if len(events) == 0:
            return cls.empty(width, height, label)
        arr = np.asarray([tuple(e) for e in events], dtype=np.int64)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height, label)

    @classmethod
    def empty(cls, width: int, height: int, label: Optional[int] = None) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, width, height, label)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in zip(self.x.tolist(), self.y.tolist(), self.t.tolist(), self.p.tolist()):
            yield Event(x, y, t, p)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return EventStream(self.x[idx], self.y[idx], self.t[idx], self.p[idx],
                               self.width, self.height, self.label)
        return Event(int(self.x[idx]), int(self.y[idx]), int(self.t[idx]), int(self.p[idx]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and self.label == other.label
                and np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)
                and np.array_equal(self.t, other.t) and np.array_equal(self.p, other.p))

    @property
    def events(self) -> list[Event]:
        return list(self)

    def is_time_ordered(self) -> bool:
        return bool(np.all(np.diff(self.t) >= 0))

    def time_sorted(self) -> "EventStream":
        if self.is_time_ordered():
            return self
        order = np.argsort(self.t, kind="stable")
        return EventStream(self.x[order], self.y[order], self.t[order], self.p[order],
                           self.width, self.height, self.label)


# --- N-MNIST binary -------------------------------------------------------

def parse_nmnist_binary(data: bytes, width: int = 34, height: int = 34) -> EventStream:
    """Decode the 5-byte N-MNIST AER record format.

    byte0 = x, byte1 = y, bit 7 of byte2 = polarity (1 -> +1),
    remaining 23 bits (big-endian) = timestamp in microseconds.
    """
    if len(data) % NMNIST_RECORD_BYTES:
        raise TruncatedRecord(f"{len(data)} bytes is not a multiple of {NMNIST_RECORD_BYTES}")
    rec = np.frombuffer(bytes(data), dtype=np.uint8).reshape(-1, NMNIST_RECORD_BYTES).astype(np.int64)
    x, y = rec[:, 0], rec[:, 1]
    p = np.where(rec[:, 2] >> 7, 1, -1)
    t = ((rec[:, 2] & 0x7F) << 16) | (rec[:, 3] << 8) | rec[:, 4]
    bad = (x >= width) | (y >= height)
    if bad.any():
        i = int(np.argmax(bad))
        raise CoordinateOutOfBounds(
            f"record {i}: ({x[i]}, {y[i]}) outside {width}x{height} sensor")
    if len(t) > 1 and np.any(np.diff(t) < 0):
        warnings.warn("non-monotonic timestamps kept as-is", NonMonotonicTimestamp, stacklevel=2)
    return EventStream(x, y, t, p, width, height)


def write_nmnist_binary(stream: EventStream) -> bytes:
    if len(stream) and (stream.x.max() > 255 or stream.y.max() > 255):
        raise CoordinateOutOfBounds("N-MNIST records hold 8-bit coordinates")
    if len(stream) and stream.t.max() > NMNIST_MAX_TIMESTAMP:
        raise ValueError("timestamp does not fit in 23 bits")
    rec = np.empty((len(stream), NMNIST_RECORD_BYTES), dtype=np.uint8)
    t = stream.t
    rec[:, 0] = stream.x
    rec[:, 1] = stream.y
    rec[:, 2] = ((stream.p > 0).astype(np.int64) << 7) | ((t >> 16) & 0x7F)
    rec[:, 3] = (t >> 8) & 0xFF
    rec[:, 4] = t & 0xFF
    return rec.tobytes()


# --- portable text format -------------------------------------------------

def _ints(line: str, lineno: int) -> list[int]:
    try:
        return [int(f) for f in line.split(",")]
    except ValueError:
        raise MalformedLine(lineno, "non-integer field") from None


def parse_portable_events(text: str) -> EventStream:
    """Parse ``width,height[,label]`` followed by ``x,y,t,p`` lines."""
    lines = text.split("\n")
    header_idx = next((i for i, ln in enumerate(lines) if ln.strip()), None)
    if header_idx is None:
        raise MissingHeader("no header line")
    header = _ints(lines[header_idx].strip(), header_idx + 1)
    if len(header) not in (2, 3):
        raise MissingHeader(f"expected 'width,height[,label]', got {len(header)} fields")
    width, height = header[0], header[1]
    label = header[2] if len(header) == 3 else None
    if width < 1 or height < 1:
        raise MalformedLine(header_idx + 1, "sensor size must be positive")

    rows = []
    for i in range(header_idx + 1, len(lines)):
        line = lines[i].strip()
        if not line:
            continue
        f = _ints(line, i + 1)
        if len(f) != 4:
            raise MalformedLine(i + 1, f"expected 4 fields, got {len(f)}")
        x, y, t, p = f
        if p not in (1, -1):
            raise MalformedLine(i + 1, f"polarity {p} not in {{1,-1}}")
        if not (0 <= x < width and 0 <= y < height):
            raise MalformedLine(i + 1, "coordinate out of bounds")
        if t < 0:
            raise MalformedLine(i + 1, "negative timestamp")
        rows.append(f)
    if not rows:
        return EventStream.empty(width, height, label)
    arr = np.asarray(rows, dtype=np.int64)
    return EventStream(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height, label)


def write_portable_events(stream: EventStream) -> str:
    head = f"{stream.width},{stream.height}"
    if stream.label is not None:
        head += f",{stream.label}"
    body = "".join(f"{x},{y},{t},{p}\n" for x, y, t, p in stream)
    return head + "\n" + body


def read_events_file(path) -> EventStream:
    path = Path(path)
    if path.suffix == ".bin":
        return parse_nmnist_binary(path.read_bytes())
    return parse_portable_events(path.read_text(encoding="utf-8"))


def write_events_file(path, stream: EventStream) -> None:
    """Write by extension: ``.bin`` is N-MNIST (sensor size and label are dropped), else portable text."""
    path = Path(path)
    if path.suffix == ".bin":
        path.write_bytes(write_nmnist_binary(stream))
    else:
        path.write_bytes(write_portable_events(stream).encode("utf-8"))


# --- windows --------------------------------------------------------------

def split_windows(stream: EventStream, w: int) -> list[EventStream]:
    """Split into ``w`` equal-count windows; the remainder goes to the last one.

    Window 0 is the anchor window.
    """
    if w < 1:
        raise InvalidConfig("window count must be >= 1")
    n = len(stream)
    if n < w:
        raise TooFewEvents(f"{n} events cannot fill {w} windows")
    size = n // w
    bounds = [i * size for i in range(w)] + [n]
    return [stream[bounds[i]:bounds[i + 1]] for i in range(w)]


# --- manifest -------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: str
    label: Optional[int]
    split: str  # "train" | "test"


@dataclass
class DatasetManifest:
    width: int
    height: int
    classes: list[str]
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        if len(self.classes) < 2:
            raise InvalidConfig("a dataset needs at least 2 classes")
        for e in self.entries:
            if e.split not in ("train", "test"):
                raise InvalidConfig(f"unknown split {e.split!r}")
            if e.label is not None and not 0 <= e.label < len(self.classes):
                raise InvalidConfig(f"label {e.label} outside [0, {len(self.classes)})")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def to_json(self) -> str:
        doc = {
            "width": self.width,
            "height": self.height,
            "classes": list(self.classes),
            "entries": [{"path": e.path, "label": e.label, "split": e.split} for e in self.entries],
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        entries = [ManifestEntry(e["path"], e.get("label"), e["split"]) for e in doc["entries"]]
        return cls(int(doc["width"]), int(doc["height"]), list(doc["classes"]), entries)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))
