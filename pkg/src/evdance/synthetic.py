"""Seeded synthetic event benchmark: oriented bars sweeping across the sensor.

Class ``c`` of ``k`` is a bright bar at angle ``c * 180 / k`` degrees that
swings along its normal from one side of the centre to the other and back.
Pixels the bar starts covering emit positive events, pixels it leaves emit
negative ones, and a fixed 5% of every stream is uniform noise. Each stream
also comes with a grayscale "source-modality" frame showing the bar at a
random point of its motion.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidConfig
from .events import DatasetManifest, EventStream, ManifestEntry, write_events_file

NOISE_RATE = 0.05
SWEEP_US = 100_000
SOURCE_BACKGROUND = 0.5
SWEEP_AMP = 0.25  # swing amplitude as a fraction of the shorter sensor side
TIME_GRID = 2000


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    streams: dict[str, EventStream]
    # one rendered frame per manifest entry, same order
    source_frames: np.ndarray  # (n, H, W) in [0, 1]
    source_labels: np.ndarray  # (n,)

    def split_streams(self, split: str) -> list[EventStream]:
        return [self.streams[e.path] for e in self.manifest.split(split)]

    def split_frames(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        mask = np.array([e.split == split for e in self.manifest.entries])
        return self.source_frames[mask], self.source_labels[mask]

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "streams").mkdir(parents=True, exist_ok=True)
        for entry in self.manifest.entries:
            write_events_file(out / entry.path, self.streams[entry.path])
        self.manifest.save(out / "manifest.json")
        np.save(out / "source_frames.npy", self.source_frames)
        np.save(out / "source_labels.npy", self.source_labels)


def _bar_geometry(rng, c, k, width, height):
    theta = c * np.pi / k + rng.uniform(-0.15, 0.15) * np.pi / k
    normal = np.array([-np.sin(theta), np.cos(theta)])
    center = np.array([(width - 1) / 2, (height - 1) / 2]) + rng.uniform(-0.5, 0.5, size=2)
    half_width = rng.uniform(1.0, 1.5)
    ys, xs = np.mgrid[0:height, 0:width]
    dist = (xs - center[0]) * normal[0] + (ys - center[1]) * normal[1]
    return dist, half_width


def render_bar(dist: np.ndarray, half_width: float, offset: float = 0.0,
               background: float = SOURCE_BACKGROUND) -> np.ndarray:
    """Anti-aliased bright bar centred at ``offset`` on a uniform gray background."""
    mask = np.clip(half_width + 0.5 - np.abs(dist - offset), 0.0, 1.0)
    return background + (1.0 - background) * mask


def _bar_offset(rng, width, height):
    """Bar swings once across the centre and back along its normal."""
    amp = SWEEP_AMP * min(width, height) + rng.uniform(-0.5, 0.5)
    side = rng.choice([-1.0, 1.0])
    return lambda t: -side * amp * np.cos(2 * np.pi * np.asarray(t) / SWEEP_US)


def _motion_events(rng, dist, half_width, offset, n_events, width, height):
    # a pixel fires +1 when the bar starts covering it and -1 when it stops
    grid_t = np.linspace(0, SWEEP_US, TIME_GRID + 1)
    covered = np.abs(dist.ravel()[None, :] - offset(grid_t)[:, None]) < half_width
    change = np.diff(covered.astype(np.int8), axis=0)
    step, pix = np.nonzero(change)
    pool_t = 0.5 * (grid_t[step] + grid_t[step + 1])
    pool_p = change[step, pix]
    pool_x, pool_y = pix % width, pix // width

    n_noise = int(round(NOISE_RATE * n_events))
    n_signal = n_events - n_noise
    pick = rng.integers(0, len(pool_t), size=n_signal)
    sig_t = pool_t[pick] + rng.normal(0.0, 0.01 * SWEEP_US, size=n_signal)

    noise_x = rng.integers(0, width, size=n_noise)
    noise_y = rng.integers(0, height, size=n_noise)
    noise_t = rng.uniform(0, SWEEP_US, size=n_noise)
    noise_p = rng.choice([-1, 1], size=n_noise)

    x = np.concatenate([pool_x[pick], noise_x])
    y = np.concatenate([pool_y[pick], noise_y])
    t = np.clip(np.round(np.concatenate([sig_t, noise_t])), 0, SWEEP_US).astype(np.int64)
    p = np.concatenate([pool_p[pick], noise_p])
    order = np.argsort(t, kind="stable")
    return x[order], y[order], t[order], p[order]


def synthesize_dataset(seed: int, k: int = 4, streams_per_class: int = 100,
                       width: int = 16, height: int = 16, events_per_stream: int = 2000,
                       test_per_class: int | None = None) -> SyntheticDataset:
    """Generate a labelled, class-balanced bar-sweep corpus.

    ``streams_per_class`` train streams and ``test_per_class`` (default a
    quarter of that) test streams are produced per class. Output is a pure
    function of the arguments.
    """
    if k < 2:
        raise InvalidConfig("need at least 2 classes")
    if events_per_stream < 100:
        raise InvalidConfig("events_per_stream must be >= 100")
    if streams_per_class < 1 or width < 4 or height < 4:
        raise InvalidConfig("dataset too small")
    if test_per_class is None:
        test_per_class = max(1, streams_per_class // 4)

    entries, streams, frames, labels = [], {}, [], []
    idx = 0
    for split, per_class in (("train", streams_per_class), ("test", test_per_class)):
        for i in range(per_class * k):
            c = i % k
            rng = np.random.default_rng([seed, idx])
            dist, hw = _bar_geometry(rng, c, k, width, height)
            offset = _bar_offset(rng, width, height)
            x, y, t, p = _motion_events(rng, dist, hw, offset, events_per_stream, width, height)
            path = f"streams/{split}_{i:05d}.events"
            streams[path] = EventStream(x, y, t, p, width, height, label=c)
            entries.append(ManifestEntry(path, c, split))
            frames.append(render_bar(dist, hw, float(offset(rng.uniform(0, SWEEP_US)))))
            labels.append(c)
            idx += 1

    class_names = [f"bar_{round(c * 180 / k)}deg" for c in range(k)]
    manifest = DatasetManifest(width, height, class_names, entries)
    return SyntheticDataset(manifest, streams, np.asarray(frames), np.asarray(labels, dtype=np.int64))
