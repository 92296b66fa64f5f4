"""Three-phase pipeline: source pretraining, reconstruction pretraining and
joint source-free adaptation of the reconstruction net, source classifier and
the three per-representation target classifiers.

Gradient routing is done in the graph: the L_R branch runs the source model
with frozen weights, and the source-model branches see detached surrogate
frames, so a single backward pass of the summed loss only reaches each term's
own parameter group.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .clip_bridge import (
    PrecomputedEmbedder,
    RandomProjectionEmbedder,
    TextFeatureBank,
    load_feature_bank,
    loss_pkd,
    loss_vkd,
    stub_text_features,
)
from .errors import EmptyDataset, EmptyTestSet, InvalidConfig, ShapeMismatch
from .events import EventStream, split_windows
from .losses import ROUTES, TERMS, LossReport, LossWeights, loss_all, loss_en, loss_pc, loss_r, loss_sup, loss_tc
from .metrics import MetricsReport, metrics_report
from .models import (
    Checkpoint,
    Classifier,
    ClassifierConfig,
    ReconConfig,
    ReconstructionNet,
    leaky_integration_target,
)
from .optim import AdamW, linear_decay
from .representations import RepresentationKind, build_voxel_grid, representation_vector

log = logging.getLogger(__name__)

TARGET_KINDS = (RepresentationKind.STACK, RepresentationKind.VOXEL, RepresentationKind.EST)
TARGET_NAMES = tuple(f"target_{int(k)}" for k in TARGET_KINDS)


@dataclass
class AdaptConfig:
    windows: int = 4
    bins: int = 4
    count_threshold: int = 500
    batch_size: int = 32
    lr: float = 5e-5
    lr_decay_steps: Optional[int] = None  # default: all adaptation steps
    weight_decay: float = 0.01
    epochs: int = 30
    seed: int = 0
    # pretraining
    source_epochs: int = 60
    source_lr: float = 1e-3
    source_shift: int = 2  # max pixel translation during source pretraining
    source_noise: float = 0.0  # std of additive pixel noise during source pretraining
    recon_epochs: int = 30
    recon_lr: float = 1e-3
    recon_tau_us: float = 20_000.0
    # architectures
    source_hidden: list[int] = field(default_factory=lambda: [64])
    target_hidden: list[int] = field(default_factory=lambda: [64])
    recon_hidden: list[int] = field(default_factory=lambda: [128])
    # language / vision features
    text_bank: Optional[str] = None
    visual_bank: Optional[str] = None
    stub_feature_dim: int = 32
    kd_temperature: float = 1.0
    weights: dict = field(default_factory=lambda: LossWeights().as_dict())
    source_checkpoint: Optional[str] = None
    recon_checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.windows < 2:
            raise InvalidConfig("need an anchor window plus at least one other window")
        if self.bins < 1 or self.batch_size < 1 or self.count_threshold < 1:
            raise InvalidConfig("bins, batch_size and count_threshold must be >= 1")
        if isinstance(self.weights, LossWeights):
            self.weights = self.weights.as_dict()
        unknown = set(self.weights) - set(TERMS)
        if unknown:
            raise InvalidConfig(f"unknown loss terms in weights: {sorted(unknown)}")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.weights)

    def replace(self, **changes) -> "AdaptConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "AdaptConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "AdaptConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --- cached model inputs --------------------------------------------------

@dataclass
class PreparedStreams:
    """Per-stream model inputs, computed once; everything here is label-free
    except ``labels``, which is only read by evaluation."""

    ids: list[str]
    windows: np.ndarray  # (n, W, H*W*B) voxel grids of each window
    reps: dict  # RepresentationKind -> (n, dim)
    baseline: np.ndarray  # (n, H*W) channel-averaged full-stream voxel grid
    labels: np.ndarray  # (n,), -1 where unknown
    height: int
    width: int

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "PreparedStreams":
        idx = np.asarray(idx)
        return PreparedStreams([self.ids[i] for i in idx], self.windows[idx],
                               {k: v[idx] for k, v in self.reps.items()},
                               self.baseline[idx], self.labels[idx], self.height, self.width)


def channel_average(voxel: np.ndarray, out_hw: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Average a (H, W, B) voxel grid over bins, block-resizing to ``out_hw``."""
    img = voxel.mean(axis=2)
    if out_hw is None or out_hw == img.shape:
        return img
    h, w = out_hw
    ys = (np.arange(h) * img.shape[0] // h)
    xs = (np.arange(w) * img.shape[1] // w)
    return img[np.ix_(ys, xs)]


def _unit_peak(v: np.ndarray) -> np.ndarray:
    """Scale so the largest magnitude is 1; raw accumulations grow with event count."""
    peak = np.abs(v).max()
    return v / peak if peak > 0 else v


def prepare_streams(streams: Sequence[EventStream], config: AdaptConfig,
                    ids: Optional[Sequence[str]] = None) -> PreparedStreams:
    if not streams:
        raise EmptyDataset("no streams to prepare")
    h, w = streams[0].height, streams[0].width
    ids = list(ids) if ids is not None else [str(i) for i in range(len(streams))]
    windows, reps, base, labels = [], {k: [] for k in TARGET_KINDS}, [], []
    for s in streams:
        if (s.height, s.width) != (h, w):
            raise ShapeMismatch("all streams must share one sensor size")
        s = s.time_sorted()
        windows.append([build_voxel_grid(win, config.bins).data.reshape(-1)
                        for win in split_windows(s, config.windows)])
        for k in TARGET_KINDS:
            v = representation_vector(s, k, config.bins, config.count_threshold)
            reps[k].append(v if k is RepresentationKind.STACK else _unit_peak(v))
        base.append(channel_average(build_voxel_grid(s, config.bins).data).reshape(-1))
        labels.append(-1 if s.label is None else s.label)
    return PreparedStreams(ids, np.asarray(windows), {k: np.asarray(v) for k, v in reps.items()},
                           np.asarray(base), np.asarray(labels, dtype=np.int64), h, w)


def _batches(n: int, batch_size: int, rng: Optional[np.random.Generator]):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# --- phase 1: source model ------------------------------------------------

def _shift_frames(frames: np.ndarray, rng: np.random.Generator, max_shift: int) -> np.ndarray:
    if max_shift <= 0:
        return frames
    out = np.empty_like(frames)
    h, w = frames.shape[1:]
    for i, f in enumerate(frames):
        out[i] = f.min()  # uncovered border takes the background level
        dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
        out[i, max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
            f[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
    return out


def pretrain_source(frames: np.ndarray, labels: np.ndarray, config: AdaptConfig,
                    num_classes: Optional[int] = None, patience: int = 5) -> tuple[Classifier, list[dict]]:
    """Cross-entropy training on labelled source-modality frames."""
    frames = np.asarray(frames, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(frames) == 0:
        raise EmptyDataset("no source frames")
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    if labels.max() >= k:
        raise InvalidConfig(f"label {labels.max()} does not fit {k} classes")
    n = len(frames)
    flat_dim = int(np.prod(frames.shape[1:]))
    model = Classifier(ClassifierConfig(flat_dim, config.source_hidden, k), seed=config.seed * 7919 + 11)
    opt = AdamW(model.params, config.source_lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 101])
    flat = frames.reshape(n, -1)
    history, best, stale = [], np.inf, 0
    for epoch in range(config.source_epochs):
        losses = []
        for idx in _batches(n, config.batch_size, rng):
            x = _shift_frames(frames[idx], rng, config.source_shift).reshape(len(idx), -1)
            if config.source_noise > 0:
                x = x + rng.normal(0.0, config.source_noise, size=x.shape)
            opt.zero_grad()
            _, logits = model(x)
            loss = ad.cross_entropy(logits, labels[idx])
            losses.append(loss.item())
            ad.backward(loss)
            opt.step()
        acc = float(np.mean(model.predict(flat) == labels))
        epoch_loss = float(np.mean(losses))
        history.append({"epoch": epoch + 1, "loss": epoch_loss, "train_accuracy": acc})
        # plateau: no 1% relative loss improvement for `patience` epochs
        if epoch_loss < 0.99 * best:
            best, stale = epoch_loss, 0
        else:
            stale += 1
        if stale >= patience:
            break
    return model, history


# --- phase 2: reconstruction ----------------------------------------------

def reconstruction_pairs(streams: Sequence[EventStream], config: AdaptConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-window (flattened voxel grid, leaky-integration target) pairs."""
    xs, ys = [], []
    for s in streams:
        for win in split_windows(s.time_sorted(), config.windows):
            xs.append(build_voxel_grid(win, config.bins).data.reshape(-1))
            ys.append(leaky_integration_target(win, config.recon_tau_us).reshape(-1))
    return np.asarray(xs), np.asarray(ys)


def recon_mse(net: ReconstructionNet, x: np.ndarray, y: np.ndarray) -> float:
    with ad.no_grad():
        return ad.mse(net(x), y).item()


def pretrain_reconstruction(streams: Sequence[EventStream], config: AdaptConfig,
                            epochs: Optional[int] = None) -> tuple[ReconstructionNet, list[dict]]:
    """Self-supervised fit of the voxel-to-frame map (no labels are read)."""
    if not streams:
        raise EmptyDataset("no event streams")
    x, y = reconstruction_pairs(streams, config)
    s0 = streams[0]
    net = ReconstructionNet(ReconConfig(s0.height, s0.width, config.bins, config.recon_hidden),
                            seed=config.seed * 7919 + 23)
    opt = AdamW(net.params, config.recon_lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 202])
    history = [{"epoch": 0, "mse": recon_mse(net, x, y)}]
    for epoch in range(config.recon_epochs if epochs is None else epochs):
        for idx in _batches(len(x), config.batch_size * config.windows, rng):
            opt.zero_grad()
            ad.backward(ad.mse(net(x[idx]), y[idx]))
            opt.step()
        history.append({"epoch": epoch + 1, "mse": recon_mse(net, x, y)})
    return net, history


# --- phase 3: joint adaptation --------------------------------------------

GROUPS = ("recon", "source", "target")


@dataclass
class TrainState:
    recon: ReconstructionNet
    source: Classifier
    targets: list[Classifier]
    optimizers: dict
    step: int = 0
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def group_params(self, group: str) -> list[ad.Parameter]:
        if group == "recon":
            return list(self.recon.params)
        if group == "source":
            return list(self.source.params)
        return [p for t in self.targets for p in t.params]

    def all_params(self) -> list[ad.Parameter]:
        return [p for g in GROUPS for p in self.group_params(g)]

    def zero_grad(self) -> None:
        for p in self.all_params():
            p.zero_grad()

    # serialisation: every parameter, its moments and the counters/rng
    def _named(self):
        yield "recon", self.recon
        yield "source", self.source
        for name, t in zip(TARGET_NAMES, self.targets):
            yield name, t

    def to_checkpoint(self) -> Checkpoint:
        tensors, configs = {}, {}
        for prefix, model in self._named():
            configs[prefix] = dataclasses.asdict(model.config)
            for p in model.params:
                tensors[f"{prefix}/{p.name}"] = p.values.copy()
                tensors[f"{prefix}/{p.name}#m"] = p.m.copy()
                tensors[f"{prefix}/{p.name}#v"] = p.v.copy()
        meta = {"kind": "train_state", "configs": configs, "step": self.step, "epoch": self.epoch,
                "optimizer_steps": {g: o.t for g, o in self.optimizers.items()},
                "rng": self.rng.bit_generator.state}
        return Checkpoint(tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: AdaptConfig) -> "TrainState":
        meta = ckpt.meta
        recon = ReconstructionNet(ReconConfig(**meta["configs"]["recon"]))
        source = Classifier(ClassifierConfig(**meta["configs"]["source"]))
        targets = [Classifier(ClassifierConfig(**meta["configs"][n])) for n in TARGET_NAMES]
        state = _new_state(recon, source, targets, config)
        for prefix, model in state._named():
            for p in model.params:
                p.values[...] = ckpt.tensors[f"{prefix}/{p.name}"]
                p.m[...] = ckpt.tensors[f"{prefix}/{p.name}#m"]
                p.v[...] = ckpt.tensors[f"{prefix}/{p.name}#v"]
        state.step, state.epoch = meta["step"], meta["epoch"]
        for g, t in meta["optimizer_steps"].items():
            state.optimizers[g].t = t
        state.rng.bit_generator.state = meta["rng"]
        return state


def _new_state(recon, source, targets, config: AdaptConfig) -> TrainState:
    tmp = TrainState(recon, source, targets, {})
    tmp.optimizers = {g: AdamW(tmp.group_params(g), config.lr, weight_decay=config.weight_decay)
                      for g in GROUPS}
    tmp.rng = np.random.default_rng([config.seed, 303])
    return tmp


def init_state(recon: ReconstructionNet, source: Classifier, config: AdaptConfig,
               input_dims: dict) -> TrainState:
    """Fresh target classifiers around copies of the pretrained networks."""
    recon_copy = ReconstructionNet(recon.config)
    recon_copy.load_state_dict(recon.state_dict())
    source_copy = Classifier(source.config)
    source_copy.load_state_dict(source.state_dict())
    k = source.config.num_classes
    targets = [Classifier(ClassifierConfig(input_dims[kind], config.target_hidden, k),
                          seed=config.seed * 7919 + 31 + int(kind))
               for kind in TARGET_KINDS]
    return _new_state(recon_copy, source_copy, targets, config)


@dataclass
class FeatureProviders:
    text: TextFeatureBank
    visual: object  # RandomProjectionEmbedder | PrecomputedEmbedder


def build_feature_providers(config: AdaptConfig, class_names: Sequence[str],
                            frame_dim: int) -> FeatureProviders:
    if config.text_bank:
        text = load_feature_bank(config.text_bank, expected_k=len(class_names))
        if not isinstance(text, TextFeatureBank):
            raise InvalidConfig(f"{config.text_bank} is not a text feature bank")
    else:
        text = stub_text_features(class_names, max(config.stub_feature_dim, len(class_names)), config.seed)
    if config.visual_bank:
        visual = load_feature_bank(config.visual_bank)
        if not isinstance(visual, PrecomputedEmbedder):
            raise InvalidConfig(f"{config.visual_bank} is not a visual feature bank")
    else:
        visual = RandomProjectionEmbedder(frame_dim, config.stub_feature_dim, config.seed)
    return FeatureProviders(text, visual)


def forward_components(state: TrainState, batch: PreparedStreams, config: AdaptConfig,
                       features: FeatureProviders, routed: bool = True,
                       terms: Optional[set] = None) -> dict[str, ad.Tensor]:
    """Build every requested loss term for one batch.

    With ``routed`` the graph itself blocks cross-group gradients. Without it
    all paths are live and routing must be applied as backward masks.
    """
    terms = set(ROUTES) if terms is None else set(terms)
    n, w = batch.windows.shape[:2]
    out: dict[str, ad.Tensor] = {}
    need_source = terms & {"L_R", "L_VKD", "L_PKD", "L_TC", "L_Sup"}

    if need_source:
        frames = state.recon(batch.windows.reshape(n * w, -1))
        x_a = ad.take_rows(frames, np.arange(n) * w)
        src_a = x_a.detach() if routed else x_a
        f_s, logits_a = state.source(src_a)
        if "L_R" in terms:
            logits_r = state.source(x_a, frozen=True)[1] if routed else logits_a
            out["L_R"] = loss_r(logits_r)
        if "L_TC" in terms:
            other_rows = np.concatenate([np.arange(n) * w + o for o in range(1, w)])
            x_o = ad.take_rows(frames, other_rows)
            if routed:
                x_o = x_o.detach()
            _, logits_o = state.source(x_o)
            others = [ad.take_rows(logits_o, np.arange(n) + i * n) for i in range(w - 1)]
            out["L_TC"] = loss_tc(logits_a, others)
        if terms & {"L_VKD", "L_PKD"}:
            f_vis = features.visual.embed(x_a.values, batch.ids)
            if "L_VKD" in terms:
                out["L_VKD"] = loss_vkd(f_s, f_vis, config.kd_temperature)
            if "L_PKD" in terms:
                out["L_PKD"] = loss_pkd(ad.softmax_rows(logits_a), features.text, config.kd_temperature)

    if terms & {"L_EN", "L_PC", "L_Sup"}:
        t_logits = [model(batch.reps[kind])[1] for model, kind in zip(state.targets, TARGET_KINDS)]
        if "L_EN" in terms:
            out["L_EN"] = loss_en(t_logits)
        if "L_PC" in terms:
            out["L_PC"] = loss_pc(t_logits)
        if "L_Sup" in terms:
            sup = None
            for tl in t_logits:
                term = loss_sup(tl, logits_a)
                sup = term if sup is None else ad.add(sup, term)
            out["L_Sup"] = sup
    return out


def active_groups(weights: LossWeights) -> set[str]:
    return {ROUTES[t] for t in ROUTES if weights.enabled(t)}


def _total_steps(config: AdaptConfig, n_train: int) -> int:
    if config.lr_decay_steps is not None:
        return config.lr_decay_steps
    return config.epochs * -(-n_train // config.batch_size)


def adapt_step(batch: PreparedStreams, state: TrainState, config: AdaptConfig,
               features: FeatureProviders, total_steps: Optional[int] = None) -> LossReport:
    """One joint update of every parameter group that has an enabled term."""
    weights = config.loss_weights
    enabled = {t for t in ROUTES if weights.enabled(t)}
    state.zero_grad()
    comps = forward_components(state, batch, config, features, routed=True, terms=enabled)
    total, report = loss_all(comps, weights, step=state.step)
    if enabled:
        ad.backward(total)
    ad.active_tape().clear()
    lr = linear_decay(state.step, total_steps or config.lr_decay_steps or 0, config.lr)
    for group in sorted(active_groups(weights)):
        state.optimizers[group].step(lr)
    state.step += 1
    return report


# --- evaluation -----------------------------------------------------------

def evaluate(model: Classifier, inputs: np.ndarray, labels: np.ndarray, k: int) -> MetricsReport:
    """Accuracy / macro recall / macro F1 of ``model`` (argmax ties -> lowest class)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptyTestSet("nothing to evaluate")
    return metrics_report(labels, model.predict(inputs), k)


def evaluate_target(state: TrainState, data: PreparedStreams, kind=RepresentationKind.VOXEL) -> MetricsReport:
    kind = RepresentationKind.parse(kind)
    model = state.targets[TARGET_KINDS.index(kind)]
    return evaluate(model, data.reps[kind], data.labels, model.config.num_classes)


def evaluate_baseline(source: Classifier, data: PreparedStreams) -> MetricsReport:
    """Pretrained source model applied to channel-averaged voxel grids."""
    return evaluate(source, data.baseline, data.labels, source.config.num_classes)


def anchor_probs(state: TrainState, data: PreparedStreams) -> np.ndarray:
    n, w = data.windows.shape[:2]
    with ad.no_grad():
        x_a = state.recon(data.windows[:, 0])
        _, logits = state.source(x_a)
        return ad.softmax_rows(logits).values


def diagnostics(state: TrainState, train: PreparedStreams, test: PreparedStreams) -> dict:
    """Label-free training signals plus test metrics for every target model."""
    p = anchor_probs(state, train)
    entropy = float(-(p * np.log(np.clip(p, 1e-300, None))).sum(axis=1).mean())
    preds = np.stack([state.targets[i].predict(test.reps[k]) for i, k in enumerate(TARGET_KINDS)])
    agreement = float(np.mean((preds[0] == preds[1]) & (preds[1] == preds[2])))
    out = {"anchor_entropy": entropy, "agreement": agreement}
    for name, kind in zip(TARGET_NAMES, TARGET_KINDS):
        out[name] = evaluate_target(state, test, kind).to_dict()
    test_anchor = anchor_probs(state, test).argmax(axis=1)
    out["source_on_anchor_accuracy"] = float(np.mean(test_anchor == test.labels))
    return out


@dataclass
class AdaptResult:
    state: TrainState
    history: list[dict]
    initial: dict
    reports: list[LossReport]
    best_epoch: int
    best_targets: list[dict]


def adapt_run(train: PreparedStreams, test: PreparedStreams, state: TrainState, config: AdaptConfig,
              features: FeatureProviders, epochs: Optional[int] = None,
              on_report: Optional[Callable[[LossReport], None]] = None,
              on_epoch: Optional[Callable[[dict], None]] = None) -> AdaptResult:
    """Epochs of ``adapt_step`` over seeded shuffles of the train split.

    ``epochs`` limits how many epochs run in this call (for resuming); the
    learning-rate schedule always spans ``config.epochs``.
    """
    if len(train) == 0:
        raise EmptyDataset("empty train split")
    total = _total_steps(config, len(train))
    initial = diagnostics(state, train, test)
    history, reports = [], []
    best_acc, best_epoch = -1.0, state.epoch
    best_targets = [t.state_dict() for t in state.targets]
    stop = config.epochs if epochs is None else min(config.epochs, state.epoch + epochs)
    while state.epoch < stop:
        for idx in _batches(len(train), config.batch_size, state.rng):
            report = adapt_step(train.subset(idx), state, config, features, total)
            reports.append(report)
            if on_report:
                on_report(report)
        state.epoch += 1
        record = {"epoch": state.epoch, **diagnostics(state, train, test)}
        history.append(record)
        if on_epoch:
            on_epoch(record)
        acc = record["target_2"]["accuracy"]
        if acc > best_acc:
            best_acc, best_epoch = acc, state.epoch
            best_targets = [t.state_dict() for t in state.targets]
        log.info("epoch %d voxel acc %.3f anchor H %.3f", state.epoch, acc, record["anchor_entropy"])
    return AdaptResult(state, history, initial, reports, best_epoch, best_targets)
