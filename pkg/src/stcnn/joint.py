"""Coupling of the spatial and temporal networks, and three-stage training.

The joint operator cross-correlates the predicted map with each frame
without padding. Since map and frame have equal extents this is one inner
product per frame, giving a length-T series. That series is standardized
and passed through the CAE; the whole chain is one compute graph, so the
temporal loss reaches the U-Net parameters.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .cae import TemporalCAE, temporal_loss
from .metrics import is_constant
from .optim import Adam
from .unet import UNet3D, spatial_loss
from .volume import Volume4D, parse_keyvalue

log = logging.getLogger(__name__)

STAGES = ("spatial_only", "temporal_only", "joint_finetune")
TRACE_COLUMNS = ("stage", "step", "spatial_loss", "temporal_loss", "joint_loss", "wall_ms")


class TrainingError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class Subject:
    """One training or test unit: a normalized volume and its labels."""

    name: str
    volume: Volume4D
    label_map: np.ndarray | None = None
    label_series: np.ndarray | None = None


@dataclass
class TrainConfig:
    stage1_steps: int = 400
    stage2_steps: int = 400
    stage3_steps: int = 200
    lr_spatial: float = 1e-3
    lr_temporal: float = 1e-3
    lr_finetune: float = 1e-4
    w_spatial: float = 10.0
    w_temporal: float = 1.0
    levels: int = 3
    base_channels: int = 8
    seed: int = 0
    checkpoint_every: int = 50

    def validate(self) -> None:
        if self.w_spatial < 0 or self.w_temporal < 0 or self.w_spatial + self.w_temporal <= 0:
            raise ValueError("loss weights must be non-negative and not both zero")
        for name in ("stage1_steps", "stage2_steps", "stage3_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        raw = parse_keyvalue(text)
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = set(raw) - set(kinds)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: (int(v) if kinds[k] in (int, "int") else float(v)) for k, v in raw.items()}
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


@dataclass
class TrainTrace:
    weights: tuple[float, float] = (10.0, 1.0)
    records: list[tuple] = field(default_factory=list)

    def append(self, stage: str, step: int, spatial: float, temporal: float, joint: float,
               wall_ms: float) -> None:
        if self.records and STAGES.index(stage) < STAGES.index(self.records[-1][0]):
            raise ValueError(f"stage {stage} cannot follow {self.records[-1][0]}")
        self.records.append((stage, step, spatial, temporal, joint, wall_ms))

    def extend(self, other: "TrainTrace") -> None:
        for rec in other.records:
            self.append(*rec)

    def column(self, name: str, stage: str | None = None) -> np.ndarray:
        i = TRACE_COLUMNS.index(name)
        return np.array([r[i] for r in self.records if stage is None or r[0] == stage], dtype=float)

    def to_csv(self, timings: bool = True) -> str:
        buf = io.StringIO()
        buf.write(f"# w_spatial = {self.weights[0]!r}\n# w_temporal = {self.weights[1]!r}\n")
        cols = TRACE_COLUMNS if timings else TRACE_COLUMNS[:-1]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for rec in self.records:
            stage, step, s, t, j, ms = rec
            row = [stage, step, repr(s), repr(t), repr(j)] + ([f"{ms:.1f}"] if timings else [])
            writer.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainTrace":
        lines = text.splitlines()
        meta = parse_keyvalue("\n".join(l[1:] for l in lines if l.startswith("#")))
        trace = cls((float(meta["w_spatial"]), float(meta["w_temporal"])))
        rows = list(csv.reader(l for l in lines if not l.startswith("#")))
        for row in rows[1:]:
            wall = float(row[5]) if len(row) > 5 else 0.0
            trace.append(row[0], int(row[1]), float(row[2]), float(row[3]), float(row[4]), wall)
        return trace


def moving_average(x, window: int = 20) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.size < window:
        return np.array([x.mean()]) if x.size else x
    return np.convolve(x, np.ones(window) / window, mode="valid")


# ---------------------------------------------------------------- forward


def joint_operator(volume, network_map) -> Tensor:
    """One value per frame: the frame's inner product with the map."""
    frames = np.asarray(getattr(volume, "data", volume))
    return ad.inner_per_frame(frames, network_map)


def forward_full(unet: UNet3D, cae: TemporalCAE, volume: Volume4D):
    """Return ``(map, raw_series, refined_series)`` as connected tensors.

    ``refined_series`` carries ``constant_input = True`` when the raw series
    is constant (e.g. a zero map).
    """
    net_map = unet(volume.data)
    raw = joint_operator(volume, net_map)
    refined = cae(ad.standardize(raw))
    refined.constant_input = is_constant(raw.data)
    return net_map, raw, refined


def infer(unet: UNet3D, cae: TemporalCAE, volume: Volume4D) -> tuple[np.ndarray, np.ndarray]:
    if volume.data.shape[0] != unet.in_channels:
        raise ad.DimensionError(f"model expects {unet.in_channels} frames, "
                                f"volume has {volume.data.shape[0]}")
    with no_grad():
        net_map, _, refined = forward_full(unet, cae, volume)
    return net_map.data.copy(), refined.data.copy()


# ---------------------------------------------------------------- training


def _order(n_subjects: int, steps: int, rng) -> list[int]:
    out: list[int] = []
    while len(out) < steps:
        out.extend(rng.permutation(n_subjects).tolist())
    return out[:steps]


def _check_finite(value: float, trace: TrainTrace, stage: str, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss in {stage} at step {step}", trace)


class _Checkpointer:
    def __init__(self, out_dir, every, models):
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.every = every
        self.models = models

    def __call__(self, stage: str, step: int, final: bool = False) -> None:
        if self.out_dir is None:
            return
        if final:
            for name, model in self.models.items():
                model.save(self.out_dir / f"{stage}.{name}.ckpt")
        elif self.every and step % self.every == 0:
            for name, model in self.models.items():
                model.save(self.out_dir / f"latest.{name}.ckpt")


def train_stage1(unet: UNet3D, dataset: list[Subject], cfg: TrainConfig,
                 checkpoint_dir=None) -> TrainTrace:
    """Fit the U-Net alone to the label maps with the MSE loss."""
    trace = TrainTrace((cfg.w_spatial, cfg.w_temporal))
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(unet.parameters(), lr=cfg.lr_spatial)
    save = _Checkpointer(checkpoint_dir, cfg.checkpoint_every, {"unet": unet})
    for step, idx in enumerate(_order(len(dataset), cfg.stage1_steps, rng), start=1):
        subj = dataset[idx]
        t0 = time.perf_counter()
        opt.zero_grad()
        loss = spatial_loss(unet(subj.volume.data), subj.label_map)
        value = loss.item()
        _check_finite(value, trace, STAGES[0], step)
        loss.backward()
        opt.step()
        trace.append(STAGES[0], step, value, float("nan"), value,
                     1e3 * (time.perf_counter() - t0))
        save(STAGES[0], step)
    save(STAGES[0], cfg.stage1_steps, final=True)
    return trace


def train_stage2(cae: TemporalCAE, unet: UNet3D, dataset: list[Subject], cfg: TrainConfig,
                 checkpoint_dir=None) -> TrainTrace:
    """Fit the CAE on joint-operator series of the frozen U-Net."""
    trace = TrainTrace((cfg.w_spatial, cfg.w_temporal))
    rng = np.random.default_rng([cfg.seed, 2])
    with no_grad():
        inputs = [ad.standardize(joint_operator(s.volume, unet(s.volume.data))).data
                  for s in dataset]
    opt = Adam(cae.parameters(), lr=cfg.lr_temporal)
    save = _Checkpointer(checkpoint_dir, cfg.checkpoint_every, {"cae": cae})
    for step, idx in enumerate(_order(len(dataset), cfg.stage2_steps, rng), start=1):
        t0 = time.perf_counter()
        opt.zero_grad()
        loss = temporal_loss(cae(inputs[idx]), dataset[idx].label_series)
        value = loss.item()
        _check_finite(value, trace, STAGES[1], step)
        loss.backward()
        opt.step()
        trace.append(STAGES[1], step, float("nan"), value, value,
                     1e3 * (time.perf_counter() - t0))
        save(STAGES[1], step)
    save(STAGES[1], cfg.stage2_steps, final=True)
    return trace


def joint_loss(unet, cae, subject: Subject, w_spatial: float, w_temporal: float):
    net_map, _, refined = forward_full(unet, cae, subject.volume)
    s_loss = spatial_loss(net_map, subject.label_map)
    t_loss = temporal_loss(refined, subject.label_series)
    total = ad.add(ad.scale(s_loss, w_spatial), ad.scale(t_loss, w_temporal))
    return total, s_loss, t_loss


def train_stage3(unet: UNet3D, cae: TemporalCAE, dataset: list[Subject], cfg: TrainConfig,
                 checkpoint_dir=None) -> TrainTrace:
    """Fine-tune both networks on the weighted sum of the two losses."""
    trace = TrainTrace((cfg.w_spatial, cfg.w_temporal))
    rng = np.random.default_rng([cfg.seed, 3])
    opt = Adam(unet.parameters() + cae.parameters(), lr=cfg.lr_finetune)
    save = _Checkpointer(checkpoint_dir, cfg.checkpoint_every, {"unet": unet, "cae": cae})
    for step, idx in enumerate(_order(len(dataset), cfg.stage3_steps, rng), start=1):
        t0 = time.perf_counter()
        opt.zero_grad()
        total, s_loss, t_loss = joint_loss(unet, cae, dataset[idx], cfg.w_spatial, cfg.w_temporal)
        value = total.item()
        _check_finite(value, trace, STAGES[2], step)
        total.backward()
        opt.step()
        trace.append(STAGES[2], step, s_loss.item(), t_loss.item(), value,
                     1e3 * (time.perf_counter() - t0))
        save(STAGES[2], step)
    save(STAGES[2], cfg.stage3_steps, final=True)
    return trace


class STCNN(BaseEstimator):
    """Joint spatio-temporal network identification.

    ``fit`` takes normalized volumes and ``(label_map, label_series)`` pairs
    and runs the three training stages in order. ``predict`` returns a
    ``(map, series)`` pair per volume.
    """

    def __init__(self, levels=3, base_channels=8, stage1_steps=400, stage2_steps=400,
                 stage3_steps=200, lr_spatial=1e-3, lr_temporal=1e-3, lr_finetune=1e-4,
                 w_spatial=10.0, w_temporal=1.0, seed=0, checkpoint_every=50):
        self.levels = levels
        self.base_channels = base_channels
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.stage3_steps = stage3_steps
        self.lr_spatial = lr_spatial
        self.lr_temporal = lr_temporal
        self.lr_finetune = lr_finetune
        self.w_spatial = w_spatial
        self.w_temporal = w_temporal
        self.seed = seed
        self.checkpoint_every = checkpoint_every

    @property
    def config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "STCNN":
        return cls(**asdict(cfg))

    def _dataset(self, X, y) -> list[Subject]:
        if y is None:
            return list(X)
        return [Subject(f"sub-{i:03d}", v, np.asarray(m, dtype=float), np.asarray(s, dtype=float))
                for i, (v, (m, s)) in enumerate(zip(X, y))]

    def fit(self, X, y=None, checkpoint_dir=None, stages=(1, 2, 3)):
        """``X``: volumes (or ``Subject`` records when ``y`` is None)."""
        cfg = self.config
        cfg.validate()
        data = self._dataset(X, y)
        if not data:
            raise ValueError("empty training set")
        n_frames = data[0].volume.n_frames
        if not hasattr(self, "unet_") or 1 in stages:
            self.unet_ = UNet3D(n_frames, cfg.levels, cfg.base_channels, seed=cfg.seed)
        if not hasattr(self, "cae_") or 2 in stages:
            self.cae_ = TemporalCAE(seed=cfg.seed + 1)
        self.trace_ = TrainTrace((cfg.w_spatial, cfg.w_temporal))
        if 1 in stages:
            self.trace_.extend(train_stage1(self.unet_, data, cfg, checkpoint_dir))
        if 2 in stages:
            self.trace_.extend(train_stage2(self.cae_, self.unet_, data, cfg, checkpoint_dir))
        if 3 in stages:
            self.trace_.extend(train_stage3(self.unet_, self.cae_, data, cfg, checkpoint_dir))
        return self

    def predict_one(self, volume: Volume4D) -> tuple[np.ndarray, np.ndarray]:
        return infer(self.unet_, self.cae_, volume)

    def predict(self, X) -> list[tuple[np.ndarray, np.ndarray]]:
        return [self.predict_one(getattr(v, "volume", v)) for v in X]

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.unet_.save(directory / "unet.ckpt")
        self.cae_.save(directory / "cae.ckpt")
        (directory / "config.txt").write_text(self.config.to_text())

    @classmethod
    def load(cls, directory) -> "STCNN":
        directory = Path(directory)
        cfg_file = directory / "config.txt"
        model = cls.from_config(TrainConfig.from_file(cfg_file)) if cfg_file.exists() else cls()
        model.unet_ = UNet3D.load(directory / "unet.ckpt")
        model.cae_ = TemporalCAE.load(directory / "cae.ckpt")
        return model
