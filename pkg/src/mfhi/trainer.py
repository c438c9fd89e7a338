"""Episodic training: sampler, optimizer, checkpoints and the fit loop."""
from __future__ import annotations

import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor
from .config import config_hash
from .dataset import ConfigurationError, Dataset, category_vectors
from .losses import DcmConfig, EpisodeBatch, cea_loss, dcm_loss
from .model import MfhiModel, ModelSpec
from .prototypes import hidden_size_for, prototype
from .tensor_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
LOG_HEADER = "episode\tcea\tdcm\ttotal"
LOG_HEADER_LINES = 2  # config-hash comment, column names


class TrainingAbort(RuntimeError):
    """A loss term went non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "i2a"
    episodes: int = 2000
    n_way: int = 16
    shots: int = 4
    r: float = 32.0
    d: float = 0.3
    top_d: int = 10
    lr: float = 1e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_biases: bool = False
    seed: int = 0
    checkpoint_every: int = 0
    cea_weight: float = 1.0
    dcm_weight: float = 1.0
    attention: bool = True
    normalize_attention: bool = True
    hidden: int = 0  # 0 -> derived from the feature size
    stability: str = "arcface-fallback"

    def __post_init__(self):
        if self.mode not in ("i2a", "i2i"):
            raise ConfigurationError(f"mode must be i2a or i2i, got {self.mode!r}")
        if self.episodes < 0 or self.n_way < 2 or self.shots < 1:
            raise ConfigurationError("need episodes >= 0, n_way >= 2 and shots >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigurationError("learning rate and weight decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("moment coefficients must lie in [0, 1)")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0")
        try:
            self.dcm_config()
        except ValueError as err:
            raise ConfigurationError(str(err)) from None

    def dcm_config(self) -> DcmConfig:
        return DcmConfig(self.r, self.d, self.stability)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"unknown training settings: {sorted(unknown)}")
        return cls(**values)


# ---------------------------------------------------------------------------
# Training data and episodes


@dataclass
class TrainData:
    """Training split arranged by class (identity, or semantic id for reid-style)."""

    features: np.ndarray
    attributes: np.ndarray
    labels: np.ndarray
    classes: np.ndarray
    class_vectors: np.ndarray
    members: list
    identities: list

    @classmethod
    def from_dataset(cls, ds: Dataset, mode: str = "i2a") -> "TrainData":
        idx = ds.indices("train")
        if idx.size == 0:
            raise ConfigurationError("dataset has no training images")
        use_semantic = ds.manifest.flavor == "reid-style" and mode == "i2a"
        labels = ds.class_labels(use_semantic)[idx]
        attrs = ds.attributes[idx]
        classes, vectors = category_vectors(attrs, labels)
        members = [np.flatnonzero(labels == c) for c in classes]
        return cls(
            features=ds.features[idx],
            attributes=attrs,
            labels=labels,
            classes=classes,
            class_vectors=vectors.astype(np.float32),
            members=members,
            identities=sorted(set(ds.identities[idx].tolist())),
        )

    @property
    def num_classes(self) -> int:
        return len(self.classes)


@dataclass
class Episode:
    features: np.ndarray  # B x C x H x W
    attributes: np.ndarray  # B x Q image-level targets
    category: np.ndarray  # N x Q category-level vectors
    labels: np.ndarray  # B, episode-local 0..N-1
    class_rows: np.ndarray  # N, row of each episode class in TrainData.classes


def sample_episode(data: TrainData, cfg: TrainConfig, rng: np.random.Generator) -> Episode:
    """Draw ``n_way`` classes uniformly without replacement and ``shots`` images of each."""
    k = data.num_classes
    if cfg.n_way > k:
        raise ConfigurationError(f"episode needs {cfg.n_way} classes but only {k} are seen in training")
    rows = rng.choice(k, size=cfg.n_way, replace=False)
    picks, labels = [], []
    for local, row in enumerate(rows):
        members = data.members[row]
        replace = members.size < cfg.shots
        picks.append(members[rng.choice(members.size, size=cfg.shots, replace=replace)])
        labels.append(np.full(cfg.shots, local))
    sel = np.concatenate(picks)
    return Episode(
        features=data.features[sel],
        attributes=data.attributes[sel],
        category=data.class_vectors[rows],
        labels=np.concatenate(labels),
        class_rows=rows,
    )


# ---------------------------------------------------------------------------
# Optimizer


class Adam:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0, decay_biases: bool = False):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.decay_biases = decay_biases
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    @staticmethod
    def is_bias(name: str) -> bool:
        return name.rsplit(".", 1)[-1] in ("bias", "b1", "b2")

    def step(self, params: dict) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and (self.decay_biases or not self.is_bias(name)):
                p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# One step


@dataclass
class StepResult:
    cea: float
    dcm: float
    total: float


def episode_losses(model: MfhiModel, ep: Episode, cfg: TrainConfig, step: int = 0):
    """Forward pass on one episode; returns (total, cea, dcm) tensors."""
    stage = "embedding"
    try:
        out = model.embed(Tensor(ep.features.astype(model.dtype, copy=False)))
        stage = "prototypes"
        if model.spec.mode == "i2a":
            protos = prototype(Tensor(ep.category.astype(model.dtype, copy=False)), model.mlp)
        else:
            protos = model.fc_rows(ep.class_rows).prototypes
        batch = EpisodeBatch(out.feature, ep.labels, protos, ep.attributes, out.scores)
        stage = "cea"
        cea = cea_loss(out.scores, ep.attributes)
        stage = "dcm"
        dcm = dcm_loss(batch, cfg.dcm_config())
        stage = "total"
        total = cea * cfg.cea_weight + dcm * cfg.dcm_weight
    except NonFiniteError as err:
        raise TrainingAbort(f"non-finite value in {stage} at step {step}: {err}") from err
    return total, cea, dcm


def train_step(model: MfhiModel, opt: Adam, ep: Episode, cfg: TrainConfig) -> StepResult:
    for p in model.params.values():
        p.grad = None
    with Tape() as tape:
        total, cea, dcm = episode_losses(model, ep, cfg, opt.step_count)
    tape.backward(total)
    for name, p in model.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingAbort(f"non-finite gradient for {name} at step {opt.step_count}")
    opt.step(model.params)
    return StepResult(cea.item(), dcm.item(), total.item())


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    model: MfhiModel
    optimizer: Adam
    config: TrainConfig
    episode: int
    rng_state: dict
    meta: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.meta.get("config_hash", "")


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    tdir = path / "tensors"
    tdir.mkdir(parents=True, exist_ok=True)
    entries = []
    groups = [("", ckpt.model.params), ("adam.m.", ckpt.optimizer.m), ("adam.v.", ckpt.optimizer.v)]
    for prefix, table in groups:
        for name, value in table.items():
            arr = value.data if isinstance(value, Tensor) else value
            rel = f"tensors/{prefix}{name}.mft"
            write_tensor(path / rel, arr)
            entries.append({"name": prefix + name, "shape": list(arr.shape), "file": rel})
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": ckpt.config.to_dict(),
        "model": ckpt.model.spec_dict(),
        "episode": ckpt.episode,
        "optimizer_step": ckpt.optimizer.step_count,
        "rng_state": ckpt.rng_state,
        "tensors": entries,
        **ckpt.meta,
    }
    (path / "checkpoint.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        doc = json.loads((path / "checkpoint.json").read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"no checkpoint at {path}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    cfg = TrainConfig.from_dict(doc["config"])
    spec = ModelSpec(**doc["model"])
    arrays = {}
    for entry in doc["tensors"]:
        arr = read_tensor(path / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"{entry['file']}: shape {arr.shape} does not match manifest {entry['shape']}")
        arrays[entry["name"]] = arr
    params = {}
    for name in [e["name"] for e in doc["tensors"] if not e["name"].startswith("adam.")]:
        params[name] = Tensor(arrays[name].copy(), requires_grad=True, name=name)
    model = MfhiModel(spec, params)
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay, cfg.decay_biases)
    opt.step_count = int(doc["optimizer_step"])
    for name in params:
        opt.m[name] = arrays[f"adam.m.{name}"].copy()
        opt.v[name] = arrays[f"adam.v.{name}"].copy()
    reserved = {"format", "config", "model", "episode", "optimizer_step", "rng_state", "tensors"}
    meta = {k: v for k, v in doc.items() if k not in reserved}
    return Checkpoint(model, opt, cfg, int(doc["episode"]), doc["rng_state"], meta)


# ---------------------------------------------------------------------------
# Fit


def build_model(data: TrainData, feature_shape, cfg: TrainConfig, rng: np.random.Generator) -> MfhiModel:
    q = data.attributes.shape[1]
    c = int(feature_shape[0])
    spec = ModelSpec(
        num_attributes=q,
        channels=c,
        hidden=cfg.hidden or hidden_size_for(c, q),
        top_d=cfg.top_d,
        mode=cfg.mode,
        num_classes=data.num_classes if cfg.mode == "i2i" else 0,
        attention=cfg.attention,
        normalize_attention=cfg.normalize_attention,
    )
    return MfhiModel.initialize(spec, rng)


def _rngs(seed: int):
    init_seq, episode_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(episode_seq)


def _fmt(x: float) -> str:
    return repr(float(x))


def fit(ds: Dataset, cfg: TrainConfig, out_dir, resume_from=None, extra_meta: Optional[dict] = None) -> Checkpoint:
    """Run ``cfg.episodes`` training episodes and write checkpoints plus a log.

    ``out_dir/checkpoint`` holds the final state; with ``checkpoint_every = k``
    intermediate states go to ``out_dir/checkpoints/ep<episode>``.  The log
    ``train_log.tsv`` has one line per episode; wall-clock times go to the
    separate ``train_times.tsv`` so the main log stays reproducible.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = TrainData.from_dataset(ds, cfg.mode)
    if cfg.top_d > data.attributes.shape[1]:
        raise ConfigurationError(f"D={cfg.top_d} exceeds the number of attributes {data.attributes.shape[1]}")
    meta = {
        "config_hash": config_hash(cfg.to_dict()),
        "train_identities": data.identities,
        "train_classes": data.classes.tolist(),
        "dataset": {
            "num_attributes": ds.num_attributes,
            "feature_shape": list(ds.feature_shape),
            "flavor": ds.manifest.flavor,
        },
    }
    if extra_meta:
        meta.update(extra_meta)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config != cfg:
            raise ConfigurationError("resume checkpoint was written with a different training config")
        model, opt, start = ckpt.model, ckpt.optimizer, ckpt.episode
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
    else:
        init_rng, rng = _rngs(cfg.seed)
        model = build_model(data, ds.feature_shape, cfg, init_rng)
        opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay, cfg.decay_biases)
        start = 0

    log_path = out / "train_log.tsv"
    times_path = out / "train_times.tsv"
    stamp = f"# config_hash {meta['config_hash']}"
    lines = [stamp, LOG_HEADER]
    time_lines = [stamp, "episode\twall_time"]
    if start and log_path.exists():
        lines = log_path.read_text().splitlines()[: start + LOG_HEADER_LINES]
        if times_path.exists():
            time_lines = times_path.read_text().splitlines()[: start + LOG_HEADER_LINES]

    def snapshot(episode: int) -> Checkpoint:
        return Checkpoint(model, opt, cfg, episode, rng.bit_generator.state, dict(meta))

    t0 = time.perf_counter()
    with log_path.open("w") as log, times_path.open("w") as times:
        log.write("\n".join(lines) + "\n")
        times.write("\n".join(time_lines) + "\n")
        for episode in range(start + 1, cfg.episodes + 1):
            ep = sample_episode(data, cfg, rng)
            res = train_step(model, opt, ep, cfg)
            log.write(f"{episode}\t{_fmt(res.cea)}\t{_fmt(res.dcm)}\t{_fmt(res.total)}\n")
            times.write(f"{episode}\t{time.perf_counter() - t0:.3f}\n")
            if cfg.checkpoint_every and episode % cfg.checkpoint_every == 0 and episode < cfg.episodes:
                save_checkpoint(out / "checkpoints" / f"ep{episode:06d}", snapshot(episode))
            if episode % 500 == 0:
                logger.info("episode %d: cea %.4f dcm %.4f total %.4f", episode, res.cea, res.dcm, res.total)
    final = snapshot(max(cfg.episodes, start))
    target = out / "checkpoint"
    if target.exists():
        shutil.rmtree(target)
    save_checkpoint(target, final)
    return final


def read_log(path) -> list:
    """Parse ``train_log.tsv`` into a list of dicts."""
    rows = [r for r in Path(path).read_text().splitlines() if not r.startswith("#")]
    header = rows[0].split("\t")
    return [dict(zip(header, (int(v) if i == 0 else float(v) for i, v in enumerate(r.split("\t"))))) for r in rows[1:]]
