"""Losses, class-balanced batch sampling, SGD training and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import (
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    DataError,
    DRFError,
)
from .model import DRFModel, EncoderConfig, ModelConfig
from .normalize import normalize_sequence
from .pav import MinMaxStats, RawPAV, apply_minmax, fit_minmax, raw_pav
from .pose_io import DEFAULT_C_MIN, PoseSequence
from .skeleton_map import RenderConfig, render_sequence
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DRFCKPT\x00"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")  # magic, version, metadata length


# ---------------------------------------------------------------- data


@dataclass
class Example:
    """A pose sequence turned into network inputs."""

    maps: np.ndarray  # (T, 2, Hm, W)
    raw_pav: RawPAV
    label: int
    subject_id: str


def prepare(seqs: Sequence[PoseSequence], render: RenderConfig, c_min: float = DEFAULT_C_MIN) -> list[Example]:
    out = []
    for s in seqs:
        norm = normalize_sequence(s, c_min)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            pav = raw_pav(norm, c_min)
        out.append(Example(render_sequence(norm, render), pav, s.label_id, s.subject_id))
    return out


def pav_batch(examples: Sequence[Example], stats: MinMaxStats) -> np.ndarray:
    return np.stack([apply_minmax(e.raw_pav, stats) for e in examples])


# ---------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    return T.softmax_xent(logits, np.atleast_1d(labels))


def triplet_mask(labels: Sequence[int]) -> np.ndarray:
    """(a, p, n) boolean mask of valid batch-all triplets."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(labels.size, dtype=bool)
    return pos[:, :, None] & ~same[:, None, :]


def triplet_loss(embeddings: Tensor, labels: Sequence[int], margin: float = 0.2) -> Tensor:
    """Batch-all triplet loss, averaged over strips and over every valid triplet.

    ``embeddings`` is (B, H, d); distances are Euclidean within each strip.
    """
    mask = triplet_mask(labels)
    n_valid = int(mask.sum())
    if n_valid == 0:
        warnings.warn("batch contains no valid triplet", RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
    b, h, _ = embeddings.shape
    dist = T.pairwise_l2(T.transpose(embeddings, (1, 0, 2)))  # (H, B, B)
    d_ap = dist.reshape(h, b, b, 1)
    d_an = dist.reshape(h, b, 1, b)
    hinge = T.relu(d_ap - d_an + margin)
    return T.tsum(hinge * mask.astype(np.float64)) * (1.0 / (h * n_valid))


# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    margin: float = 0.2
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    p: int = 3  # classes per batch
    k: int = 4  # sequences per class
    seed: int = 0
    guidance: str = "pav"
    channel_branch: bool = True
    spatial_branch: bool = True
    c_min: float = DEFAULT_C_MIN
    render: RenderConfig = field(default_factory=RenderConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    embed_dim: int = 64
    guidance_seed: int = 0

    def __post_init__(self):
        if isinstance(self.render, dict):
            self.render = RenderConfig.from_dict(self.render)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if not self.margin > 0:
            raise ValueError("margin must be > 0")
        if self.p < 2 or self.k < 2:
            raise ValueError("batches need p >= 2 classes and k >= 2 sequences per class")
        if self.epochs < 0 or self.lr < 0:
            raise ValueError("epochs and lr must be non-negative")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            encoder=self.encoder,
            embed_dim=self.embed_dim,
            guidance=self.guidance,
            guidance_seed=self.guidance_seed,
            channel_branch=self.channel_branch,
            spatial_branch=self.spatial_branch,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["render"] = self.render.to_dict()
        return d


# ---------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    stats: MinMaxStats
    render: RenderConfig
    model: ModelConfig
    c_min: float = DEFAULT_C_MIN
    meta: dict = field(default_factory=dict)

    def build_model(self) -> DRFModel:
        m = DRFModel(self.model, seed=self.meta.get("seed", 0))
        m.load_state_dict(self.state)
        return m


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Little-endian layout: magic, u32 version, u64 metadata length, JSON
    metadata (with a name/offset index), then raw float64 blobs."""
    index = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.state):
        arr = np.ascontiguousarray(ckpt.state[name], dtype="<f8")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    meta = {
        "tensors": index,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "stats": ckpt.stats.to_dict(),
        "render": ckpt.render.to_dict(),
        "model": ckpt.model.to_dict(),
        "c_min": ckpt.c_min,
        "meta": ckpt.meta,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    data = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(meta_bytes)) + meta_bytes + payload
    Path(path).write_bytes(data)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _HEADER.size:
        raise CheckpointTruncatedError(f"{path}: file shorter than the header")
    magic, version, meta_len = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a DRF checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    start = _HEADER.size
    if len(data) < start + meta_len:
        raise CheckpointTruncatedError(f"{path}: metadata block truncated")
    try:
        meta = json.loads(data[start : start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata ({exc})") from None
    payload = data[start + meta_len :]
    if len(payload) < meta["payload_bytes"]:
        raise CheckpointTruncatedError(f"{path}: {len(payload)} of {meta['payload_bytes']} payload bytes")
    if len(payload) > meta["payload_bytes"]:
        raise CheckpointError(f"{path}: trailing bytes after payload")
    if hashlib.sha256(payload).hexdigest() != meta["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    state = {}
    for entry in meta["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        state[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])
    return Checkpoint(
        state=state,
        stats=MinMaxStats.from_dict(meta["stats"]),
        render=RenderConfig.from_dict(meta["render"]),
        model=ModelConfig.from_dict(meta["model"]),
        c_min=meta["c_min"],
        meta=meta["meta"],
    )


# ---------------------------------------------------------------- training


class ClassBalancedSampler:
    """Yields index batches of ``p`` classes x ``k`` sequences, fixed by the seed."""

    def __init__(self, labels: Sequence[int], p: int, k: int, rng: np.random.Generator):
        self.labels = np.asarray(labels)
        self.classes = sorted(set(self.labels.tolist()))
        self.p = min(p, len(self.classes))
        self.k = k
        self.rng = rng
        self._queues = {c: [] for c in self.classes}

    def _take(self, c: int) -> list[int]:
        out = []
        while len(out) < self.k:
            if not self._queues[c]:
                members = np.flatnonzero(self.labels == c)
                self._queues[c] = self.rng.permutation(members).tolist()
            out.append(self._queues[c].pop())
        return out

    def epoch(self) -> list[list[int]]:
        n_batches = math.ceil(len(self.labels) / (self.p * self.k))
        batches = []
        for _ in range(n_batches):
            if self.p == len(self.classes):
                chosen = self.classes
            else:
                chosen = sorted(self.rng.choice(self.classes, self.p, replace=False).tolist())
            batch = []
            for c in chosen:
                batch.extend(self._take(c))
            batches.append(batch)
        return batches


class SGD:
    """SGD with momentum: v <- mu v + g; w <- w - lr v."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v

    def zero_grad(self) -> None:
        T.zero_grad(self.params)


def batch_loss(model: DRFModel, batch: Sequence[Example], stats: MinMaxStats, margin: float):
    labels = [e.label for e in batch]
    pavs = pav_batch(batch, stats) if model.cfg.guidance == "pav" else None
    out = model([e.maps for e in batch], pavs)
    l_ce = cross_entropy(out.logits, labels)
    l_tri = triplet_loss(out.embeddings, labels, margin)
    return l_ce + l_tri, l_ce, l_tri, out


def predict(model: DRFModel, examples: Sequence[Example], stats: MinMaxStats, batch_size: int = 16) -> np.ndarray:
    """(N, 3) logits."""
    logits = []
    with T.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i : i + batch_size]
            pavs = pav_batch(chunk, stats) if model.cfg.guidance == "pav" else None
            logits.append(model([e.maps for e in chunk], pavs).logits.data)
    return np.concatenate(logits)


def accuracy(model: DRFModel, examples: Sequence[Example], stats: MinMaxStats) -> float:
    pred = predict(model, examples, stats).argmax(axis=1)
    return float(np.mean(pred == np.array([e.label for e in examples])))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    model: DRFModel


def train(data: Sequence[PoseSequence] | Sequence[Example], cfg: TrainConfig) -> TrainResult:
    """Train a model end to end; PAV min-max statistics are fit on ``data``."""
    examples = list(data)
    if not examples:
        raise DataError("empty training set")
    if isinstance(examples[0], PoseSequence):
        examples = prepare(examples, cfg.render, cfg.c_min)
    labels = [e.label for e in examples]
    if len(set(labels)) < 2:
        raise DataError("training needs at least two classes")

    stats = fit_minmax([e.raw_pav for e in examples], split="train")
    rng = np.random.default_rng(cfg.seed)
    model = DRFModel(cfg.model_config(), seed=int(rng.integers(0, 2**31 - 1)))
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum)
    sampler = ClassBalancedSampler(labels, cfg.p, cfg.k, rng)

    history = []
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(2)
        correct = seen = 0
        batches = sampler.epoch()
        for step, idx in enumerate(batches):
            batch = [examples[i] for i in idx]
            loss, l_ce, l_tri, out = batch_loss(model, batch, stats, cfg.margin)
            if not math.isfinite(loss.item()):
                raise DRFError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            T.backward(loss)
            gnorm = math.sqrt(sum(float((p.grad**2).sum()) for p in opt.params if p.grad is not None))
            if not math.isfinite(gnorm):
                raise DRFError(f"non-finite gradient at epoch {epoch}, step {step}")
            opt.step()
            sums += (l_ce.item(), l_tri.item())
            correct += int((out.logits.data.argmax(axis=1) == np.array([e.label for e in batch])).sum())
            seen += len(batch)
        row = {
            "epoch": epoch,
            "l_ce": float(sums[0] / len(batches)),
            "l_triplet": float(sums[1] / len(batches)),
            "train_acc": correct / seen,
        }
        history.append(row)
        log.info("epoch %d  l_ce=%.4f  l_triplet=%.4f  acc=%.3f", epoch, row["l_ce"], row["l_triplet"], row["train_acc"])

    final_acc = accuracy(model, examples, stats)
    meta = {"seed": model.seed, "train_seed": cfg.seed, "epoch": cfg.epochs, "final_train_acc": final_acc, "train_config": cfg.to_dict()}
    ckpt = Checkpoint({k: v.copy() for k, v in model.state_dict().items()}, stats, cfg.render, model.cfg, cfg.c_min, meta)
    return TrainResult(ckpt, history, model)


def log_to_csv(history: Sequence[dict]) -> str:
    lines = ["epoch,l_ce,l_triplet,train_acc"]
    for r in history:
        lines.append(f"{r['epoch']},{r['l_ce']!r},{r['l_triplet']!r},{r['train_acc']!r}")
    return "\n".join(lines) + "\n"
