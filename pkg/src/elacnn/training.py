"""Training loop, evaluation, prediction, model archives and metric history."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import DatasetManifest, ElaCache, batches, load_batch, split_stratified
from .ela import ElaConfig, ela_transform, load_image
from .errors import (ArchitectureMismatchError, ArchiveError, BadMagicError, ContractError,
                     TrainingInterrupted, TruncatedArchiveError)
from .layers import INPUT_SHAPE, Model, build_model
from .optim import CLASS_NAMES, AdamState, accuracy, adam_step, mean_cross_entropy

log = logging.getLogger(__name__)

MAGIC = b"ELACNN01"
FORMAT_VERSION = 1
HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")
# samples are independent in eval mode, so the chunk size only affects speed
EVAL_BATCH = 32
# independent initialisations for the two reference runs
PRESET_SEEDS = {50: 42, 100: 43}


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 42
    split_ratio: float = 0.8
    ela: ElaConfig = field(default_factory=ElaConfig)

    def __post_init__(self):
        if isinstance(self.ela, dict):
            self.ela = ElaConfig(**self.ela)
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ContractError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ContractError(f"split ratio must be in (0, 1), got {self.split_ratio}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def preset(cls, epochs: int, **overrides) -> "TrainConfig":
        """The 50- or 100-epoch reference run; each has its own seed."""
        if epochs not in PRESET_SEEDS:
            raise ContractError(
                f"no preset for {epochs} epochs; choose from {sorted(PRESET_SEEDS)}")
        return cls(**{"epochs": epochs, "seed": PRESET_SEEDS[epochs], **overrides})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


class MetricsHistory(list):
    """One :class:`EpochRecord` per completed epoch, numbered from 1."""

    def append(self, record: EpochRecord):
        if record.epoch != len(self) + 1:
            raise ContractError(f"expected epoch {len(self) + 1}, got {record.epoch}")
        super().append(record)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self]


# -- data sources -------------------------------------------------------------

class ArraySource:
    """In-memory inputs ``(n, h, w, c)`` with one-hot labels ``(n, 2)``."""

    def __init__(self, x, y):
        self.x = np.ascontiguousarray(x, dtype=np.float32)
        self.y = np.ascontiguousarray(y, dtype=np.float32)

    def __len__(self):
        return len(self.x)

    def __call__(self, indices):
        idx = np.asarray(indices, dtype=np.intp)
        return self.x[idx], self.y[idx]


class ManifestSource:
    """Loads ELA tensors for manifest entries, optionally through a disk cache."""

    def __init__(self, manifest: DatasetManifest, cfg: ElaConfig, cache: ElaCache | None = None,
                 workers: int = 1):
        self.manifest = manifest
        self.cfg = cfg
        self.cache = cache
        self.workers = workers

    def __len__(self):
        return len(self.manifest)

    def __call__(self, indices):
        return load_batch(self.manifest, indices, self.cfg, self.cache, self.workers)


# -- evaluation ---------------------------------------------------------------

def parameter_digest(model: Model) -> str:
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def evaluate(model: Model, source: Callable, indices: Sequence[int], batch_size: int = 32):
    """Eval-mode mean cross-entropy and accuracy over ``indices``."""
    indices = list(indices)
    if not indices:
        raise ContractError("cannot evaluate an empty subset")
    probs, labels = [], []
    for k in range(0, len(indices), batch_size):
        x, y = source(indices[k:k + batch_size])
        probs.append(model.forward(x, training=False))
        labels.append(y)
    probs = np.concatenate(probs)
    labels = np.concatenate(labels)
    return mean_cross_entropy(probs, labels), accuracy(probs, labels)


# -- training -----------------------------------------------------------------

def fit(model: Model, source: Callable, train_idx, val_idx, cfg: TrainConfig,
        checkpoint=None, on_epoch: Callable[[EpochRecord], None] | None = None,
        history: MetricsHistory | None = None):
    """Train ``model`` in place on ``source`` and return the metric history.

    Each epoch runs shuffled mini-batches (forward in training mode, mean
    cross-entropy, backward, one Adam step), then a dropout-off pass over the
    train and validation indices. With ``checkpoint`` set, the archive there
    is rewritten whenever validation accuracy strictly improves.
    """
    train_idx, val_idx = list(train_idx), list(val_idx)
    if not train_idx:
        raise ContractError("training set is empty")
    history = MetricsHistory() if history is None else history
    params = model.parameters()
    state = AdamState.for_params(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon)
    best = -math.inf
    try:
        for epoch in range(1, cfg.epochs + 1):
            for batch in batches(train_idx, cfg.batch_size, cfg.seed, epoch):
                x, y = source(batch)
                probs = model.forward(x, training=True)
                grads = model.backward_logits(probs - y)
                adam_step(state, params, grads, divisor=len(batch))
            eval_batch = max(cfg.batch_size, EVAL_BATCH)
            train_loss, train_acc = evaluate(model, source, train_idx, eval_batch)
            if val_idx:
                val_loss, val_acc = evaluate(model, source, val_idx, eval_batch)
            else:
                val_loss = val_acc = math.nan
            record = EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc)
            history.append(record)
            log.info("epoch %d: train loss %.4f acc %.4f | val loss %.4f acc %.4f",
                     epoch, train_loss, train_acc, val_loss, val_acc)
            if checkpoint is not None and val_idx and val_acc > best:
                best = val_acc
                save_model(model, checkpoint, cfg)
            if on_epoch is not None:
                on_epoch(record)
    except KeyboardInterrupt:
        raise TrainingInterrupted(history) from None
    return history


def train(model: Model, manifest: DatasetManifest, cfg: TrainConfig, cache: ElaCache | None = None,
          checkpoint=None, workers: int = 1, on_epoch=None):
    """Split ``manifest`` with ``cfg`` and train. Returns ``(model, history, split)``."""
    manifest.require_both_classes()
    split = split_stratified(manifest, cfg.split_ratio, cfg.seed)
    source = ManifestSource(manifest, cfg.ela, cache, workers)
    history = fit(model, source, split.train, split.val, cfg, checkpoint, on_epoch)
    return model, history, split


@dataclass(frozen=True)
class Prediction:
    p_authentic: float
    p_tampered: float
    label: str

    def to_dict(self):
        return {"authentic": self.p_authentic, "tampered": self.p_tampered, "label": self.label}


def predict(model: Model, image_path, ela_cfg: ElaConfig | None = None) -> Prediction:
    x = ela_transform(load_image(image_path), ela_cfg or ElaConfig())
    p = model.forward(x, training=False)
    # argmax ties resolve to the first class
    return Prediction(float(p[0]), float(p[1]), CLASS_NAMES[int(np.argmax(p))])


# -- history ------------------------------------------------------------------

def export_history(history: Sequence[EpochRecord], path) -> None:
    if not history:
        raise ContractError("history is empty")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for r in history:
            writer.writerow([r.epoch] + [f"{getattr(r, c):.6f}" for c in HISTORY_COLUMNS[1:]])


def read_history(path) -> MetricsHistory:
    history = MetricsHistory()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            history.append(EpochRecord(int(row["epoch"]),
                                       *(float(row[c]) for c in HISTORY_COLUMNS[1:])))
    return history


def plot_history(history: Sequence[EpochRecord], path) -> None:
    """Accuracy and loss curves side by side, train against validation."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r.epoch for r in history]
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(10, 4))
    for ax, metric in ((ax_acc, "acc"), (ax_loss, "loss")):
        ax.plot(epochs, [getattr(r, f"train_{metric}") for r in history], label="train")
        ax.plot(epochs, [getattr(r, f"val_{metric}") for r in history], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel(metric)
        ax.legend()
    ax_acc.set_title(f"Accuracy for {len(history)} epochs")
    ax_loss.set_title(f"Loss for {len(history)} epochs")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# -- archives -----------------------------------------------------------------

def _header(model: Model, cfg: TrainConfig | None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "layers": model.describe(),
        "seed": model.seed,
        "created_from_config_digest": cfg.digest() if cfg is not None else None,
        "input_shape": list(model.input_shape),
        "split_ratio": cfg.split_ratio if cfg is not None else None,
        "ela": cfg.ela.to_dict() if cfg is not None else None,
    }


def save_model(model: Model, path, cfg: TrainConfig | None = None) -> None:
    """Write the bit-exact archive: magic, header length, JSON header, raw params."""
    header = json.dumps(_header(model, cfg), sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for p in model.parameters():
                fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _parse_header(fh.read())[0]


def _parse_header(raw: bytes):
    if len(raw) < len(MAGIC):
        if MAGIC.startswith(raw):
            raise TruncatedArchiveError("archive ends inside the magic bytes")
        raise BadMagicError("not an ELACNN01 archive")
    if raw[:len(MAGIC)] != MAGIC:
        raise BadMagicError("not an ELACNN01 archive")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise TruncatedArchiveError("archive ends inside the header length")
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + hlen:
        raise TruncatedArchiveError("archive ends inside the header")
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"archive header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise ArchiveError("unsupported archive format version")
    return header, pos + hlen


def _widths(layers) -> dict:
    # the layer stack is fixed; only the conv width, kernel and hidden width vary
    convs = [layer["shape"] for layer in layers if layer["kind"] == "conv2d"]
    dense = [layer["shape"] for layer in layers if layer["kind"] == "dense"]
    return {"filters": int(convs[0][3]), "kernel_size": int(convs[0][0]),
            "hidden": int(dense[0][1])}


def load_model(path) -> Model:
    raw = Path(path).read_bytes()
    header, pos = _parse_header(raw)
    seed = header.get("seed")
    try:
        input_shape = tuple(int(v) for v in header.get("input_shape", INPUT_SHAPE))
        model = build_model(seed if seed is not None else 0, input_shape=input_shape, init=False,
                            **_widths(header.get("layers")))
    except (TypeError, ValueError, KeyError, IndexError, ContractError) as exc:
        raise ArchitectureMismatchError(f"unusable architecture in header: {exc}") from exc
    model.seed = seed
    if header.get("layers") != model.describe():
        raise ArchitectureMismatchError("archive layers do not match the network architecture")
    need = sum(p.size for p in model.parameters()) * 4
    have = len(raw) - pos
    if have < need:
        raise TruncatedArchiveError(f"archive holds {have} parameter bytes, expected {need}")
    if have > need:
        raise ArchiveError(f"archive has {have - need} unexpected trailing bytes")
    for p in model.parameters():
        n = p.size * 4
        p[...] = np.frombuffer(raw, dtype="<f4", count=p.size, offset=pos).reshape(p.shape)
        pos += n
    return model
