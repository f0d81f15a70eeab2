"""CASIA-style dataset ingestion, stratified splitting and ELA batch loading.

The tree layout is ``root/Au/**`` for authentic images and ``root/Tp/**`` for
tampered ones; both directory names can be overridden.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .ela import ElaConfig, decode_image_bytes, ela_transform
from .errors import CodecError, ContractError, DataItemError, IngestionError, SplitError
from .optim import AUTHENTIC, CLASS_NAMES, TAMPERED, one_hot

log = logging.getLogger(__name__)

CACHE_ENV = "ELACNN_CACHE_DIR"


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: int


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    skipped: list[tuple[Path, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def class_counts(self) -> tuple[int, int]:
        labels = self.labels
        return int(np.sum(labels == AUTHENTIC)), int(np.sum(labels == TAMPERED))

    def require_both_classes(self):
        au, tp = self.class_counts()
        if au == 0 or tp == 0:
            raise IngestionError(
                f"{self.root}: need images in both classes, found {au} authentic and {tp} tampered")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["path", "label"])
            for e in self.entries:
                writer.writerow([e.path.relative_to(self.root).as_posix(), CLASS_NAMES[e.label]])


def _is_readable_image(path: Path) -> str | None:
    try:
        with Image.open(path) as im:
            im.verify()
    except Exception as exc:  # Pillow raises a wide range of types here
        return str(exc) or type(exc).__name__
    return None


def scan_directory(root, authentic_dir="Au", tampered_dir="Tp") -> DatasetManifest:
    """Label every decodable file under the two class directories.

    Entries are sorted by their path relative to ``root``. Files that do not
    decode are logged and listed in ``manifest.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    found = []
    for sub, label in ((authentic_dir, AUTHENTIC), (tampered_dir, TAMPERED)):
        base = root / sub
        if base.is_dir():
            found.extend((p, label) for p in base.rglob("*") if p.is_file())
    found.sort(key=lambda item: item[0].relative_to(root).as_posix())

    entries, skipped = [], []
    for path, label in found:
        problem = _is_readable_image(path)
        if problem is None:
            entries.append(ManifestEntry(path, label))
        else:
            log.warning("skipping unreadable file %s: %s", path, problem)
            skipped.append((path, problem))
    if not entries:
        raise IngestionError(
            f"no readable images under {root / authentic_dir} or {root / tampered_dir}")
    return DatasetManifest(root, entries, skipped)


@dataclass(frozen=True)
class SplitIndices:
    train: list[int]
    val: list[int]
    seed: int
    ratio: float


def _train_count(n: int, ratio: float) -> int:
    # rounding guard: 0.7 * 10 is 7.000000000000001 in binary floating point
    want = math.ceil(round(ratio * n, 9))
    return min(max(want, 1), n - 1)


def split_stratified(labels, ratio: float = 0.8, seed: int = 42) -> SplitIndices:
    """Per-class seeded shuffle; the first ``ceil(ratio * n)`` of each class train.

    Each class keeps at least one item on either side. ``labels`` may be a
    :class:`DatasetManifest` or a sequence of class ids.
    """
    if isinstance(labels, DatasetManifest):
        labels = labels.labels
    labels = np.asarray(labels)
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"split ratio must be in (0, 1), got {ratio}")
    train, val = [], []
    for cls in (AUTHENTIC, TAMPERED):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < 2:
            raise SplitError(f"class {CLASS_NAMES[cls]} has {len(idx)} item(s); at least 2 needed")
        rng = np.random.default_rng([seed, cls])
        perm = idx[rng.permutation(len(idx))]
        k = _train_count(len(idx), ratio)
        train.extend(int(i) for i in perm[:k])
        val.extend(int(i) for i in perm[k:])
    return SplitIndices(sorted(train), sorted(val), seed, ratio)


def batches(indices, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Shuffled mini-batches for one epoch; the last one may be short."""
    if batch_size < 1:
        raise ContractError(f"batch size must be >= 1, got {batch_size}")
    order = np.asarray(indices)[np.random.default_rng([seed, epoch]).permutation(len(indices))]
    return [[int(i) for i in order[k:k + batch_size]] for k in range(0, len(order), batch_size)]


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "elacnn"


class ElaCache:
    """On-disk store of ELA tensors keyed by file content and ELA settings.

    Values are raw little-endian float32, the same encoding model archives
    use for parameters.
    """

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else default_cache_dir()

    def _path(self, digest: str, cfg: ElaConfig) -> Path:
        cfg_key = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()
        return self.directory / cfg_key[:16] / f"{digest}.f32"

    def get(self, digest: str, cfg: ElaConfig):
        path = self._path(digest, cfg)
        shape = (cfg.target_height, cfg.target_width, 3)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            return None
        if len(raw) != 4 * int(np.prod(shape)):
            return None
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)

    def put(self, digest: str, cfg: ElaConfig, value: np.ndarray) -> None:
        path = self._path(digest, cfg)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def load_item(path, cfg: ElaConfig, cache: ElaCache | None = None) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataItemError(path, exc.strerror or str(exc)) from exc
    digest = hashlib.sha256(raw).hexdigest()
    if cache is not None:
        hit = cache.get(digest, cfg)
        if hit is not None:
            return hit
    try:
        tensor = ela_transform(decode_image_bytes(raw, str(path)), cfg)
    except CodecError as exc:
        raise DataItemError(path, str(exc)) from exc
    if cache is not None:
        cache.put(digest, cfg, tensor)
    return tensor


def load_batch(manifest: DatasetManifest, indices, cfg: ElaConfig | None = None,
               cache: ElaCache | None = None, workers: int = 1):
    """ELA tensors ``(k, h, w, 3)`` and one-hot labels ``(k, 2)`` in index order."""
    cfg = cfg or ElaConfig()
    entries = [manifest.entries[i] for i in indices]
    if workers > 1 and len(entries) > 1:
        with ThreadPoolExecutor(workers) as pool:
            tensors = list(pool.map(lambda e: load_item(e.path, cfg, cache), entries))
    else:
        tensors = [load_item(e.path, cfg, cache) for e in entries]
    x = np.stack(tensors) if tensors else np.zeros((0, cfg.target_height, cfg.target_width, 3),
                                                   dtype=np.float32)
    y = np.stack([one_hot(e.label) for e in entries]) if entries else np.zeros((0, 2), np.float32)
    return x, y
