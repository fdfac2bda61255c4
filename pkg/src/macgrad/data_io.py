"""Dataset ingestion, batching, metrics and checkpoint persistence."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, ParseError
from .tensor import tensor_from_bytes, tensor_to_bytes

__all__ = [
    "Dataset",
    "load_idx",
    "write_idx",
    "load_csv",
    "synth_blobs",
    "synth_two_moons",
    "synth_digits",
    "MetricsRecord",
    "write_metrics",
    "read_metrics",
    "save_checkpoint",
    "load_checkpoint",
    "make_dataset_from_config",
]

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Feature array plus integer labels (or float targets) and normalization."""

    x: np.ndarray
    y: np.ndarray
    n_classes: int = 0
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ConfigError(f"{self.x.shape[0]} examples but {self.y.shape[0]} targets")
        if self.n_classes and np.issubdtype(self.y.dtype, np.integer):
            if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
                raise ConfigError("label outside declared class count")

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, count: int, seed: int | None = None) -> "Dataset":
        if seed is None:
            idx = np.arange(min(count, len(self)))
        else:
            idx = np.random.default_rng(seed).permutation(len(self))[:count]
        return Dataset(self.x[idx], self.y[idx], self.n_classes,
                       self.feature_mean, self.feature_std)

    def standardize(self) -> "Dataset":
        """Per-feature standardization with statistics from this split."""
        flat = self.x.reshape(len(self), -1)
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        normed = ((flat - mean) / std).reshape(self.x.shape)
        return Dataset(normed, self.y, self.n_classes, mean, std)

    def apply_normalization(self, other: "Dataset") -> "Dataset":
        """Normalize with statistics computed on another (training) split."""
        if other.feature_mean is None or other.feature_std is None:
            raise ConfigError("reference split has no normalization statistics")
        flat = self.x.reshape(len(self), -1)
        normed = ((flat - other.feature_mean) / other.feature_std).reshape(self.x.shape)
        return Dataset(normed, self.y, self.n_classes, other.feature_mean, other.feature_std)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield (x, y) views; shuffled when an rng is supplied."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.x[idx], self.y[idx]


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------


def _read_exact(data: bytes, offset: int, count: int, what: str) -> bytes:
    if len(data) < offset + count:
        raise ParseError(f"truncated {what} at byte {min(len(data), offset)}")
    return data[offset:offset + count]


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Load an image/label pair of IDX files.

    Enforces the magic numbers, big-endian dimensions, an exact payload size
    (no trailing bytes), and matching example counts across the two files.
    Pixels are scaled to [0, 1] float64.
    """
    img_data = Path(images_path).read_bytes()
    lbl_data = Path(labels_path).read_bytes()

    header = _read_exact(img_data, 0, 16, "image header")
    magic, count, rows, cols = struct.unpack(">IIII", header)
    if magic != _IDX_IMAGES_MAGIC:
        raise ParseError(f"bad image magic 0x{magic:08x} at byte 0")
    expected = 16 + count * rows * cols
    if len(img_data) != expected:
        raise ParseError(
            f"image payload size mismatch at byte 16: have {len(img_data) - 16} bytes, "
            f"header implies {expected - 16}"
        )

    lheader = _read_exact(lbl_data, 0, 8, "label header")
    lmagic, lcount = struct.unpack(">II", lheader)
    if lmagic != _IDX_LABELS_MAGIC:
        raise ParseError(f"bad label magic 0x{lmagic:08x} at byte 0")
    if len(lbl_data) != 8 + lcount:
        raise ParseError(
            f"label payload size mismatch at byte 8: have {len(lbl_data) - 8} bytes, "
            f"header implies {lcount}"
        )
    if count != lcount:
        raise ParseError(f"count mismatch at byte 4: {count} images vs {lcount} labels")

    pixels = np.frombuffer(img_data, dtype=np.uint8, offset=16)
    images = pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lbl_data, dtype=np.uint8, offset=8).astype(np.int64)
    n_classes = int(labels.max()) + 1 if count else 0
    return Dataset(images, labels, n_classes)


def write_idx(images: np.ndarray, labels: np.ndarray,
              images_path: str | Path, labels_path: str | Path) -> None:
    """Write uint8 images (N, H, W) or (N, 1, H, W) and labels as IDX files."""
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[:, 0]
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", _IDX_LABELS_MAGIC, n))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def load_csv(path: str | Path, label_column: str = "label") -> Dataset:
    """CSV with a header row; all columns float64, one integer label column."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if not header:
            raise ParseError("empty CSV at byte 0")
        names = [c.strip() for c in header.split(",")]
        if label_column not in names:
            raise ParseError(f"no {label_column!r} column in CSV header")
        rows = []
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(names):
                raise ParseError(f"row {lineno} has {len(parts)} fields, expected {len(names)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ParseError(f"row {lineno}: {exc}") from exc
    data = np.asarray(rows, dtype=np.float64)
    li = names.index(label_column)
    y = data[:, li].astype(np.int64)
    x = np.delete(data, li, axis=1)
    n_classes = int(y.max()) + 1 if len(y) else 0
    return Dataset(x, y, n_classes)


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------


def synth_blobs(n: int, d: int, classes: int, seed: int, margin: float = 4.0) -> Dataset:
    """Gaussian blobs with class means at pairwise distance >= margin."""
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        means = rng.normal(0.0, margin, size=(classes, d))
        dists = np.linalg.norm(means[:, None] - means[None, :], axis=2)
        if classes == 1 or dists[~np.eye(classes, dtype=bool)].min() >= margin:
            break
    else:
        raise RuntimeError("could not place blob means at the requested margin")
    labels = np.arange(n) % classes
    x = means[labels] + rng.normal(0.0, 1.0, size=(n, d))
    perm = rng.permutation(n)
    return Dataset(x[perm], labels[perm].astype(np.int64), classes)


def synth_two_moons(n: int, noise: float, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    x0 = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    x1 = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.vstack([x0, x1]) + rng.normal(0.0, noise, size=(n, 2))
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], 2)


def _digit_template(cls: int) -> np.ndarray:
    """Fixed 28x28 stroke pattern for one of ten synthetic classes."""
    img = np.zeros((28, 28))
    if cls == 0:        # ring
        yy, xx = np.mgrid[0:28, 0:28]
        r = np.sqrt((yy - 14.0) ** 2 + (xx - 14.0) ** 2)
        img[(r > 6) & (r < 10)] = 1.0
    elif cls == 1:      # vertical bar
        img[4:24, 12:16] = 1.0
    elif cls == 2:      # horizontal bar
        img[12:16, 4:24] = 1.0
    elif cls == 3:      # main diagonal
        for i in range(4, 24):
            img[i, max(0, i - 2):i + 2] = 1.0
    elif cls == 4:      # anti-diagonal
        for i in range(4, 24):
            img[i, max(0, 26 - i - 2):26 - i + 2] = 1.0
    elif cls == 5:      # cross
        img[4:24, 12:16] = 1.0
        img[12:16, 4:24] = 1.0
    elif cls == 6:      # open box
        img[5:23, 5:8] = 1.0
        img[5:23, 20:23] = 1.0
        img[5:8, 5:23] = 1.0
        img[20:23, 5:23] = 1.0
    elif cls == 7:      # top-left corner blob
        img[4:13, 4:13] = 1.0
    elif cls == 8:      # two stacked bars
        img[6:10, 6:22] = 1.0
        img[18:22, 6:22] = 1.0
    else:               # bottom-right corner blob
        img[15:24, 15:24] = 1.0
    return img


def synth_digits(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 28x28 ten-class image set: jittered stroke templates.

    Returns uint8 images (N, 28, 28) and labels, suitable for writing with
    :func:`write_idx` so the IDX pipeline is exercised end to end.  A stand-in
    at desk scale for real image corpora.
    """
    rng = np.random.default_rng(seed)
    templates = np.stack([_digit_template(c) for c in range(10)])
    labels = (np.arange(n) % 10).astype(np.uint8)
    images = np.zeros((n, 28, 28))
    for i in range(n):
        img = templates[labels[i]]
        dy, dx = rng.integers(-2, 3, size=2)
        img = np.roll(np.roll(img, dy, axis=0), dx, axis=1)
        img = img * rng.uniform(0.7, 1.0) + rng.uniform(0.0, 0.12, size=(28, 28))
        images[i] = np.clip(img, 0.0, 1.0)
    perm = rng.permutation(n)
    return (images[perm] * 255).astype(np.uint8), labels[perm]


def make_dataset_from_config(cfg: dict) -> Dataset:
    """Instantiate a dataset from its config block."""
    cfg = dict(cfg)
    source = cfg.pop("source", None)
    if source == "blobs":
        ds = synth_blobs(int(cfg.pop("n")), int(cfg.pop("d")), int(cfg.pop("classes")),
                         int(cfg.pop("seed", 0)), float(cfg.pop("margin", 4.0)))
    elif source == "two_moons":
        ds = synth_two_moons(int(cfg.pop("n")), float(cfg.pop("noise", 0.1)),
                             int(cfg.pop("seed", 0)))
    elif source == "idx":
        ds = load_idx(cfg.pop("images"), cfg.pop("labels"))
        if "limit" in cfg:
            ds = ds.subset(int(cfg.pop("limit")))
    elif source == "csv":
        ds = load_csv(cfg.pop("path"), cfg.pop("label_column", "label"))
    else:
        raise ConfigError(f"unknown dataset source {source!r}")
    standardize = cfg.pop("standardize", False)
    if cfg:
        raise ConfigError(f"unknown dataset keys {sorted(cfg)}")
    return ds.standardize() if standardize else ds


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    train_loss: float
    test_acc: float | None = None
    wall_ms: float = 0.0
    state_bytes: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "epoch": self.epoch,
                "train_loss": self.train_loss,
                "test_acc": self.test_acc,
                "wall_ms": self.wall_ms,
                "state_bytes": self.state_bytes,
            },
            sort_keys=True,
        )


def write_metrics(path: str | Path, record: MetricsRecord) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(record.to_json() + "\n")


def read_metrics(path: str | Path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


# ---------------------------------------------------------------------------
# checkpoints: magic, version, CRC32-protected sections
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"MGCKPT01"


def _write_section(f, tag: str, payload: bytes) -> None:
    encoded = tag.encode()
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<QI", len(payload), zlib.crc32(payload)))
    f.write(payload)


def save_checkpoint(path: str | Path, model, optimizer, meta: dict | None = None) -> None:
    """Persist model parameters and per-layer curvature state."""
    meta = dict(meta or {})
    meta["format_version"] = 1
    meta["optimizer"] = optimizer.cfg.name if optimizer is not None else None
    meta["model"] = model.config
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", 1))
        _write_section(f, "meta", json.dumps(meta, sort_keys=True).encode())
        for i, layer in model.trainable_layers():
            for name, p in layer.params().items():
                _write_section(f, f"param/{i}.{name}", tensor_to_bytes(p))
        if optimizer is not None:
            for key, state in optimizer.states().items():
                _write_section(f, f"curv/{key}", state.to_payload())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict[str, bytes]]:
    """Read a checkpoint; returns (meta, params by key, curvature payloads)."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:8] != _CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != 1:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 12
    meta: dict = {}
    params: dict[str, np.ndarray] = {}
    curvature: dict[str, bytes] = {}
    while offset < len(data):
        if len(data) - offset < 2:
            raise CheckpointError(f"truncated section header at byte {offset}")
        (tag_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        tag = data[offset:offset + tag_len].decode()
        offset += tag_len
        if len(data) - offset < 12:
            raise CheckpointError(f"truncated section {tag!r} at byte {offset}")
        payload_len, crc = struct.unpack_from("<QI", data, offset)
        offset += 12
        payload = data[offset:offset + payload_len]
        if len(payload) != payload_len:
            raise CheckpointError(f"truncated payload for section {tag!r} at byte {offset}")
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"CRC mismatch in section {tag!r}")
        offset += payload_len
        if tag == "meta":
            meta = json.loads(payload.decode())
        elif tag.startswith("param/"):
            params[tag[len("param/"):]], _ = tensor_from_bytes(payload)
        elif tag.startswith("curv/"):
            curvature[tag[len("curv/"):]] = payload
        else:
            raise CheckpointError(f"unknown section tag {tag!r}")
    if not meta:
        raise CheckpointError("checkpoint has no meta section")
    return meta, params, curvature
