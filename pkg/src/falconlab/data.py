"""Datasets, IDX files, checkpoints and prediction logs."""

from __future__ import annotations

import csv
import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ChecksumError,
    CheckpointError,
    ConsistencyError,
    ContractError,
    DataFormatError,
    DataIOError,
    VersionError,
)
from .metrics import PredictionRecord, entropies

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
VALIDATION_SIZE = 5000


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10
    input_range: tuple = (0.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.split not in ("train", "val", "test"):
            raise ContractError(f"unknown split {self.split!r}")
        if len(self.inputs) < 1:
            raise ContractError("dataset is empty")
        if len(self.inputs) != len(self.labels):
            raise ConsistencyError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        lo, hi = self.input_range
        if self.inputs.min() < lo or self.inputs.max() > hi:
            raise ContractError(f"inputs outside the declared range [{lo}, {hi}]")

    def __len__(self):
        return len(self.labels)

    def subset(self, index, split: Optional[str] = None) -> "Dataset":
        return Dataset(self.inputs[index], self.labels[index], split or self.split, self.num_classes, self.input_range, dict(self.meta))


def split_validation(train: Dataset, size: int = VALIDATION_SIZE) -> tuple[Dataset, Dataset]:
    """Reserve the last ``size`` training samples as a validation split."""
    if not 0 < size < len(train):
        raise ContractError(f"validation size {size} must be between 0 and {len(train)}")
    cut = len(train) - size
    return train.subset(slice(0, cut), "train"), train.subset(slice(cut, None), "val")


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except (OSError, EOFError) as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc


def _parse_idx(raw: bytes, path, magic: int, ndim: int) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataIOError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataIOError(f"{path}: truncated IDX payload ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train", num_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair, scaling pixels to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(_read_bytes(labels_path), labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise ConsistencyError(f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), split, num_classes)


def write_idx(images, labels, images_path, labels_path) -> None:
    """Write uint8 images (n, h, w) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist(directory, split: str = "train") -> Dataset:
    """Load the standard MNIST file pair for ``split`` from ``directory`` (plain or .gz)."""
    directory = Path(directory)
    paths = []
    for stem in MNIST_FILES[split]:
        for candidate in (directory / stem, directory / (stem + ".gz")):
            if candidate.exists():
                paths.append(candidate)
                break
        else:
            raise DataIOError(f"{directory}: missing {stem}[.gz]")
    return load_idx(*paths, split=split)


# ---------------------------------------------------------------------------
# synthetic shift benchmark


def gen_synthetic_shift(seed: int, n: int, shift_distance: float, direction=(1.0, 0.0)) -> tuple[Dataset, Dataset]:
    """Two Gaussian classes at (-1, 0) and (+1, 0) with sigma 0.5.

    The test set is drawn from the same generator and then translated by
    ``shift_distance`` along ``direction``. The default direction runs along
    the axis that separates the classes, so large shifts push every test point
    to one side of the decision boundary.
    """
    if n < 10:
        raise ContractError(f"need n >= 10, got {n}")
    rng = np.random.default_rng(seed)

    def draw():
        labels = np.arange(n) % 2
        rng.shuffle(labels)
        means = np.where(labels[:, None] == 1, [1.0, 0.0], [-1.0, 0.0])
        return means + 0.5 * rng.standard_normal((n, 2)), labels

    x_train, y_train = draw()
    x_test, y_test = draw()
    offset = shift_distance * np.asarray(direction, dtype=np.float64) / np.linalg.norm(direction)
    unbounded = (-np.inf, np.inf)
    meta = {"generator": "two-gaussians", "seed": seed, "shift_distance": shift_distance}
    return (
        Dataset(x_train, y_train, "train", 2, unbounded, dict(meta)),
        Dataset(x_test + offset, y_test, "test", 2, unbounded, dict(meta)),
    )


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"FLCNCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(model, config: Optional[dict], path) -> None:
    """Write ``magic | header length | JSON header | float64 LE blob | sha256``."""
    blob = model.get_flat().astype("<f8").tobytes()
    header = json.dumps(
        {
            "format": "falconlab-checkpoint",
            "version": CHECKPOINT_VERSION,
            "architecture": model.architecture(),
            "config": config or {},
            "num_params": len(blob) // 8,
        },
        sort_keys=True,
    ).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + blob
    try:
        with open(path, "wb") as fh:
            fh.write(body + hashlib.sha256(body).digest())
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc


def read_checkpoint(path) -> tuple[dict, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 + 32:
        raise ChecksumError(f"{path}: file too short to be a checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch")
    if body[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a falconlab checkpoint")
    (hlen,) = struct.unpack("<I", body[8:12])
    header = json.loads(body[12 : 12 + hlen])
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {header.get('version')!r} is not supported")
    params = np.frombuffer(body[12 + hlen :], dtype="<f8").astype(np.float64)
    if params.size != header["num_params"]:
        raise CheckpointError(f"{path}: expected {header['num_params']} parameters, found {params.size}")
    return header, params


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, config)``."""
    from .nn import Model

    header, params = read_checkpoint(path)
    model = Model.from_architecture(header["architecture"])
    model.set_flat(params)
    model.eval()
    return model, header["config"]


# ---------------------------------------------------------------------------
# prediction logs


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_prediction_log(records: Sequence[PredictionRecord], path, sample_ids: Optional[Sequence[int]] = None) -> None:
    """One CSV row per record with its full probability vector.

    Header: ``sample_id,perturbation,level,label,predicted,confidence,entropy,p_0..p_{C-1}``;
    floats carry 9 significant digits.
    """
    if not records:
        raise ContractError("no records to log")
    write_prediction_arrays(
        path,
        np.array([r.probs for r in records], dtype=np.float64),
        [r.label for r in records],
        [r.perturbation for r in records],
        [r.level for r in records],
        range(len(records)) if sample_ids is None else sample_ids,
    )


def write_prediction_arrays(path, probs, labels, perturbations, levels, sample_ids) -> None:
    """Columnar fast path of :func:`write_prediction_log` (same file format)."""
    probs = np.asarray(probs, dtype=np.float64)
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    ent = entropies(probs)
    num_classes = probs.shape[1]
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "perturbation", "level", "label", "predicted", "confidence", "entropy"] + [f"p_{j}" for j in range(num_classes)])
            for i in range(probs.shape[0]):
                w.writerow(
                    [int(sample_ids[i]), perturbations[i], int(levels[i]), int(labels[i]), int(pred[i]), _fmt(conf[i]), _fmt(ent[i])]
                    + [_fmt(v) for v in probs[i]]
                )
    except OSError as exc:
        raise DataIOError(f"cannot write prediction log {path}: {exc}") from exc


def read_prediction_log(path) -> list[dict]:
    """Parse a prediction log into dicts with typed fields and a ``probs`` array."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        pcols = [c for c in reader.fieldnames if c.startswith("p_")]
        for row in reader:
            rows.append(
                {
                    "sample_id": int(row["sample_id"]),
                    "perturbation": row["perturbation"],
                    "level": int(row["level"]),
                    "label": int(row["label"]),
                    "predicted": int(row["predicted"]),
                    "confidence": float(row["confidence"]),
                    "entropy": float(row["entropy"]),
                    "probs": np.array([float(row[c]) for c in pcols]),
                }
            )
    return rows
