"""Dataset construction: synthetic sphere data and IDX image ingestion.

Training inputs live on the unit sphere with pairwise-distinct rows and
bounded labels; ``synth_sphere`` draws them directly and
``to_sphere_dataset`` projects parsed image sets onto the sphere (no mean
centering, each flattened image is scaled to unit norm).

The IDX binary format is big-endian throughout: a 4-byte magic
(0x00000803 for 3-D unsigned-byte image files, 0x00000801 for 1-D label
files), one big-endian uint32 per dimension, then the raw payload bytes.
The parser returns typed errors for malformed streams and never aborts.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    IdxConsistencyError,
    IdxFormatError,
    IdxLengthError,
)

__all__ = [
    "Dataset",
    "RawImageSet",
    "synth_sphere",
    "load_idx",
    "write_idx",
    "to_sphere_dataset",
    "dataset_to_csv",
    "dataset_from_csv",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

_LABEL_RULES = ("random-pm1", "linear-teacher", "fourier-teacher")


@dataclass
class Dataset:
    """Inputs X (one row per example), scalar labels y, and provenance."""

    X: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise DataError(
                f"X must be (N, d) with matching y; got {self.X.shape}, {self.y.shape}"
            )

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def validate_assumptions(self, y_bound: float = 1.0) -> None:
        """Enforce unit-norm rows, pairwise distinctness, bounded labels."""
        norms = np.linalg.norm(self.X, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise DataError("rows must be unit norm")
        if np.max(np.abs(self.y), initial=0.0) > y_bound + 1e-12:
            raise DataError(f"labels exceed the bound {y_bound}")
        gram = self.X @ self.X.T
        sq = np.diag(gram)[:, None] + np.diag(gram)[None, :] - 2 * gram
        np.fill_diagonal(sq, np.inf)
        if self.N > 1 and float(np.min(sq)) <= (1e-8) ** 2:
            i, j = np.unravel_index(int(np.argmin(sq)), sq.shape)
            raise DataError(f"rows {i} and {j} are not distinct")


def synth_sphere(N: int, d: int, seed: int, label_rule: str = "random-pm1") -> Dataset:
    """N i.i.d. uniform points on the unit sphere with rule-based labels."""
    if N < 1 or d < 2:
        raise ConfigError("need N >= 1 and d >= 2")
    if N > 10**6:
        raise ConfigError("N capped at 1e6 for desk-scale runs")
    if label_rule not in _LABEL_RULES:
        raise ConfigError(f"label_rule must be one of {_LABEL_RULES}")
    gen = np.random.Generator(np.random.Philox(key=seed & (2**64 - 1)))
    X = gen.standard_normal((N, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    if label_rule == "random-pm1":
        y = gen.integers(0, 2, size=N) * 2.0 - 1.0
    else:
        w = gen.standard_normal(d)
        w /= np.linalg.norm(w)
        proj = X @ w
        # ||w|| = 1 keeps |y| <= 1 exactly for the linear teacher.
        y = proj if label_rule == "linear-teacher" else np.cos(2.0 * np.pi * proj)
    return Dataset(X=X, y=y, meta={"source": "synth_sphere", "seed": seed,
                                   "label_rule": label_rule})


@dataclass
class RawImageSet:
    """Parsed IDX image/label pair, still in raw bytes."""

    count: int
    rows: int
    cols: int
    pixels: np.ndarray  # uint8, (count, rows, cols)
    labels: np.ndarray  # uint8, (count,)


def _read_header(blob: bytes, dims: int, expected_magic: int, what: str):
    header_len = 4 + 4 * dims
    if len(blob) < header_len:
        raise IdxLengthError(
            f"{what} file too short for its header ({len(blob)} bytes)"
        )
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{what} file has magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    sizes = struct.unpack(f">{dims}I", blob[4:header_len])
    return sizes, blob[header_len:]


def load_idx(images_path, labels_path) -> RawImageSet:
    """Parse an IDX image file and its label file, validating both."""
    with open(images_path, "rb") as fh:
        img_blob = fh.read()
    with open(labels_path, "rb") as fh:
        lab_blob = fh.read()
    (count, rows, cols), img_payload = _read_header(
        img_blob, 3, IMAGE_MAGIC, "image"
    )
    (lab_count,), lab_payload = _read_header(lab_blob, 1, LABEL_MAGIC, "label")
    expected = count * rows * cols
    if len(img_payload) != expected:
        raise IdxLengthError(
            f"image payload has {len(img_payload)} bytes, header promises {expected}"
        )
    if len(lab_payload) != lab_count:
        raise IdxLengthError(
            f"label payload has {len(lab_payload)} bytes, header promises {lab_count}"
        )
    if lab_count != count:
        raise IdxConsistencyError(
            f"image file holds {count} items but label file holds {lab_count}"
        )
    pixels = np.frombuffer(img_payload, dtype=np.uint8).reshape(count, rows, cols)
    labels = np.frombuffer(lab_payload, dtype=np.uint8)
    return RawImageSet(count=count, rows=rows, cols=cols,
                       pixels=pixels.copy(), labels=labels.copy())


def write_idx(pixels, labels, images_path, labels_path) -> None:
    """Write an IDX image/label pair (big-endian headers, raw bytes)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if pixels.ndim != 3 or labels.shape != (pixels.shape[0],):
        raise DataError("pixels must be (count, rows, cols) with matching labels")
    count, rows, cols = pixels.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, count, rows, cols))
        fh.write(pixels.tobytes(order="C"))
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, count))
        fh.write(labels.tobytes(order="C"))


def _default_label_map(label: int) -> float:
    # Even digits map to -1, odd to +1: a scalar-output encoding.
    return -1.0 if label % 2 == 0 else 1.0


def to_sphere_dataset(raw: RawImageSet, limit: int, label_map=None) -> Dataset:
    """Flatten images, scale each row to unit norm, and map labels.

    All-zero images cannot be normalized and are dropped with a warning.
    """
    if limit < 1 or limit > raw.count:
        raise DataError(f"limit must lie in [1, {raw.count}]")
    label_map = label_map or _default_label_map
    flat = raw.pixels[:limit].reshape(limit, -1).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    keep = norms > 0
    dropped = int(limit - keep.sum())
    if dropped:
        warnings.warn(f"dropped {dropped} all-zero image(s)", stacklevel=2)
    if not keep.any():
        raise DataError("every image in the requested range is all-zero")
    X = flat[keep] / norms[keep, None]
    y = np.array([label_map(int(l)) for l in raw.labels[:limit][keep]])
    if np.max(np.abs(y)) > 1.0 + 1e-12:
        raise DataError("label_map must produce values in [-1, 1]")
    return Dataset(
        X=X,
        y=y,
        meta={"source": "idx", "rows": raw.rows, "cols": raw.cols,
              "dropped": dropped},
    )


def dataset_to_csv(ds: Dataset, path) -> None:
    """CSV with a one-line JSON header comment carrying d, N, and flags."""
    header = {"d": ds.d, "N": ds.N, "unit_norm": bool(
        np.allclose(np.linalg.norm(ds.X, axis=1), 1.0, atol=1e-9)
    )}
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(header) + "\n")
        fh.write(",".join(f"x{i}" for i in range(ds.d)) + ",y\n")
        for row, label in zip(ds.X, ds.y):
            fh.write(",".join("%.17g" % v for v in row) + ",%.17g\n" % label)


def dataset_from_csv(path) -> Dataset:
    """Read a dataset written by :func:`dataset_to_csv`."""
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise DataError("missing JSON header comment")
        header = json.loads(first[2:])
        fh.readline()  # column names
        body = np.loadtxt(fh, delimiter=",", ndmin=2)
    d = int(header["d"])
    if body.shape[1] != d + 1:
        raise DataError(f"expected {d + 1} columns, found {body.shape[1]}")
    return Dataset(X=body[:, :d], y=body[:, d], meta={"source": str(path)})
