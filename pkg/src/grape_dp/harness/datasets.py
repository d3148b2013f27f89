"""Dataset sources: synthetic generators and the big-endian IDX file format."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, InvalidArgumentError
from ..models import Dataset
from ..tensor import RngStream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

SOURCES = ("synthetic-gaussian", "two-class-margin", "idx-files")


def _minmax_scale(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    span[span == 0.0] = 1.0
    return (x - lo) / span


def synthetic_gaussian(n: int, dim: int, classes: int, stream: RngStream) -> Dataset:
    """Gaussian features scaled to [0,1]; labels from a random linear teacher.

    With ``classes=1`` the labels are real-valued regression targets instead.
    """
    if n < 1 or dim < 1:
        raise InvalidArgumentError("need n >= 1 and dim >= 1")
    feats = stream.normals(n * dim).reshape(n, dim)
    x = _minmax_scale(feats)
    if classes == 1:
        w = stream.advance(n * dim).normals(dim)
        return Dataset(x, x @ w)
    teacher = stream.advance(n * dim).normals(classes * dim).reshape(classes, dim)
    labels = np.argmax(x @ teacher.T, axis=1).astype(np.int64)
    return Dataset(x, labels)


def two_class_margin(n: int, dim: int, margin: float, stream: RngStream) -> Dataset:
    """Linearly separable two-class data with a guaranteed margin.

    Points are pushed away from a random hyperplane until every sample sits at
    signed distance >= margin/2, then features are rescaled to [0,1]
    (separability is preserved under the per-feature affine map).
    """
    if n < 2 or dim < 1:
        raise InvalidArgumentError("need n >= 2 and dim >= 1")
    if not margin > 0:
        raise InvalidArgumentError("margin must be positive")
    w = stream.normals(dim)
    w /= np.linalg.norm(w)
    base = stream.advance(dim).uniforms(n * dim).reshape(n, dim)
    s = base @ w
    s -= np.median(s)
    labels = (s >= 0).astype(np.int64)
    sign = 2.0 * labels - 1.0
    push = np.maximum(0.0, margin / 2.0 - sign * s)
    x = base + (sign * push)[:, None] * w
    return Dataset(_minmax_scale(x), labels)


def _read_exact(fh, count: int, offset: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(
            f"truncated IDX file: needed {count} bytes for {what} at offset {offset}, "
            f"got {len(data)}",
            offset=offset + len(data),
        )
    return data


def read_idx_images(path: str | Path) -> np.ndarray:
    """(count, rows*cols) float matrix scaled to [0,1] from an IDX image file."""
    with open(path, "rb") as fh:
        header = _read_exact(fh, 16, 0, "image header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"bad image magic 0x{magic:08X} (expected 0x{IDX_IMAGE_MAGIC:08X})",
                offset=0,
            )
        body = _read_exact(fh, count * rows * cols, 16, "pixel data")
    pixels = np.frombuffer(body, dtype=np.uint8).astype(np.float64)
    return pixels.reshape(count, rows * cols) / 255.0


def read_idx_labels(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = _read_exact(fh, 8, 0, "label header")
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"bad label magic 0x{magic:08X} (expected 0x{IDX_LABEL_MAGIC:08X})",
                offset=0,
            )
        body = _read_exact(fh, count, 8, "label data")
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def load_idx_files(images: str | Path, labels: str | Path) -> Dataset:
    x = read_idx_images(images)
    y = read_idx_labels(labels)
    if len(x) != len(y):
        raise FormatError(
            f"image count {len(x)} does not match label count {len(y)}", offset=4
        )
    return Dataset(x, y)


def load_dataset(
    source: str,
    *,
    n: int = 0,
    dim: int = 0,
    classes: int = 2,
    margin: float = 1.0,
    images: str | None = None,
    labels: str | None = None,
    stream: RngStream | None = None,
) -> Dataset:
    """Load one of the supported sources; synthetic ones are pure in ``stream``."""
    if source == "synthetic-gaussian":
        return synthetic_gaussian(n, dim, classes, stream or RngStream(0))
    if source == "two-class-margin":
        return two_class_margin(n, dim, margin, stream or RngStream(0))
    if source == "idx-files":
        if not images or not labels:
            raise InvalidArgumentError("idx-files needs both images and labels paths")
        return load_idx_files(images, labels)
    raise InvalidArgumentError(f"unknown dataset source {source!r}; expected one of {SOURCES}")


def perceptron_separates(data: Dataset, max_epochs: int = 2000) -> bool:
    """Whether a perceptron with bias reaches zero training errors."""
    x = np.hstack([data.x, np.ones((len(data), 1))])
    y = 2.0 * np.asarray(data.y, dtype=np.float64) - 1.0
    w = np.zeros(x.shape[1])
    for _ in range(max_epochs):
        wrong = 0
        for i in range(len(data)):
            if y[i] * (x[i] @ w) <= 0:
                w += y[i] * x[i]
                wrong += 1
        if wrong == 0:
            return True
    return False
