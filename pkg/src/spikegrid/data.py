"""Hyperspectral cube ingestion, PCA, patches, splits and direct spike coding.

File formats (little-endian)::

    .hsic  b"HSIC" u16 version, u32 H, u32 W, u32 B, H*W*B float32 (band fastest)
    .hsil  b"HSIL" u16 version, u32 H, u32 W, u16 K, H*W uint16 (0 = unlabeled)
"""

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError
from .tensor import check_finite, sym_eig

FORMAT_VERSION = 1


@dataclass
class HsiCube:
    values: np.ndarray  # [H, W, B]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3 or self.values.shape[2] < 1:
            raise ShapeError(f"cube must be [H,W,B] with B >= 1, got {self.values.shape}")
        check_finite(self.values, "HSI cube")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def bands(self):
        return self.values.shape[2]


@dataclass
class LabelMap:
    labels: np.ndarray  # [H, W], 0 = unlabeled, classes 1..num_classes
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise ShapeError(f"label map must be 2-D, got {self.labels.shape}")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) > self.num_classes:
            raise DataError(f"labels must lie in 0..{self.num_classes}")

    def class_counts(self):
        return np.bincount(self.labels.ravel(), minlength=self.num_classes + 1)[1:]


def cube_bytes(cube: HsiCube) -> bytes:
    h, w, b = cube.values.shape
    return (b"HSIC" + struct.pack("<HIII", FORMAT_VERSION, h, w, b)
            + cube.values.astype("<f4").tobytes())


def write_cube(path, cube: HsiCube):
    Path(path).write_bytes(cube_bytes(cube))


def _read_header(path, magic, fmt):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    if raw[:4] != magic:
        raise DataError(f"{path}: not an {magic.decode()} file")
    if len(raw) < 4 + struct.calcsize(fmt):
        raise DataError(f"{path}: truncated header")
    return raw, struct.unpack_from(fmt, raw, 4)


def read_cube(path) -> HsiCube:
    raw, (version, h, w, b) = _read_header(path, b"HSIC", "<HIII")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported HSIC version {version}")
    body = raw[18:]
    if len(body) != h * w * b * 4:
        raise DataError(f"{path}: expected {h * w * b} floats, found {len(body) // 4}")
    return HsiCube(np.frombuffer(body, dtype="<f4").reshape(h, w, b).astype(np.float32))


def labels_bytes(labels: LabelMap) -> bytes:
    h, w = labels.labels.shape
    return (b"HSIL" + struct.pack("<HIIH", FORMAT_VERSION, h, w, labels.num_classes)
            + labels.labels.astype("<u2").tobytes())


def write_labels(path, labels: LabelMap):
    Path(path).write_bytes(labels_bytes(labels))


def read_labels(path) -> LabelMap:
    raw, (version, h, w, k) = _read_header(path, b"HSIL", "<HIIH")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported HSIL version {version}")
    body = raw[16:]
    if len(body) != h * w * 2:
        raise DataError(f"{path}: expected {h * w} labels, found {len(body) // 2}")
    return LabelMap(np.frombuffer(body, dtype="<u2").reshape(h, w), int(k))


@dataclass
class PcaModel:
    mean: np.ndarray        # [B]
    components: np.ndarray  # [B, n_keep], orthonormal columns
    variances: np.ndarray   # full descending spectrum of the band covariance

    @property
    def n_keep(self):
        return self.components.shape[1]

    def explained_variance_ratio(self) -> float:
        total = float(np.sum(self.variances))
        return float(np.sum(self.variances[:self.n_keep]) / total) if total > 0 else 1.0

    def transform(self, values) -> np.ndarray:
        x = np.asarray(values, dtype=np.float64)
        return ((x - self.mean) @ self.components).astype(np.float32)

    def inverse_transform(self, reduced) -> np.ndarray:
        return (np.asarray(reduced, np.float64) @ self.components.T + self.mean).astype(np.float32)


def fit_pca(cube: HsiCube, n_keep: int) -> PcaModel:
    """Principal axes of the band covariance over every pixel of the cube.

    Each component is signed so that its largest-magnitude entry is positive.
    """
    if not 1 <= n_keep <= cube.bands:
        raise ShapeError(f"n_keep must lie in 1..{cube.bands}, got {n_keep}")
    x = cube.values.reshape(-1, cube.bands).astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(len(x) - 1, 1)
    eig = sym_eig(cov)
    comps = eig.eigenvectors[:, :n_keep].copy()
    pivot = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[pivot, np.arange(n_keep)])
    comps *= np.where(signs == 0, 1.0, signs)
    return PcaModel(mean, comps, np.clip(eig.eigenvalues, 0.0, None))


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, reduced, coords):
        """Per-component statistics over the pixels at ``coords`` only."""
        px = reduced[coords[:, 0], coords[:, 1]].astype(np.float64)
        std = px.std(axis=0)
        return cls(px.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, values):
        return ((np.asarray(values, np.float64) - self.mean) / self.std).astype(np.float32)


def pad_reflect(reduced, s: int):
    """Mirror-pad an [H, W, C] image by ``s // 2`` on each side (border not repeated)."""
    r = s // 2
    return np.pad(reduced, ((r, r), (r, r), (0, 0)), mode="reflect")


def extract_patch(reduced, row: int, col: int, s: int, padded=None) -> np.ndarray:
    """``s x s`` window centred on (row, col) as ``[C, s, s]``.

    Positions outside the image are mirrored about the border pixel. Pass a
    precomputed ``pad_reflect(reduced, s)`` as ``padded`` when extracting many.
    """
    if s < 1 or s % 2 == 0:
        raise ShapeError(f"patch size must be odd, got {s}")
    h, w = reduced.shape[:2]
    if not (0 <= row < h and 0 <= col < w):
        raise ShapeError(f"pixel ({row}, {col}) outside {h}x{w} image")
    if padded is None:
        padded = pad_reflect(reduced, s)
    return np.ascontiguousarray(padded[row:row + s, col:col + s].transpose(2, 0, 1))


def extract_patches(reduced, coords, s: int) -> np.ndarray:
    padded = pad_reflect(reduced, s)
    out = np.empty((len(coords), reduced.shape[2], s, s), dtype=np.float32)
    for i, (r, c) in enumerate(coords):
        out[i] = extract_patch(reduced, int(r), int(c), s, padded)
    return out


class SplitMode(str, enum.Enum):
    PER_CLASS_COUNT = "count"
    PER_CLASS_FRACTION = "fraction"


@dataclass(frozen=True)
class SplitSpec:
    mode: SplitMode
    value: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", SplitMode(self.mode))
        if self.mode is SplitMode.PER_CLASS_COUNT:
            if int(self.value) != self.value or self.value < 1:
                raise DataError("per-class count must be an integer >= 1")
        elif not 0.0 < self.value < 1.0:
            raise DataError("per-class fraction must lie in (0, 1)")

    def train_count(self, class_size: int) -> int:
        if self.mode is SplitMode.PER_CLASS_COUNT:
            return min(int(self.value), class_size - 1)
        return int(math.floor(self.value * class_size + 0.5))


def stratified_split(labels: LabelMap, spec: SplitSpec):
    """Random per-class split into ``(train_coords, test_coords)``, each [n, 2] (row, col).

    Both lists come back in a seeded random order (not grouped by class).
    """
    rng = np.random.default_rng(spec.seed)
    train, test = [], []
    for k in range(1, labels.num_classes + 1):
        coords = np.argwhere(labels.labels == k)
        if len(coords) == 0:
            raise DataError(f"class {k} has no labeled pixels")
        coords = coords[rng.permutation(len(coords))]
        n = spec.train_count(len(coords))
        train.append(coords[:n])
        test.append(coords[n:])
    train = np.concatenate(train)
    test = np.concatenate(test)
    return train[rng.permutation(len(train))], test[rng.permutation(len(test))]


def encode_direct(patch, time_steps: int) -> np.ndarray:
    """Present the analog patch as the same input current at every step.

    Returns a read-only ``[T, ...]`` view; nothing is copied.
    """
    if time_steps < 1:
        raise ShapeError("time_steps must be >= 1")
    patch = np.asarray(patch)
    return np.broadcast_to(patch, (time_steps,) + patch.shape)


def generate_synthetic(num_classes=4, height=32, width=32, bands=20, class_separation=1.0,
                       noise_sigma=0.1, seed=0):
    """Blocky synthetic scene: one random spectral signature per class plus white noise.

    Classes occupy the cells of a near-square grid laid over the image
    (surplus cells reuse classes cyclically). Every pixel is labeled.
    """
    if class_separation <= 0:
        raise DataError("class_separation must be positive")
    if num_classes < 1:
        raise DataError("need at least one class")
    rng = np.random.default_rng(seed)
    cols = math.ceil(math.sqrt(num_classes))
    rows = math.ceil(num_classes / cols)
    r = np.arange(height)[:, None] * rows // height
    c = np.arange(width)[None, :] * cols // width
    labels = (r * cols + c) % num_classes + 1
    signatures = class_separation * rng.standard_normal((num_classes, bands))
    values = signatures[labels - 1] + noise_sigma * rng.standard_normal((height, width, bands))
    return HsiCube(values.astype(np.float32)), LabelMap(labels, num_classes)


@dataclass
class PreparedData:
    """Everything a training run needs, derived deterministically from the inputs."""

    reduced: np.ndarray  # standardized PCA image [H, W, n_keep]
    labels: LabelMap
    pca: PcaModel
    standardizer: Standardizer
    train_coords: np.ndarray
    test_coords: np.ndarray
    patch_size: int

    def patches(self, coords):
        return extract_patches(self.reduced, coords, self.patch_size)

    def targets(self, coords):
        return self.labels.labels[coords[:, 0], coords[:, 1]]


def prepare(cube: HsiCube, labels: LabelMap, split: SplitSpec, n_components: int,
            patch_size: int) -> PreparedData:
    if cube.values.shape[:2] != labels.labels.shape:
        raise DataError(f"cube {cube.values.shape[:2]} and labels {labels.labels.shape} differ")
    pca = fit_pca(cube, n_components)
    reduced = pca.transform(cube.values)
    train, test = stratified_split(labels, split)
    std = Standardizer.fit(reduced, train)
    return PreparedData(std.apply(reduced), labels, pca, std, train, test, patch_size)
