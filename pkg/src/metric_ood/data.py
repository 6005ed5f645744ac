"""Datasets: MNIST IDX and CIFAR-10 binary readers, synthetic sets, class splits.

Images are float64 NHWC arrays in [0, 1]. Out-of-distribution samples carry
the label ``OOD_LABEL`` and an ``origin`` tag describing where they came from.
"""

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, UsageError

OOD_LABEL = -1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
ANOMALY_SOURCES = ("gaussian_noise", "cifar10", "none")
BLOB_STDDEV = 0.01

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.origin = np.asarray(self.origin, dtype=object)
        n = len(self.images)
        if len(self.labels) != n or len(self.origin) != n:
            raise UsageError("images, labels and origin must have equal length")
        if n and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise UsageError("pixel values must lie in [0, 1]")
        anomalous = np.array([str(o).startswith("anomaly") for o in self.origin], dtype=bool)
        if np.any(self.labels[anomalous] != OOD_LABEL):
            raise UsageError("anomaly samples must carry the OOD label")

    def __len__(self):
        return len(self.images)

    @property
    def sample_shape(self):
        return self.images.shape[1:]

    def subset(self, idx):
        return LabeledImageSet(self.images[idx], self.labels[idx], self.origin[idx])

    def relabel(self, origin, labels=None):
        """Copy with a new origin tag (and optionally labels) for every sample."""
        labels = self.labels if labels is None else np.full(len(self), labels)
        return LabeledImageSet(self.images, labels, np.full(len(self), origin, dtype=object))


def concat(sets):
    sets = list(sets)
    return LabeledImageSet(np.concatenate([s.images for s in sets]),
                           np.concatenate([s.labels for s in sets]),
                           np.concatenate([s.origin for s in sets]))


# -- IDX --------------------------------------------------------------------------


def _read_idx(path, magic, ndim_expected):
    data = Path(path).read_bytes()
    header = 4 + 4 * ndim_expected
    if len(data) < 4:
        raise FormatError(f"{path}: truncated magic at byte 0")
    (got,) = struct.unpack(">I", data[:4])
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at byte 0 (expected 0x{magic:08x})")
    if len(data) < header:
        raise FormatError(f"{path}: truncated dimension header at byte {len(data)}")
    dims = struct.unpack(">" + "I" * ndim_expected, data[4:header])
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise FormatError(f"{path}: truncated payload at byte {len(data)} (need {header + size})")
    if len(data) - header > size:
        raise FormatError(f"{path}: {len(data) - header - size} trailing bytes at byte {header + size}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, origin="in"):
    """Read an IDX image/label file pair; pixels are scaled by 1/255."""
    raw = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(raw) != len(labels):
        raise FormatError(f"{labels_path}: {len(labels)} labels for {len(raw)} images (count at byte 4)")
    images = raw[..., None].astype(np.float64) / 255.0
    return LabeledImageSet(images, labels.astype(np.int64), np.full(len(raw), origin, dtype=object))


def write_idx(images_path, labels_path, images_u8, labels):
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_mnist(root):
    """``(train, test)`` from the four canonical IDX files under ``root``."""
    root = Path(root)
    out = []
    for part in ("train", "test"):
        img, lab = MNIST_FILES[part]
        missing = [p for p in (img, lab) if not (root / p).exists()]
        if missing:
            raise ConfigurationError(f"MNIST files missing under {root}: {missing}")
        out.append(load_idx(root / img, root / lab))
    return tuple(out)


# -- CIFAR-10 ---------------------------------------------------------------------------


def load_cifar10_binary(paths, origin="anomaly:cifar10"):
    """Read CIFAR-10 binary batches into interleaved 32x32x3 images.

    Anomaly origins get the OOD label; any other origin keeps the class byte.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        data = Path(path).read_bytes()
        if len(data) % CIFAR_RECORD:
            whole = len(data) - len(data) % CIFAR_RECORD
            raise FormatError(f"{path}: size {len(data)} is not a multiple of {CIFAR_RECORD} "
                              f"(partial record at byte {whole})")
        if not data:
            warnings.warn(f"{path}: empty CIFAR-10 file", UserWarning, stacklevel=2)
        rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    raw = np.concatenate(images) if images else np.zeros((0, 32, 32, 3), dtype=np.uint8)
    lab = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
    if str(origin).startswith("anomaly"):
        lab = np.full(len(lab), OOD_LABEL)
    return LabeledImageSet(raw.astype(np.float64) / 255.0, lab, np.full(len(lab), origin, dtype=object))


def write_cifar10_binary(path, images_u8, labels):
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    planar = images_u8.transpose(0, 3, 1, 2).reshape(len(images_u8), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planar], axis=1)
    Path(path).write_bytes(rec.tobytes())


# -- anomaly adaptation ------------------------------------------------------------------


def _bilinear_matrix(n_in, n_out):
    """(n_out, n_in) interpolation weights, half-pixel centres, edge clamped."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(images, height, width):
    _, h, w, _ = images.shape
    if (h, w) == (height, width):
        return images
    rows = _bilinear_matrix(h, height)
    cols = _bilinear_matrix(w, width)
    out = np.einsum("ih,nhwc->niwc", rows, images)
    return np.einsum("jw,niwc->nijc", cols, out)


def adapt_anomaly(image_set, target):
    """Convert an image set to ``target = (H, W, C)``: luminance, then bilinear resize."""
    th, tw, tc = (int(t) for t in target)
    if min(th, tw, tc) <= 0:
        raise UsageError(f"target dims must be positive, got {target}")
    images = image_set.images
    c = images.shape[-1]
    if c != tc:
        if c == 3 and tc == 1:
            images = (images @ np.array([0.299, 0.587, 0.114]))[..., None]
        else:
            raise UsageError(f"unsupported channel conversion {c} -> {tc}")
    images = np.clip(resize_bilinear(images, th, tw), 0.0, 1.0)
    return LabeledImageSet(images, image_set.labels, image_set.origin)


# -- synthetic ---------------------------------------------------------------------------


def gaussian_noise_set(n, dims, mean=0.5, stddev=1.0, seed=0):
    """i.i.d. Normal(mean, stddev) pixels clipped to [0, 1]."""
    if n <= 0:
        raise UsageError("n must be positive")
    rng = np.random.default_rng(seed)
    images = np.clip(rng.normal(mean, stddev, size=(n, *dims)), 0.0, 1.0)
    return LabeledImageSet(images, np.full(n, OOD_LABEL),
                           np.full(n, "anomaly:gaussian_noise", dtype=object))


def synthetic_blobs(n_per_class, classes, dims, separation, seed=0, origin="in"):
    """Isotropic Gaussian clusters, one per class, in the unit cube.

    Class ``c`` is centred at ``0.5 - a/2 + a * e_c`` (``e_c`` the c-th axis of
    the flattened sample), ``a = separation * r / sqrt(2)`` with
    ``r = BLOB_STDDEV * sqrt(width)`` the RMS cluster radius, so any two classes
    sit ``separation`` radii apart. Classes from separate calls never share an
    axis.
    """
    if not separation > 0:
        raise UsageError("separation must be positive")
    classes = [int(c) for c in classes]
    dims = tuple(int(d) for d in dims)
    width = int(np.prod(dims))
    if max(classes) >= width or min(classes) < 0:
        raise UsageError(f"class ids must lie in [0, {width}) for dims {dims}")
    a = separation * BLOB_STDDEV * np.sqrt(width / 2.0)
    if a / 2 + 4 * BLOB_STDDEV > 0.5:
        raise UsageError(f"separation {separation} does not fit in the unit cube")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in classes:
        center = np.full(width, 0.5 - a / 2)
        center[c] += a
        pts = center + BLOB_STDDEV * rng.standard_normal((n_per_class, width))
        images.append(pts.reshape(n_per_class, *dims))
        labels.append(np.full(n_per_class, c))
    images = np.clip(np.concatenate(images), 0.0, 1.0)
    labels = np.concatenate(labels)
    if str(origin).startswith("anomaly"):
        labels = np.full(len(labels), OOD_LABEL)
    return LabeledImageSet(images, labels, np.full(len(labels), origin, dtype=object))


# -- splits -------------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitConfig:
    in_classes: tuple
    seen_out_classes: tuple = ()
    unseen_out_classes: tuple = ()
    anomaly_sources: tuple = ()
    seen_anomalies: tuple = field(default=())

    def __post_init__(self):
        for name in ("in_classes", "seen_out_classes", "unseen_out_classes"):
            object.__setattr__(self, name, tuple(sorted(int(c) for c in getattr(self, name))))
        object.__setattr__(self, "anomaly_sources",
                           tuple(s for s in self.anomaly_sources if s != "none"))
        sets = [set(self.in_classes), set(self.seen_out_classes), set(self.unseen_out_classes)]
        if len(self.in_classes) < 2:
            raise ConfigurationError("split.in_classes needs at least two classes")
        overlap = (sets[0] & sets[1]) | (sets[0] & sets[2]) | (sets[1] & sets[2])
        if overlap:
            raise ConfigurationError(f"split class sets overlap on {sorted(overlap)}")
        for s in self.anomaly_sources + tuple(self.seen_anomalies):
            if s not in ANOMALY_SOURCES:
                raise ConfigurationError(f"unknown anomaly source {s!r}")
        for s in self.seen_anomalies:
            if s in self.anomaly_sources:
                raise ConfigurationError(f"anomaly source {s!r} cannot be both seen and tested")


@dataclass
class Split:
    train_in: LabeledImageSet
    seen_out: LabeledImageSet
    test_in: LabeledImageSet
    unseen_out: LabeledImageSet
    train_index: dict = field(default_factory=dict)
    test_index: dict = field(default_factory=dict)


def apply_split(train, test, config):
    """Partition native train/test sets by class.

    In-classes come from both files, seen-out from train only, unseen-out
    from test only. Out-distribution samples lose their class labels.
    """
    absent = sorted(set(c for c in config.in_classes + config.seen_out_classes
                        if not np.any(train.labels == c))
                    | set(c for c in config.in_classes + config.unseen_out_classes
                          if not np.any(test.labels == c)))
    if absent:
        raise ConfigurationError(f"classes absent from dataset: {absent}")
    tr_in = np.flatnonzero(np.isin(train.labels, config.in_classes))
    tr_out = np.flatnonzero(np.isin(train.labels, config.seen_out_classes))
    te_in = np.flatnonzero(np.isin(test.labels, config.in_classes))
    te_out = np.flatnonzero(np.isin(test.labels, config.unseen_out_classes))
    return Split(
        train_in=train.subset(tr_in).relabel("in"),
        seen_out=train.subset(tr_out).relabel("seen_out", OOD_LABEL),
        test_in=test.subset(te_in).relabel("in"),
        unseen_out=test.subset(te_out).relabel("unseen_out_novelty", OOD_LABEL),
        train_index={"train_in": tr_in, "seen_out": tr_out},
        test_index={"test_in": te_in, "unseen_out": te_out},
    )


def holdout(image_set, fraction, seed):
    """Seeded ``(train, validation)`` split holding out ``fraction`` of samples."""
    n = len(image_set)
    n_val = int(round(fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    return image_set.subset(np.sort(perm[n_val:])), image_set.subset(np.sort(perm[:n_val]))
