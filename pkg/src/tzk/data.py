"""Dataset ingestion: IDX files, dequantization, padding, supervision.

MNIST-style IDX pairs are the on-disk contract (big-endian headers, magic
0x00000803 for images and 0x00000801 for labels, gzip accepted
transparently). All records end up as 32x32 single-channel images with
pixels in [0,1): 28x28 inputs are zero-padded by 2 on each side before
dequantization so the padding also carries dequantization noise.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, FormatError
from .objective import Batch, HeadSupervision, SupervisionRecord, KAPPA_LATENT
from .rng import stream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
IMAGE_SIZE = 32
DIGITS = tuple(range(10))


def _read_file(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def load_idx(path):
    """Read one IDX file; returns a u8 array of the declared shape."""
    raw = _read_file(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IMAGE_MAGIC:
        ndim = 3
    elif magic == LABEL_MAGIC:
        ndim = 1
    else:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}", offset=0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated IDX payload, expected {expected} bytes", offset=len(raw))
    return np.frombuffer(raw[header:expected], dtype=np.uint8).reshape(dims)


def load_idx_pair(image_path, label_path):
    images = load_idx(image_path)
    labels = load_idx(label_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"count mismatch: {image_path} has {images.shape[0]} images, "
            f"{label_path} has {labels.shape[0]} labels", offset=4)
    return images, labels


def write_idx(path, array):
    """Write a u8 array as IDX (images when 3-d, labels when 1-d)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = IMAGE_MAGIC if array.ndim == 3 else LABEL_MAGIC
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def dequantize_and_pad(raw: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """u8 images -> float32 (N, 1, 32, 32) in [0,1) with uniform noise per pixel."""
    if raw.ndim != 3:
        raise ContractViolation(f"expected (N, H, W) u8 images, got shape {raw.shape}")
    n, h, w = raw.shape
    if (h, w) == (28, 28):
        raw = np.pad(raw, ((0, 0), (2, 2), (2, 2)))
    elif (h, w) != (IMAGE_SIZE, IMAGE_SIZE):
        raise ContractViolation(f"images must be 28x28 or 32x32, got {h}x{w}")
    noise = rng.random(raw.shape, dtype=np.float32)
    pixels = (raw.astype(np.float32) + noise) / 256.0
    return pixels[:, None, :, :]


def area_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact box-average resampling with fractional bin edges."""
    img = img.astype(np.float64)
    h, w = img.shape

    def weights(n_in, n_out):
        m = np.zeros((n_out, n_in))
        scale = n_in / n_out
        for o in range(n_out):
            lo, hi = o * scale, (o + 1) * scale
            i0, i1 = int(np.floor(lo)), int(np.ceil(hi))
            for i in range(i0, min(i1, n_in)):
                m[o, i] = min(hi, i + 1) - max(lo, i)
        return m / scale

    return weights(h, out_h) @ img @ weights(w, out_w).T


@dataclass
class ImageRecord:
    pixels: np.ndarray      # (1, 32, 32) float32 in [0,1)
    source: str             # dataset id, e.g. "mnist"
    digit_label: int | None


class RecordStore:
    """Column-oriented store of ingested records."""

    def __init__(self, pixels, sources, labels):
        self.pixels = pixels              # (N, 1, 32, 32) float32
        self.sources = sources            # list[str] per record
        self.labels = labels              # (N,) int16, -1 when absent

    def __len__(self):
        return self.pixels.shape[0]

    def record(self, i) -> ImageRecord:
        label = int(self.labels[i])
        return ImageRecord(self.pixels[i], self.sources[i], None if label < 0 else label)

    @classmethod
    def ingest(cls, datasets: dict, seed: int) -> "RecordStore":
        """datasets maps a dataset id to (u8 images, labels or None)."""
        pix, src, lab = [], [], []
        for name in sorted(datasets):
            raw, labels = datasets[name]
            rng = stream(seed, "dequantize", name)
            pix.append(dequantize_and_pad(raw, rng))
            src.extend([name] * raw.shape[0])
            if labels is None:
                lab.append(np.full(raw.shape[0], -1, dtype=np.int16))
            else:
                lab.append(np.asarray(labels, dtype=np.int16))
        return cls(np.concatenate(pix), src, np.concatenate(lab))


@dataclass
class KnowledgeAssignment:
    """Maps records to supervision: dataset heads and digit heads.

    Dataset presence is supervised for every record (1 for its own dataset,
    0 for the others). Digit presence is supervised on records from sources
    that carry digit labels and latent elsewhere. Characteristics are always
    latent.
    """

    dataset_ids: list
    digit_sources: tuple = ("mnist",)
    c_dim: int = 2
    heads: list | None = None   # explicit head ids; None derives the full set

    @property
    def head_ids(self):
        if self.heads is not None:
            return list(self.heads)
        heads = [f"dataset:{d}" for d in self.dataset_ids]
        if any(d in self.dataset_ids for d in self.digit_sources):
            heads += [f"digit:{d}" for d in DIGITS]
        return heads

    def c_dims(self):
        return {hid: self.c_dim for hid in self.head_ids}

    def _kappa_for(self, head_id, source, label):
        kind, _, key = head_id.partition(":")
        if kind == "dataset":
            return 1 if source == key else 0
        if kind == "digit":
            if source not in self.digit_sources:
                return KAPPA_LATENT
            return 1 if label == int(key) else 0
        raise ContractViolation(f"unknown head id {head_id!r} (expected dataset:* or digit:*)")

    def supervision_for(self, record: ImageRecord) -> dict[str, SupervisionRecord]:
        return {hid: SupervisionRecord(kappa=self._kappa_for(hid, record.source, record.digit_label))
                for hid in self.head_ids}

    def batch_supervision(self, store: RecordStore, idx: np.ndarray) -> dict[str, HeadSupervision]:
        sup = {}
        src = np.asarray([store.sources[i] for i in idx])
        lab = store.labels[idx]
        b = len(idx)
        labeled = np.isin(src, list(self.digit_sources))
        for hid in self.head_ids:
            kind, _, key = hid.partition(":")
            if kind == "dataset":
                kappa = (src == key).astype(np.int8)
            elif kind == "digit":
                kappa = np.where(labeled, (lab == int(key)).astype(np.int8), np.int8(KAPPA_LATENT))
            else:
                raise ContractViolation(f"unknown head id {hid!r}")
            sup[hid] = HeadSupervision(kappa.astype(np.int8), np.zeros((b, self.c_dim), np.float32),
                                       np.zeros(b, bool))
        return sup


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return stream(seed, "epoch", epoch).permutation(n)


def batch_indices(n: int, seed: int, batch_size: int, step: int) -> np.ndarray:
    """Row indices of batch `step` under stateless per-epoch shuffling."""
    per_epoch = -(-n // batch_size)
    epoch, b = divmod(step, per_epoch)
    perm = epoch_permutation(n, seed, epoch)
    return perm[b * batch_size:(b + 1) * batch_size]


def make_batch_fn(store: RecordStore, assignment: KnowledgeAssignment, batch_size: int,
                  seed: int, epochs: int | None = None):
    """Return get_batch(step) for the trainer; None once `epochs` passes end."""
    if batch_size < 1:
        raise ContractViolation("batch_size must be >= 1")
    n = len(store)
    per_epoch = -(-n // batch_size)

    def get_batch(step):
        if epochs is not None and step >= epochs * per_epoch:
            return None
        idx = batch_indices(n, seed, batch_size, step)
        return Batch(images=store.pixels[idx], sup=assignment.batch_supervision(store, idx))

    return get_batch


def batches(store: RecordStore, assignment: KnowledgeAssignment, batch_size: int,
            seed: int, epochs: int = 1):
    """Finite stream of shuffled batches; datasets interleave via the shuffle."""
    fn = make_batch_fn(store, assignment, batch_size, seed, epochs=epochs)
    step = 0
    while True:
        b = fn(step)
        if b is None:
            return
        yield b
        step += 1


# -- dataset roots -----------------------------------------------------------

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find_idx(data_dir, stem):
    for suffix in ("", ".gz"):
        p = os.path.join(data_dir, stem + suffix)
        if os.path.exists(p):
            return p
    raise FormatError(f"missing dataset file {stem}[.gz] under {data_dir}", offset=None)


def load_mnist(data_dir, split="train", subset=0, seed=0):
    img_stem, lab_stem = MNIST_FILES[split]
    images, labels = load_idx_pair(_find_idx(data_dir, img_stem), _find_idx(data_dir, lab_stem))
    if np.any(labels > 9):
        raise FormatError("labels outside 0-9", offset=None)
    if subset and subset < images.shape[0]:
        keep = stream(seed, "subset", split).permutation(images.shape[0])[:subset]
        keep.sort()
        images, labels = images[keep], labels[keep]
    return images, labels


def load_omniglot(data_dir, split="train"):
    images, labels = load_idx_pair(_find_idx(data_dir, f"omniglot-{split}-images-idx3-ubyte"),
                                   _find_idx(data_dir, f"omniglot-{split}-labels-idx1-ubyte"))
    return images, labels


def convert_omniglot_tree(src_dir, invert=True):
    """Image-file tree -> (u8 32x32 images, character-index labels).

    Files are discovered in sorted order for determinism; every distinct
    directory becomes one character class. Strokes are made bright on dark
    (like handwritten digits on black) unless invert is disabled.
    """
    import matplotlib.image as mpimg

    paths = []
    for root, dirs, files in os.walk(src_dir):
        dirs.sort()
        for f in sorted(files):
            if f.lower().endswith((".png", ".jpg", ".jpeg", ".bmp")):
                paths.append(os.path.join(root, f))
    if not paths:
        raise FormatError(f"no image files under {src_dir}", offset=None)
    classes = {}
    images, labels = [], []
    for p in paths:
        arr = mpimg.imread(p)
        if arr.ndim == 3:
            arr = arr[..., :3].mean(axis=2)
        if arr.dtype.kind in "ui":
            arr = arr.astype(np.float64) / 255.0
        small = np.clip(area_resize(arr, IMAGE_SIZE, IMAGE_SIZE), 0.0, 1.0)
        if invert:
            small = 1.0 - small
        images.append(np.round(small * 255.0).astype(np.uint8))
        cls = os.path.dirname(p)
        # IDX labels are u8; character identity is informational only here
        # (supervision for this dataset is dataset-level), so cap at 256.
        labels.append(classes.setdefault(cls, len(classes)) % 256)
    return np.stack(images), np.asarray(labels, dtype=np.uint8)
