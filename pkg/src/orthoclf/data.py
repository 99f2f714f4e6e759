"""Dataset ingestion: IDX files, area-pooling resize, synthetic blobs, cache.

Inputs are kept as flat float64 vectors in [0,1]; labels as int64. Square
images round-trip through the flat layout (side inferred as sqrt(dim)).
"""

import struct
from dataclasses import dataclass

import numpy as np

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801
_CACHE_MAGIC = b"ORTD"
_CACHE_VERSION = 1


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (N, d) float64 in [0,1]
    labels: np.ndarray  # (N,) int64
    split: str
    provenance: str

    def __post_init__(self):
        object.__setattr__(
            self, "inputs", np.ascontiguousarray(self.inputs, dtype=np.float64)
        )
        object.__setattr__(
            self, "labels", np.ascontiguousarray(self.labels, dtype=np.int64)
        )
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValueError("inputs/labels shape mismatch")
        if len(self.inputs) and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise ValueError("inputs outside [0,1]")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("negative label")

    def __len__(self):
        return len(self.inputs)

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def _read_idx(path, want_magic, want_ndim):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"truncated file: {path}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != want_magic:
        raise ValueError(f"bad magic 0x{magic:08x} in {path}")
    head = 4 + 4 * want_ndim
    if len(raw) < head:
        raise ValueError(f"truncated file: {path}")
    dims = struct.unpack(f">{want_ndim}I", raw[4:head])
    n = int(np.prod(dims))
    if len(raw) < head + n:
        raise ValueError(f"truncated file: {path}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=head).reshape(dims)


def load_idx(images_path, labels_path, split="train") -> Dataset:
    """Parse an IDX image/label file pair; bytes are scaled to [0,1]."""
    images = _read_idx(images_path, _IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, _IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise ValueError(
            f"count mismatch: {len(images)} images vs {len(labels)} labels"
        )
    flat = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(flat, labels.astype(np.int64), split, f"idx:{images_path}")


def write_idx(images_u8, labels, images_path, labels_path):
    """Emit an IDX pair (uint8 images (N,h,w), labels); test/fixture plumbing."""
    images_u8 = np.ascontiguousarray(images_u8, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    n, h, wd = images_u8.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, n, h, wd))
        fh.write(images_u8.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", _IDX_LABELS_MAGIC, n))
        fh.write(labels.tobytes())


def _pool_matrix(src: int, dst: int):
    """Rows of averaging weights for area pooling src cells into dst bins.

    Bin i covers [i*src/dst, (i+1)*src/dst); each source cell contributes its
    overlap length, and rows are normalized to sum to 1, so a constant input
    maps to itself and the global mean is preserved exactly.
    """
    m = np.zeros((dst, src))
    width = src / dst
    for i in range(dst):
        lo, hi = i * width, (i + 1) * width
        for r in range(int(np.floor(lo)), min(src, int(np.ceil(hi)))):
            m[i, r] = max(0.0, min(hi, r + 1) - max(lo, r))
    return m / width


def resize_avgpool(ds: Dataset, side: int) -> Dataset:
    """Area-pool square images down to side x side (fractional bins allowed)."""
    n, d = ds.inputs.shape
    src = int(round(np.sqrt(d)))
    if src * src != d:
        raise ValueError(f"inputs are not square images: dim {d}")
    if not 1 <= side <= src:
        raise ValueError(f"bad target side {side} for {src}x{src} images")
    pool = _pool_matrix(src, side)
    imgs = ds.inputs.reshape(n, src, src)
    out = np.einsum("ir,nrc,jc->nij", pool, imgs, pool)
    out = np.clip(out, 0.0, 1.0)  # guard fp dust at the boundaries
    return Dataset(
        out.reshape(n, side * side),
        ds.labels,
        ds.split,
        f"{ds.provenance}|avgpool{side}",
    )


def take_first(ds: Dataset, n: int) -> Dataset:
    if n > len(ds):
        raise ValueError(f"n exceeds dataset size: {n} > {len(ds)}")
    return Dataset(
        ds.inputs[:n], ds.labels[:n], ds.split, f"{ds.provenance}|first{n}"
    )


def synth_blobs(k: int, p_in: int, n_per_class: int, spread: float, seed: int) -> Dataset:
    """Gaussian blobs around per-class centroids, clipped to [0,1]."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.25, 0.75, size=(k, p_in))
    xs = np.repeat(centers, n_per_class, axis=0)
    if spread > 0:
        xs = xs + rng.normal(0.0, spread, size=xs.shape)
    xs = np.clip(xs, 0.0, 1.0)
    labels = np.repeat(np.arange(k), n_per_class)
    prov = f"synth_blobs(k={k},p={p_in},n={n_per_class},spread={spread},seed={seed})"
    return Dataset(xs, labels, "train", prov)


def save_cache(ds: Dataset, path):
    """ORTD cache: magic, version, tag strings, extents, f64 data, u16 labels."""
    split_b = ds.split.encode()
    prov_b = ds.provenance.encode()
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<IHH", _CACHE_VERSION, len(split_b), len(prov_b)))
        fh.write(split_b)
        fh.write(prov_b)
        fh.write(struct.pack("<QQ", *ds.inputs.shape))
        fh.write(np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u2").tobytes())


def load_cache(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CACHE_MAGIC:
        raise ValueError(f"bad magic in {path}: not a dataset cache")
    version, ls, lp = struct.unpack("<IHH", raw[4:12])
    if version != _CACHE_VERSION:
        raise ValueError(f"unsupported cache version {version}")
    off = 12
    split = raw[off : off + ls].decode()
    prov = raw[off + ls : off + ls + lp].decode()
    off += ls + lp
    n, d = struct.unpack("<QQ", raw[off : off + 16])
    off += 16
    need = off + 8 * n * d + 2 * n
    if len(raw) < need:
        raise ValueError(f"truncated file: {path}")
    inputs = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off + 8 * n * d)
    return Dataset(inputs, labels.astype(np.int64), split, prov)
