"""Colored two-class datasets with a spurious background-color feature.

Grayscale silhouettes ("top" = blocky shirt, "shoe" = L-shape) or real
FashionMNIST images are superimposed on a background whose color
interpolates linearly from red (t=0) to green (t=1), RGB = (1-t, t, 0).
In the correlated (training) regime each class draws t from its own range:

    top   t in [0, 132/255]
    shoe  t in [123/255, 1]

so color almost determines the label, except for the small overlap
[123/255, 132/255]. In the uncorrelated (test) regime t is uniform on [0,1]
for both classes, which is what makes the test distribution OOD.

Also here: IDX parsing for real FashionMNIST, the domain-annotated dataset
container with an 80/20 split per domain, a two-feature toy dataset for
brute-force oracle tests, and binary (de)serialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DATASET_MAGIC = b"DAFTDATA"
DATASET_VERSION = 1

SPLIT_TRAIN80 = 0
SPLIT_EVAL20 = 1

TOP_T_RANGE = (0.0, 132.0 / 255.0)
SHOE_T_RANGE = (123.0 / 255.0, 1.0)
CLASS_T_RANGES = (TOP_T_RANGE, SHOE_T_RANGE)

BACKGROUND_THRESHOLD = 0.1


class DataFormatError(ValueError):
    """Raised for malformed dataset / IDX files."""


def splitmix64(seed: int, index: int) -> int:
    """Derive an independent per-sample seed from (seed, index)."""
    z = (seed * 0x9E3779B97F4A7C15 + index + 1) & 0xFFFFFFFFFFFFFFFF
    z = (z + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def color_rgb(t: float) -> tuple[float, float, float]:
    """Background color for interpolation parameter t (red -> green)."""
    return (1.0 - t, t, 0.0)


@dataclass
class DomainDataset:
    """Parallel arrays of images, labels, domain ids and split tags.

    ``color_t`` and ``shape_code`` are optional per-sample attribute series
    used by the diagnostic probes; they are in-memory only and not part of
    the serialized format.
    """

    images: np.ndarray          # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray          # (N,) small ints
    domain_ids: np.ndarray      # (N,) small ints
    split_tags: np.ndarray      # (N,) SPLIT_TRAIN80 | SPLIT_EVAL20
    color_t: np.ndarray | None = None
    shape_code: np.ndarray | None = None
    access_log: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.images)
        for name in ("labels", "domain_ids", "split_tags"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length != number of images")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def domains(self) -> list[int]:
        return sorted(int(d) for d in np.unique(self.domain_ids))

    def take(self, domains=None, split=None, purpose: str = "") -> "DomainDataset":
        """Select by domain and/or split tag; every call is audit-logged."""
        mask = np.ones(len(self), dtype=bool)
        if domains is not None:
            domains = [int(d) for d in np.atleast_1d(domains)]
            mask &= np.isin(self.domain_ids, domains)
        else:
            domains = self.domains
        if split is not None:
            mask &= self.split_tags == split
        for d in domains:
            self.access_log.append((d, split, purpose))
        return DomainDataset(
            images=self.images[mask],
            labels=self.labels[mask],
            domain_ids=self.domain_ids[mask],
            split_tags=self.split_tags[mask],
            color_t=None if self.color_t is None else self.color_t[mask],
            shape_code=None if self.shape_code is None else self.shape_code[mask],
            access_log=self.access_log,
        )


def assign_splits(n: int, rng: np.random.Generator) -> np.ndarray:
    """80/20 split tags for one domain (within one example of exact)."""
    n_train = int(round(0.8 * n))
    tags = np.full(n, SPLIT_EVAL20, dtype=np.uint8)
    order = rng.permutation(n)
    tags[order[:n_train]] = SPLIT_TRAIN80
    return tags


# ---------------------------------------------------------------------------
# IDX parsing (FashionMNIST distribution format, big-endian)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def parse_idx(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic = int.from_bytes(raw[:4], "big")
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataFormatError(f"{path}: truncated IDX dimension header")
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    if any(d > 2**31 - 1 for d in dims):
        raise DataFormatError(f"{path}: IDX dimension overflow {dims}")
    total = int(np.prod([np.int64(d) for d in dims]))
    if len(raw) - header_len < total:
        raise DataFormatError(
            f"{path}: truncated IDX payload (need {total} bytes, have {len(raw) - header_len})"
        )
    if len(raw) - header_len > total:
        raise DataFormatError(f"{path}: trailing bytes after IDX payload")
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header_len)
    if magic == IDX_LABELS_MAGIC:
        return payload.astype(np.int64)
    imgs = payload.reshape(dims).astype(np.float32) / 255.0
    return imgs


# ---------------------------------------------------------------------------
# synthetic silhouettes


SHAPE_CONTRAST = 0.75   # silhouette shade scale relative to full white
SHAPE_JITTER = 7 / 16   # center jitter as a fraction of image size


def _rint(rng: np.random.Generator, lo: float, hi: float, s: float) -> int:
    """Integer draw from the size-scaled range [lo*s, hi*s)."""
    a = max(1, int(round(lo * s)))
    b = max(a + 1, int(round(hi * s)))
    return int(rng.integers(a, b))


def _draw_top(rng: np.random.Generator, size: int) -> np.ndarray:
    """Blocky shirt: torso rectangle with short sleeves, heavily jittered.

    The heavy position jitter (and border clipping it causes) is what makes
    the shape cue hard enough that plain training prefers the background
    color shortcut.
    """
    s = size / 16.0
    jit = int(round(SHAPE_JITTER * size))
    img = np.zeros((size, size), dtype=np.float32)
    cy = size // 2 + rng.integers(-jit, jit + 1)
    cx = size // 2 + rng.integers(-jit, jit + 1)
    hw = _rint(rng, 3, 5, s)
    hh = _rint(rng, 4, 6, s)
    shade = SHAPE_CONTRAST * (0.8 + 0.4 * rng.random())
    img[max(cy - hh, 1):min(cy + hh, size - 1),
        max(cx - hw, 1):min(cx + hw, size - 1)] = shade
    sl = _rint(rng, 1, 3, s)
    top = max(cy - hh, 1)
    sl_bot = top + (min(cy + hh, size - 1) - top) // 3
    img[top:sl_bot, max(cx - hw - sl, 0):max(cx - hw, 1)] = shade
    img[top:sl_bot, min(cx + hw, size - 1):min(cx + hw + sl, size)] = shade
    img += (rng.random((size, size)).astype(np.float32) - 0.5) * 0.1 * (img > 0)
    return np.clip(img, 0.0, 1.0)


def _draw_shoe(rng: np.random.Generator, size: int) -> np.ndarray:
    """L-shaped boot: long sole anchored low, plus an ankle column."""
    s = size / 16.0
    jit = int(round(SHAPE_JITTER * size))
    img = np.zeros((size, size), dtype=np.float32)
    sole_h = _rint(rng, 3, 5, s)
    sole_bot = size - _rint(rng, 2, 4, s) - jit // 2
    sole_top = sole_bot - sole_h
    left = _rint(rng, 1, 4, s)
    right = size - _rint(rng, 1, 4, s)
    shade = SHAPE_CONTRAST * (0.8 + 0.4 * rng.random())
    img[sole_top:sole_bot, left:right] = shade
    ankle_w = _rint(rng, 3, 5, s)
    ankle_top = max(sole_top - _rint(rng, 4, 7, s), 1)
    img[ankle_top:sole_top, left:left + ankle_w] = shade
    img += (rng.random((size, size)).astype(np.float32) - 0.5) * 0.1 * (img > 0)
    return np.clip(img, 0.0, 1.0)


def _colorize(gray: np.ndarray, t: float) -> np.ndarray:
    """Background pixels get the interpolated color; foreground keeps its
    grayscale intensity on all three channels."""
    bg = gray < BACKGROUND_THRESHOLD
    r, g, b = color_rgb(t)
    out = np.empty((3,) + gray.shape, dtype=np.float32)
    out[0] = np.where(bg, np.float32(r), gray)
    out[1] = np.where(bg, np.float32(g), gray)
    out[2] = np.where(bg, np.float32(b), gray)
    return out


def _sample_t(rng: np.random.Generator, label: int, mode: str,
              t_range: tuple[float, float] | None = None) -> float:
    if mode == "test_uncorrelated":
        return float(rng.uniform(0.0, 1.0))
    lo, hi = t_range if t_range is not None else CLASS_T_RANGES[label]
    return float(rng.uniform(lo, hi))


def _source_pool(source, seed: int, image_size: int,
                 fashion_images=None, fashion_labels=None, class_map=None):
    """Return a callable (label, rng) -> grayscale silhouette."""
    if source == "synthetic_shapes":
        def draw(label, rng):
            return (_draw_top if label == 0 else _draw_shoe)(rng, image_size)
        return draw
    if source == "fashionmnist_files":
        if fashion_images is None or fashion_labels is None:
            raise ValueError("fashionmnist source requires images and labels arrays")
        class_map = class_map or {0: [0], 1: [7, 9]}  # top; sneaker+ankle boot
        pools = {}
        for cls, src_labels in class_map.items():
            idx = np.where(np.isin(fashion_labels, src_labels))[0]
            if len(idx) == 0:
                raise ValueError(f"no source examples for class {cls} (labels {src_labels})")
            pools[cls] = idx
        def draw(label, rng):
            i = pools[label][rng.integers(0, len(pools[label]))]
            return fashion_images[i].astype(np.float32)
        return draw
    raise ValueError(f"unknown source {source!r}")


def make_colored_dataset(source: str = "synthetic_shapes", n_per_class: int = 1000,
                         seed: int = 0, mode: str = "train_correlated",
                         image_size: int = 28, fashion_images=None,
                         fashion_labels=None, class_map=None) -> DomainDataset:
    """Colored two-class dataset in the correlated or uncorrelated regime."""
    if mode not in ("train_correlated", "test_uncorrelated"):
        raise ValueError(f"unknown mode {mode!r}")
    draw = _source_pool(source, seed, image_size, fashion_images, fashion_labels, class_map)
    n = 2 * n_per_class
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    ts = np.empty(n, dtype=np.float32)
    for i in range(n):
        label = i % 2
        rng = np.random.default_rng(splitmix64(seed, i))
        t = _sample_t(rng, label, mode)
        images[i] = _colorize(draw(label, rng), t)
        labels[i] = label
        ts[i] = t
    split_rng = np.random.default_rng(splitmix64(seed, n + 1))
    return DomainDataset(
        images=images, labels=labels,
        domain_ids=np.zeros(n, dtype=np.int64),
        split_tags=assign_splits(n, split_rng),
        color_t=ts, shape_code=labels.copy(),
    )


def make_domain_suite(n_per_class_per_domain: int = 250, seed: int = 0,
                      image_size: int = 28, source: str = "synthetic_shapes",
                      **source_kwargs) -> DomainDataset:
    """Five-domain colored dataset for the leave-one-domain-out protocol.

    Domains 0..3 draw t from the d-th quarter of each class's own color
    range (correlated, progressively shifted hue); domain 4 draws t uniform
    on [0, 1] (uncorrelated).
    """
    draw = _source_pool(source, seed, image_size, **source_kwargs)
    per_domain = 2 * n_per_class_per_domain
    n = 5 * per_domain
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    domain_ids = np.empty(n, dtype=np.int64)
    split_tags = np.empty(n, dtype=np.uint8)
    ts = np.empty(n, dtype=np.float32)
    i = 0
    for d in range(5):
        for j in range(per_domain):
            label = j % 2
            rng = np.random.default_rng(splitmix64(seed, 7919 * d + j))
            if d == 4:
                t = float(rng.uniform(0.0, 1.0))
            else:
                lo, hi = CLASS_T_RANGES[label]
                width = (hi - lo) / 4.0
                t = float(rng.uniform(lo + d * width, lo + (d + 1) * width))
            images[i] = _colorize(draw(label, rng), t)
            labels[i] = label
            domain_ids[i] = d
            ts[i] = t
            i += 1
        split_rng = np.random.default_rng(splitmix64(seed, 10_000_019 + d))
        split_tags[i - per_domain : i] = assign_splits(per_domain, split_rng)
    return DomainDataset(images=images, labels=labels, domain_ids=domain_ids,
                         split_tags=split_tags, color_t=ts, shape_code=labels.copy())


def make_two_feature_dataset(n: int, seed: int, spurious_strength: float,
                             mode: str = "train") -> DomainDataset:
    """Minimal 2-feature analogue of the color/shape setup.

    Feature 0 is robust (noisy but always label-aligned); feature 1 is
    spurious: in train mode its sign agrees with the label with probability
    0.5 + strength/2, in test mode it is an independent coin flip.
    """
    if mode not in ("train", "test"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n).astype(np.int64)
    sign = (2 * labels - 1).astype(np.float32)
    f0 = sign + rng.normal(0.0, 0.5, size=n).astype(np.float32)
    if mode == "train":
        agree = rng.uniform(size=n) < 0.5 + spurious_strength / 2.0
        f1 = np.where(agree, sign, -sign)
    else:
        f1 = (2 * rng.integers(0, 2, size=n) - 1).astype(np.float32)
    images = np.stack([f0, f1.astype(np.float32)], axis=1).reshape(n, 2, 1, 1)
    split_rng = np.random.default_rng(splitmix64(seed, n + 13))
    return DomainDataset(images=images.astype(np.float32), labels=labels,
                         domain_ids=np.zeros(n, dtype=np.int64),
                         split_tags=assign_splits(n, split_rng))


def estimate_color_t(images: np.ndarray) -> np.ndarray:
    """Recover the background color parameter t from rendered images.

    Background pixels are exactly (1-t, t, 0) while foreground pixels are
    gray with intensity >= the segmentation threshold on every channel, so
    a zero blue channel identifies the background and the green channel
    there equals t. Images without any background pixel get t = NaN.
    """
    images = np.asarray(images)
    out = np.full(len(images), np.nan, dtype=np.float64)
    for i, img in enumerate(images):
        bg = img[2] == 0.0
        if bg.any():
            out[i] = float(img[1][bg].mean())
    return out


def split_domains(ds: DomainDataset, holdout_domain: int) -> tuple[DomainDataset, DomainDataset]:
    """Train = union of 80% splits of the other domains; heldout = the
    holdout domain's 20% split."""
    if int(holdout_domain) not in ds.domains:
        raise ValueError(f"unknown domain {holdout_domain} (have {ds.domains})")
    others = [d for d in ds.domains if d != int(holdout_domain)]
    train = ds.take(domains=others, split=SPLIT_TRAIN80, purpose="split_domains.train")
    heldout = ds.take(domains=[int(holdout_domain)], split=SPLIT_EVAL20,
                      purpose="split_domains.heldout")
    return train, heldout


# ---------------------------------------------------------------------------
# native serialization (little-endian)


def save_dataset(ds: DomainDataset, path: str) -> None:
    n, c, h, w = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        header = np.array([DATASET_VERSION, n, c, h, w], dtype="<u4")
        fh.write(header.tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())
        fh.write(ds.domain_ids.astype("<u2").tobytes())
        fh.write(ds.split_tags.astype("u1").tobytes())
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())


def load_dataset(path: str) -> DomainDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:8] != DATASET_MAGIC:
        raise DataFormatError(f"{path}: not a daftlab dataset (bad magic)")
    if len(raw) < 28:
        raise DataFormatError(f"{path}: truncated dataset header")
    version, n, c, h, w = (int(v) for v in np.frombuffer(raw, dtype="<u4", count=5, offset=8))
    if version != DATASET_VERSION:
        raise DataFormatError(f"{path}: unsupported dataset version {version}")
    off = 28
    need = 2 * n + 2 * n + n + 4 * n * c * h * w
    if len(raw) - off != need:
        raise DataFormatError(f"{path}: truncated dataset payload "
                              f"(need {need} bytes, have {len(raw) - off})")
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off).astype(np.int64)
    off += 2 * n
    domain_ids = np.frombuffer(raw, dtype="<u2", count=n, offset=off).astype(np.int64)
    off += 2 * n
    split_tags = np.frombuffer(raw, dtype="u1", count=n, offset=off).copy()
    off += n
    images = np.frombuffer(raw, dtype="<f4", count=n * c * h * w, offset=off)
    images = images.reshape(int(n), int(c), int(h), int(w)).copy()
    return DomainDataset(images=images, labels=labels, domain_ids=domain_ids,
                         split_tags=split_tags)
