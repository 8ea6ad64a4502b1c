"""Image datasets, shadow sampling and ground-truth patch triggers.

All pixel data lives in ``float32`` arrays of shape ``(N, H, W, C)`` with
values in ``[0, 1]``.  Any per-channel normalization an encoder needs is a
layer inside the encoder.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp")

POSITIONS = ("lower-right", "center", "upper-left")

DEFAULT_SHADOW_SIZE = 1000


class DataError(ValueError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    arr.setflags(write=False)
    return arr


def check_batch(images: np.ndarray, shape: Sequence[int] | None = None) -> np.ndarray:
    """Validate an image batch and return it as float32."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise DataError(f"expected (N, H, W, C) batch, got shape {images.shape}")
    if shape is not None and tuple(images.shape[1:]) != tuple(shape):
        raise DataError(f"batch shape {images.shape[1:]} does not match {tuple(shape)}")
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise DataError("pixel values must lie in [0, 1]")
    return images


@dataclass(frozen=True)
class ShadowDataset:
    """Unlabeled images used for trigger inversion (and attack fine-tuning)."""

    images: np.ndarray
    source: str = "pretraining-subset"

    def __post_init__(self):
        images = check_batch(self.images)
        if len(images) < 2:
            raise DataError("a shadow dataset needs at least 2 images")
        object.__setattr__(self, "images", _frozen(images))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def sample(self, size: int, seed: int = 0) -> "ShadowDataset":
        """Draw ``size`` distinct images (without replacement)."""
        if size < 2:
            raise DataError(f"shadow size must be >= 2, got {size}")
        if size > len(self):
            raise DataError(f"cannot sample {size} images from a dataset of {len(self)}")
        if size == len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=size, replace=False))
        return ShadowDataset(self.images[idx], self.source)

    def digest(self) -> str:
        return hashlib.sha256(self.images.tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class LabeledSet:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        images = check_batch(self.images)
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (len(images),):
            raise DataError("labels must be a vector with one entry per image")
        object.__setattr__(self, "images", _frozen(images))
        labels = labels.copy()
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def split(self, fraction: float) -> tuple["LabeledSet", "LabeledSet"]:
        cut = int(round(len(self) * fraction))
        return (LabeledSet(self.images[:cut], self.labels[:cut]),
                LabeledSet(self.images[cut:], self.labels[cut:]))


# --------------------------------------------------------------------------
# image directories

def load_image_dir(path, target_shape: Sequence[int] = (32, 32, 3),
                   source: str = "external") -> ShadowDataset:
    """Load every image in ``path`` (sorted by filename) as a shadow dataset.

    Images are center-cropped to the target aspect ratio, resized with
    bilinear filtering and scaled from 8-bit to ``[0, 1]``.
    """
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"not a directory: {path}")
    h, w, c = target_shape
    if c not in (1, 3):
        raise DataError(f"unsupported channel count {c}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no images in {path}")
    out = np.empty((len(files), h, w, c), dtype=np.float32)
    for i, f in enumerate(files):
        try:
            with Image.open(f) as img:
                img = img.convert("RGB" if c == 3 else "L")
                out[i] = _fit(img, h, w).reshape(h, w, c)
        except (UnidentifiedImageError, OSError) as exc:
            raise DataError(f"cannot decode image {f.name}: {exc}") from exc
    return ShadowDataset(out, source)


def _fit(img: Image.Image, h: int, w: int) -> np.ndarray:
    iw, ih = img.size
    scale = min(iw / w, ih / h)
    cw, ch = round(w * scale), round(h * scale)
    left, top = (iw - cw) // 2, (ih - ch) // 2
    img = img.crop((left, top, left + cw, top + ch))
    if img.size != (w, h):
        img = img.resize((w, h), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def save_image_dir(images: np.ndarray, path, prefix: str = "img") -> list[Path]:
    """Write a batch as 8-bit PNG files (inverse of :func:`load_image_dir`)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    written = []
    for i, img in enumerate(check_batch(images)):
        arr = np.round(img * 255).astype(np.uint8)
        if arr.shape[-1] == 1:
            arr = arr[..., 0]
        f = path / f"{prefix}_{i:05d}.png"
        Image.fromarray(arr).save(f)
        written.append(f)
    return written


# --------------------------------------------------------------------------
# procedural synthetic images

# family "A": pretraining / downstream distribution.  family "B": a disjoint
# look (textured backgrounds, different shape vocabulary) for external shadows.
FAMILY_CLASSES = {
    "A": ("disc", "square", "triangle", "cross", "ring"),
    "B": ("diamond", "hbars", "ellipse", "frame", "checker"),
}


def synth_labeled(seed: int, count: int, shape: Sequence[int] = (32, 32, 3),
                  family: str = "A") -> LabeledSet:
    """Generate ``count`` labeled images of colored shapes on gradients.

    The label is the kind of the foreground shape.  Output is a pure function
    of ``(seed, count, shape, family)``.
    """
    if count < 2:
        raise DataError(f"count must be >= 2, got {count}")
    if family not in FAMILY_CLASSES:
        raise DataError(f"unknown synthetic family {family!r}")
    h, w, c = shape
    rng = np.random.default_rng([seed, ord(family)])
    kinds = FAMILY_CLASSES[family]
    labels = rng.integers(0, len(kinds), size=count)

    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    yy, xx = yy[None], xx[None]

    # background: a linear gradient between two colors along a random direction
    c0 = rng.uniform(0.0, 1.0, (count, 1, 1, c))
    c1 = rng.uniform(0.0, 1.0, (count, 1, 1, c))
    theta = rng.uniform(0, 2 * np.pi, (count, 1, 1))
    ramp = (np.cos(theta) * (xx / w - 0.5) + np.sin(theta) * (yy / h - 0.5)) + 0.5
    ramp = np.clip(ramp, 0, 1)[..., None]
    img = c0 * (1 - ramp) + c1 * ramp
    if family == "B":
        period = rng.integers(3, 8, (count, 1, 1))
        phase = rng.uniform(0, 2 * np.pi, (count, 1, 1))
        weave = np.sin(2 * np.pi * (xx + yy) / period + phase) * np.sin(2 * np.pi * (xx - yy) / period)
        img = img + 0.15 * weave[..., None]

    # a few small distractor blobs, independent of the label
    for _ in range(3):
        present = rng.random((count, 1, 1)) < 0.5
        cy, cx = rng.uniform(0, h, (count, 1, 1)), rng.uniform(0, w, (count, 1, 1))
        r = rng.uniform(1.0, 2.5, (count, 1, 1))
        blob = present & ((yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2)
        col = rng.uniform(0, 1, (count, 1, 1, c))
        img = np.where(blob[..., None], col, img)

    # foreground shape, contrasting with the background mean
    size = rng.uniform(0.22, 0.42, (count, 1, 1)) * min(h, w)
    cy = rng.uniform(size, h - size, size.shape) if h > 2 * size.max() else np.full(size.shape, h / 2)
    cx = rng.uniform(size, w - size, size.shape) if w > 2 * size.max() else np.full(size.shape, w / 2)
    fg = rng.uniform(0, 1, (count, 1, 1, c))
    bg_mean = img.mean(axis=(1, 2), keepdims=True)
    fg = np.where(np.abs(fg - bg_mean).mean(-1, keepdims=True) < 0.3, 1.0 - bg_mean, fg)
    dy, dx = (yy - cy) / size, (xx - cx) / size
    masks = np.zeros((count, h, w), dtype=bool)
    for k, kind in enumerate(kinds):
        sel = labels == k
        if sel.any():
            masks[sel] = _shape_mask(kind, dy[sel], dx[sel], rng)
    img = np.where(masks[..., None], fg, img)

    img = img + rng.normal(0, 0.02, img.shape)
    return LabeledSet(np.clip(img, 0.0, 1.0).astype(np.float32), labels)


def _shape_mask(kind: str, dy: np.ndarray, dx: np.ndarray, rng) -> np.ndarray:
    r2 = dy ** 2 + dx ** 2
    if kind == "disc":
        return r2 <= 1.0
    if kind == "square":
        return (np.abs(dy) <= 0.85) & (np.abs(dx) <= 0.85)
    if kind == "triangle":
        return (dy <= 0.8) & (dy >= -0.9 + 2.0 * np.abs(dx))
    if kind == "cross":
        return ((np.abs(dy) <= 0.3) & (np.abs(dx) <= 1.0)) | ((np.abs(dx) <= 0.3) & (np.abs(dy) <= 1.0))
    if kind == "ring":
        return (r2 <= 1.0) & (r2 >= 0.4)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= 1.0
    if kind == "hbars":
        return (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0) & (np.floor((dy + 1.0) * 2.5) % 2 == 0)
    if kind == "ellipse":
        return (dy / 0.55) ** 2 + dx ** 2 <= 1.0
    if kind == "frame":
        inner = (np.abs(dy) <= 0.55) & (np.abs(dx) <= 0.55)
        return (np.abs(dy) <= 0.95) & (np.abs(dx) <= 0.95) & ~inner
    if kind == "checker":
        cells = (np.floor((dy + 1) * 2) + np.floor((dx + 1) * 2)) % 2 == 0
        return (np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0) & cells
    raise DataError(f"unknown shape kind {kind!r}")


def synth_dataset(seed: int, count: int, shape: Sequence[int] = (32, 32, 3),
                  family: str = "A", source: str = "pretraining-subset") -> ShadowDataset:
    """Unlabeled view of :func:`synth_labeled`."""
    return ShadowDataset(synth_labeled(seed, count, shape, family).images, source)


# --------------------------------------------------------------------------
# ground-truth patch triggers

@dataclass(frozen=True)
class PatchTrigger:
    """A hard rectangular trigger.

    ``position`` is one of :data:`POSITIONS` or an explicit ``(row, col)`` of the
    top-left corner.  ``fill`` is an ``(r, g, b)`` color or the string
    ``"random"`` for a texture drawn from ``texture_seed``.
    """

    height: int = 10
    width: int = 10
    position: str | tuple[int, int] = "lower-right"
    fill: tuple[float, ...] | str = (1.0, 1.0, 1.0)
    texture_seed: int = 0

    def __post_init__(self):
        if self.height < 0 or self.width < 0:
            raise DataError("trigger size must be non-negative")
        if isinstance(self.position, (list, tuple)):
            object.__setattr__(self, "position", tuple(int(v) for v in self.position))
        elif self.position not in POSITIONS:
            raise DataError(f"unknown trigger position {self.position!r}")
        if isinstance(self.fill, str):
            if self.fill != "random":
                raise DataError(f"unknown trigger fill {self.fill!r}")
        else:
            fill = tuple(float(v) for v in self.fill)
            if any(v < 0.0 or v > 1.0 for v in fill):
                raise DataError("trigger fill components must lie in [0, 1]")
            object.__setattr__(self, "fill", fill)

    @property
    def area(self) -> int:
        return self.height * self.width

    def origin(self, shape: Sequence[int]) -> tuple[int, int]:
        h, w = shape[0], shape[1]
        if isinstance(self.position, tuple):
            row, col = self.position
        elif self.position == "lower-right":
            row, col = h - self.height, w - self.width
        elif self.position == "upper-left":
            row, col = 0, 0
        else:
            row, col = (h - self.height) // 2, (w - self.width) // 2
        if row < 0 or col < 0 or row + self.height > h or col + self.width > w:
            raise DataError(
                f"trigger {self.height}x{self.width} at ({row}, {col}) does not fit in {h}x{w}")
        return row, col

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width,
                "position": list(self.position) if isinstance(self.position, tuple) else self.position,
                "fill": self.fill if isinstance(self.fill, str) else list(self.fill),
                "texture_seed": self.texture_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchTrigger":
        d = dict(d)
        if isinstance(d.get("position"), list):
            d["position"] = tuple(d["position"])
        if isinstance(d.get("fill"), list):
            d["fill"] = tuple(d["fill"])
        return cls(**d)


def render_trigger(spec: PatchTrigger, shape: Sequence[int] = (32, 32, 3)) -> tuple[np.ndarray, np.ndarray]:
    """Express a patch trigger as a ``(mask, pattern)`` pair.

    ``mask`` is 0 inside the rectangle (pixel replaced) and 1 elsewhere;
    ``pattern`` holds the fill inside the rectangle and 0 elsewhere.
    """
    h, w, c = shape
    row, col = spec.origin(shape)
    mask = np.ones((h, w), dtype=np.float32)
    pattern = np.zeros((h, w, c), dtype=np.float32)
    if spec.area == 0:
        return mask, pattern
    mask[row:row + spec.height, col:col + spec.width] = 0.0
    if spec.fill == "random":
        rng = np.random.default_rng(spec.texture_seed)
        patch = rng.random((spec.height, spec.width, c))
    else:
        if len(spec.fill) != c:
            raise DataError(f"fill has {len(spec.fill)} components for {c} channels")
        patch = np.broadcast_to(np.asarray(spec.fill), (spec.height, spec.width, c))
    pattern[row:row + spec.height, col:col + spec.width] = patch
    return mask, pattern


def stamp_numpy(images: np.ndarray, mask: np.ndarray, pattern: np.ndarray) -> np.ndarray:
    """Per-pixel convex combination ``mask * x + (1 - mask) * pattern``."""
    images = check_batch(images)
    mask = np.asarray(mask, dtype=np.float32)
    pattern = np.asarray(pattern, dtype=np.float32)
    if mask.shape != images.shape[1:3] or pattern.shape != images.shape[1:]:
        raise DataError(
            f"mask {mask.shape} / pattern {pattern.shape} do not match images {images.shape[1:]}")
    m = mask[None, :, :, None]
    return m * images + (1.0 - m) * pattern[None]


@dataclass
class EpochSampler:
    """Yields batches without replacement within an epoch, reshuffling between epochs."""

    size: int
    batch: int
    rng: np.random.Generator = field(repr=False)
    _order: np.ndarray | None = field(default=None, repr=False)
    _pos: int = 0

    def next(self) -> np.ndarray:
        b = min(self.batch, self.size)
        if self._order is None or self._pos + b > self.size:
            self._order = self.rng.permutation(self.size)
            self._pos = 0
        idx = self._order[self._pos:self._pos + b]
        self._pos += b
        return idx
