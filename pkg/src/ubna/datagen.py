"""Seeded synthetic segmentation domains.

Each image is a base-class canvas overlaid with random axis-aligned
rectangles of other classes. Pixel colours are drawn from a per-class
Gaussian around ``class_means[s]`` and clamped to [0, 1]. A target domain
is the same generator plus a :class:`DomainShift`. With equal seeds the
label maps and the colour noise stay identical, so source and target
images are exact pairs.
"""
import configparser
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError

_IDENTITY3 = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

DEFAULT_CLASS_MEANS = (
    (0.45, 0.45, 0.45),
    (0.25, 0.55, 0.30),
    (0.65, 0.35, 0.30),
    (0.35, 0.40, 0.65),
)


@dataclass(frozen=True)
class DomainShift:
    """Per-channel affine change of appearance, optional colour mixing and noise.

    ``x' = clamp(M @ (scale * x + offset) + noise, 0, 1)``
    """

    scale: tuple = (1.0, 1.0, 1.0)
    offset: tuple = (0.0, 0.0, 0.0)
    mixing: tuple = _IDENTITY3
    noise_std: float = 0.0

    def __post_init__(self):
        if len(self.scale) != 3 or len(self.offset) != 3:
            raise InvalidInputError("scale and offset need three channel entries")
        if any(a <= 0 for a in self.scale):
            raise InvalidInputError("channel scales must be positive")
        if np.asarray(self.mixing).shape != (3, 3):
            raise InvalidInputError("mixing matrix must be 3x3")
        if self.noise_std < 0:
            raise InvalidInputError("noise_std must be non-negative")

    @property
    def is_identity(self):
        return (
            tuple(self.scale) == (1.0, 1.0, 1.0)
            and tuple(self.offset) == (0.0, 0.0, 0.0)
            and np.array_equal(np.asarray(self.mixing, float), np.eye(3))
            and self.noise_std == 0
        )

    def inverse(self):
        """Inverse of the affine part; defined for an identity mixing matrix only."""
        if not np.array_equal(np.asarray(self.mixing, float), np.eye(3)):
            raise InvalidInputError("inverse is only provided for unmixed shifts")
        return DomainShift(
            scale=tuple(1.0 / a for a in self.scale),
            offset=tuple(-b / a for a, b in zip(self.scale, self.offset)),
        )


def apply_shift(image, shift, seed=0):
    """Apply ``shift`` to an ``(..., 3)`` image array; returns float32."""
    image = np.asarray(image)
    if image.shape[-1] != 3:
        raise InvalidInputError("domain shifts act on 3-channel images")
    if shift.is_identity:
        return image.astype(np.float32, copy=True)
    x = image.astype(np.float64)
    x = x * np.asarray(shift.scale) + np.asarray(shift.offset)
    mixing = np.asarray(shift.mixing, dtype=np.float64)
    if not np.array_equal(mixing, np.eye(3)):
        x = x @ mixing.T
    if shift.noise_std > 0:
        rng = np.random.default_rng(seed)
        x = x + rng.normal(0.0, shift.noise_std, size=x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class DomainDataset:
    class_means: tuple = DEFAULT_CLASS_MEANS
    color_std: float = 0.08
    size: int = 200
    height: int = 32
    width: int = 32
    seed: int = 0
    # None draws the canvas class per image from class_probs
    base_class: int = None
    rects_per_image: tuple = (2, 5)
    rect_extent: tuple = (0.2, 0.6)
    class_probs: tuple = None
    shift: DomainShift = field(default_factory=DomainShift)
    labeled: bool = True
    ordered: bool = True

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=np.float64)
        if means.ndim != 2 or means.shape[1] != 3 or means.shape[0] < 1:
            raise InvalidInputError("class_means must be an (S, 3) table")
        if self.color_std < 0:
            raise InvalidInputError("color_std must be non-negative")
        if self.size < 0 or self.height < 1 or self.width < 1:
            raise InvalidInputError("invalid dataset dimensions")
        lo, hi = self.rects_per_image
        if not 0 <= lo <= hi:
            raise InvalidInputError("rects_per_image must be an ordered (min, max) pair")
        if self.class_probs is not None:
            p = np.asarray(self.class_probs, dtype=np.float64)
            if p.shape != (means.shape[0],) or np.any(p < 0) or p.sum() <= 0:
                raise InvalidInputError("class_probs must be S non-negative weights")
        if self.base_class is not None and not 0 <= self.base_class < means.shape[0]:
            raise InvalidInputError("base_class out of range")

    @property
    def num_classes(self):
        return len(self.class_means)

    @property
    def channels(self):
        return 3

    def __len__(self):
        return self.size

    def with_shift(self, shift, **changes):
        return replace(self, shift=shift, **changes)

    def _probs(self):
        if self.class_probs is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        p = np.asarray(self.class_probs, dtype=np.float64)
        return p / p.sum()

    def layout(self, index):
        rng = np.random.default_rng([self.seed, index, 0])
        probs = self._probs()
        H, W = self.height, self.width
        base = self.base_class
        if base is None:
            base = rng.choice(self.num_classes, p=probs)
        labels = np.full((H, W), base, dtype=np.int64)
        lo, hi = self.rects_per_image
        for _ in range(rng.integers(lo, hi + 1)):
            cls = rng.choice(self.num_classes, p=probs)
            rh = max(1, int(round(rng.uniform(*self.rect_extent) * H)))
            rw = max(1, int(round(rng.uniform(*self.rect_extent) * W)))
            top = rng.integers(0, H - rh + 1)
            left = rng.integers(0, W - rw + 1)
            labels[top : top + rh, left : left + rw] = cls
        return labels

    def generate(self, index):
        """Return ``(image, labels)`` with shapes ``(H, W, 3)`` and ``(H, W)``."""
        if not 0 <= index < self.size:
            raise InvalidInputError(f"index {index} out of range for dataset of size {self.size}")
        labels = self.layout(index)
        means = np.asarray(self.class_means, dtype=np.float64)
        rng = np.random.default_rng([self.seed, index, 1])
        noise = rng.standard_normal(labels.shape + (3,))
        img = np.clip(means[labels] + self.color_std * noise, 0.0, 1.0).astype(np.float32)
        if not self.shift.is_identity:
            img = apply_shift(img, self.shift, seed=[self.seed, index, 2])
        return img, labels

    def batch(self, indices):
        """Stack images (and labels) for ``indices`` into ``(B, H, W, 3)`` / ``(B, H, W)``."""
        pairs = [self.generate(int(i)) for i in indices]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    def images(self, indices):
        return self.batch(indices)[0]

    def materialize(self):
        """All images and labels of the dataset as two arrays."""
        return self.batch(range(self.size))


class ArraySource:
    """In-memory image source usable wherever a DomainDataset is accepted.

    ``ordered`` marks the frames as temporally ordered (a video); online
    adaptation refuses unordered sources.
    """

    def __init__(self, images, labels=None, ordered=True):
        self._images = np.asarray(images, dtype=np.float32)
        if self._images.ndim != 4:
            raise InvalidInputError("ArraySource expects a (N, H, W, C) array")
        self._labels = None if labels is None else np.asarray(labels)
        self.ordered = ordered

    def __len__(self):
        return len(self._images)

    @property
    def labeled(self):
        return self._labels is not None

    def images(self, indices):
        return self._images[np.asarray(indices, dtype=np.int64)]

    def batch(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self._labels is None else self._labels[idx]
        return self._images[idx], labels

    def materialize(self):
        return self._images, self._labels

    def shuffled(self, seed=0):
        perm = np.random.default_rng(seed).permutation(len(self))
        labels = None if self._labels is None else self._labels[perm]
        return ArraySource(self._images[perm], labels, ordered=False)


def write_ppm(path, image):
    """Write an ``(H, W, 3)`` image with values in [0, 1] as a binary PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise InvalidInputError("PPM export needs an (H, W, 3) image")
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


# ----------------------------------------------------------------------------
# Config-file schema (INI):
#
#   [name]
#   base = other_section        ; optional, inherit every key from another section
#   class_means = r,g,b; r,g,b; ...
#   color_std = 0.08
#   size = 200
#   height = 32
#   width = 32
#   seed = 0
#   base_class = 0              ; or "random"
#   rects_per_image = 2,5
#   rect_extent = 0.2,0.6
#   class_probs = 1,1,1,1       ; optional
#   shift_scale = 1,1,1
#   shift_offset = 0,0,0
#   shift_mixing = 1,0,0; 0,1,0; 0,0,1
#   shift_noise = 0.0
# ----------------------------------------------------------------------------

DATASET_KEYS = (
    "class_means", "color_std", "size", "height", "width", "seed", "base_class",
    "rects_per_image", "rect_extent", "class_probs", "shift_scale", "shift_offset",
    "shift_mixing", "shift_noise",
)


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def _table(text):
    return tuple(_floats(row) for row in text.split(";") if row.strip())


def _resolve_section(parser, name, seen=()):
    if not parser.has_section(name):
        raise InvalidInputError(f"dataset section [{name}] not found")
    if name in seen:
        raise InvalidInputError(f"cyclic 'base' chain through [{name}]")
    values = {}
    base = parser.get(name, "base", fallback=None)
    if base:
        values.update(_resolve_section(parser, base.strip(), seen + (name,)))
    for key in parser.options(name):
        if key != "base":
            values[key] = parser.get(name, key).strip()
    return values


def dataset_from_mapping(values):
    """Build a DomainDataset from string key/values using the schema above."""
    unknown = set(values) - set(DATASET_KEYS)
    if unknown:
        raise InvalidInputError(f"unknown dataset keys: {sorted(unknown)}")
    kw = {}
    try:
        if "class_means" in values:
            kw["class_means"] = _table(values["class_means"])
        for key in ("color_std",):
            if key in values:
                kw[key] = float(values[key])
        for key in ("size", "height", "width", "seed"):
            if key in values:
                kw[key] = int(values[key])
        if "base_class" in values:
            v = values["base_class"]
            kw["base_class"] = None if v.lower() in ("random", "none", "") else int(v)
        if "rects_per_image" in values:
            lo, hi = (int(v) for v in values["rects_per_image"].split(","))
            kw["rects_per_image"] = (lo, hi)
        if "rect_extent" in values:
            kw["rect_extent"] = _floats(values["rect_extent"])
        if values.get("class_probs"):
            kw["class_probs"] = _floats(values["class_probs"])
        shift_kw = {}
        if "shift_scale" in values:
            shift_kw["scale"] = _floats(values["shift_scale"])
        if "shift_offset" in values:
            shift_kw["offset"] = _floats(values["shift_offset"])
        if "shift_mixing" in values:
            shift_kw["mixing"] = _table(values["shift_mixing"])
        if "shift_noise" in values:
            shift_kw["noise_std"] = float(values["shift_noise"])
    except ValueError as exc:
        raise InvalidInputError(f"malformed dataset value: {exc}") from exc
    kw["shift"] = DomainShift(**shift_kw)
    return DomainDataset(**kw)


def dataset_to_mapping(ds):
    """Inverse of :func:`dataset_from_mapping`; every key written explicitly."""
    fmt = lambda seq: ",".join(repr(float(v)) for v in seq)  # noqa: E731
    table = lambda rows: "; ".join(fmt(r) for r in rows)  # noqa: E731
    return {
        "class_means": table(ds.class_means),
        "color_std": repr(float(ds.color_std)),
        "size": str(ds.size),
        "height": str(ds.height),
        "width": str(ds.width),
        "seed": str(ds.seed),
        "base_class": "random" if ds.base_class is None else str(ds.base_class),
        "rects_per_image": f"{ds.rects_per_image[0]},{ds.rects_per_image[1]}",
        "rect_extent": fmt(ds.rect_extent),
        "class_probs": "" if ds.class_probs is None else fmt(ds.class_probs),
        "shift_scale": fmt(ds.shift.scale),
        "shift_offset": fmt(ds.shift.offset),
        "shift_mixing": table(ds.shift.mixing),
        "shift_noise": repr(float(ds.shift.noise_std)),
    }


def load_dataset_spec(path_or_parser, section):
    """Read the dataset described by ``[section]`` of an INI file or parser."""
    if isinstance(path_or_parser, configparser.ConfigParser):
        parser = path_or_parser
    else:
        parser = configparser.ConfigParser()
        if not parser.read(path_or_parser):
            raise InvalidInputError(f"cannot read config file {path_or_parser}")
    return dataset_from_mapping(_resolve_section(parser, section))
