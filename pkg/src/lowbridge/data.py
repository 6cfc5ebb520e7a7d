"""Image I/O, dataset manifests, training augmentation and the synthetic
two-modality benchmark.

Images and label maps are binary PGM (P5) files. A manifest is a JSON file
listing records with paths relative to the manifest itself::

    {"modality": "A", "num_classes": 3,
     "records": [{"image": "a_train/images/0000.pgm",
                  "label": "a_train/labels/0000.pgm",
                  "spacing_mm": [1.0, 1.0]}]}
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "PGMError",
    "PGMFormatError",
    "PGMMaxvalError",
    "PGMTruncatedError",
    "LabelRangeError",
    "read_pgm",
    "write_pgm",
    "load_image",
    "save_image",
    "load_label",
    "save_label",
    "Record",
    "DatasetManifest",
    "load_manifest",
    "save_manifest",
    "AugmentationConfig",
    "augment",
    "SynthConfig",
    "ModalityStyle",
    "generate_synthetic_benchmark",
    "synth_geometry",
    "render_modality",
]


class PGMError(ValueError):
    """Unreadable PGM file."""


class PGMFormatError(PGMError):
    pass


class PGMMaxvalError(PGMError):
    pass


class PGMTruncatedError(PGMError):
    pass


class LabelRangeError(ValueError):
    pass


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PGMTruncatedError("file ends inside the PGM header")
        tokens.append(buf[start:pos])
    if pos >= n:
        raise PGMTruncatedError("file ends before pixel data")
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a binary PGM. Returns ``(pixels as uint16/uint8 array, maxval)``."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise PGMFormatError(f"{path}: not a binary PGM (magic {buf[:2]!r})")
    tokens, offset = _header_tokens(buf[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise PGMFormatError(f"{path}: malformed header {tokens!r}") from exc
    if width < 1 or height < 1:
        raise PGMFormatError(f"{path}: bad dimensions {width}x{height}")
    if not 1 <= maxval <= 65535:
        raise PGMMaxvalError(f"{path}: maxval {maxval} outside [1, 65535]")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    raster = buf[2 + offset:2 + offset + need]
    if len(raster) < need:
        raise PGMTruncatedError(f"{path}: expected {need} bytes of pixel data, found {len(raster)}")
    pixels = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return pixels.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_pgm(path, pixels: np.ndarray, maxval: int) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {pixels.shape}")
    if not 1 <= maxval <= 65535:
        raise PGMMaxvalError(f"maxval {maxval} outside [1, 65535]")
    if pixels.size and (pixels.min() < 0 or pixels.max() > maxval):
        raise ValueError("pixel values outside [0, maxval]")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + pixels.astype(dtype).tobytes())


def load_image(path) -> np.ndarray:
    """PGM with maxval 255 or 65535 -> float32 intensities in [0, 1]."""
    pixels, maxval = read_pgm(path)
    if maxval not in (255, 65535):
        raise PGMMaxvalError(f"{path}: image maxval must be 255 or 65535, got {maxval}")
    return (pixels.astype(np.float64) / maxval).astype(np.float32)


def save_image(path, image: np.ndarray, bits: int = 8) -> None:
    maxval = 255 if bits == 8 else 65535
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    write_pgm(path, np.rint(img * maxval).astype(np.uint16), maxval)


def load_label(path, num_classes: int) -> np.ndarray:
    """Label PGM -> int64 class indices, each required to lie in [0, num_classes)."""
    pixels, _ = read_pgm(path)
    labels = pixels.astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise LabelRangeError(f"{path}: label value {labels.max()} outside [0, {num_classes})")
    return labels


def save_label(path, labels: np.ndarray, num_classes: int) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelRangeError(f"label values outside [0, {num_classes})")
    write_pgm(path, labels.astype(np.uint16), max(num_classes - 1, 1))


# ----------------------------------------------------------------------------
# manifests


@dataclass
class Record:
    image: str
    label: str | None = None
    spacing_mm: tuple[float, float] = (1.0, 1.0)


@dataclass
class DatasetManifest:
    records: list[Record]
    num_classes: int
    modality: str = ""
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        if len(self.records) < 1:
            raise ValueError("a manifest needs at least one record")
        labeled = [r.label is not None for r in self.records]
        if any(labeled) and not all(labeled):
            raise ValueError("manifest mixes labeled and unlabeled records")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.base_dir = Path(self.base_dir)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labeled(self) -> bool:
        return self.records[0].label is not None

    def image_path(self, i: int) -> Path:
        return self.base_dir / self.records[i].image

    def label_path(self, i: int) -> Path | None:
        lab = self.records[i].label
        return None if lab is None else self.base_dir / lab

    def load_image(self, i: int) -> np.ndarray:
        return load_image(self.image_path(i))

    def load_label(self, i: int) -> np.ndarray:
        path = self.label_path(i)
        if path is None:
            raise ValueError(f"record {i} of {self.modality or 'manifest'} has no label")
        return load_label(path, self.num_classes)

    def spacing(self, i: int) -> tuple[float, float]:
        return tuple(float(s) for s in self.records[i].spacing_mm)

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest([self.records[i] for i in indices], self.num_classes, self.modality, self.base_dir)

    def to_dict(self) -> dict:
        return {
            "modality": self.modality,
            "num_classes": self.num_classes,
            "records": [
                {"image": r.image, "label": r.label, "spacing_mm": [float(s) for s in r.spacing_mm]}
                for r in self.records
            ],
        }


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    records = []
    for i, r in enumerate(doc["records"]):
        spacing = r.get("spacing_mm", [1.0, 1.0])
        if len(spacing) != 2 or min(spacing) <= 0:
            raise ValueError(f"{path}: record {i} has invalid spacing {spacing}")
        records.append(Record(r["image"], r.get("label"), (float(spacing[0]), float(spacing[1]))))
    return DatasetManifest(records, int(doc["num_classes"]), doc.get("modality", ""), path.parent)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")


# ----------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    """Random crop (area fraction), rotation and intensity jitter."""

    crop_scale: tuple[float, float] = (0.7, 1.0)
    rotation_deg: float = 25.0
    brightness_gamma: tuple[float, float] = (0.8, 1.2)
    contrast_gain: tuple[float, float] = (0.8, 1.2)
    crop: bool = True
    rotate: bool = True
    color: bool = True
    output_size: int | None = None

    @property
    def any_enabled(self) -> bool:
        return self.crop or self.rotate or self.color

    @classmethod
    def disabled(cls, output_size: int | None = None) -> "AugmentationConfig":
        return cls(crop=False, rotate=False, color=False, output_size=output_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown augmentation keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("crop_scale", "brightness_gamma", "contrast_gain"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def augment(image: np.ndarray, label: np.ndarray | None, cfg: AugmentationConfig, rng: np.random.Generator):
    """Apply one random draw of ``cfg`` to an image and its label map.

    The label gets the same geometric transform with nearest-neighbour
    sampling; intensity jitter touches only the image. Five variates are
    drawn on every call, whatever is enabled, so toggling one transform does
    not shift the others' random stream.
    """
    image = np.asarray(image, dtype=np.float32)
    if label is not None and np.shape(label) != image.shape:
        raise ValueError(f"image {image.shape} and label {np.shape(label)} dims differ")
    h, w = image.shape
    out = cfg.output_size or h
    out_h, out_w = (out, out) if cfg.output_size else (h, w)

    area = rng.uniform(*cfg.crop_scale)
    cy_u, cx_u = rng.uniform(size=2)
    angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    gamma = rng.uniform(*cfg.brightness_gamma)
    gain = rng.uniform(*cfg.contrast_gain)

    side = math.sqrt(area) if cfg.crop else 1.0
    theta = math.radians(angle) if cfg.rotate else 0.0
    if side == 1.0 and theta == 0.0 and (out_h, out_w) == (h, w):
        img = image.copy()
        lab = None if label is None else np.array(label, copy=True)
    else:
        crop_h, crop_w = side * h, side * w
        cy = (h - crop_h) * cy_u + crop_h / 2.0
        cx = (w - crop_w) * cx_u + crop_w / 2.0
        u = ((np.arange(out_h) + 0.5) / out_h - 0.5) * crop_h
        v = ((np.arange(out_w) + 0.5) / out_w - 0.5) * crop_w
        uu, vv = np.meshgrid(u, v, indexing="ij")
        c, s = math.cos(theta), math.sin(theta)
        rows = cy + c * uu - s * vv - 0.5
        cols = cx + s * uu + c * vv - 0.5
        coords = np.stack([rows, cols])
        img = ndimage.map_coordinates(image.astype(np.float64), coords, order=1, mode="nearest").astype(np.float32)
        lab = None
        if label is not None:
            lab = ndimage.map_coordinates(np.asarray(label), coords, order=0, mode="nearest")
    if cfg.color:
        img = np.clip(img, 0.0, 1.0) ** np.float32(gamma)
        mu = img.mean(dtype=np.float64)
        img = (img - mu) * gain + mu
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img, lab


# ----------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class ModalityStyle:
    """Intensity per class (background first), noise level and bias-field strength."""

    levels: tuple[float, ...]
    noise_sigma: float
    bias_field: float = 0.0


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    n_train: int = 200
    n_test: int = 50
    num_structures: int = 2
    seed: int = 1
    spacing_mm: tuple[float, float] = (1.0, 1.0)
    # bright structures on a dark background
    modality_a: ModalityStyle = ModalityStyle((0.10, 0.60, 0.90), 0.03)
    # inverted background, non-monotonic structure contrast, shading
    modality_b: ModalityStyle = ModalityStyle((0.85, 0.20, 0.40), 0.04, 0.10)

    @property
    def num_classes(self) -> int:
        return self.num_structures + 1

    def __post_init__(self):
        if self.num_structures < 1:
            raise ValueError("need at least one structure")
        for style in (self.modality_a, self.modality_b):
            if len(style.levels) != self.num_classes:
                raise ValueError(f"modality levels need {self.num_classes} entries")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("modality_a", "modality_b"):
            if k in d and isinstance(d[k], dict):
                style = dict(d[k])
                style["levels"] = tuple(style["levels"])
                d[k] = ModalityStyle(**style)
        if "spacing_mm" in d:
            d["spacing_mm"] = tuple(d["spacing_mm"])
        return cls(**d)


def _blob(shape, centre, radius, rng, harmonics=(2, 3), amp=0.12):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    dy = yy + 0.5 - centre[0]
    dx = xx + 0.5 - centre[1]
    phi = np.arctan2(dy, dx)
    r = np.full(shape, 1.0)
    for k in harmonics:
        r += rng.uniform(0, amp) * np.cos(k * phi + rng.uniform(0, 2 * np.pi))
    stretch = rng.uniform(0.75, 1.0)
    rot = rng.uniform(0, np.pi)
    u = dy * np.cos(rot) + dx * np.sin(rot)
    v = -dy * np.sin(rot) + dx * np.cos(rot)
    dist = np.hypot(u, v / stretch)
    return dist <= radius * r


def synth_geometry(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """One label map: a large organ-like blob plus smaller separate structures."""
    size = cfg.image_size
    s = size / 64.0
    label = np.zeros((size, size), dtype=np.int64)
    margin = 4 * s
    r0 = rng.uniform(11, 16) * s
    c0 = rng.uniform(size * 0.35, size * 0.65, size=2)
    organ = _blob((size, size), c0, r0, rng)
    label[organ] = 1
    occupied = ndimage.binary_dilation(organ, iterations=max(3, int(round(3 * s))))
    for k in range(2, cfg.num_structures + 1):
        for _ in range(200):
            rk = rng.uniform(4.5, 7.5) * s
            ck = rng.uniform(rk + margin, size - rk - margin, size=2)
            blob = _blob((size, size), ck, rk, rng, harmonics=(2,), amp=0.08)
            if blob.any() and not (blob & occupied).any():
                break
        else:
            raise RuntimeError("could not place a non-overlapping structure; increase image_size")
        label[blob] = k
        occupied |= ndimage.binary_dilation(blob, iterations=max(3, int(round(3 * s))))
    return label


def render_modality(label: np.ndarray, style: ModalityStyle, rng: np.random.Generator) -> np.ndarray:
    levels = np.asarray(style.levels, dtype=np.float64)
    img = levels[label]
    img = ndimage.gaussian_filter(img, 0.6, mode="nearest")
    if style.bias_field:
        h, w = label.shape
        yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
        a, b, ph = rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0, 2 * np.pi)
        field_ = np.sin(2 * np.pi * (a * yy + b * xx) * 0.5 + ph)
        img = img * (1.0 + style.bias_field * field_)
    img = img + rng.normal(0.0, style.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_benchmark(cfg: SynthConfig, out_dir) -> tuple[Path, Path, Path, Path]:
    """Write paired two-modality train/test splits; returns manifest paths
    ``(a_train, a_test, b_train, b_test)``.

    Sample k of a split has the same label map in both modalities; only the
    intensity mapping, shading and noise differ.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split_id, (split, count) in enumerate((("train", cfg.n_train), ("test", cfg.n_test))):
        recs = {"a": [], "b": []}
        for k in range(count):
            geo_rng = np.random.default_rng([cfg.seed, split_id, k])
            label = synth_geometry(cfg, geo_rng)
            for mod_id, (tag, style) in enumerate((("a", cfg.modality_a), ("b", cfg.modality_b))):
                rng = np.random.default_rng([cfg.seed, split_id, k, mod_id + 1])
                img = render_modality(label, style, rng)
                stem = f"{k:04d}"
                img_rel = f"{tag}_{split}/images/{stem}.pgm"
                lab_rel = f"{tag}_{split}/labels/{stem}.pgm"
                save_image(out_dir / img_rel, img)
                save_label(out_dir / lab_rel, label, cfg.num_classes)
                recs[tag].append(Record(img_rel, lab_rel, tuple(cfg.spacing_mm)))
        for tag in ("a", "b"):
            manifest = DatasetManifest(recs[tag], cfg.num_classes, tag.upper(), out_dir)
            path = out_dir / f"{tag}_{split}.json"
            save_manifest(manifest, path)
            paths[(tag, split)] = path
    (out_dir / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return paths[("a", "train")], paths[("a", "test")], paths[("b", "train")], paths[("b", "test")]
