"""Synthetic brain-scan-like images, PGM (P5) I/O, dataset directories and splits.

A dataset directory holds ``labels.csv`` (header ``path,label``) next to
8-bit binary PGM images.  Label 1 means tumour, 0 means no tumour.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import make_rng


class DatasetError(ValueError):
    """A dataset directory or one of its files could not be read."""


class PgmFormatError(DatasetError):
    """A file is not a valid 8-bit binary PGM."""


class LabelError(DatasetError):
    """``labels.csv`` contains a malformed row or a label outside {0, 1}."""


@dataclass
class Sample:
    image: np.ndarray  # [H, W] float64 in [0, 1]
    label: int


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 400
    image_size: int = 32
    positive_fraction: float = 0.5
    noise_sigma: float = 0.05
    background: float = 0.05
    brain_intensity: float = 0.45
    brain_radius_range: tuple[float, float] = (0.32, 0.44)  # fraction of image size
    lesion_radius_range: tuple[float, float] = (0.08, 0.14)
    lesion_intensity_range: tuple[float, float] = (0.85, 1.0)
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.n_samples < 0 or self.image_size < 4:
            raise ValueError("n_samples must be >= 0 and image_size >= 4")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError("positive_fraction must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        (b_lo, b_hi), (l_lo, l_hi) = self.brain_radius_range, self.lesion_radius_range
        if not 0 < b_lo <= b_hi <= 0.5 or not 0 < l_lo <= l_hi:
            raise ValueError("radius ranges must be positive and ordered, brain radius <= 0.5")
        if l_hi >= b_lo:
            raise ValueError(f"lesion cannot fit: max lesion radius {l_hi} >= min brain radius {b_lo}")
        return self


def _ellipse_mask(size: int, cy, cx, ry, rx, angle) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _brain(spec: SyntheticSpec, rng):
    size = spec.image_size
    lo, hi = spec.brain_radius_range
    ry, rx = rng.uniform(lo, hi, size=2) * size
    cy, cx = size / 2 + rng.uniform(-0.04, 0.04, size=2) * size
    angle = rng.uniform(-0.3, 0.3)
    img = np.full((size, size), spec.background)
    img[_ellipse_mask(size, cy, cx, ry, rx, angle)] = spec.brain_intensity
    return img, (cy, cx, ry, rx, angle)


def _lesion_mask(spec: SyntheticSpec, brain, rng) -> tuple[np.ndarray, float]:
    size = spec.image_size
    cy, cx, ry, rx, angle = brain
    lo, hi = spec.lesion_radius_range
    lr_y, lr_x = rng.uniform(lo, hi, size=2) * size
    reach = max(lr_y, lr_x)
    # centre drawn uniformly inside the brain ellipse shrunk by the lesion's reach
    r = np.sqrt(rng.uniform())
    theta = rng.uniform(0, 2 * np.pi)
    u, v = r * (rx - reach) * np.cos(theta), r * (ry - reach) * np.sin(theta)
    c, s = np.cos(angle), np.sin(angle)
    ly, lx = cy + s * u + c * v, cx + c * u - s * v
    intensity = rng.uniform(*spec.lesion_intensity_range)
    return _ellipse_mask(size, ly, lx, lr_y, lr_x, rng.uniform(0, np.pi)), intensity


def render_sample(spec: SyntheticSpec, index: int, with_lesion: bool) -> np.ndarray:
    """Image ``index`` of the spec's stream; anatomy and noise do not depend on ``with_lesion``."""
    base_rng = make_rng(spec.seed, index, 0)
    lesion_rng = make_rng(spec.seed, index, 1)
    img, brain = _brain(spec, base_rng)
    noise = base_rng.normal(0.0, spec.noise_sigma, size=img.shape) if spec.noise_sigma else 0.0
    if with_lesion:
        mask, intensity = _lesion_mask(spec, brain, lesion_rng)
        img[mask] = intensity
    return np.clip(img + noise, 0.0, 1.0)


def synthetic_labels(spec: SyntheticSpec) -> np.ndarray:
    n_pos = int(np.floor(spec.n_samples * spec.positive_fraction + 0.5))
    labels = np.zeros(spec.n_samples, dtype=np.int64)
    labels[:n_pos] = 1
    return make_rng(spec.seed, 2**32).permutation(labels)


def generate_synthetic(spec: SyntheticSpec) -> list[Sample]:
    spec.validate()
    return [
        Sample(render_sample(spec, i, bool(label)), int(label))
        for i, label in enumerate(synthetic_labels(spec))
    ]


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise DatasetError("no samples")
    return np.stack([s.image for s in samples]), np.array([s.label for s in samples], dtype=np.int64)


# ---------------------------------------------------------------- PGM


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0, 1] image as 8-bit binary PGM (values rounded to the nearest level)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    levels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = levels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(levels.tobytes())


def _header_tokens(blob: bytes, count: int, name) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace() and blob[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PgmFormatError(f"{name}: truncated PGM header")
        tokens.append(blob[start:pos])
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise PgmFormatError(f"{name}: truncated PGM header")
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM into a float64 array scaled by 1/255."""
    blob = Path(path).read_bytes()
    if blob[:2] != b"P5":
        raise PgmFormatError(f"{path}: not a binary PGM (magic {blob[:2]!r})")
    (magic, w, h, maxval), offset = _header_tokens(blob, 4, path)
    try:
        width, height, maxv = int(w), int(h), int(maxval)
    except ValueError:
        raise PgmFormatError(f"{path}: non-numeric PGM header") from None
    if width < 1 or height < 1:
        raise PgmFormatError(f"{path}: bad PGM size {width}x{height}")
    if maxv != 255:
        raise PgmFormatError(f"{path}: only 8-bit PGM (maxval 255) is supported, got {maxv}")
    pixels = blob[offset : offset + width * height]
    if len(pixels) < width * height:
        raise PgmFormatError(f"{path}: short file, {len(pixels)} of {width * height} pixel bytes")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width).astype(np.float64) / 255.0


def resize_nearest(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape
    if (h, w) == (size, size):
        return image
    rows = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(np.int64)
    return image[np.ix_(rows, cols)]


# ---------------------------------------------------------------- dataset directories


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, int]]
    image_format: str = "pgm-p5"


def write_dataset(root, samples: list[Sample]) -> DatasetManifest:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        rel = f"img_{i:05d}.pgm"
        write_pgm(root / rel, s.image)
        entries.append((rel, int(s.label)))
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        writer.writerows(entries)
    return DatasetManifest(root, entries)


def load_dataset(root, image_size: int | None = None) -> tuple[DatasetManifest, list[Sample]]:
    root = Path(root)
    csv_path = root / "labels.csv"
    if not csv_path.is_file():
        raise DatasetError(f"{csv_path}: missing labels file")
    entries, samples = [], []
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["path", "label"]:
        raise LabelError(f"{csv_path}:1: header must be 'path,label'")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise LabelError(f"{csv_path}:{lineno}: expected 2 fields, got {len(row)}")
        rel, raw_label = row[0].strip(), row[1].strip()
        if raw_label not in ("0", "1"):
            raise LabelError(f"{csv_path}:{lineno}: label {raw_label!r} not in {{0, 1}}")
        img_path = root / rel
        if not img_path.is_file():
            raise DatasetError(f"{csv_path}:{lineno}: missing image file {img_path}")
        img = read_pgm(img_path)
        if image_size is not None:
            img = resize_nearest(img, image_size)
        entries.append((rel, int(raw_label)))
        samples.append(Sample(img, int(raw_label)))
    return DatasetManifest(root, entries), samples


def split(samples: list[Sample], val_fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Seeded per-class shuffle and cut, so each split keeps the overall class ratio."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    rng = make_rng(seed, 3)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    train_idx, val_idx = [], []
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        n_val = int(np.floor(len(members) * val_fraction + 0.5))
        val_idx.extend(members[:n_val].tolist())
        train_idx.extend(members[n_val:].tolist())
    if not train_idx or not val_idx:
        raise ValueError(f"too few samples ({len(samples)}) for a {val_fraction} validation split")
    return [samples[i] for i in sorted(train_idx)], [samples[i] for i in sorted(val_idx)]
