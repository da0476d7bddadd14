"""Synthetic shape corpus and dataset manifests."""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .pnm import read_pgm, read_ppm, write_pgm, write_ppm

GENERATOR_VERSION = "shapes-1"
SHAPE_KINDS = ("disc", "square", "triangle")
BACKGROUND_STYLES = ("noise", "gradients", "texture")


@dataclass
class Record:
    image: str
    labels: np.ndarray
    mask: str | None = None

    def __eq__(self, other):
        return (isinstance(other, Record) and self.image == other.image
                and self.mask == other.mask and np.array_equal(self.labels, other.labels))


@dataclass
class DatasetManifest:
    records: list[Record]
    class_names: list[str]
    metadata: dict[str, str] = field(default_factory=dict)
    root: Path = field(default=Path("."), compare=False)

    def __len__(self):
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def label_matrix(self) -> np.ndarray:
        return np.stack([r.labels for r in self.records]) if self.records else np.zeros((0, self.num_classes), int)

    def class_members(self, c: int) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.labels[c]]

    def subset(self, indices) -> "DatasetManifest":
        return replace(self, records=[self.records[i] for i in indices])

    def image_path(self, i: int) -> Path:
        return self.root / self.records[i].image

    def mask_path(self, i: int) -> Path | None:
        m = self.records[i].mask
        return None if m is None else self.root / m

    def load_image(self, i: int) -> np.ndarray:
        """Image as float (H, W, 3) in [0, 1]."""
        return read_ppm(self.image_path(i)).astype(np.float64) / 255.0

    def load_mask(self, i: int) -> np.ndarray:
        p = self.mask_path(i)
        if p is None:
            raise FileNotFoundError(f"record {i} ({self.records[i].image}) has no ground-truth mask")
        return read_pgm(p)


# ---------------------------------------------------------------- manifest I/O
#
# CSV with "# key=value" preamble lines (classes, seed, generator), then a
# header row image,labels,mask.  Labels are ';'-joined 0/1 flags.

def save_manifest(manifest: DatasetManifest, path):
    buf = io.StringIO()
    buf.write(f"# classes={';'.join(manifest.class_names)}\n")
    for k in sorted(manifest.metadata):
        buf.write(f"# {k}={manifest.metadata[k]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image", "labels", "mask"])
    for r in manifest.records:
        w.writerow([r.image, ";".join(str(int(v)) for v in r.labels), r.mask or ""])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    meta: dict[str, str] = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    if "classes" not in meta:
        raise ValueError(f"{path}: missing '# classes=' line")
    classes = meta.pop("classes").split(";")
    reader = csv.DictReader(body)
    if reader.fieldnames != ["image", "labels", "mask"]:
        raise ValueError(f"{path}: header must be image,labels,mask, got {reader.fieldnames}")
    records = []
    for lineno, row in enumerate(reader, start=2):
        try:
            labels = np.array([int(v) for v in row["labels"].split(";")], dtype=np.int64)
        except ValueError:
            raise ValueError(f"{path}: row {lineno}: bad label field {row['labels']!r}") from None
        if labels.shape[0] != len(classes) or not set(labels.tolist()) <= {0, 1}:
            raise ValueError(f"{path}: row {lineno}: label vector must be {len(classes)} 0/1 flags")
        if labels.sum() < 1:
            raise ValueError(f"{path}: row {lineno}: label vector has no set class")
        rec = Record(row["image"], labels, row["mask"] or None)
        if check_files:
            for p in (rec.image, rec.mask):
                if p is not None and not (path.parent / p).is_file():
                    raise FileNotFoundError(f"{path}: row {lineno}: missing file {p}")
        records.append(rec)
    return DatasetManifest(records, classes, meta, root=path.parent)


# ---------------------------------------------------------------- shape corpus

@dataclass
class ShapeCorpusConfig:
    num_images: int = 200
    image_size: int = 64
    class_names: tuple[str, ...] = SHAPE_KINDS
    class_probs: tuple[float, ...] | None = None
    min_shapes: int = 1
    max_shapes: int = 3
    min_radius: int = 9
    max_radius: int = 16
    background_styles: tuple[str, ...] = BACKGROUND_STYLES
    diversity: float = 1.0
    palette: str = "class"
    color_jitter: float = 0.12
    background_saturation: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 1:
            raise ValueError("num_images must be >= 1")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if not self.class_names or any(k not in SHAPE_KINDS for k in self.class_names):
            raise ValueError(f"class_names must be drawn from {SHAPE_KINDS}")
        if self.class_probs is not None and (len(self.class_probs) != len(self.class_names)
                                             or min(self.class_probs) < 0 or sum(self.class_probs) <= 0):
            raise ValueError("class_probs must give one nonnegative weight per class")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")
        if not 0 < self.min_radius <= self.max_radius or 2 * self.max_radius >= self.image_size:
            raise ValueError("need 0 < min_radius <= max_radius < image_size / 2")
        if not self.background_styles or any(b not in BACKGROUND_STYLES for b in self.background_styles):
            raise ValueError(f"background_styles must be drawn from {BACKGROUND_STYLES}")

    def probs(self) -> np.ndarray:
        if self.class_probs is None:
            return np.full(len(self.class_names), 1.0 / len(self.class_names))
        p = np.asarray(self.class_probs, dtype=np.float64)
        return p / p.sum()


def shape_mask(kind: str, size: int, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    """Boolean raster of one shape, sampled at pixel centers."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if kind == "disc":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        c, s = np.cos(angle), np.sin(angle)
        u, v = c * dx + s * dy, -s * dx + c * dy
        h = r * 0.85
        return (np.abs(u) <= h) & (np.abs(v) <= h)
    if kind == "triangle":
        inside = np.ones_like(dx, dtype=bool)
        for k in range(3):
            a = angle + 2 * np.pi * k / 3
            # half-plane whose inward normal points at the center; inradius r/2
            inside &= (np.cos(a) * dx + np.sin(a) * dy) <= r * 0.5
        return inside
    raise ValueError(f"unknown shape kind {kind!r}")


def _background(rng: np.random.Generator, size: int, styles, diversity: float,
                saturation: float = 1.0) -> np.ndarray:
    style = styles[rng.integers(len(styles))]
    if style == "noise":
        base = rng.uniform(0.2, 0.8, 3)
        img = base + diversity * rng.normal(0, 0.15, (size, size, 3))
    elif style == "gradients":
        a, b = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
        t = (np.cos(theta) * xx + np.sin(theta) * yy)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        img = a + (b - a) * t[..., None] * diversity + (1 - diversity) * 0.5 * (b - a)
    elif style == "texture":
        tile = int(rng.integers(3, 9))
        a, b = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        yy, xx = np.mgrid[0:size, 0:size]
        kind = rng.integers(3)
        if kind == 0:
            pat = ((xx // tile + yy // tile) % 2).astype(float)
        elif kind == 1:
            pat = ((xx // tile) % 2).astype(float)
        else:
            pat = (((xx + yy) // tile) % 2).astype(float)
        img = a + (b - a) * pat[..., None] * diversity
    else:
        raise ValueError(f"unknown background style {style!r}")
    gray = img.mean(axis=-1, keepdims=True)
    img = gray + saturation * (img - gray)
    return np.clip(img, 0.0, 1.0)


# base colors for palette="class"; classes beyond these cycle
_CLASS_COLORS = np.array([[0.85, 0.2, 0.2], [0.2, 0.75, 0.25], [0.2, 0.3, 0.9],
                          [0.9, 0.8, 0.15], [0.7, 0.2, 0.8], [0.15, 0.8, 0.8]])


def _shape_color(config: ShapeCorpusConfig, cls: int, rng: np.random.Generator) -> np.ndarray:
    if config.palette == "random":
        return rng.uniform(0, 1, 3)
    if config.palette != "class":
        raise ValueError(f"unknown palette {config.palette!r}")
    base = _CLASS_COLORS[cls % len(_CLASS_COLORS)]
    return np.clip(base + rng.uniform(-config.color_jitter, config.color_jitter, 3), 0, 1)


def render_sample(config: ShapeCorpusConfig, rng: np.random.Generator):
    """One image: (uint8 rgb, uint8 class-id mask, label vector, shape list)."""
    size = config.image_size
    img = _background(rng, size, config.background_styles, config.diversity,
                      config.background_saturation)
    mask = np.zeros((size, size), dtype=np.uint8)
    occupied = np.zeros((size, size), dtype=bool)
    shapes = []
    probs = config.probs()
    n = int(rng.integers(config.min_shapes, config.max_shapes + 1))
    for _ in range(n):
        cls = int(rng.choice(len(config.class_names), p=probs))
        kind = config.class_names[cls]
        color = _shape_color(config, cls, rng)
        for _attempt in range(50):
            r = rng.uniform(config.min_radius, config.max_radius)
            cx, cy = rng.uniform(r, size - r, 2)
            m = shape_mask(kind, size, cx, cy, r, rng.uniform(0, 2 * np.pi))
            if m.sum() >= 12 and not (m & occupied).any():
                break
        else:
            continue
        img[m] = color
        mask[m] = cls + 1
        grown = m.copy()
        grown[1:] |= m[:-1]
        grown[:-1] |= m[1:]
        grown[:, 1:] |= m[:, :-1]
        grown[:, :-1] |= m[:, 1:]
        occupied |= grown
        shapes.append((kind, cls))
    if not shapes:
        raise RuntimeError("could not place any shape; image too small for the radius range")
    labels = np.zeros(len(config.class_names), dtype=np.int64)
    for _, cls in shapes:
        labels[cls] = 1
    rgb = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return rgb, mask, labels, shapes


def worker_count() -> int:
    env = os.environ.get("RPNET_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def generate_corpus(config: ShapeCorpusConfig, out_dir) -> DatasetManifest:
    """Render the corpus, write PPM/PGM files and manifest.csv, return the manifest."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write corpus to {out}: {e}") from e
    seeds = np.random.SeedSequence(config.seed).spawn(config.num_images)

    def one(i):
        rgb, mask, labels, shapes = render_sample(config, np.random.default_rng(seeds[i]))
        img_rel, mask_rel = f"images/{i:05d}.ppm", f"masks/{i:05d}.pgm"
        write_ppm(out / img_rel, rgb)
        write_pgm(out / mask_rel, mask)
        return Record(img_rel, labels, mask_rel), len(shapes), [c for _, c in shapes]

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(one, range(config.num_images)))
    manifest = DatasetManifest(
        [r for r, _, _ in results], list(config.class_names),
        {"seed": str(config.seed), "generator": GENERATOR_VERSION,
         "image_size": str(config.image_size), "diversity": str(config.diversity)},
        root=out)
    save_manifest(manifest, out / "manifest.csv")
    shape_counts = np.zeros(len(config.class_names), dtype=np.int64)
    for _, _, classes in results:
        for c in classes:
            shape_counts[c] += 1
    manifest.shape_counts = shape_counts
    return manifest


def labels_from_mask(mask: np.ndarray, num_classes: int) -> np.ndarray:
    present = np.zeros(num_classes, dtype=np.int64)
    for v in np.unique(mask):
        if v:
            present[int(v) - 1] = 1
    return present
