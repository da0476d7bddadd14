"""Pseudo-mask synthesis from activation maps and mIoU evaluation."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .activation import EPS, compute_A, mask_by_label, unify_channels
from .backbone import forward
from .config import TrainConfig
from .data import DatasetManifest
from .enhance import GaussianKernel, enhance, foreground_map, gaussian_smooth, similarity_maps
from .pnm import write_map_pgm, write_pgm
from .prototypes import build_episode_prototypes, comparison_space
from .tensor import ShapeError, Tensor
from .training import normalize_image


@dataclass
class SegMask:
    ids: np.ndarray  # (H, W) uint8, 0 = background, 1..C = classes

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]


@dataclass
class IoUReport:
    intersection: np.ndarray
    union: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.intersection) - 1

    @property
    def included(self) -> np.ndarray:
        return self.union > 0

    @property
    def iou(self) -> np.ndarray:
        out = np.full(len(self.union), np.nan)
        ok = self.included
        out[ok] = self.intersection[ok] / self.union[ok]
        return out

    @property
    def miou(self) -> float:
        ok = self.included
        if not ok.any():
            return float("nan")
        return float((self.intersection[ok] / self.union[ok]).mean())

    def __add__(self, other: "IoUReport") -> "IoUReport":
        return IoUReport(self.intersection + other.intersection, self.union + other.union)

    def to_csv(self, class_names=None) -> str:
        names = ["background"] + list(class_names or [f"class{i}" for i in range(1, self.num_classes + 1)])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "intersection", "union", "iou"])
        for name, i, u, v in zip(names, self.intersection, self.union, self.iou):
            w.writerow([name, int(i), int(u), "" if np.isnan(v) else repr(float(v))])
        buf.write(f"# mIoU={self.miou!r}\n")
        return buf.getvalue()


def upsample_nearest(ids: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = ids.shape[:2]
    rows = np.arange(height) * h // height
    cols = np.arange(width) * w // width
    return ids[rows][:, cols]


def upsample_bilinear(maps: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-aligned bilinear resize of (h, w, C) maps."""
    h, w = maps.shape[:2]

    def axis(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    r0, r1, rt = axis(height, h)
    c0, c1, ct = axis(width, w)
    top = maps[r0][:, c0] * (1 - ct)[None, :, None] + maps[r0][:, c1] * ct[None, :, None]
    bot = maps[r1][:, c0] * (1 - ct)[None, :, None] + maps[r1][:, c1] * ct[None, :, None]
    return top * (1 - rt)[:, None, None] + bot * rt[:, None, None]


def synthesize_mask(maps: np.ndarray, labels, tau_bg: float = 0.25, out_size=None,
                    interpolation: str = "nearest") -> SegMask:
    """Label each pixel with its best present class if it beats ``tau_bg``.

    Each present class map is divided by its own maximum first, so the
    result does not depend on per-class scale.
    """
    maps = np.asarray(maps, dtype=np.float64)
    c = np.asarray(labels) != 0
    if c.shape[0] != maps.shape[-1]:
        raise ShapeError(f"{c.shape[0]} labels for {maps.shape[-1]} class maps")
    if not 0 < tau_bg < 1:
        raise ValueError("tau_bg must lie in (0, 1)")
    h, w = maps.shape[:2]
    H, W = out_size or (h, w)
    if not c.any():
        return SegMask(np.zeros((H, W), dtype=np.uint8))
    peak = maps.max(axis=(0, 1))
    ok = c & (peak > EPS)
    normed = np.where(ok, maps / np.where(ok, peak, 1.0), 0.0)
    normed[..., ~c] = -np.inf
    if interpolation == "bilinear" and (H, W) != (h, w):
        finite = np.where(np.isfinite(normed), normed, -1.0)
        normed = upsample_bilinear(finite, H, W)
        normed[..., ~c] = -np.inf
    best = normed.argmax(axis=-1)
    score = np.take_along_axis(normed, best[..., None], axis=-1)[..., 0]
    ids = np.where(score > tau_bg, best + 1, 0).astype(np.uint8)
    if interpolation == "nearest" and (H, W) != (h, w):
        ids = upsample_nearest(ids, H, W)
    return SegMask(ids)


def miou(pred, gt, num_classes: int) -> IoUReport:
    """Confusion-count IoU over background plus ``num_classes`` classes."""
    p = pred.ids if isinstance(pred, SegMask) else np.asarray(pred)
    g = gt.ids if isinstance(gt, SegMask) else np.asarray(gt)
    if p.shape != g.shape:
        raise ShapeError(f"mask extents differ: {p.shape} vs {g.shape}")
    k = num_classes + 1
    conf = np.bincount(g.astype(np.int64).ravel() * k + p.astype(np.int64).ravel(),
                       minlength=k * k).reshape(k, k)
    inter = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    return IoUReport(inter.astype(np.int64), union.astype(np.int64))


# ---------------------------------------------------------------- inference

@dataclass
class ImageMaps:
    base_cam: np.ndarray
    enhanced_cam: np.ndarray
    foreground: np.ndarray | None = None
    smoothed: np.ndarray | None = None


def infer_maps(image: np.ndarray, labels, params, backbone, config: TrainConfig) -> ImageMaps:
    """Base and enhanced CAMs of one image.

    The enhanced branch builds deterministic (keep probability 1)
    prototypes from the image itself.  With ``use_prototypes`` off, or if
    no confident region exists, the enhanced map equals the base map.
    """
    img = Tensor(normalize_image(np.asarray(image, dtype=np.float64)))
    pyr = forward(img, params, backbone)
    theta = params["theta"]
    base = mask_by_label(compute_A(pyr.last, theta), labels)
    if not config.use_prototypes:
        return ImageMaps(base, base.copy())
    unified: dict = {}
    protos = build_episode_prototypes([pyr], params, config.block_set, config.alpha, 1.0,
                                      np.random.default_rng(0), unified=unified)
    if len(protos) == 0:
        return ImageMaps(base, base.copy())
    N = backbone.num_blocks
    O_last = unified.get((0, N))
    if O_last is None:
        O_last = unify_channels(pyr.last, params[f"proj{N}.weight"])
    fg = foreground_map(similarity_maps(comparison_space(O_last), protos))
    weight = gaussian_smooth(fg, GaussianKernel(config.sigma)) if config.gaussian else fg
    f_enh = enhance(pyr.last, weight)
    enhanced = mask_by_label(compute_A(f_enh, theta), labels)
    return ImageMaps(base, enhanced, fg.data, weight.data)


@dataclass
class ComparisonReport:
    base: IoUReport
    enhanced: IoUReport
    per_image: list = field(default_factory=list)

    @property
    def base_miou(self) -> float:
        return self.base.miou

    @property
    def enhanced_miou(self) -> float:
        return self.enhanced.miou

    @property
    def delta(self) -> float:
        return self.enhanced.miou - self.base.miou

    def summary_row(self) -> dict:
        return {"base_miou": self.base_miou, "enhanced_miou": self.enhanced_miou, "delta": self.delta}


def _prepare(out_dir, maps: bool, masks: bool):
    if out_dir is None:
        return None
    out_dir = Path(out_dir)
    if maps:
        (out_dir / "maps").mkdir(parents=True, exist_ok=True)
    if masks:
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    return out_dir


def _write(out_dir: Path, image: str, labels, m: ImageMaps, pb: SegMask, pe: SegMask,
           maps: bool, masks: bool):
    stem = Path(image).stem
    if maps:
        for c in np.flatnonzero(labels):
            write_map_pgm(out_dir / "maps" / f"{stem}_base_c{c + 1}.pgm", m.base_cam[..., c])
            write_map_pgm(out_dir / "maps" / f"{stem}_enh_c{c + 1}.pgm", m.enhanced_cam[..., c])
        if m.foreground is not None:
            write_map_pgm(out_dir / "maps" / f"{stem}_fg.pgm", m.foreground)
            write_map_pgm(out_dir / "maps" / f"{stem}_fg_smooth.pgm", m.smoothed)
    if masks:
        write_pgm(out_dir / "masks" / f"{stem}_base.pgm", pb.ids)
        write_pgm(out_dir / "masks" / f"{stem}_enh.pgm", pe.ids)


def export_outputs(params, backbone, manifest: DatasetManifest, config: TrainConfig, out_dir,
                   maps: bool = True, masks: bool = True) -> int:
    """Write activation maps and/or pseudo-masks for every image; returns the count."""
    out_dir = _prepare(out_dir, maps, masks)
    for i, rec in enumerate(manifest.records):
        img = manifest.load_image(i)
        m = infer_maps(img, rec.labels, params, backbone, config)
        size = img.shape[:2]
        pb = synthesize_mask(m.base_cam, rec.labels, config.tau_bg, size)
        pe = synthesize_mask(m.enhanced_cam, rec.labels, config.tau_bg, size)
        _write(out_dir, rec.image, rec.labels, m, pb, pe, maps, masks)
    return len(manifest)


def compare_base_vs_enhanced(params, backbone, manifest: DatasetManifest, config: TrainConfig,
                             out_dir=None) -> ComparisonReport:
    """Pseudo-mask mIoU of base CAMs versus enhanced CAMs over a manifest.

    Counts are accumulated over all images before taking IoU.  When
    ``out_dir`` is given, maps go to ``maps/`` and masks to ``masks/``.
    """
    k = manifest.num_classes
    missing = [r.image for r in manifest.records if r.mask is None]
    if missing:
        raise FileNotFoundError(f"{len(missing)} records lack ground-truth masks, first {missing[0]}")
    base_total = IoUReport(np.zeros(k + 1, np.int64), np.zeros(k + 1, np.int64))
    enh_total = IoUReport(base_total.intersection.copy(), base_total.union.copy())
    per_image = []
    out_dir = _prepare(out_dir, True, True)
    for i, rec in enumerate(manifest.records):
        gt = manifest.load_mask(i)
        maps = infer_maps(manifest.load_image(i), rec.labels, params, backbone, config)
        pb = synthesize_mask(maps.base_cam, rec.labels, config.tau_bg, gt.shape)
        pe = synthesize_mask(maps.enhanced_cam, rec.labels, config.tau_bg, gt.shape)
        rb, re_ = miou(pb, gt, k), miou(pe, gt, k)
        base_total = base_total + rb
        enh_total = enh_total + re_
        per_image.append((rec.image, rb.miou, re_.miou))
        if out_dir is not None:
            _write(out_dir, rec.image, rec.labels, maps, pb, pe, True, True)
    return ComparisonReport(base_total, enh_total, per_image)
