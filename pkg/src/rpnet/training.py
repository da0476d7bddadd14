"""Episodes, objectives, SGD schedule and the two trainers.

``train(..., baseline=True)`` is the plain CAM classifier; the default trains
the region-prototype branch: prototypes from every image of an episode vote
a foreground map for each image, which re-weights its last-block features
before classification.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .activation import unify_channels
from .backbone import BackboneConfig, classify, forward, init_params, save_checkpoint
from .config import ALLOWED_FRACTIONS, TrainConfig, dumps
from .data import DatasetManifest
from .enhance import GaussianKernel, enhance, foreground_map, gaussian_smooth, similarity_maps
from .prototypes import build_episode_prototypes, comparison_space
from .tensor import ShapeError, Tape, Tensor

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "lr", "L_c", "L_s", "L", "flags")


# ---------------------------------------------------------------- objectives

def loss_cls(v: Tensor, u) -> Tensor:
    """Multi-label sigmoid cross-entropy, averaged over classes."""
    u = np.asarray(u)
    if u.shape != v.shape:
        raise ShapeError(f"loss_cls: {v.shape[0] if v.ndim else 1} logits vs {u.size} labels")
    return T.softplus_bce(v, u)


def loss_self(f_enh: Tensor, f: Tensor, mode: str = "both", reduction: str = "sum") -> Tensor:
    """Squared differences between enhanced and original maps, summed (or averaged).

    ``mode`` picks which side receives gradient: ``both``,
    ``target-is-enhanced`` (enhanced map is a fixed target, only the
    original is pulled) or ``target-is-original``.
    """
    if f_enh.shape != f.shape:
        raise ShapeError(f"loss_self: shape mismatch {f_enh.shape} vs {f.shape}")
    if mode == "target-is-enhanced":
        f_enh = T.detach(f_enh)
    elif mode == "target-is-original":
        f = T.detach(f)
    elif mode != "both":
        raise ValueError(f"unknown L_s gradient mode {mode!r}")
    sq = T.square(T.sub(f_enh, f))
    if reduction == "sum":
        return T.sum(sq)
    if reduction == "mean":
        return T.mean(sq)
    raise ValueError(f"unknown reduction {reduction!r}")


def total_loss(lc: Tensor, ls: Tensor, lam: float) -> Tensor:
    if not (np.isfinite(lc.data).all() and np.isfinite(ls.data).all() and math.isfinite(lam)):
        raise FloatingPointError("total_loss: non-finite input")
    return T.add(lc, T.scale(ls, lam))


def poly_lr(iteration: int, total_iters: int, lr0: float, power: float) -> float:
    if total_iters <= 0:
        raise ValueError("total_iters must be positive")
    if not 0 <= iteration <= total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {total_iters}]")
    return lr0 * (1.0 - iteration / total_iters) ** power


# ---------------------------------------------------------------- data sampling

@dataclass
class Episode:
    indices: list[int]
    common_class: int


def sample_episode(manifest: DatasetManifest, k: int, rng: np.random.Generator,
                   class_id: int | None = None) -> Episode:
    """Pick a class uniformly, then ``k`` samples containing it.

    Samples are distinct when the class has at least ``k`` members and drawn
    with replacement otherwise.
    """
    if len(manifest) == 0:
        raise ValueError("cannot sample an episode from an empty manifest")
    if class_id is None:
        present = [c for c in range(manifest.num_classes) if manifest.class_members(c)]
        class_id = present[int(rng.integers(len(present)))]
    members = manifest.class_members(class_id)
    if not members:
        raise ValueError(f"class {class_id} has no samples")
    replace = len(members) < k
    picks = rng.choice(len(members), size=k, replace=replace)
    return Episode([members[int(i)] for i in picks], class_id)


def subsample(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Keep ``ceil(fraction * count)`` samples per class from a seeded shuffle.

    The shuffle depends only on the seed and class, so smaller fractions are
    prefixes of larger ones; a sample kept for any of its classes stays.
    """
    if not any(abs(fraction - f) < 1e-12 for f in ALLOWED_FRACTIONS):
        raise ValueError(f"fraction must be one of 1, 1/2, 1/4, 1/8, 1/16, got {fraction}")
    if fraction == 1.0:
        return manifest.subset(range(len(manifest)))
    keep = set()
    for c in range(manifest.num_classes):
        members = manifest.class_members(c)
        order = np.random.default_rng([seed, c]).permutation(len(members))
        n = math.ceil(fraction * len(members))
        keep.update(members[int(i)] for i in order[:n])
    return manifest.subset(sorted(keep))


def augment(img: np.ndarray, config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    if config.augment_crop_scale:
        h, w = img.shape[:2]
        s = rng.uniform(1.0, 1.25)
        nh, nw = int(round(h * s)), int(round(w * s))
        rows = (np.arange(nh) * h // nh)
        cols = (np.arange(nw) * w // nw)
        big = img[rows][:, cols]
        y0 = int(rng.integers(nh - h + 1))
        x0 = int(rng.integers(nw - w + 1))
        img = big[y0:y0 + h, x0:x0 + w]
    if config.augment_flip and rng.random() < 0.5:
        img = img[:, ::-1]
    return np.ascontiguousarray(img)


# ---------------------------------------------------------------- model state

@dataclass
class ModelState:
    params: dict[str, Tensor]
    backbone: BackboneConfig
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, backbone: BackboneConfig, seed: int, dtype=np.float64) -> "ModelState":
        return cls(init_params(backbone, seed, dtype), backbone)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def sgd(self, lr: float, momentum: float, clip: float = 0.0):
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if clip > 0:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > clip:
                grads = {k: g * (clip / norm) for k, g in grads.items()}
        for k, g in grads.items():
            p = self.params[k]
            if momentum:
                buf = self.momentum.get(k)
                buf = g.copy() if buf is None else momentum * buf + g
                self.momentum[k] = buf
                g = buf
            p.data = p.data - (lr * g).astype(p.data.dtype)


@dataclass
class StepMetrics:
    step: int
    lr: float
    L_c: float
    L_s: float
    L: float
    flags: str = ""

    def row(self) -> list[str]:
        return [str(self.step), repr(self.lr), repr(self.L_c), repr(self.L_s), repr(self.L), self.flags]


# ---------------------------------------------------------------- forward passes

@dataclass
class EpisodeOutput:
    loss: Tensor
    L_c: float
    L_s: float
    flags: str
    foreground: list = field(default_factory=list)


def baseline_loss(images: list[Tensor], labels: list[np.ndarray], state: ModelState) -> EpisodeOutput:
    """Plain CAM classifier objective: mean classification loss over images."""
    total = None
    for img, u in zip(images, labels):
        pyr = forward(img, state.params, state.backbone)
        lc = loss_cls(classify(pyr.last, state.params["theta"]), u)
        total = lc if total is None else T.add(total, lc)
    loss = T.scale(total, 1.0 / len(images))
    return EpisodeOutput(loss, float(loss.data), 0.0, "")


def rpnet_loss(images: list[Tensor], labels: list[np.ndarray], state: ModelState,
               config: TrainConfig, rng: np.random.Generator, masks: dict | None = None) -> EpisodeOutput:
    """Region-prototype objective for one episode, averaged over its images.

    With ``use_prototypes`` off this is exactly :func:`baseline_loss` plus
    an ``L_s`` term that is never built.
    """
    if not config.use_prototypes:
        out = baseline_loss(images, labels, state)
        if config.lambda_self:
            out.flags = "lambda-ignored"
        return out
    params = state.params
    pyramids = [forward(img, params, state.backbone) for img in images]
    N = state.backbone.num_blocks
    unified: dict = {}
    protos = build_episode_prototypes(pyramids, params, config.block_set, config.alpha,
                                      config.beta, rng, unified=unified, masks=masks)
    if len(protos) == 0:
        total = None
        for pyr, u in zip(pyramids, labels):
            lc = loss_cls(classify(pyr.last, params["theta"]), u)
            total = lc if total is None else T.add(total, lc)
        loss = T.scale(total, 1.0 / len(images))
        return EpisodeOutput(loss, float(loss.data), 0.0, "no-prototypes")
    kernel = GaussianKernel(config.sigma)
    total = None
    lc_sum = ls_sum = 0.0
    fgs = []
    for i, (pyr, u) in enumerate(zip(pyramids, labels)):
        O_last = unified.get((i, N))
        if O_last is None:
            O_last = unify_channels(pyr.last, params[f"proj{N}.weight"])
        sims = similarity_maps(comparison_space(O_last), protos)
        fg = foreground_map(sims)
        weight = gaussian_smooth(fg, kernel) if config.gaussian else fg
        if not config.foreground_grad:
            weight = T.detach(weight)
        f_enh = enhance(pyr.last, weight)
        lc = loss_cls(classify(f_enh, params["theta"]), u)
        ls = loss_self(f_enh, pyr.last, config.ls_mode, config.ls_reduction)
        li = total_loss(lc, ls, config.lambda_self)
        total = li if total is None else T.add(total, li)
        lc_sum += float(lc.data)
        ls_sum += float(ls.data)
        fgs.append((fg.data, weight.data))
    n = len(images)
    loss = T.scale(total, 1.0 / n)
    return EpisodeOutput(loss, lc_sum / n, ls_sum / n, "", fgs)


# ---------------------------------------------------------------- training loop

INPUT_MEAN = 0.5
INPUT_STD = 0.25


def normalize_image(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixels to a roughly zero-centred range."""
    return (img - INPUT_MEAN) / INPUT_STD


class ImageCache:
    def __init__(self, manifest: DatasetManifest, dtype):
        self.manifest = manifest
        self.dtype = dtype
        self._cache: dict[int, np.ndarray] = {}

    def __getitem__(self, i: int) -> np.ndarray:
        img = self._cache.get(i)
        if img is None:
            img = normalize_image(self.manifest.load_image(i)).astype(self.dtype)
            self._cache[i] = img
        return img


def steps_per_epoch(n_samples: int, config: TrainConfig) -> int:
    return max(1, math.ceil(n_samples / (config.episode_size * config.batch_episodes)))


def train_step(episodes: list[Episode], state: ModelState, config: TrainConfig, iteration: int,
               total_iters: int, images: ImageCache, data_rng: np.random.Generator,
               mask_rng: np.random.Generator, baseline: bool = False) -> StepMetrics:
    """One SGD update over a batch of episodes.

    ``baseline=True`` runs the plain CAM trainer; otherwise the
    region-prototype objective.  A non-finite loss aborts with a
    ``FloatingPointError`` naming the step and its loss terms.
    """
    state.zero_grad()
    lr = poly_lr(iteration, total_iters, config.lr0, config.poly_power)
    dtype = np.dtype(config.dtype)
    with Tape() as tape:
        total = None
        lc = ls = 0.0
        flags = set()
        for ep in episodes:
            imgs = [Tensor(augment(images[i], config, data_rng), dtype=dtype) for i in ep.indices]
            labels = [images.manifest.records[i].labels for i in ep.indices]
            try:
                if baseline:
                    out = baseline_loss(imgs, labels, state)
                else:
                    out = rpnet_loss(imgs, labels, state, config, mask_rng)
            except FloatingPointError as e:
                raise FloatingPointError(f"step {iteration}: non-finite value in forward pass: {e}") from e
            total = out.loss if total is None else T.add(total, out.loss)
            lc += out.L_c
            ls += out.L_s
            if out.flags:
                flags.add(out.flags)
        loss = T.scale(total, 1.0 / len(episodes))
    L = float(loss.data)
    if not math.isfinite(L):
        raise FloatingPointError(f"step {iteration}: loss {L} (L_c={lc}, L_s={ls})")
    tape.backward(loss)
    state.sgd(lr, config.momentum, config.grad_clip)
    n = len(episodes)
    return StepMetrics(iteration, lr, lc / n, ls / n, L, "|".join(sorted(flags)))


@dataclass
class TrainResult:
    state: ModelState
    metrics: list[StepMetrics]
    manifest: DatasetManifest
    config: TrainConfig
    baseline: bool = False

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for m in self.metrics:
            w.writerow(m.row())
        return buf.getvalue()

    def save(self, run_dir):
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "metrics.csv").write_text(self.metrics_csv(), encoding="utf-8")
        save_checkpoint(run_dir / "model.ckpt", self.state.params, self.state.backbone,
                        {"baseline": self.baseline, "seed": self.config.seed,
                         "config": dumps(self.config)})


def train(manifest: DatasetManifest, config: TrainConfig, baseline: bool = False,
          max_steps: int | None = None, progress=None) -> TrainResult:
    """Train from scratch; the data fraction in ``config`` is applied first."""
    data = subsample(manifest, config.fraction, config.seed)
    backbone = config.backbone(manifest.num_classes)
    dtype = np.dtype(config.dtype)
    state = ModelState.create(backbone, config.seed, dtype)
    seq = np.random.SeedSequence(config.seed)
    data_seq, mask_seq = seq.spawn(2)
    data_rng = np.random.default_rng(data_seq)
    mask_rng = np.random.default_rng(mask_seq)
    images = ImageCache(data, dtype)
    total_iters = config.epochs * steps_per_epoch(len(data), config)
    metrics = []
    n_steps = total_iters if max_steps is None else min(max_steps, total_iters)
    for it in range(n_steps):
        eps = [sample_episode(data, config.episode_size, data_rng) for _ in range(config.batch_episodes)]
        m = train_step(eps, state, config, it, total_iters, images, data_rng, mask_rng, baseline)
        metrics.append(m)
        if progress is not None:
            progress(m)
    log.info("trained %d steps on %d images (baseline=%s)", n_steps, len(data), baseline)
    return TrainResult(state, metrics, data, config, baseline)
