"""Region prototypes from confident, randomly thinned activation regions."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .activation import unify_channels, confidence_map
from .backbone import FeaturePyramid
from .tensor import ShapeError, Tensor


class NoValidPrototypes(RuntimeError):
    """Every prototype of an episode came from an empty mask."""


@dataclass
class ConfidenceMask:
    mask: np.ndarray  # (X, Y, 1) of {0, 1}
    alpha: float
    keep_prob: float

    @property
    def count(self) -> int:
        return int(self.mask.sum())


@dataclass
class PrototypeSet:
    vectors: list[Tensor] = field(default_factory=list)
    image_index: list[int] = field(default_factory=list)
    block_index: list[int] = field(default_factory=list)
    dropped: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self):
        return len(self.vectors)

    @property
    def provenance(self) -> list[tuple[int, int]]:
        return list(zip(self.image_index, self.block_index))

    def matrix(self) -> Tensor:
        if not self.vectors:
            raise NoValidPrototypes("empty prototype set")
        return T.stack_rows(self.vectors)

    def extend(self, other: "PrototypeSet"):
        self.vectors += other.vectors
        self.image_index += other.image_index
        self.block_index += other.block_index
        self.dropped += other.dropped


def sample_mask(confidence, alpha: float, keep_prob: float, rng: np.random.Generator) -> ConfidenceMask:
    """Threshold at ``alpha`` then keep each confident position with prob ``keep_prob``.

    For ``keep_prob < 1`` one uniform draw is consumed per position whatever
    its confidence, so the rng stream does not depend on the map values.
    ``keep_prob == 1`` draws nothing.
    """
    if not 0.0 <= keep_prob <= 1.0:
        raise ValueError(f"keep probability must lie in [0, 1], got {keep_prob}")
    conf = confidence.data if isinstance(confidence, Tensor) else np.asarray(confidence)
    above = conf > alpha
    if keep_prob >= 1.0:
        keep = np.ones(conf.shape, dtype=bool)
    else:
        keep = rng.random(conf.shape) < keep_prob
    return ConfidenceMask((above & keep).astype(np.float64), alpha, keep_prob)


def extract_prototype(features: Tensor, mask: ConfidenceMask) -> Tensor | None:
    """Masked spatial mean of (X, Y, D) features; ``None`` for an empty mask."""
    m = mask.mask if isinstance(mask, ConfidenceMask) else np.asarray(mask)
    if m.shape[:2] != features.shape[:2]:
        raise ShapeError(f"mask extents {m.shape[:2]} differ from features {features.shape[:2]}")
    if m.sum() <= 0:
        return None
    return T.masked_mean(features, m[..., 0] if m.ndim == 3 else m)


def comparison_space(O_n: Tensor) -> Tensor:
    """Clamp unified maps to >= 0; prototypes and comparison targets live here."""
    return T.relu(O_n)


def build_episode_prototypes(pyramids: Sequence[FeaturePyramid], params: dict[str, Tensor],
                             block_set: Sequence[int], alpha: float, keep_prob: float,
                             rng, unified: dict | None = None,
                             masks: dict | None = None) -> PrototypeSet:
    """Prototypes for every image and every selected block of one episode.

    ``rng`` is a single generator consumed image by image, or one generator
    per image slot.  ``unified`` optionally caches ``(image, block) -> O_n``
    so the caller can reuse the last-block projection as a comparison target.
    ``masks`` maps ``(image, block)`` to a frozen :class:`ConfidenceMask`;
    sampled masks are written back into it when the key is absent.
    Blocks are 1-based.
    """
    if not pyramids:
        raise ValueError("episode has no images")
    if not block_set:
        raise ValueError("block_set must be nonempty")
    rngs = list(rng) if isinstance(rng, (list, tuple)) else [rng] * len(pyramids)
    if len(rngs) != len(pyramids):
        raise ValueError("need one generator per image slot")
    protos = PrototypeSet()
    for i, (pyr, r) in enumerate(zip(pyramids, rngs)):
        for n in sorted(block_set):
            if not 1 <= n <= len(pyr):
                raise ValueError(f"block {n} outside 1..{len(pyr)}")
            O = unify_channels(pyr.block(n), params[f"proj{n}.weight"])
            if unified is not None:
                unified[(i, n)] = O
            if masks is not None and (i, n) in masks:
                mask = masks[(i, n)]
            else:
                mask = sample_mask(confidence_map(O), alpha, keep_prob, r)
                if masks is not None:
                    masks[(i, n)] = mask
            p = extract_prototype(comparison_space(O), mask)
            if p is None:
                protos.dropped.append((i, n))
                continue
            protos.vectors.append(p)
            protos.image_index.append(i)
            protos.block_index.append(n)
    return protos
