"""Occluded dataset synthesis from body-part parsing maps.

One body component is drawn at random, its mask is coarsened by tile-wise
average pooling, nearest upsampling and thresholding, and the covered pixels
are painted with a flat fill (black by default).
"""
from __future__ import annotations

import hashlib
import logging
import os
import shutil
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .data import (
    MANIFEST_NAME,
    SPLITS,
    DatasetIndex,
    load_image,
    load_parsing_map,
    parsing_path,
    save_image,
)
from .exceptions import ConfigurationError, NoComponentError, ShapeError

logger = logging.getLogger(__name__)

COMPONENTS = {
    1: "head",
    2: "torso",
    3: "upper_arms",
    4: "lower_arms",
    5: "upper_legs",
    6: "lower_legs",
}

# Human-parser vocabularies mapped onto the six components (0 = not occludable).
# The Pascal-Person-Part vocabulary already matches the six components.
LABEL_TABLES: dict[str, dict[int, int]] = {
    "pascal": {i: i for i in range(7)},
    # LIP: 0 bg, 1 hat, 2 hair, 3 glove, 4 sunglasses, 5 upper-clothes, 6 dress, 7 coat,
    # 8 socks, 9 pants, 10 jumpsuit, 11 scarf, 12 skirt, 13 face, 14/15 arms,
    # 16/17 legs, 18/19 shoes. LIP does not split arms, so arms map to upper arms.
    "lip": {
        0: 0, 1: 1, 2: 1, 3: 4, 4: 1, 5: 2, 6: 2, 7: 2, 8: 6, 9: 5,
        10: 2, 11: 2, 12: 5, 13: 1, 14: 3, 15: 3, 16: 6, 17: 6, 18: 6, 19: 6,
    },
}


@dataclass(frozen=True)
class OcclusionConfig:
    pool_size: int = 4
    binarize_threshold: float = 0.5
    fill_value: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 42
    label_table: str = "pascal"
    splits: tuple[str, ...] = SPLITS

    def __post_init__(self):
        if self.pool_size < 1:
            raise ConfigurationError("pool_size must be >= 1")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ConfigurationError("binarize_threshold must lie in (0, 1)")
        if len(self.fill_value) != 3 or not all(0.0 <= v <= 1.0 for v in self.fill_value):
            raise ConfigurationError("fill_value must be an RGB triple in [0, 1]")
        if self.label_table not in LABEL_TABLES:
            raise ConfigurationError(f"unknown label table {self.label_table!r}")
        if not set(self.splits) <= set(SPLITS):
            raise ConfigurationError(f"splits must be drawn from {SPLITS}")


@dataclass(frozen=True)
class ComponentMask:
    component: int
    mask: np.ndarray

    @property
    def name(self) -> str:
        return COMPONENTS[self.component]


@dataclass
class OcclusionStats:
    num_processed: int = 0
    num_skipped: int = 0
    per_component_counts: dict[str, int] = field(default_factory=lambda: {n: 0 for n in COMPONENTS.values()})
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "num_processed": self.num_processed,
            "num_skipped": self.num_skipped,
            "per_component_counts": dict(self.per_component_counts),
            "errors": list(self.errors),
        }


def map_labels(raw: np.ndarray, table: str | Mapping[int, int] = "pascal") -> np.ndarray:
    lut = np.zeros(256, dtype=np.uint8)
    for src, dst in (LABEL_TABLES[table] if isinstance(table, str) else table).items():
        lut[src] = dst
    return lut[np.asarray(raw, dtype=np.uint8)]


def select_component(parsing_map: np.ndarray, rng: np.random.Generator) -> ComponentMask:
    present = [lab for lab in COMPONENTS if np.any(parsing_map == lab)]
    if not present:
        raise NoComponentError("parsing map contains no body component")
    component = present[int(rng.integers(len(present)))]
    return ComponentMask(component, (parsing_map == component).astype(np.uint8))


def soften_mask(mask: np.ndarray, cfg: OcclusionConfig) -> np.ndarray:
    """Tile-average ``mask`` with kernel = stride = ``pool_size``, threshold, and upsample back.

    Edge tiles that overhang the image are averaged over their in-image pixels
    only, so constant masks are preserved exactly. The result is constant on
    every tile, which makes the operation idempotent.
    """
    mask = np.asarray(mask, dtype=np.float64)
    s = cfg.pool_size
    h, w = mask.shape
    ph, pw = -h % s, -w % s
    total = np.pad(mask, ((0, ph), (0, pw))).reshape((h + ph) // s, s, (w + pw) // s, s).sum(axis=(1, 3))
    count = np.pad(np.ones_like(mask), ((0, ph), (0, pw))).reshape(total.shape[0], s, total.shape[1], s).sum(axis=(1, 3))
    tiles = (total / count >= cfg.binarize_threshold).astype(np.uint8)
    return np.repeat(np.repeat(tiles, s, axis=0), s, axis=1)[:h, :w]


def fuse_occlusion(image: np.ndarray, mask: np.ndarray, cfg: OcclusionConfig) -> np.ndarray:
    if image.shape[:2] != mask.shape:
        raise ShapeError(f"image {image.shape[:2]} and mask {mask.shape} differ in size")
    out = np.array(image, copy=True)
    out[mask.astype(bool)] = np.asarray(cfg.fill_value, dtype=out.dtype)
    return out


def occlude(image: np.ndarray, parsing_map: np.ndarray, cfg: OcclusionConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, ComponentMask, np.ndarray]:
    """Occlude one randomly chosen component; returns (image, raw component mask, softened mask)."""
    if image.shape[:2] != parsing_map.shape:
        raise ShapeError(f"image {image.shape[:2]} and parsing map {parsing_map.shape} differ in size")
    comp = select_component(parsing_map, rng)
    soft = soften_mask(comp.mask, cfg)
    return fuse_occlusion(image, soft, cfg), comp, soft


def file_rng(seed: int, rel_path: str) -> np.random.Generator:
    """Per-file generator keyed on (seed, relative path) so output does not depend on processing order."""
    digest = hashlib.sha256(rel_path.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def build_occluded_dataset(src_index: DatasetIndex, parse_root: str | os.PathLike, dst_root: str | os.PathLike,
                           cfg: OcclusionConfig) -> OcclusionStats:
    """Write an occluded copy of ``src_index`` under ``dst_root``.

    Images whose parsing map is missing or empty are copied unchanged and
    counted as skipped. Records in splits not listed in ``cfg.splits`` are
    copied unchanged and not counted at all.
    """
    if src_index.root is None:
        raise ConfigurationError("source index has no root directory")
    src_root, dst_root = Path(src_index.root), Path(dst_root)
    dst_root.mkdir(parents=True, exist_ok=True)
    stats = OcclusionStats()
    for rec in src_index.records:
        src = Path(rec.image_ref)
        rel = src.resolve().relative_to(src_root.resolve()).as_posix()
        dst = dst_root / rel
        dst.parent.mkdir(parents=True, exist_ok=True)
        if rec.split not in cfg.splits:
            shutil.copyfile(src, dst)
            continue
        pm_path = parsing_path(parse_root, rel)
        try:
            parsing_map = map_labels(load_parsing_map(pm_path), cfg.label_table)
            image = load_image(src)
            out, comp, _ = occlude(image, parsing_map, cfg, file_rng(cfg.seed, rel))
        except FileNotFoundError:
            stats.errors.append(f"{rel}: missing parsing map {pm_path}")
        except NoComponentError:
            stats.errors.append(f"{rel}: parsing map has no body component")
        except ShapeError as exc:
            stats.errors.append(f"{rel}: {exc}")
        else:
            save_image(dst, out)
            stats.num_processed += 1
            stats.per_component_counts[comp.name] += 1
            continue
        logger.warning(stats.errors[-1])
        shutil.copyfile(src, dst)
        stats.num_skipped += 1
    shutil.copyfile(src_root / MANIFEST_NAME, dst_root / MANIFEST_NAME)
    return stats


class Occluder(TransformerMixin, BaseEstimator):
    """Stateless transformer occluding a batch of images given their parsing maps.

    ``transform`` takes a sequence of ``(image, parsing_map)`` pairs and
    returns the occluded images stacked into one array. Images without any
    body component pass through unchanged.
    """

    def __init__(self, pool_size=4, binarize_threshold=0.5, fill_value=(0.0, 0.0, 0.0), seed=42):
        self.pool_size = pool_size
        self.binarize_threshold = binarize_threshold
        self.fill_value = fill_value
        self.seed = seed

    def fit(self, X=None, y=None):
        self.config_ = OcclusionConfig(self.pool_size, self.binarize_threshold, tuple(self.fill_value), self.seed)
        return self

    def transform(self, X: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        cfg = getattr(self, "config_", None) or self.fit().config_
        rng = np.random.default_rng(cfg.seed)
        out = []
        for image, parsing_map in X:
            try:
                out.append(occlude(np.asarray(image, dtype=np.float32), np.asarray(parsing_map), cfg, rng)[0])
            except NoComponentError:
                out.append(np.array(image, dtype=np.float32, copy=True))
        return np.stack(out)


def component_frequencies(parsing_map: np.ndarray, draws: int, seed: int = 0) -> Counter:
    rng = np.random.default_rng(seed)
    return Counter(select_component(parsing_map, rng).component for _ in range(draws))
