"""Dataset ingestion, PK batch sampling, augmentation and a synthetic pedestrian generator.

Every dataset layout is normalised into a :class:`DatasetIndex`. The canonical
on-disk layout is a ``manifest.csv`` at the dataset root::

    path,identity_id,clothes_id,camera_id,split
    images/0000/0000_00_00.png,0,0,1,train

with parsing maps stored as single-channel PNGs under ``parsing/``.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .exceptions import ConfigurationError, IntegrityError

logger = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ("path", "identity_id", "clothes_id", "camera_id", "split")
PARSING_DIR = "parsing"


@dataclass(frozen=True)
class SampleRecord:
    image_ref: str | np.ndarray
    identity_id: int
    clothes_id: int
    camera_id: int
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigurationError(f"unknown split {self.split!r}")
        for name in ("identity_id", "clothes_id", "camera_id"):
            if getattr(self, name) < 0:
                raise IntegrityError(f"{name} must be non-negative, got {getattr(self, name)}")

    def load(self, size: tuple[int, int] | None = None) -> np.ndarray:
        if isinstance(self.image_ref, np.ndarray):
            img = self.image_ref
            if size is not None and img.shape[:2] != tuple(size):
                img = _resize(img, size)
            return img
        return load_image(self.image_ref, size)


@dataclass(frozen=True)
class DatasetIndex:
    records: tuple[SampleRecord, ...]
    num_identities: int
    num_clothes: int
    clothes_of_identity: Mapping[int, frozenset[int]]
    root: str | None = None

    @classmethod
    def from_records(cls, records: Iterable[SampleRecord], root: str | None = None) -> "DatasetIndex":
        records = tuple(records)
        owner: dict[int, int] = {}
        clothes_of_identity: dict[int, set[int]] = defaultdict(set)
        for rec in records:
            prev = owner.setdefault(rec.clothes_id, rec.identity_id)
            if prev != rec.identity_id:
                raise IntegrityError(
                    f"clothes_id {rec.clothes_id} appears under identity {prev} "
                    f"and identity {rec.identity_id}"
                )
            clothes_of_identity[rec.identity_id].add(rec.clothes_id)
        return cls(
            records=records,
            num_identities=len(clothes_of_identity),
            num_clothes=len(owner),
            clothes_of_identity={pid: frozenset(c) for pid, c in sorted(clothes_of_identity.items())},
            root=root,
        )

    def __len__(self):
        return len(self.records)

    def subset(self, *splits: str) -> "DatasetIndex":
        return DatasetIndex.from_records((r for r in self.records if r.split in splits), root=self.root)

    def indices(self, split: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == split]

    def label_maps(self) -> tuple[dict[int, int], dict[int, int]]:
        """Contiguous label maps ``identity_id -> class`` and ``clothes_id -> class``."""
        pids = sorted(self.clothes_of_identity)
        clothes = sorted(c for cs in self.clothes_of_identity.values() for c in cs)
        return {p: i for i, p in enumerate(pids)}, {c: i for i, c in enumerate(clothes)}

    def metadata(self, split: str | None = None) -> np.ndarray:
        """``(N, 3)`` int array of (identity_id, clothes_id, camera_id)."""
        recs = [r for r in self.records if split is None or r.split == split]
        return np.array(
            [(r.identity_id, r.clothes_id, r.camera_id) for r in recs], dtype=np.int64
        ).reshape(-1, 3)

    def load_images(self, split: str | None = None, size: tuple[int, int] | None = None) -> np.ndarray:
        recs = [r for r in self.records if split is None or r.split == split]
        if not recs:
            h, w = size or (0, 0)
            return np.zeros((0, h, w, 3), dtype=np.float32)
        return np.stack([r.load(size) for r in recs]).astype(np.float32)


@dataclass(frozen=True)
class BatchPlan:
    P: int
    K: int
    batch_indices: tuple[tuple[int, ...], ...]

    def __len__(self):
        return len(self.batch_indices)

    def __iter__(self):
        return iter(self.batch_indices)


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    crop_padding: int = 4
    erase_prob: float = 0.5
    erase_area_range: tuple[float, float] = (0.02, 0.2)
    erase_aspect_range: tuple[float, float] = (0.3, 3.3)
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_prob", "erase_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.erase_area_range
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigurationError(f"erase_area_range must be ordered within (0, 1), got {self.erase_area_range}")
        if self.crop_padding < 0:
            raise ConfigurationError("crop_padding must be >= 0")


# --------------------------------------------------------------------------- images

def _resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    pil = Image.fromarray(to_uint8(img))
    return np.asarray(pil.resize((w, h), Image.BILINEAR), dtype=np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def load_image(path: str | os.PathLike, size: tuple[int, int] | None = None) -> np.ndarray:
    """Read an RGB image as float32 ``H x W x 3`` in ``[0, 1]``, optionally resized to ``(H, W)``."""
    try:
        with Image.open(path) as pil:
            pil = pil.convert("RGB")
            if size is not None and pil.size != (size[1], size[0]):
                pil = pil.resize((size[1], size[0]), Image.BILINEAR)
            return np.asarray(pil, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"unreadable image: {path}") from exc


def save_image(path: str | os.PathLike, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def parsing_path(root: str | os.PathLike, rel_path: str) -> Path:
    return Path(root) / PARSING_DIR / Path(rel_path).with_suffix(".png")


def load_parsing_map(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as pil:
        return np.asarray(pil, dtype=np.uint8)


def save_parsing_map(path: str | os.PathLike, labels: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path, format="PNG")


# --------------------------------------------------------------------------- loading

def read_manifest(root: str | os.PathLike, verify_images: bool = True) -> list[SampleRecord]:
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    records = []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise IntegrityError(f"{manifest}: header must be {','.join(MANIFEST_FIELDS)}")
        for row in reader:
            records.append(
                SampleRecord(
                    image_ref=str(root / row["path"]),
                    identity_id=int(row["identity_id"]),
                    clothes_id=int(row["clothes_id"]),
                    camera_id=int(row["camera_id"]),
                    split=row["split"],
                )
            )
    records.sort(key=lambda r: r.image_ref)
    if verify_images:
        _verify_images(records)
    return records


def write_manifest(root: str | os.PathLike, records: Sequence[SampleRecord]) -> Path:
    root = Path(root)
    path = root / MANIFEST_NAME
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            rel = Path(r.image_ref).resolve().relative_to(root.resolve()).as_posix()
            writer.writerow((rel, r.identity_id, r.clothes_id, r.camera_id, r.split))
    return path


def _verify_images(records: Sequence[SampleRecord]) -> None:
    bad = []
    for r in records:
        try:
            with Image.open(r.image_ref) as pil:
                pil.verify()
        except (OSError, ValueError):
            bad.append(str(r.image_ref))
    if bad:
        raise OSError("unreadable images: " + ", ".join(bad))


_PRCC_NAME = re.compile(r"^([ABC])_")
_LTCC_NAME = re.compile(r"^(\d+)_(\d+)_c(\d+)")
_IMAGE_EXT = {".jpg", ".jpeg", ".png", ".bmp"}


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.rglob("*") if p.suffix.lower() in _IMAGE_EXT)


def _read_prcc(root: Path) -> list[SampleRecord]:
    # rgb/train/<pid>/<A|B|C>_*.jpg ; rgb/test/<A|B|C>/<pid>/*.jpg
    # Cameras A and B share clothes, C is the changed outfit. Test: A is gallery, C is query.
    base = root / "rgb" if (root / "rgb").is_dir() else root
    cam_of = {"A": 0, "B": 1, "C": 2}
    entries = []
    for path in _image_files(base / "train"):
        m = _PRCC_NAME.match(path.name)
        if m:
            entries.append((path, int(path.parent.name), m.group(1), "train"))
    for cam, split in (("A", "gallery"), ("C", "query")):
        for path in _image_files(base / "test" / cam):
            entries.append((path, int(path.parent.name), cam, split))
    pids = {s: sorted({e[1] for e in entries if (e[3] == "train") == (s == "train")}) for s in ("train", "test")}
    records = []
    for path, pid, cam, split in entries:
        group = "train" if split == "train" else "test"
        label = pids[group].index(pid) + (0 if group == "train" else len(pids["train"]))
        outfit = 0 if cam in ("A", "B") else 1
        records.append(SampleRecord(str(path), label, 2 * label + outfit, cam_of[cam], split))
    return records


def _read_ltcc(root: Path) -> list[SampleRecord]:
    # <split dir>/<pid>_<clothes>_c<cam>_<frame>.png with split dirs train/, query/, test/
    entries = []
    for dirname, split in (("train", "train"), ("query", "query"), ("test", "gallery")):
        for path in _image_files(root / dirname):
            m = _LTCC_NAME.match(path.name)
            if m:
                entries.append((path, int(m.group(1)), int(m.group(2)), int(m.group(3)), split))
    pid_map = {p: i for i, p in enumerate(sorted({e[1] for e in entries}))}
    clothes_map = {c: i for i, c in enumerate(sorted({(e[1], e[2]) for e in entries}))}
    return [
        SampleRecord(str(path), pid_map[pid], clothes_map[(pid, cl)], cam, split)
        for path, pid, cl, cam, split in entries
    ]


def load_dataset(root: str | os.PathLike, layout: str = "manifest", verify_images: bool = True) -> DatasetIndex:
    """Load a dataset into a :class:`DatasetIndex`.

    ``layout`` is one of ``manifest``, ``synthetic`` (the manifest written by
    :func:`generate_synthetic_dataset`), ``prcc_like`` or ``ltcc_like``.
    Records are sorted lexicographically by path.
    """
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root does not exist: {root}")
    if layout in ("manifest", "synthetic"):
        records = read_manifest(root, verify_images=verify_images)
    elif layout == "prcc_like":
        records = _read_prcc(root)
    elif layout == "ltcc_like":
        records = _read_ltcc(root)
    else:
        raise ConfigurationError(f"unknown layout {layout!r}")
    if layout in ("prcc_like", "ltcc_like"):
        records.sort(key=lambda r: r.image_ref)
        if verify_images:
            _verify_images(records)
    return DatasetIndex.from_records(records, root=str(root))


# --------------------------------------------------------------------------- sampling

def make_pk_sampler(index: DatasetIndex, P: int, K: int, seed: int, split: str = "train",
                    num_batches: int | None = None) -> BatchPlan:
    """Plan batches of ``P`` identities times ``K`` samples.

    Each identity's samples are shuffled and cut into chunks of ``K`` (drawing
    with replacement when an identity has fewer than ``K``); batches then take
    one chunk from each of ``P`` randomly chosen identities until fewer than
    ``P`` identities have chunks left. ``num_batches`` repeats that pass until
    the requested count is reached.
    """
    if P <= 0 or K <= 0:
        raise ConfigurationError(f"P and K must be positive, got P={P}, K={K}")
    by_pid: dict[int, list[int]] = defaultdict(list)
    for i, r in enumerate(index.records):
        if r.split == split:
            by_pid[r.identity_id].append(i)
    if P > len(by_pid):
        raise ConfigurationError(f"P={P} exceeds the {len(by_pid)} identities available in split {split!r}")
    rng = np.random.default_rng(seed)
    pids = sorted(by_pid)

    def one_pass():
        chunks: dict[int, list[list[int]]] = {}
        for pid in pids:
            idx = np.array(by_pid[pid])
            if len(idx) < K:
                idx = rng.choice(idx, size=K, replace=True)
            else:
                idx = rng.permutation(idx)
            usable = len(idx) - len(idx) % K
            chunks[pid] = [idx[j:j + K].tolist() for j in range(0, usable, K)]
        batches = []
        while True:
            available = [p for p in pids if chunks[p]]
            if len(available) < P:
                return batches
            chosen = rng.choice(available, size=P, replace=False)
            batches.append(tuple(i for p in chosen for i in chunks[int(p)].pop()))

    batches = one_pass()
    if num_batches is not None:
        while len(batches) < num_batches:
            batches.extend(one_pass())
        batches = batches[:num_batches]
    return BatchPlan(P=P, K=K, batch_indices=tuple(batches))


# --------------------------------------------------------------------------- augmentation

def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip, padded random crop and random erasing with uniform noise."""
    out = np.array(image, copy=True)
    h, w = out.shape[:2]
    if rng.random() < cfg.flip_prob:
        out = out[:, ::-1].copy()
    if cfg.crop_padding > 0:
        pad = cfg.crop_padding
        padded = np.pad(out, ((pad, pad), (pad, pad), (0, 0)))
        y, x = rng.integers(0, 2 * pad + 1, size=2)
        out = padded[y:y + h, x:x + w].copy()
    if rng.random() < cfg.erase_prob:
        box = _erase_box(h, w, cfg, rng)
        if box is not None:
            y0, x0, eh, ew = box
            out[y0:y0 + eh, x0:x0 + ew] = rng.random((eh, ew) + out.shape[2:]).astype(out.dtype)
    return out


def _erase_box(h, w, cfg, rng, attempts=100):
    lo, hi = cfg.erase_area_range
    a_lo, a_hi = cfg.erase_aspect_range
    for _ in range(attempts):
        target = rng.uniform(lo, hi) * h * w
        aspect = np.exp(rng.uniform(np.log(a_lo), np.log(a_hi)))
        eh = int(round(np.sqrt(target * aspect)))
        ew = int(round(np.sqrt(target / aspect)))
        if 0 < eh <= h and 0 < ew <= w and lo <= eh * ew / (h * w) <= hi:
            y0 = int(rng.integers(0, h - eh + 1))
            x0 = int(rng.integers(0, w - ew + 1))
            return y0, x0, eh, ew
    return None


# --------------------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SyntheticSpec:
    num_ids: int = 8
    clothes_per_id: int = 2
    images_per_clothes: int = 10
    image_size: tuple[int, int] = (64, 32)
    occluder_prob: float = 0.0

    def __post_init__(self):
        for name in ("num_ids", "clothes_per_id", "images_per_clothes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not 0.0 <= self.occluder_prob <= 1.0:
            raise ConfigurationError("occluder_prob must lie in [0, 1]")


def _split_plan(n: int) -> list[str]:
    if n >= 3:
        q = max(1, n // 5)
        return ["train"] * (n - 2 * q) + ["query"] * q + ["gallery"] * q
    if n == 2:
        return ["train", "gallery"]
    return ["train"]


def _identity_traits(rng: np.random.Generator) -> dict:
    return {
        "skin": rng.uniform(0.15, 0.95, size=3),
        "hair": rng.uniform(0.0, 1.0, size=3),
        "stripe_period": float(rng.choice([3.0, 4.0, 6.0, 8.0])),
        "stripe_angle": float(rng.choice([0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4])),
        "stripe_phase": float(rng.uniform(0, 2 * np.pi)),
        "head_scale": float(rng.uniform(0.85, 1.15)),
        "torso_frac": float(rng.uniform(0.26, 0.34)),
    }


def render_layout(h: int, w: int, traits: dict, dy: int = 0, dx: int = 0) -> np.ndarray:
    """Body-component label map (0 background, 1 head ... 6 lower legs) for one pedestrian."""
    labels = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    cx = w / 2 + dx
    head_r = 0.09 * h * traits["head_scale"]
    head_cy = 0.04 * h + head_r + dy
    head = ((yy - head_cy) / head_r) ** 2 + ((xx - cx) / (0.8 * head_r)) ** 2 <= 1.0
    top = int(round(head_cy + head_r))
    torso_h = int(round(traits["torso_frac"] * h))
    half = max(2, int(round(0.2 * w)))
    arm = max(1, int(round(0.1 * w)))
    leg_top = top + torso_h
    leg_h = max(2, h - 2 - leg_top)
    mid = leg_top + leg_h // 2
    cxi = int(round(cx))

    def box(y0, y1, x0, x1, lab):
        labels[max(y0, 0):max(min(y1, h), 0), max(x0, 0):max(min(x1, w), 0)] = lab

    box(top, leg_top, cxi - half, cxi + half, 2)
    arm_mid = top + torso_h // 2
    box(top, arm_mid, cxi - half - arm, cxi - half, 3)
    box(top, arm_mid, cxi + half, cxi + half + arm, 3)
    box(arm_mid, leg_top + 2, cxi - half - arm, cxi - half, 4)
    box(arm_mid, leg_top + 2, cxi + half, cxi + half + arm, 4)
    box(leg_top, mid, cxi - half + 1, cxi + half - 1, 5)
    box(mid, leg_top + leg_h, cxi - half + 1, cxi + half - 1, 6)
    labels[head] = 1
    return labels


def render_pedestrian(labels: np.ndarray, traits: dict, top_color: np.ndarray, bottom_color: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((h, w, 3))
    img[:] = rng.uniform(0.3, 0.7) + 0.05 * rng.standard_normal((h, w, 1))
    u = np.cos(traits["stripe_angle"]) * yy + np.sin(traits["stripe_angle"]) * xx
    stripes = 0.65 + 0.35 * (np.sin(2 * np.pi * u / traits["stripe_period"] + traits["stripe_phase"]) > 0)
    colors = {1: traits["skin"], 2: top_color, 3: top_color, 4: traits["skin"], 5: bottom_color, 6: bottom_color}
    for lab, col in colors.items():
        sel = labels == lab
        img[sel] = col * stripes[sel][:, None]
    head_rows = np.flatnonzero((labels == 1).any(axis=1))
    if head_rows.size:
        hair = (labels == 1) & (yy < head_rows[0] + 0.4 * head_rows.size)
        img[hair] = traits["hair"]
    img += 0.03 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_dataset(spec: SyntheticSpec | Mapping, seed: int, out_root: str | os.PathLike) -> DatasetIndex:
    """Write a synthetic cloth-changing dataset in the manifest layout.

    Each identity carries a stable skin/hair colour, body proportions and a
    stripe texture; each clothes id has its own top and bottom colours. Query
    images sit on camera 0, gallery images on cameras 1 and 2, training images
    cycle over all three. With ``occluder_prob > 0`` a grey box occasionally
    covers part of the body and is recorded in ``occluders.json``.
    """
    if not isinstance(spec, SyntheticSpec):
        spec = SyntheticSpec(**{k: (tuple(v) if k == "image_size" else v) for k, v in dict(spec).items()})
    out_root = Path(out_root)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
        probe = out_root / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output root is not writable: {out_root}") from exc

    h, w = spec.image_size
    rng = np.random.default_rng(seed)
    records = []
    occluders: dict[str, list[int] | None] = {}
    plan = _split_plan(spec.images_per_clothes)
    for pid in range(spec.num_ids):
        traits = _identity_traits(rng)
        for c in range(spec.clothes_per_id):
            cid = pid * spec.clothes_per_id + c
            top, bottom = rng.uniform(0.05, 0.95, size=(2, 3))
            n_gallery = 0
            for j, split in enumerate(plan):
                dy, dx = (int(v) for v in rng.integers(-2, 3, size=2))
                labels = render_layout(h, w, traits, dy, dx)
                img = render_pedestrian(labels, traits, top, bottom, rng)
                box = None
                if rng.random() < spec.occluder_prob:
                    oh, ow = int(rng.integers(h // 5, h // 3 + 1)), int(rng.integers(w // 3, w // 2 + 1))
                    y0, x0 = int(rng.integers(0, h - oh + 1)), int(rng.integers(0, w - ow + 1))
                    img[y0:y0 + oh, x0:x0 + ow] = rng.uniform(0.2, 0.8)
                    labels[y0:y0 + oh, x0:x0 + ow] = 0
                    box = [y0, x0, y0 + oh, x0 + ow]
                if split == "query":
                    cam = 0
                elif split == "gallery":
                    cam = 1 + n_gallery % 2
                    n_gallery += 1
                else:
                    cam = j % 3
                rel = f"images/{pid:04d}/{pid:04d}_{cid:04d}_{j:03d}.png"
                save_image(out_root / rel, img)
                save_parsing_map(parsing_path(out_root, rel), labels)
                occluders[rel] = box
                records.append(SampleRecord(str(out_root / rel), pid, cid, cam, split))
    records.sort(key=lambda r: r.image_ref)
    write_manifest(out_root, records)
    with open(out_root / "occluders.json", "w", encoding="utf-8") as fh:
        json.dump(occluders, fh, indent=1, sort_keys=True)
    with open(out_root / "synth_spec.json", "w", encoding="utf-8") as fh:
        json.dump({**spec.__dict__, "image_size": list(spec.image_size), "seed": seed}, fh, indent=1)
    logger.info("wrote %d synthetic images to %s", len(records), out_root)
    return DatasetIndex.from_records(records, root=str(out_root))
