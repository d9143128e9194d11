"""Backbone, per-stripe quality predictors and test-time channel screening.

The backbone feature map ``F`` (N x C x H x W) is cut into ``k`` horizontal
stripes. Each stripe has its own quality predictor (1x1 conv, 1x1 conv,
batch norm, sigmoid, global average pool) emitting a per-channel score in
(0, 1). Stripe features are weighted by their scores, pooled, and averaged
into the global part embedding ``f_gw``. At test time, score channels below a
threshold are zeroed before weighting.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .exceptions import ConfigurationError, NumericError, ShapeError, VocabularyMismatchError


def _conv_block(cin, cout, kernel=3, stride=1, padding=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=padding, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ToyBackbone(nn.Module):
    """Small four-block CNN for desk-scale runs.

    On a 64x32 input the first two blocks halve both axes and the third
    halves the width only (16x4); the last block uses a valid convolution
    along the height to land on ``out_height`` rows. The default gives a
    64 x 12 x 4 map, divisible by k in {1, 2, 3, 4, 6, 12}.
    """

    def __init__(self, channels: int = 64, out_height: int = 12, input_size: tuple[int, int] = (64, 32)):
        super().__init__()
        h, w = input_size
        if h % 4 or w % 8:
            raise ConfigurationError(f"toy backbone needs input height % 4 == 0 and width % 8 == 0, got {input_size}")
        # keep enough rows before the last block: height stride 2 twice, or once when out_height is large
        h_strides = (2, 2) if out_height <= h // 4 else (2, 1)
        pre_h = h // (h_strides[0] * h_strides[1])
        if not 1 <= out_height <= pre_h:
            raise ConfigurationError(f"out_height={out_height} not reachable from input height {h}")
        c1, c2 = max(channels // 4, 1), max(channels // 2, 1)
        self.body = nn.Sequential(
            _conv_block(3, c1, stride=2),
            _conv_block(c1, c2, stride=(h_strides[1], 2)),
            _conv_block(c2, channels, stride=(1, 2)),
            _conv_block(channels, channels, kernel=(pre_h - out_height + 1, 3), padding=(0, 1)),
        )
        self.out_channels = channels

    def forward(self, x):
        return self.body(x)


class QualityPredictor(nn.Module):
    """conv1x1 (C -> C/r) -> conv1x1 (C/r -> C) -> BN -> sigmoid -> global average pool."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if channels % reduction:
            raise ConfigurationError(f"reduction r={reduction} must divide C={channels}")
        self.conv1 = nn.Conv2d(channels, channels // reduction, 1)
        self.conv2 = nn.Conv2d(channels // reduction, channels, 1)
        self.bn = nn.BatchNorm2d(channels)

    def forward(self, part):
        return torch.sigmoid(self.bn(self.conv2(self.conv1(part)))).mean(dim=(-2, -1))


# --------------------------------------------------------------------------- functional pieces

def partition(feature_map: torch.Tensor, k: int) -> list[torch.Tensor]:
    """Split ``(..., C, H, W)`` into ``k`` equal horizontal stripes (views, top to bottom)."""
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    h = feature_map.shape[-2]
    if h % k:
        raise ShapeError(f"feature height {h} is not divisible by k={k}")
    return list(torch.split(feature_map, h // k, dim=-2))


def quality_predict(part: torch.Tensor, predictor: QualityPredictor, index: int = 0) -> torch.Tensor:
    if not torch.isfinite(part).all():
        raise NumericError(f"non-finite values in partition {index}")
    return predictor(part)


def weighted_pool(part: torch.Tensor, quality: torch.Tensor) -> torch.Tensor:
    """Channel-weight a stripe ``(..., C, h, W)`` by ``(..., C)`` scores, then average-pool to ``(..., C)``."""
    if part.shape[-3] != quality.shape[-1]:
        raise ShapeError(f"stripe has {part.shape[-3]} channels but quality has {quality.shape[-1]}")
    return (part * quality[..., None, None]).mean(dim=(-2, -1))


def fuse_global(weighted_parts: Sequence[torch.Tensor]) -> torch.Tensor:
    """Stack ``k`` pooled stripe vectors along a height axis and average-pool that axis."""
    if len(weighted_parts) == 0:
        raise ConfigurationError("fuse_global needs at least one part")
    return torch.stack(list(weighted_parts), dim=-1).mean(dim=-1)


def pool_global(feature_map: torch.Tensor) -> torch.Tensor:
    return feature_map.mean(dim=(-2, -1))


def screen(quality: torch.Tensor, lam: float) -> torch.Tensor:
    """Zero every score strictly below ``lam``."""
    return torch.where(quality < lam, torch.zeros_like(quality), quality)


def screen_and_embed(parts: Sequence[torch.Tensor], quality: Sequence[torch.Tensor], lam: float) -> torch.Tensor:
    """Test-time embedding: screen each stripe's scores at ``lam``, weight, pool, then fuse."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"screening threshold must lie in [0, 1], got {lam}")
    if len(parts) != len(quality):
        raise ShapeError(f"{len(parts)} parts but {len(quality)} quality vectors")
    return fuse_global([weighted_pool(p, screen(q, lam)) for p, q in zip(parts, quality)])


# --------------------------------------------------------------------------- model

@dataclass
class FeatureBundle:
    feature_map: torch.Tensor
    parts: list[torch.Tensor]
    quality: list[torch.Tensor]
    weighted_parts: list[torch.Tensor]
    f_g: torch.Tensor
    f_gw: torch.Tensor | None

    @property
    def part_embeddings(self) -> torch.Tensor:
        """Weighted stripe vectors as one ``(N, k, C)`` tensor."""
        return torch.stack(self.weighted_parts, dim=1)


class T2MGSNet(nn.Module):
    """Backbone plus stripe quality screening and three classifier heads.

    With ``t2mgs=False`` the quality predictors and the part head are dropped
    and the model is a plain backbone + pooled-feature baseline.
    """

    def __init__(self, num_identities: int, num_clothes: int, k: int = 6, reduction: int = 4,
                 backbone: nn.Module | None = None, input_size: tuple[int, int] = (64, 32),
                 t2mgs: bool = True, channels: int = 64, feature_height: int = 12):
        super().__init__()
        self.k = k
        self.reduction = reduction
        self.input_size = tuple(input_size)
        self.t2mgs = t2mgs
        self.num_identities = num_identities
        self.num_clothes = num_clothes
        self.backbone = backbone if backbone is not None else ToyBackbone(channels, feature_height, input_size)
        self.feature_shape = self._probe_shape()
        c, h, _ = self.feature_shape
        if k < 1 or h % k:
            raise ConfigurationError(f"backbone feature height {h} is not divisible by k={k}")
        self.channels = c
        if t2mgs:
            self.quality_predictors = nn.ModuleList(QualityPredictor(c, reduction) for _ in range(k))
            self.id_head_p = nn.Linear(c, num_identities)
        self.id_head_g = nn.Linear(c, num_identities)
        self.clothes_head = nn.Linear(c, num_clothes)

    def _probe_shape(self):
        was_training = self.backbone.training
        self.backbone.eval()
        with torch.no_grad():
            out = self.backbone(torch.zeros(1, 3, *self.input_size))
        self.backbone.train(was_training)
        return tuple(out.shape[1:])

    def extract_features(self, images: torch.Tensor) -> torch.Tensor:
        if tuple(images.shape[-2:]) != self.input_size:
            raise ShapeError(f"expected input size {self.input_size}, got {tuple(images.shape[-2:])}")
        return self.backbone(images)

    def head_features(self, feature_map: torch.Tensor) -> FeatureBundle:
        """Everything downstream of the backbone, on a given feature map."""
        f_g = pool_global(feature_map)
        if not self.t2mgs:
            return FeatureBundle(feature_map, [], [], [], f_g, None)
        parts = partition(feature_map, self.k)
        quality = [quality_predict(p, qp, i) for i, (p, qp) in enumerate(zip(parts, self.quality_predictors))]
        weighted = [weighted_pool(p, q) for p, q in zip(parts, quality)]
        return FeatureBundle(feature_map, parts, quality, weighted, f_g, fuse_global(weighted))

    def forward(self, images: torch.Tensor) -> FeatureBundle:
        return self.head_features(self.extract_features(images))

    def forward_train(self, images: torch.Tensor):
        """Returns ``(bundle, id_logits_g, id_logits_p, clothes_logits)``; ``id_logits_p`` is None without T2MGS."""
        bundle = self(images)
        id_logits_p = self.id_head_p(bundle.f_gw) if self.t2mgs else None
        return bundle, self.id_head_g(bundle.f_g), id_logits_p, self.clothes_head(bundle.f_g)

    @torch.no_grad()
    def embed(self, images: torch.Tensor, lam: float) -> torch.Tensor:
        """Screened test embedding (``f_g`` for the baseline). Call in eval mode."""
        bundle = self(images)
        if not self.t2mgs:
            return bundle.f_g
        return screen_and_embed(bundle.parts, bundle.quality, lam)


# --------------------------------------------------------------------------- checkpoints

HEADER_KEY = "__header__"


def save_checkpoint(path: str | os.PathLike, model: T2MGSNet, lam: float, epoch: int, extra: dict | None = None) -> Path:
    """Write all parameters and buffers to one ``.npz`` archive with a JSON header.

    The file is written to a temporary name and renamed, so an interrupted
    write never leaves a truncated checkpoint behind.
    """
    path = Path(path)
    header = {
        "k": model.k,
        "C": model.channels,
        "r": model.reduction,
        "lambda": lam,
        "input_size": list(model.input_size),
        "num_identities": model.num_identities,
        "num_clothes": model.num_clothes,
        "epoch": epoch,
        "t2mgs": model.t2mgs,
        "feature_height": model.feature_shape[1],
        **(extra or {}),
    }
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    arrays[HEADER_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except OSError:
        tmp.unlink(missing_ok=True)
        raise
    return path


def read_checkpoint_header(path: str | os.PathLike) -> dict:
    with np.load(path) as data:
        return json.loads(data[HEADER_KEY].tobytes().decode("utf-8"))


def load_checkpoint(path: str | os.PathLike, expect: dict | None = None) -> tuple[T2MGSNet, dict]:
    """Rebuild a toy-backbone model from a checkpoint.

    ``expect`` holds header fields (e.g. vocabulary sizes) that must match;
    any mismatch raises :class:`VocabularyMismatchError`.
    """
    with np.load(path) as data:
        header = json.loads(data[HEADER_KEY].tobytes().decode("utf-8"))
        state = {k: torch.from_numpy(np.array(data[k])) for k in data.files if k != HEADER_KEY}
    for key, value in (expect or {}).items():
        if header.get(key) != value:
            raise VocabularyMismatchError(
                f"checkpoint header {key}={header.get(key)!r} does not match expected {value!r} "
                f"(header: {header}; expected: {expect})"
            )
    model = T2MGSNet(
        header["num_identities"], header["num_clothes"], k=header["k"], reduction=header["r"],
        input_size=tuple(header["input_size"]), t2mgs=header["t2mgs"], channels=header["C"],
        feature_height=header["feature_height"],
    )
    model.load_state_dict(state)
    model.eval()
    return model, header
