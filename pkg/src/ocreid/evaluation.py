"""Query/gallery embedding, protocol masking and CMC / mAP metrics."""
from __future__ import annotations

import json
import logging
import os
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .exceptions import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

PROTOCOLS = ("prcc_cc", "ltcc_cc", "standard")


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    meta: np.ndarray  # (N, 3): identity_id, clothes_id, camera_id
    num_zero_rows: int = 0

    def __post_init__(self):
        self.meta = np.asarray(self.meta, dtype=np.int64).reshape(-1, 3)
        if len(self.vectors) != len(self.meta):
            raise ShapeError(f"{len(self.vectors)} vectors but {len(self.meta)} metadata rows")


@dataclass
class EvalReport:
    distmat: np.ndarray
    cmc: np.ndarray
    rank1: float
    map: float
    num_dropped_queries: int
    num_queries: int = 0

    def to_json_dict(self, protocol: str, lam: float, max_rank: int = 20) -> dict:
        cmc = list(self.cmc[:max_rank])
        if len(cmc) < max_rank:
            cmc += [cmc[-1] if cmc else 0.0] * (max_rank - len(cmc))
        return {
            "protocol": protocol,
            "lambda": lam,
            "rank1": self.rank1,
            "map": self.map,
            "cmc": [float(v) for v in cmc],
            "num_dropped_queries": self.num_dropped_queries,
            "num_queries": self.num_queries,
        }


def normalize_rows(vectors: np.ndarray) -> tuple[np.ndarray, int]:
    """L2-normalise rows; all-zero rows stay zero and are counted."""
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    return np.where(zero[:, None], vectors, vectors / np.where(zero[:, None], 1.0, norms)), int(zero.sum())


def compute_embeddings(model, images: np.ndarray | torch.Tensor, meta, lam: float, normalize: bool = True,
                       batch_size: int = 128) -> EmbeddingSet:
    """Screened embeddings for ``images`` (``N x H x W x 3`` array or ``N x 3 x H x W`` tensor)."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"screening threshold must lie in [0, 1], got {lam}")
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
    model.eval()
    dtype = next(model.parameters()).dtype
    rows = [model.embed(images[i:i + batch_size].to(dtype), lam).cpu().numpy() for i in range(0, len(images), batch_size)]
    vectors = np.concatenate(rows) if rows else np.zeros((0, model.channels))
    zero = int((np.abs(vectors).sum(axis=1) == 0).sum())
    if normalize:
        vectors, zero = normalize_rows(vectors)
    if zero:
        logger.warning("%d of %d embeddings are all zero after screening at lambda=%s", zero, len(vectors), lam)
    return EmbeddingSet(vectors, meta, zero)


def distance_matrix(query: EmbeddingSet | np.ndarray, gallery: EmbeddingSet | np.ndarray,
                    metric: str = "euclidean") -> np.ndarray:
    q = query.vectors if isinstance(query, EmbeddingSet) else np.asarray(query)
    g = gallery.vectors if isinstance(gallery, EmbeddingSet) else np.asarray(gallery)
    if q.shape[1] != g.shape[1]:
        raise ShapeError(f"query dimension {q.shape[1]} != gallery dimension {g.shape[1]}")
    if metric == "euclidean":
        return cdist(q, g, "euclidean")
    if metric == "cosine_distance":
        return cdist(q, g, "cosine")
    raise ConfigurationError(f"unknown metric {metric!r}")


def apply_protocol(q_meta, g_meta, protocol: str = "ltcc_cc") -> np.ndarray:
    """Boolean ``Q x G`` matrix of gallery entries that count for each query.

    ``standard`` and ``prcc_cc`` keep cross-camera pairs (PRCC splits are built
    so same-identity query/gallery pairs already differ in clothes);
    ``ltcc_cc`` additionally drops same-identity, same-clothes pairs.
    """
    q_meta = np.asarray(q_meta).reshape(-1, 3)
    g_meta = np.asarray(g_meta).reshape(-1, 3)
    cross_camera = q_meta[:, None, 2] != g_meta[None, :, 2]
    if protocol in ("standard", "prcc_cc"):
        return cross_camera
    if protocol == "ltcc_cc":
        same_outfit = (q_meta[:, None, 0] == g_meta[None, :, 0]) & (q_meta[:, None, 1] == g_meta[None, :, 1])
        return cross_camera & ~same_outfit
    raise ConfigurationError(f"unknown protocol {protocol!r}")


def cmc_map(distmat: np.ndarray, mask: np.ndarray, q_pids, g_pids, max_rank: int = 20) -> EvalReport:
    """CMC curve, Rank@1 and mAP over queries with at least one valid correct match.

    ``q_pids``/``g_pids`` may be identity arrays or full ``(N, 3)`` metadata.
    Valid gallery entries are ranked by ascending distance with a stable sort
    (lower gallery index first on ties).
    """
    distmat = np.asarray(distmat, dtype=np.float64)
    q_pids, g_pids = _pids(q_pids), _pids(g_pids)
    num_q, num_g = distmat.shape
    if mask.shape != distmat.shape or len(q_pids) != num_q or len(g_pids) != num_g:
        raise ShapeError("distance matrix, mask and metadata shapes are inconsistent")
    if max_rank > num_g:
        warnings.warn(f"max_rank={max_rank} exceeds gallery size {num_g}; clamping", stacklevel=2)
        max_rank = num_g
    all_cmc, all_ap = [], []
    for i in range(num_q):
        valid = np.flatnonzero(mask[i])
        order = valid[np.argsort(distmat[i, valid], kind="stable")]
        matches = g_pids[order] == q_pids[i]
        if not matches.any():
            continue
        hits = np.cumsum(matches)
        cmc = np.minimum(hits, 1)[:max_rank].astype(np.float64)
        if len(cmc) < max_rank:
            cmc = np.concatenate([cmc, np.ones(max_rank - len(cmc))])
        all_cmc.append(cmc)
        ranks = np.flatnonzero(matches) + 1
        all_ap.append(np.mean(hits[ranks - 1] / ranks))
    dropped = num_q - len(all_ap)
    if dropped:
        logger.info("%d of %d queries have no valid correct match and were dropped", dropped, num_q)
    if not all_ap:
        return EvalReport(distmat, np.zeros(max_rank), 0.0, 0.0, dropped, num_q)
    cmc = np.mean(all_cmc, axis=0)
    return EvalReport(distmat, cmc, float(cmc[0]), float(np.mean(all_ap)), dropped, num_q)


def _pids(meta) -> np.ndarray:
    meta = np.asarray(meta)
    return meta[:, 0] if meta.ndim == 2 else meta


def evaluate_embeddings(query: EmbeddingSet, gallery: EmbeddingSet, protocol: str = "ltcc_cc",
                        metric: str = "euclidean", max_rank: int = 20) -> EvalReport:
    dist = distance_matrix(query, gallery, metric)
    mask = apply_protocol(query.meta, gallery.meta, protocol)
    return cmc_map(dist, mask, query.meta, gallery.meta, max_rank=min(max_rank, max(dist.shape[1], 1)))


# Raw distance matrix: two little-endian uint32 (rows, cols) then row-major little-endian float32.

def write_distmat(path: str | os.PathLike, distmat: np.ndarray) -> None:
    distmat = np.asarray(distmat)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *distmat.shape))
        fh.write(np.ascontiguousarray(distmat, dtype="<f4").tobytes())


def read_distmat(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        rows, cols = struct.unpack("<II", fh.read(8))
        return np.frombuffer(fh.read(), dtype="<f4").reshape(rows, cols)


def write_report(path: str | os.PathLike, report: EvalReport, protocol: str, lam: float) -> dict:
    payload = report.to_json_dict(protocol, lam)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return payload
