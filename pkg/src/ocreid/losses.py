"""Training objectives: part-robust triplet loss, identity/clothes cross-entropy, clothes adversarial loss."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping

import torch
from torch.nn import functional as F

from .exceptions import ContractViolationError, IntegrityError, LabelError, ShapeError


@dataclass
class LossReport:
    l_prt: torch.Tensor | float = 0.0
    l_id_p: torch.Tensor | float = 0.0
    l_id_g: torch.Tensor | float = 0.0
    l_c: torch.Tensor | float = 0.0
    l_ca: torch.Tensor | float = 0.0
    total: torch.Tensor | float = 0.0

    COMPONENTS = ("l_prt", "l_id_p", "l_id_g", "l_c", "l_ca")

    def values(self) -> dict[str, float]:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def total_loss(l_prt=0.0, l_id_p=0.0, l_id_g=0.0, l_c=0.0, l_ca=0.0) -> LossReport:
    """Unit-weight sum of the five loss terms."""
    return LossReport(l_prt, l_id_p, l_id_g, l_c, l_ca, l_prt + l_id_p + l_id_g + l_c + l_ca)


def _safe_norm(sq: torch.Tensor) -> torch.Tensor:
    # sqrt with a zero (not NaN) gradient at the origin
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def part_mean_distance(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean over parts of the per-part Euclidean distance; inputs are ``(..., k, C)``."""
    if x.shape[-2:] != y.shape[-2:]:
        raise ShapeError(f"part embeddings differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    return _safe_norm(((x - y) ** 2).sum(dim=-1)).mean(dim=-1)


def pairwise_part_distance(parts: torch.Tensor) -> torch.Tensor:
    """``(N, k, C)`` -> ``(N, N)`` matrix of part-averaged distances."""
    if parts.dim() != 3:
        raise ShapeError(f"expected (N, k, C) part embeddings, got shape {tuple(parts.shape)}")
    return part_mean_distance(parts[:, None], parts[None, :])


def _hard_mining(dist: torch.Tensor, labels: torch.Tensor):
    n = dist.shape[0]
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~torch.eye(n, dtype=torch.bool, device=dist.device)
    neg_mask = ~same
    for mask, kind in ((pos_mask, "positive"), (neg_mask, "negative")):
        missing = (~mask.any(dim=1)).nonzero()
        if len(missing):
            a = int(missing[0])
            raise ContractViolationError(f"anchor {a} (identity {int(labels[a])}) has no {kind} in the batch")
    inf = torch.tensor(float("inf"), dtype=dist.dtype, device=dist.device)
    # argmax/argmin return the first extremum, i.e. the lowest index on ties
    pos_idx = torch.where(pos_mask, dist.detach(), -inf).argmax(dim=1)
    neg_idx = torch.where(neg_mask, dist.detach(), inf).argmin(dim=1)
    rows = torch.arange(n, device=dist.device)
    return dist[rows, pos_idx], dist[rows, neg_idx]


def _reduce(per_anchor: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return per_anchor.sum()
    if reduction == "mean":
        return per_anchor.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def prt_loss(parts: torch.Tensor, labels: torch.Tensor, margin: float = 0.3, reduction: str = "sum") -> torch.Tensor:
    """Part-robust triplet loss with batch-hard mining on part-averaged distances.

    ``parts`` is ``(N, k, C)``. For each anchor the farthest positive and the
    nearest negative are mined under :func:`part_mean_distance`; the hinge
    ``max(d_ap - d_an + margin, 0)`` is summed over anchors (``reduction="sum"``).
    """
    d_ap, d_an = _hard_mining(pairwise_part_distance(parts), labels)
    return _reduce(F.relu(d_ap - d_an + margin), reduction)


def part_triplet_loss(parts: torch.Tensor, labels: torch.Tensor, margin: float = 0.3,
                      reduction: str = "sum") -> torch.Tensor:
    """Classic batch-hard triplet loss applied to each part on its own, summed over parts."""
    total = parts.new_zeros(())
    for i in range(parts.shape[1]):
        total = total + prt_loss(parts[:, i:i + 1], labels, margin, reduction)
    return total


def _check_labels(logits: torch.Tensor, targets: torch.Tensor, what: str):
    if targets.numel() and (int(targets.max()) >= logits.shape[-1] or int(targets.min()) < 0):
        raise LabelError(f"{what} label out of range for {logits.shape[-1]} classes")


def identity_ce(logits: torch.Tensor, identity_ids: torch.Tensor) -> torch.Tensor:
    _check_labels(logits, identity_ids, "identity")
    return F.cross_entropy(logits, identity_ids)


def clothes_ce(clothes_logits: torch.Tensor, clothes_ids: torch.Tensor) -> torch.Tensor:
    """Clothes classification loss; the caller feeds logits computed on detached features."""
    _check_labels(clothes_logits, clothes_ids, "clothes")
    return F.cross_entropy(clothes_logits, clothes_ids)


def same_identity_clothes_targets(identity_ids: torch.Tensor, clothes_of_identity: Mapping[int, frozenset[int] | set[int]],
                                  num_clothes: int, dtype=torch.float32) -> torch.Tensor:
    """Soft targets uniform over all clothes classes of each sample's identity."""
    target = torch.zeros(len(identity_ids), num_clothes, dtype=dtype, device=identity_ids.device)
    for row, pid in enumerate(identity_ids.tolist()):
        classes = sorted(clothes_of_identity.get(pid, ()))
        if not classes:
            raise IntegrityError(f"identity {pid} has no clothes classes")
        target[row, classes] = 1.0 / len(classes)
    return target


def clothes_adversarial(clothes_logits: torch.Tensor, identity_ids: torch.Tensor,
                        clothes_of_identity: Mapping[int, frozenset[int] | set[int]]) -> torch.Tensor:
    """Cross-entropy against a target spread uniformly over the identity's own clothes classes.

    Pushes the features to be uninformative about which outfit of the same
    person is worn. ``clothes_logits`` should come from the clothes head with
    its parameters detached so the gradient reaches only the features.
    """
    target = same_identity_clothes_targets(identity_ids, clothes_of_identity, clothes_logits.shape[-1],
                                           clothes_logits.dtype)
    return -(target * F.log_softmax(clothes_logits, dim=-1)).sum(dim=-1).mean()
