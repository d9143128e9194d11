"""Configuration, training loop, evaluation entry point, sweeps and log summaries."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .data import AugmentConfig, DatasetIndex, augment, load_dataset, make_pk_sampler
from .evaluation import EvalReport, compute_embeddings, evaluate_embeddings, write_distmat, write_report
from .exceptions import ConfigurationError, ParseError, TrainingDivergedError
from .losses import (
    LossReport,
    clothes_adversarial,
    clothes_ce,
    identity_ce,
    part_triplet_loss,
    prt_loss,
    total_loss,
)
from .model import T2MGSNet, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "l_prt", "l_id_p", "l_id_g", "l_c", "l_ca", "total", "lr")


@dataclass
class TrainConfig:
    dataset_root: str = ""
    layout: str = "manifest"
    input_size: tuple[int, int] = (384, 192)
    P: int = 16
    K: int = 4
    base_lr: float = 3.5e-4
    lr_decay_epochs: tuple[int, ...] = (30, 50)
    lr_decay_factor: float = 0.1
    total_epochs: int = 120
    k: int = 6
    lam: float = 0.35
    M: float = 0.3
    r: int = 4
    E_adv: int = 25
    t2mgs: bool = True
    prt: bool = True
    classic_triplet: bool = False
    seed: int = 0
    weight_decay: float = 5e-4
    channels: int = 64
    feature_height: int = 12
    batches_per_epoch: int | None = None
    triplet_reduction: str = "sum"
    flip_prob: float = 0.5
    crop_padding: int = 4
    erase_prob: float = 0.5
    protocol: str = "ltcc_cc"
    normalize: bool = True

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        self.lr_decay_epochs = tuple(self.lr_decay_epochs)
        self.validate()

    def validate(self):
        d = self.lr_decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ConfigurationError(f"lr_decay_epochs must be strictly increasing, got {list(d)}")
        if d and d[-1] >= self.total_epochs:
            raise ConfigurationError(f"lr_decay_epochs must be < total_epochs={self.total_epochs}")
        if self.prt and self.classic_triplet:
            raise ConfigurationError("prt and classic_triplet are mutually exclusive")
        if (self.prt or self.classic_triplet) and not self.t2mgs:
            raise ConfigurationError("part triplet losses need the T2MGS part features (t2mgs=true)")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lam must lie in [0, 1], got {self.lam}")
        if self.P < 1 or self.K < 1 or self.total_epochs < 1:
            raise ConfigurationError("P, K and total_epochs must be positive")

    @property
    def batch_size(self) -> int:
        return self.P * self.K

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["input_size"] = list(self.input_size)
        out["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return out

    def augment_config(self, epoch: int = 0) -> AugmentConfig:
        return AugmentConfig(self.flip_prob, self.crop_padding, self.erase_prob, seed=self.seed + epoch)


def toy_config(**overrides) -> TrainConfig:
    """Desk-scale profile: 64x32 inputs, toy backbone, 8x4 batches, ten epochs."""
    base = dict(
        input_size=(64, 32), P=8, K=4, base_lr=1e-3, lr_decay_epochs=(8,), total_epochs=10,
        E_adv=5, batches_per_epoch=50, layout="synthetic",
    )
    base.update(overrides)
    return TrainConfig(**base)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.base_lr * cfg.lr_decay_factor ** sum(1 for d in cfg.lr_decay_epochs if d <= epoch)


def seed_everything(seed: int) -> None:
    np.random.seed(seed)
    torch.manual_seed(seed)


def run_dir_name(seed: int) -> str:
    return time.strftime("%Y%m%d-%H%M%S") + f"-seed{seed}"


@dataclass
class TrainingData:
    """In-memory training split with contiguous labels."""
    images: np.ndarray  # N x H x W x 3
    identity: np.ndarray
    clothes: np.ndarray
    clothes_of_identity: dict[int, frozenset[int]]
    index: DatasetIndex  # train-split index; batch plans refer to positions in it

    @property
    def num_identities(self) -> int:
        return len(self.clothes_of_identity)

    @property
    def num_clothes(self) -> int:
        return sum(len(v) for v in self.clothes_of_identity.values())

    @classmethod
    def from_index(cls, index: DatasetIndex, input_size) -> "TrainingData":
        train = index.subset("train")
        if not train.records:
            raise ConfigurationError("dataset has no train split")
        pid_map, clothes_map = train.label_maps()
        meta = train.metadata()
        identity = np.array([pid_map[p] for p in meta[:, 0]], dtype=np.int64)
        clothes = np.array([clothes_map[c] for c in meta[:, 1]], dtype=np.int64)
        coi = {pid_map[p]: frozenset(clothes_map[c] for c in cs) for p, cs in train.clothes_of_identity.items()}
        return cls(train.load_images(size=tuple(input_size)), identity, clothes, coi, train)

    @classmethod
    def from_arrays(cls, images, identity, clothes) -> "TrainingData":
        from .data import SampleRecord

        identity = np.asarray(identity, dtype=np.int64)
        clothes = np.asarray(clothes, dtype=np.int64)
        records = [SampleRecord(np.empty(0), int(p), int(c), 0, "train") for p, c in zip(identity, clothes)]
        index = DatasetIndex.from_records(records)
        pid_map, clothes_map = index.label_maps()
        coi = {pid_map[p]: frozenset(clothes_map[c] for c in cs) for p, cs in index.clothes_of_identity.items()}
        return cls(np.asarray(images, dtype=np.float32),
                   np.array([pid_map[p] for p in identity]), np.array([clothes_map[c] for c in clothes]),
                   coi, index)


def build_model(cfg: TrainConfig, num_identities: int, num_clothes: int, k: int | None = None) -> T2MGSNet:
    return T2MGSNet(num_identities, num_clothes, k=k or cfg.k, reduction=cfg.r, input_size=cfg.input_size,
                    t2mgs=cfg.t2mgs, channels=cfg.channels, feature_height=cfg.feature_height)


def compute_losses(model: T2MGSNet, images: torch.Tensor, identity: torch.Tensor, clothes: torch.Tensor,
                   clothes_of_identity, cfg: TrainConfig, epoch: int) -> LossReport:
    """One forward pass and every term of the training objective.

    The clothes head only sees detached features (it learns to recognise
    outfits); the adversarial term uses detached head weights, so it only
    moves the backbone, and is active from epoch ``E_adv`` on.
    """
    bundle, id_logits_g, id_logits_p, _ = model.forward_train(images)
    zero = images.new_zeros(())
    l_prt = zero
    if cfg.prt:
        l_prt = prt_loss(bundle.part_embeddings, identity, cfg.M, cfg.triplet_reduction)
    elif cfg.classic_triplet:
        l_prt = part_triplet_loss(bundle.part_embeddings, identity, cfg.M, cfg.triplet_reduction)
    l_id_p = identity_ce(id_logits_p, identity) if id_logits_p is not None else zero
    l_id_g = identity_ce(id_logits_g, identity)
    l_c = clothes_ce(model.clothes_head(bundle.f_g.detach()), clothes)
    l_ca = zero
    if epoch >= cfg.E_adv:
        head = model.clothes_head
        adv_logits = torch.nn.functional.linear(bundle.f_g, head.weight.detach(), head.bias.detach())
        l_ca = clothes_adversarial(adv_logits, identity, clothes_of_identity)
    return total_loss(l_prt, l_id_p, l_id_g, l_c, l_ca)


def fit_model(cfg: TrainConfig, data: TrainingData, run_dir: str | os.PathLike | None = None,
              model: T2MGSNet | None = None) -> tuple[T2MGSNet, list[dict]]:
    """Train on ``data``; returns the model and the per-step log rows.

    With ``run_dir`` set, ``train_log.csv`` is appended every step and
    ``checkpoint.npz`` is rewritten after every epoch.
    """
    seed_everything(cfg.seed)
    if model is None:
        model = build_model(cfg, data.num_identities, data.num_clothes)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    run_dir = Path(run_dir) if run_dir is not None else None
    log_fh = writer = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "train_log.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    identity_t = torch.from_numpy(data.identity)
    clothes_t = torch.from_numpy(data.clothes)
    rows = []
    try:
        for epoch in range(cfg.total_epochs):
            lr = learning_rate(cfg, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            plan = make_pk_sampler(data.index, cfg.P, cfg.K, seed=cfg.seed * 100003 + epoch,
                                   num_batches=cfg.batches_per_epoch)
            aug_rng = np.random.default_rng([cfg.seed, epoch])
            aug_cfg = cfg.augment_config(epoch)
            model.train()
            for step, batch in enumerate(plan):
                idx = np.asarray(batch)
                imgs = np.stack([augment(data.images[i], aug_cfg, aug_rng) for i in idx])
                images = torch.from_numpy(np.ascontiguousarray(imgs.transpose(0, 3, 1, 2)))
                report = compute_losses(model, images, identity_t[idx], clothes_t[idx],
                                        data.clothes_of_identity, cfg, epoch)
                if not torch.isfinite(report.total):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}: {report.values()}",
                                                report)
                optimizer.zero_grad()
                report.total.backward()
                optimizer.step()
                row = {"epoch": epoch, "step": step, **report.values(), "lr": lr}
                rows.append(row)
                if writer is not None:
                    writer.writerow([row[f] for f in LOG_FIELDS])
            if log_fh is not None:
                log_fh.flush()
            if run_dir is not None:
                save_checkpoint(run_dir / "checkpoint.npz", model, cfg.lam, epoch, _header_extra(cfg))
            logger.info("epoch %d lr %.2e mean total %.4f", epoch, lr,
                        np.mean([r["total"] for r in rows if r["epoch"] == epoch]))
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return model, rows


def _header_extra(cfg: TrainConfig) -> dict:
    return {"dataset_root": cfg.dataset_root, "layout": cfg.layout, "seed": cfg.seed, "M": cfg.M}


def train(cfg: TrainConfig, run_dir: str | os.PathLike | None = None, out_root: str | os.PathLike = "runs") -> Path:
    """Train from ``cfg.dataset_root``; returns the run directory holding ``checkpoint.npz`` and ``train_log.csv``."""
    run_dir = Path(run_dir) if run_dir is not None else Path(out_root) / run_dir_name(cfg.seed)
    index = load_dataset(cfg.dataset_root, cfg.layout)
    data = TrainingData.from_index(index, cfg.input_size)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    fit_model(cfg, data, run_dir)
    return run_dir


def evaluate_model(model: T2MGSNet, index: DatasetIndex, protocol: str, lam: float, input_size,
                   normalize: bool = True, metric: str = "euclidean") -> EvalReport:
    q_imgs = index.load_images("query", size=tuple(input_size))
    g_imgs = index.load_images("gallery", size=tuple(input_size))
    query = compute_embeddings(model, q_imgs, index.metadata("query"), lam, normalize)
    gallery = compute_embeddings(model, g_imgs, index.metadata("gallery"), lam, normalize)
    return evaluate_embeddings(query, gallery, protocol, metric)


def evaluate(checkpoint: str | os.PathLike, protocol: str = "ltcc_cc", lam: float = 0.35,
             dataset_root: str | os.PathLike | None = None, layout: str | None = None,
             out_dir: str | os.PathLike | None = None, save_distmat: bool = False) -> EvalReport:
    """Evaluate a checkpoint on the query/gallery splits and write ``eval_report.json``.

    The dataset defaults to the one recorded in the checkpoint header. Its
    train-split vocabulary must match the header's head sizes.
    """
    from .model import read_checkpoint_header

    header = read_checkpoint_header(checkpoint)
    root = dataset_root or header.get("dataset_root")
    index = load_dataset(root, layout or header.get("layout", "manifest"))
    train = index.subset("train")
    model, header = load_checkpoint(
        checkpoint, expect={"num_identities": train.num_identities, "num_clothes": train.num_clothes}
    )
    report = evaluate_model(model, index, protocol, lam, header["input_size"])
    out_dir = Path(out_dir) if out_dir is not None else Path(checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(out_dir / "eval_report.json", report, protocol, lam)
    if save_distmat:
        write_distmat(out_dir / "distmat.bin", report.distmat)
    return report


# --------------------------------------------------------------------------- sweeps

def grid(start: float, stop: float, step: float) -> list[float]:
    """Inclusive arithmetic grid, rounded to suppress float drift."""
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 10) for i in range(n)]


def sweep(param: str, values: Sequence[float], base_cfg: TrainConfig, out_dir: str | os.PathLike,
          index: DatasetIndex | None = None) -> list[dict]:
    """Sensitivity sweep over the screening threshold or the stripe count.

    A ``lambda`` sweep trains once and re-evaluates per value; a ``k`` sweep
    trains one model per value. Failing values are recorded with an error
    note and the sweep continues. Writes ``sweep.csv`` and ``sweep.png``.
    """
    if param not in ("lambda", "k"):
        raise ConfigurationError(f"sweep parameter must be 'lambda' or 'k', got {param!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if index is None:
        index = load_dataset(base_cfg.dataset_root, base_cfg.layout)
    data = TrainingData.from_index(index, base_cfg.input_size)
    rows = []
    shared = None
    for value in values:
        if param == "k" and float(value).is_integer():
            value = int(value)
        row = {"param": param, "value": value, "rank1": "", "map": "", "error": ""}
        try:
            if param == "lambda":
                if shared is None:
                    shared, _ = fit_model(base_cfg, data, out_dir / "lambda_run")
                model, lam = shared, float(value)
            else:
                k = int(value)
                if k != value:
                    raise ConfigurationError(f"k must be an integer, got {value}")
                cfg = replace(base_cfg, k=k)
                model = build_model(cfg, data.num_identities, data.num_clothes)
                model, _ = fit_model(cfg, data, out_dir / f"k{k}_run", model=model)
                lam = base_cfg.lam
            report = evaluate_model(model, index, base_cfg.protocol, lam, base_cfg.input_size, base_cfg.normalize)
            row.update(rank1=report.rank1, map=report.map)
        except Exception as exc:  # noqa: BLE001 - one bad value must not stop the sweep
            logger.warning("sweep %s=%s failed: %s", param, value, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    with open(out_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["param", "value", "rank1", "map", "error"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    plot_sweep(rows, out_dir / "sweep.png")
    return rows


def plot_sweep(rows: Sequence[dict], path: str | os.PathLike) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in rows if not r["error"]]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    if ok:
        xs = [r["value"] for r in ok]
        ax.plot(xs, [100 * r["rank1"] for r in ok], "o-", label="Rank@1")
        ax.plot(xs, [100 * r["map"] for r in ok], "s--", label="mAP")
        ax.legend()
    name = rows[0]["param"] if rows else ""
    ax.set_xlabel({"lambda": "screening threshold", "k": "stripes k"}.get(name, name))
    ax.set_ylabel("%")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# --------------------------------------------------------------------------- log summaries

def read_train_log(path: str | os.PathLike) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: line 1: empty log")
        missing = {"epoch", "step", "total", *LossReport.COMPONENTS} - set(header)
        if missing:
            raise ParseError(f"{path}: line 1: missing columns {sorted(missing)}")
        for lineno, values in enumerate(reader, start=2):
            if len(values) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(values)}")
            try:
                row = {k: float(v) for k, v in zip(header, values)}
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            row["epoch"], row["step"] = int(row["epoch"]), int(row["step"])
            rows.append(row)
    if not rows:
        raise ParseError(f"{path}: line 2: log has no rows")
    return rows


def export_metrics(log_path: str | os.PathLike, out_path: str | os.PathLike | None = None) -> dict:
    """Summarise a training log into ``summary.json`` (first/last epoch means, per-component means)."""
    rows = read_train_log(log_path)
    epochs = sorted({r["epoch"] for r in rows})

    def epoch_mean(epoch, key="total"):
        return float(np.mean([r[key] for r in rows if r["epoch"] == epoch]))

    first, last = epoch_mean(epochs[0]), epoch_mean(epochs[-1])
    summary = {
        "first_epoch": epochs[0],
        "last_epoch": epochs[-1],
        "first_epoch_mean_total": first,
        "last_epoch_mean_total": last,
        "component_means": {k: float(np.mean([r[k] for r in rows])) for k in LossReport.COMPONENTS + ("total",)},
        "last_epoch_component_means": {k: epoch_mean(epochs[-1], k) for k in LossReport.COMPONENTS},
        "decreased": last < first,
        "non_decreasing_loss": last >= first,
    }
    out_path = Path(out_path) if out_path is not None else Path(log_path).with_name("summary.json")
    out_path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary
