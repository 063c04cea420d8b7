"""Training and evaluation harness.

A run is described by an ExperimentConfig (JSON-friendly), trains with
AdamW under a single-cycle cosine schedule, consults the divergence guard
every step, and leaves two artifacts in its output directory: a
`metrics.jsonl` stream (one record per epoch plus a final summary line)
and a `model.spin` checkpoint. With `deterministic` set (the default),
identical configs and seeds reproduce both files byte for byte; wall-clock
timings are then reported in the returned record but kept out of the file.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import accounting
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, inject_label_noise, load_cifar10, load_mnist
from .errors import ConfigurationError, ValidationError
from .isonet import IsoNet, IsoNetConfig, build
from .optim import AdamW, cosine_lr
from .sharing import (
    DivergenceGuard,
    apply_sharing,
    attach_fusion,
    attach_transforms,
)
from .tensor import Tensor, no_grad, softmax_cross_entropy
from .topology import (
    ComponentFlags,
    PyramidSpec,
    SharingTopology,
    build_topology,
)


def topology_from_spec(spec: dict, depth: int) -> SharingTopology:
    """Build a topology from the inline JSON form used by experiment
    configs and suite manifests."""
    if "file" in spec:
        return SharingTopology.load(spec["file"])
    mapping = spec.get("mapping", "sequential")
    distribution = spec.get("distribution", "uniform")
    flags = ComponentFlags.from_dict(spec.get("flags", {}))
    seed = int(spec.get("seed", 0))
    if "pyramid" in spec:
        rate_or_spec = PyramidSpec(tuple(tuple(p) for p in spec["pyramid"]))
    elif "unique" in spec:
        rate_or_spec = (int(spec["unique"]), int(spec["section_rate"]))
    elif "rate" in spec:
        rate_or_spec = int(spec["rate"])
    else:
        raise ValidationError(
            "topology spec needs one of 'rate', 'unique'+'section_rate', "
            "'pyramid', or 'file'"
        )
    return build_topology(mapping, distribution, depth, rate_or_spec,
                          seed=seed, flags=flags)


@dataclass
class ExperimentConfig:
    arch: IsoNetConfig
    out_dir: str = "runs"
    name: str = "run"
    data_dir: str = "data"
    dataset_kind: str = "mnist"  # "mnist" | "cifar10"
    topology: dict | None = None
    transform_g: int | None = None
    fusion_strategy: str | None = None
    fusion_teacher: str | None = None  # checkpoint path; None means regular init
    lr: float = 0.005
    lr_min: float = 0.0
    weight_decay: float = 2e-5
    betas: tuple = (0.9, 0.999)
    batch_size: int = 64
    epochs: int = 20
    noise_level: float = 0.0
    augment: bool = False
    train_limit: int | None = None
    eval_limit: int | None = None
    seed_init: int = 0
    seed_data: int = 0
    seed_noise: int = 0
    deterministic: bool = True

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["arch"] = self.arch.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "arch" not in d:
            raise ConfigurationError("experiment config needs an 'arch' table")
        d["arch"] = IsoNetConfig.from_dict(d["arch"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config fields: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class MetricsRecord:
    name: str
    status: str
    params: int
    macs: int
    checkpoint: str
    epochs: list = field(default_factory=list)
    metrics_path: str = ""
    wall_seconds: float = 0.0

    @property
    def final_eval_acc(self):
        return self.epochs[-1]["eval_acc"] if self.epochs else None


def _load_datasets(cfg: ExperimentConfig):
    if cfg.dataset_kind == "mnist":
        return load_mnist(cfg.data_dir)
    if cfg.dataset_kind == "cifar10":
        return load_cifar10(cfg.data_dir)
    raise ConfigurationError(f"unknown dataset kind {cfg.dataset_kind!r}")


def build_model(cfg: ExperimentConfig):
    """Instantiate the network with sharing, transforms, and fusion wired
    in as the config asks."""
    net: IsoNet = build(cfg.arch, seed=cfg.seed_init)
    if cfg.topology is not None:
        topo = topology_from_spec(cfg.topology, cfg.arch.depth)
        net = apply_sharing(net, topo)
        if cfg.fusion_strategy is not None:
            teacher = None
            if cfg.fusion_teacher is not None:
                teacher = load_checkpoint(cfg.fusion_teacher)
            attach_fusion(net, cfg.fusion_strategy, teacher=teacher,
                          seed=cfg.seed_init)
        if cfg.transform_g is not None:
            attach_transforms(net, cfg.transform_g)
    elif cfg.fusion_strategy is not None or cfg.transform_g is not None:
        raise ConfigurationError(
            "fusion and transforms need a sharing topology"
        )
    return net


def train(cfg: ExperimentConfig, train_ds: Dataset | None = None,
          test_ds: Dataset | None = None) -> MetricsRecord:
    t_start = time.monotonic()
    os.makedirs(cfg.out_dir, exist_ok=True)
    if train_ds is None or test_ds is None:
        train_ds, test_ds = _load_datasets(cfg)
    if cfg.arch.num_classes != train_ds.num_classes:
        raise ValidationError(
            f"model has {cfg.arch.num_classes} classes, dataset has "
            f"{train_ds.num_classes}"
        )
    if cfg.train_limit is not None:
        train_ds = train_ds.subset(slice(0, cfg.train_limit))
    if cfg.eval_limit is not None:
        test_ds = test_ds.subset(slice(0, cfg.eval_limit))
    if cfg.noise_level > 0.0:
        train_ds = inject_label_noise(train_ds, cfg.noise_level, cfg.seed_noise)

    net = build_model(cfg)
    params = accounting.count_params(net)
    macs = accounting.count_flops(net)
    optimizer = AdamW(net.parameters(), lr=cfg.lr, betas=cfg.betas,
                      weight_decay=cfg.weight_decay)
    guard = DivergenceGuard()
    rng_data = np.random.default_rng(cfg.seed_data)
    steps_per_epoch = (len(train_ds) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    augment = cfg.augment and cfg.dataset_kind == "cifar10"

    metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
    ckpt_path = os.path.join(cfg.out_dir, "model.spin")
    step = 0
    epoch_records = []
    with open(metrics_path, "w") as mf:
        for epoch in range(1, cfg.epochs + 1):
            e_start = time.monotonic()
            losses = []
            correct = 0
            for xb, yb in train_ds.batches(cfg.batch_size, rng=rng_data,
                                           augment=augment):
                logits = net.forward(Tensor(xb), training=True)
                loss = softmax_cross_entropy(logits, yb)
                loss_val = loss.item()
                losses.append(loss_val)
                correct += int((logits.data.argmax(axis=1) == yb).sum())
                if guard.observe(loss_val) == "diverged":
                    break
                loss.backward()
                optimizer.step(lr=cosine_lr(step, total_steps, cfg.lr, cfg.lr_min))
                optimizer.zero_grad()
                step += 1
            rec = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else None,
                "train_acc": correct / len(train_ds),
                "eval_acc": evaluate(net, test_ds),
                "lr": cosine_lr(min(step, total_steps), total_steps, cfg.lr,
                                cfg.lr_min),
                "seconds": None if cfg.deterministic
                else round(time.monotonic() - e_start, 3),
            }
            epoch_records.append(rec)
            mf.write(json.dumps(rec, sort_keys=True) + "\n")
            if guard.diverged:
                break
        save_checkpoint(net, ckpt_path)
        summary = {
            "final": True,
            "name": cfg.name,
            "status": guard.status,
            "params": params,
            "macs": macs,
            "checkpoint": os.path.basename(ckpt_path),
            "epochs_run": len(epoch_records),
        }
        mf.write(json.dumps(summary, sort_keys=True) + "\n")

    return MetricsRecord(
        name=cfg.name,
        status=guard.status,
        params=params,
        macs=macs,
        checkpoint=ckpt_path,
        epochs=epoch_records,
        metrics_path=metrics_path,
        wall_seconds=time.monotonic() - t_start,
    )


def evaluate(net_or_path, dataset: Dataset, batch_size: int = 256) -> float:
    """Eval-mode top-1 accuracy as an exact fraction."""
    net = net_or_path
    if isinstance(net_or_path, (str, os.PathLike)):
        net = load_checkpoint(net_or_path)
    if net.config.num_classes != dataset.num_classes:
        raise ValidationError(
            f"model has {net.config.num_classes} classes, dataset has "
            f"{dataset.num_classes}"
        )
    correct = 0
    with no_grad():
        for xb, yb in dataset.batches(batch_size):
            logits = net.forward(Tensor(xb), training=False)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    return correct / len(dataset)
