"""Command-line front end.

Subcommands: train, eval, count, space, cka, noise, suite. Exit codes:
0 success, 1 invalid configuration or arguments, 2 unreadable or malformed
files, 3 training diverged.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import accounting
from .analysis import export_matrix, pairwise_cka
from .checkpoint import load_checkpoint
from .data import (
    inject_label_noise,
    load_cifar10,
    load_mnist,
    write_idx_images,
    write_idx_labels,
)
from .errors import FormatError, SpinError, UsageError
from .isonet import IsoNetConfig
from .suite import run_suite
from .tensor import Tensor
from .topology import SharingTopology, SpaceQuery, enumerate_staged_bruteforce, \
    omega, omega_exact, omega_staged
from .train import ExperimentConfig, evaluate, topology_from_spec, train


def _load_dataset(kind, directory):
    if kind == "mnist":
        return load_mnist(directory)
    if kind == "cifar10":
        return load_cifar10(directory)
    raise UsageError(f"unknown dataset kind {kind!r}")


def _parse_topology_arg(value, depth):
    value = value.strip()
    if value.startswith("{"):
        return topology_from_spec(json.loads(value), depth)
    return SharingTopology.load(value)


def _arch_from_args(args) -> IsoNetConfig:
    return IsoNetConfig.from_arch(
        args.arch,
        num_classes=args.classes,
        image_size=args.image_size,
        in_channels=args.in_channels,
    )


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.out is not None:
        cfg.out_dir = args.out
    if args.data_dir is not None:
        cfg.data_dir = args.data_dir
    record = train(cfg)
    acc = record.final_eval_acc
    print(f"status: {record.status}")
    print(f"params: {record.params}")
    print(f"macs: {record.macs}")
    if acc is not None:
        print(f"top1: {acc:.6f}")
    print(f"checkpoint: {record.checkpoint}")
    print(f"metrics: {record.metrics_path}")
    return 3 if record.status == "diverged" else 0


def cmd_eval(args) -> int:
    _, test_ds = _load_dataset(args.dataset, args.data)
    if args.limit is not None:
        test_ds = test_ds.subset(slice(0, args.limit))
    acc = evaluate(args.ckpt, test_ds, batch_size=args.batch_size)
    print(f"top1: {acc:.6f}")
    return 0


def cmd_count(args) -> int:
    cfg = _arch_from_args(args)
    topology = None
    if args.topology is not None:
        topology = _parse_topology_arg(args.topology, cfg.depth)
    transforms = args.transform_g
    if transforms is not None and topology is None:
        raise UsageError("--transform-g requires --topology")
    params = accounting.count_params(cfg, topology=topology,
                                     transforms=transforms)
    macs = accounting.count_flops(cfg, transforms=transforms,
                                  topology=topology)
    print(f"params: {params}")
    print(f"macs: {macs}")
    return 0


def cmd_space(args) -> int:
    q = SpaceQuery(args.ln, args.ls, args.p)
    print(f"omega: {omega(q.ln, q.p)}")
    print(f"omega_exact: {omega_exact(q.ln, q.p)}")
    staged = omega_staged(q)
    print(f"omega_staged: {staged}")
    if args.brute_force:
        brute = enumerate_staged_bruteforce(q)
        print(f"brute_force: {brute}")
        print(f"match: {'yes' if brute == staged else 'no'}")
        if brute != staged:
            return 1
    return 0


def _collect_probe_activations(net, xs, batch_size=128):
    per_layer = None
    for start in range(0, xs.shape[0], batch_size):
        acts = net.collect_activations(Tensor(xs[start:start + batch_size]))
        if per_layer is None:
            per_layer = [[a] for a in acts]
        else:
            for bucket, a in zip(per_layer, acts):
                bucket.append(a)
    return [np.concatenate(bucket, axis=0) for bucket in per_layer]


def cmd_cka(args) -> int:
    net_a = load_checkpoint(args.ckpt_a)
    net_b = net_a if args.ckpt_b is None else load_checkpoint(args.ckpt_b)
    _, test_ds = _load_dataset(args.dataset, args.data)
    n = min(args.probes, len(test_ds))
    rng = np.random.default_rng(args.seed)
    idx = rng.choice(len(test_ds), size=n, replace=False)
    xs = test_ds.normalized(test_ds.images[np.sort(idx)])
    acts_a = _collect_probe_activations(net_a, xs)
    acts_b = acts_a if net_b is net_a else _collect_probe_activations(net_b, xs)
    matrix = pairwise_cka(
        acts_a, acts_b, mask=args.mask,
        model_a=os.path.basename(args.ckpt_a),
        model_b=os.path.basename(args.ckpt_b or args.ckpt_a),
        probe=f"{n} test images, seed {args.seed}",
    )
    csv_path, pgm_path = export_matrix(matrix, args.out)
    print(f"csv: {csv_path}")
    print(f"pgm: {pgm_path}")
    return 0


def cmd_noise(args) -> int:
    if args.dataset != "mnist":
        raise UsageError("noise injection writes IDX files; only the "
                         "mnist/IDX dataset kind is supported")
    train_ds, test_ds = _load_dataset(args.dataset, args.data)
    noisy = inject_label_noise(train_ds, args.level, args.seed)
    os.makedirs(args.out, exist_ok=True)
    write_idx_images(os.path.join(args.out, "train-images-idx3-ubyte"),
                     noisy.images)
    write_idx_labels(os.path.join(args.out, "train-labels-idx1-ubyte"),
                     noisy.labels)
    write_idx_images(os.path.join(args.out, "t10k-images-idx3-ubyte"),
                     test_ds.images)
    write_idx_labels(os.path.join(args.out, "t10k-labels-idx1-ubyte"),
                     test_ds.labels)
    changed = int((noisy.labels != train_ds.labels).sum())
    redrawn = int(round(args.level * len(train_ds)))
    print(f"train examples: {len(train_ds)}")
    print(f"labels redrawn: {redrawn} (changed: {changed})")
    print(f"output: {args.out}")
    return 0


def cmd_suite(args) -> int:
    csv_path = run_suite(args.manifest, args.out)
    print(f"results: {csv_path}")
    return 0


def _add_arch_args(p):
    p.add_argument("--arch", required=True,
                   help="channels/depth/patch/kernel, e.g. 256/8/7/3")
    p.add_argument("--image-size", type=int, default=28)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--in-channels", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spin",
        description="Weight sharing experiments for isotropic conv nets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the config's output directory")
    p.add_argument("--data-dir", help="override the config's data directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dataset", default="mnist", choices=["mnist", "cifar10"])
    p.add_argument("--limit", type=int)
    p.add_argument("--batch-size", type=int, default=256)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count", help="parameter and MAC counts for an architecture")
    _add_arch_args(p)
    p.add_argument("--topology", help="topology file or inline JSON spec")
    p.add_argument("--transform-g", type=int,
                   help="group size of per-layer weight transforms")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("space", help="count reachable sharing configurations")
    p.add_argument("--ln", type=int, required=True, help="network layers")
    p.add_argument("--ls", type=int, required=True, help="layers per stage")
    p.add_argument("--p", type=int, required=True, help="unique tensors")
    p.add_argument("--brute-force", action="store_true",
                   help="cross-check by explicit enumeration")
    p.set_defaults(func=cmd_space)

    p = sub.add_parser("cka", help="layerwise representation similarity")
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b")
    p.add_argument("--data", required=True)
    p.add_argument("--dataset", default="mnist", choices=["mnist", "cifar10"])
    p.add_argument("--out", required=True, help="output path base (no extension)")
    p.add_argument("--probes", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask", default="full", choices=["full", "upper"])
    p.set_defaults(func=cmd_cka)

    p = sub.add_parser("noise", help="write a label-noise copy of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--level", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", default="mnist", choices=["mnist", "cifar10"])
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("suite", help="run a manifest of experiments")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_suite)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SpinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
