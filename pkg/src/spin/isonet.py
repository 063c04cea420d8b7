"""ConvMixer-style isotropic networks built from a C/D/P/K descriptor.

Every block has the same shape: a depthwise convolution (same padding,
residual add around it) followed by a pointwise convolution, each with
GELU then BatchNorm. The patch embedding is a strided convolution whose
kernel and stride equal the patch size, and the head is global average
pooling into a linear classifier. Identical block shapes are what make
cross-layer tying possible at all, so isotropy is asserted at build time.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class IsoNetConfig:
    channels: int
    depth: int
    patch_size: int
    kernel_size: int
    num_classes: int = 10
    image_size: int = 28
    in_channels: int = 1

    def __post_init__(self):
        for name in ("channels", "depth", "patch_size", "kernel_size",
                     "num_classes", "image_size", "in_channels"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size "
                f"{self.patch_size} ({self.image_size} % {self.patch_size} = "
                f"{self.image_size % self.patch_size})"
            )
        if self.kernel_size % 2 == 0:
            raise ConfigurationError(
                f"kernel_size must be odd for same padding, got {self.kernel_size}"
            )

    @property
    def tokens_per_side(self) -> int:
        return self.image_size // self.patch_size

    @classmethod
    def from_arch(cls, arch: str, **kwargs) -> "IsoNetConfig":
        """Parse a 'C/D/P/K' descriptor string."""
        parts = arch.split("/")
        if len(parts) != 4:
            raise ConfigurationError(f"arch must look like C/D/P/K, got {arch!r}")
        try:
            c, d, p, k = (int(v) for v in parts)
        except ValueError:
            raise ConfigurationError(f"arch fields must be integers, got {arch!r}") from None
        return cls(channels=c, depth=d, patch_size=p, kernel_size=k, **kwargs)

    def to_dict(self):
        return {
            "channels": self.channels,
            "depth": self.depth,
            "patch_size": self.patch_size,
            "kernel_size": self.kernel_size,
            "num_classes": self.num_classes,
            "image_size": self.image_size,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown architecture fields: {', '.join(unknown)}")
        try:
            return cls(**{k: int(v) for k, v in d.items()})
        except TypeError as exc:
            raise ConfigurationError(f"incomplete architecture: {exc}") from None


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class BatchNorm2d:
    """Affine batchnorm with running statistics (the running buffers are
    plain arrays, not graph tensors)."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training, momentum=self.momentum, eps=self.eps,
        )


class Block:
    __slots__ = ("dw_w", "dw_b", "bn1", "pw_w", "pw_b", "bn2")

    def __init__(self, dw_w, dw_b, bn1, pw_w, pw_b, bn2):
        self.dw_w = dw_w
        self.dw_b = dw_b
        self.bn1 = bn1
        self.pw_w = pw_w
        self.pw_b = pw_b
        self.bn2 = bn2


class IsoNet:
    def __init__(self, config: IsoNetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c, k, p = config.channels, config.kernel_size, config.patch_size

        fan_patch = config.in_channels * p * p
        self.patch_w = Tensor(
            _kaiming_uniform(rng, (c, config.in_channels, p, p), fan_patch),
            requires_grad=True,
        )
        self.patch_b = Tensor(np.zeros(c), requires_grad=True)
        self.patch_bn = BatchNorm2d(c)

        self.blocks: list[Block] = []
        for _ in range(config.depth):
            dw_w = Tensor(_kaiming_uniform(rng, (c, 1, k, k), k * k), requires_grad=True)
            dw_b = Tensor(np.zeros(c), requires_grad=True)
            pw_w = Tensor(_kaiming_uniform(rng, (c, c, 1, 1), c), requires_grad=True)
            pw_b = Tensor(np.zeros(c), requires_grad=True)
            self.blocks.append(Block(dw_w, dw_b, BatchNorm2d(c), pw_w, pw_b, BatchNorm2d(c)))

        self.head_w = Tensor(
            _kaiming_uniform(rng, (config.num_classes, c), c), requires_grad=True
        )
        self.head_b = Tensor(np.zeros(config.num_classes), requires_grad=True)

        shapes = {
            (b.dw_w.shape, b.pw_w.shape) for b in self.blocks if b.dw_w is not None
        }
        if len(shapes) > 1:
            raise ConfigurationError(f"blocks are not isotropic: {shapes}")

    # -- forward --------------------------------------------------------

    def _begin_forward(self):
        pass

    def _resolve_block(self, j: int) -> dict:
        """Effective components of block j (1-based). Subclasses reroute
        these through sharing, transforms, and fusion."""
        blk = self.blocks[j - 1]
        return {
            "dw_w": blk.dw_w, "dw_b": blk.dw_b, "bn1": blk.bn1,
            "pw_w": blk.pw_w, "pw_b": blk.pw_b, "bn2": blk.bn2,
        }

    def _check_input(self, x: Tensor):
        cfg = self.config
        if x.ndim != 4:
            raise DimensionError(f"batch must be 4-d [N,C,H,W], got {x.shape}")
        if x.shape[1] != cfg.in_channels:
            raise DimensionError(
                f"channel axis is {x.shape[1]}, model expects {cfg.in_channels}"
            )
        if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
            raise DimensionError(
                f"spatial axes are {x.shape[2]}x{x.shape[3]}, model expects "
                f"{cfg.image_size}x{cfg.image_size}"
            )

    def _run_block(self, h: Tensor, j: int, training: bool) -> Tensor:
        cfg = self.config
        comp = self._resolve_block(j)
        r = T.conv2d(h, comp["dw_w"], comp["dw_b"], stride=1,
                     padding=cfg.kernel_size // 2, groups=cfg.channels)
        r = T.gelu(r)
        r = comp["bn1"](r, training)
        h = h + r
        h = T.conv2d(h, comp["pw_w"], comp["pw_b"])
        h = T.gelu(h)
        h = comp["bn2"](h, training)
        return h

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        logits, _ = self._forward_impl(x, training, taps=False)
        return logits

    def forward_with_taps(self, x: Tensor, training: bool = False):
        """Forward pass that also returns the per-block output feature maps
        (the tap point sits after each block's closing batchnorm)."""
        return self._forward_impl(x, training, taps=True)

    def _forward_impl(self, x, training, taps):
        self._check_input(x)
        self._begin_forward()
        cfg = self.config
        h = T.conv2d(x, self.patch_w, self.patch_b, stride=cfg.patch_size)
        h = T.gelu(h)
        h = self.patch_bn(h, training)
        collected = []
        for j in range(1, cfg.depth + 1):
            h = self._run_block(h, j, training)
            if taps:
                collected.append(h)
        pooled = T.global_avg_pool(h)
        logits = T.linear(pooled, self.head_w, self.head_b)
        return logits, collected

    def collect_activations(self, x: Tensor) -> list:
        """Eval-mode per-block feature maps as arrays, [N, C, g, g] each."""
        with T.no_grad():
            _, taps = self.forward_with_taps(x, training=False)
        return [t.numpy() for t in taps]

    # -- inventory --------------------------------------------------------

    def named_parameters(self):
        """(name, tensor) pairs in a fixed walk order. Tied components show
        up once per owning layer with the same underlying tensor object;
        deduplicate by id for optimization or counting."""
        out = [
            ("patch.weight", self.patch_w),
            ("patch.bias", self.patch_b),
            ("patch_bn.gamma", self.patch_bn.gamma),
            ("patch_bn.beta", self.patch_bn.beta),
        ]
        for idx, blk in enumerate(self.blocks, start=1):
            prefix = f"blocks.{idx}"
            if blk.dw_w is not None:
                out.append((f"{prefix}.dw.weight", blk.dw_w))
            if blk.dw_b is not None:
                out.append((f"{prefix}.dw.bias", blk.dw_b))
            if blk.bn1 is not None:
                out.append((f"{prefix}.bn1.gamma", blk.bn1.gamma))
                out.append((f"{prefix}.bn1.beta", blk.bn1.beta))
            if blk.pw_w is not None:
                out.append((f"{prefix}.pw.weight", blk.pw_w))
            if blk.pw_b is not None:
                out.append((f"{prefix}.pw.bias", blk.pw_b))
            if blk.bn2 is not None:
                out.append((f"{prefix}.bn2.gamma", blk.bn2.gamma))
                out.append((f"{prefix}.bn2.beta", blk.bn2.beta))
        out.append(("head.weight", self.head_w))
        out.append(("head.bias", self.head_b))
        return out

    def named_buffers(self):
        out = [
            ("patch_bn.running_mean", self.patch_bn.running_mean),
            ("patch_bn.running_var", self.patch_bn.running_var),
        ]
        for idx, blk in enumerate(self.blocks, start=1):
            for tag, bn in (("bn1", blk.bn1), ("bn2", blk.bn2)):
                if bn is not None:
                    out.append((f"blocks.{idx}.{tag}.running_mean", bn.running_mean))
                    out.append((f"blocks.{idx}.{tag}.running_var", bn.running_var))
        return out

    def parameters(self) -> list:
        seen, out = set(), []
        for _, t in self.named_parameters():
            if id(t) not in seen:
                seen.add(id(t))
                out.append(t)
        return out


def build(config: IsoNetConfig, seed: int = 0) -> IsoNet:
    """Deterministically initialized network (Kaiming-uniform weights,
    zero biases, unit batchnorm affines)."""
    return IsoNet(config, seed=seed)


def collect_activations(net: IsoNet, batch: Tensor) -> list:
    return net.collect_activations(batch)
