"""Weight tying, dynamic transforms, fusion strategies, constant folding.

apply_sharing ties block components across the subsets of a topology by
rebinding them to one stored tensor per subset; the autodiff engine then
sums gradients over use sites on its own. On top of a shared net:

  * a TransformPlan gives every non-first subset member a learnable
    grouped affine map of the shared pointwise weight (the first member
    reads it raw), re-applied at every forward pass;
  * a FusionPlan replaces each subset's pointwise weight with a learnable
    combination of per-layer source tensors (pretrained or fresh), which
    constant_fold materializes once training is done.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, ValidationError
from .isonet import BatchNorm2d, Block, IsoNet, _kaiming_uniform
from .tensor import Tensor
from .topology import SharingTopology, require_valid

CHOOSE_FIRST = "choose_first"
MEAN = "mean"
SCALAR_WEIGHTED_MEAN = "scalar_weighted_mean"
CHANNEL_WEIGHTED_MEAN = "channel_weighted_mean"
POINTWISE_CONVOLUTION = "pointwise_convolution"
FUSION_STRATEGIES = (
    CHOOSE_FIRST,
    MEAN,
    SCALAR_WEIGHTED_MEAN,
    CHANNEL_WEIGHTED_MEAN,
    POINTWISE_CONVOLUTION,
)


# -- dynamic grouped affine transform ------------------------------------


def identity_transform_coeffs(channels: int, g: int):
    """(a, b) arrays that make the transform the identity map: each row of
    `a` one-hot selects the channel's own position inside its group."""
    if channels % g != 0:
        raise ConfigurationError(f"channels {channels} not divisible by group size {g}")
    a = np.zeros((channels, g))
    a[np.arange(channels), np.arange(channels) % g] = 1.0
    return a, np.zeros(channels)


def dynamic_transform(w_s: Tensor, a: Tensor, b: Tensor, g: int) -> Tensor:
    """Grouped affine remix of a weight tensor along its output-filter axis.

    Channels are partitioned into consecutive groups of size g; output
    channel c becomes sum over its group of a[c, pos] * w_s[group member]
    plus b[c] broadcast over the remaining axes.
    """
    c = w_s.shape[0]
    if c % g != 0:
        raise ConfigurationError(f"output channels {c} not divisible by group size {g}")
    if a.shape != (c, g):
        raise DimensionError(f"transform a must have shape ({c}, {g}), got {a.shape}")
    if b.shape != (c,):
        raise DimensionError(f"transform b must have shape ({c},), got {b.shape}")
    rest = int(np.prod(w_s.shape[1:]))
    wr = T.reshape(w_s, (c // g, g, rest))
    ar = T.reshape(a, (c // g, g, g))
    mixed = T.matmul(ar, wr)
    flat = T.add(T.reshape(mixed, (c, rest)), T.reshape(b, (c, 1)))
    return T.reshape(flat, w_s.shape)


@dataclass
class TransformPlan:
    """Per transformed layer: a in R^{C x G}, b in R^C. Placement rule:
    every subset member except the first carries a transform, so a subset
    of size s owns s - 1 of them."""

    g: int
    coeffs: dict = field(default_factory=dict)  # layer index -> (a, b) tensors

    def layers(self):
        return sorted(self.coeffs)

    def named_parameters(self):
        out = []
        for j in self.layers():
            a, b = self.coeffs[j]
            out.append((f"transform.{j}.a", a))
            out.append((f"transform.{j}.b", b))
        return out


# -- fusion ---------------------------------------------------------------


@dataclass
class FusionEntry:
    sources_w: list  # S tensors, one per subset member, shape of the pw weight
    sources_b: list  # S tensors, shape [C]
    alphas: list | None = None     # scalar weights, one per source
    alpha_vecs: list | None = None  # [C] weights, one per source
    mix: Tensor | None = None      # [C, C] matrix, one per subset


@dataclass
class FusionPlan:
    strategy: str
    entries: list
    pretrained: bool = False

    def named_parameters(self):
        out = []
        for i, e in enumerate(self.entries):
            for k, v in enumerate(e.sources_w):
                out.append((f"fusion.{i}.source_w.{k}", v))
            for k, u in enumerate(e.sources_b):
                out.append((f"fusion.{i}.source_b.{k}", u))
            if e.alphas is not None:
                for k, t in enumerate(e.alphas):
                    out.append((f"fusion.{i}.alpha.{k}", t))
            if e.alpha_vecs is not None:
                for k, t in enumerate(e.alpha_vecs):
                    out.append((f"fusion.{i}.alpha_vec.{k}", t))
            if e.mix is not None:
                out.append((f"fusion.{i}.mix", e.mix))
        return out


def make_fusion_entry(strategy: str, sources_w, sources_b) -> FusionEntry:
    """Wrap sources and initialize coefficients so that every learnable
    strategy starts exactly at the plain mean (alpha = 1, alpha_vec = 1,
    mix = identity)."""
    if strategy not in FUSION_STRATEGIES:
        raise ValidationError(f"unknown fusion strategy {strategy!r}")
    shapes = {tuple(v.shape) for v in sources_w}
    if len(shapes) != 1:
        raise ValidationError(f"fusion sources disagree on shape: {sorted(shapes)}")
    c = sources_w[0].shape[0]
    entry = FusionEntry(list(sources_w), list(sources_b))
    if strategy == SCALAR_WEIGHTED_MEAN:
        entry.alphas = [Tensor(1.0, requires_grad=True) for _ in sources_w]
    elif strategy == CHANNEL_WEIGHTED_MEAN:
        entry.alpha_vecs = [Tensor(np.ones(c), requires_grad=True) for _ in sources_w]
    elif strategy == POINTWISE_CONVOLUTION:
        entry.mix = Tensor(np.eye(c), requires_grad=True)
    return entry


def _tensor_mean(ts):
    acc = ts[0]
    for t in ts[1:]:
        acc = T.add(acc, t)
    return acc * (1.0 / len(ts))


def fuse(plan: FusionPlan, subset_index: int):
    """Materialize (W, b) for one subset as graph tensors, so gradients
    reach the sources and the fusion coefficients."""
    e = plan.entries[subset_index]
    s = len(e.sources_w)
    if plan.strategy == CHOOSE_FIRST:
        return e.sources_w[0], e.sources_b[0]
    b = _tensor_mean(e.sources_b)
    if plan.strategy == MEAN:
        return _tensor_mean(e.sources_w), b
    if plan.strategy == SCALAR_WEIGHTED_MEAN:
        acc = e.alphas[0] * e.sources_w[0]
        for alpha, v in zip(e.alphas[1:], e.sources_w[1:]):
            acc = T.add(acc, alpha * v)
        return acc * (1.0 / s), b
    if plan.strategy == CHANNEL_WEIGHTED_MEAN:
        c = e.sources_w[0].shape[0]
        col = (c,) + (1,) * (e.sources_w[0].ndim - 1)
        acc = T.reshape(e.alpha_vecs[0], col) * e.sources_w[0]
        for vec, v in zip(e.alpha_vecs[1:], e.sources_w[1:]):
            acc = T.add(acc, T.reshape(vec, col) * v)
        return acc * (1.0 / s), b
    if plan.strategy == POINTWISE_CONVOLUTION:
        mean_w = _tensor_mean(e.sources_w)
        c = mean_w.shape[0]
        flat = T.matmul(e.mix, T.reshape(mean_w, (c, -1)))
        return T.reshape(flat, mean_w.shape), b
    raise ValidationError(f"unknown fusion strategy {plan.strategy!r}")


# -- shared network view ---------------------------------------------------


class SharedIsoNet(IsoNet):
    """A view over an IsoNet whose tied components resolve to one stored
    tensor per subset. The view shares storage with the base net."""

    def __init__(self, base: IsoNet, topology: SharingTopology):
        require_valid(topology)
        if topology.L != base.config.depth:
            raise ValidationError(
                f"topology covers {topology.L} layers, network has depth "
                f"{base.config.depth}"
            )
        self.config = base.config
        self.patch_w = base.patch_w
        self.patch_b = base.patch_b
        self.patch_bn = base.patch_bn
        self.head_w = base.head_w
        self.head_b = base.head_b
        self.blocks = [
            Block(b.dw_w, b.dw_b, b.bn1, b.pw_w, b.pw_b, b.bn2) for b in base.blocks
        ]
        self.topology = topology
        self.transforms: TransformPlan | None = None
        self.fusion: FusionPlan | None = None
        self._first_member = {}
        self._fusion_cache = {}
        flags = topology.flags
        for subset in topology.subsets:
            first = self.blocks[subset[0] - 1]
            for j in subset:
                self._first_member[j] = subset[0]
            for j in subset[1:]:
                blk = self.blocks[j - 1]
                if flags.share_pwise:
                    blk.pw_w = first.pw_w
                if flags.share_dwise:
                    blk.dw_w = first.dw_w
                if flags.share_bias:
                    blk.dw_b = first.dw_b
                    blk.pw_b = first.pw_b
                if flags.share_bn:
                    blk.bn1 = first.bn1
                    blk.bn2 = first.bn2

    # -- forward resolution ------------------------------------------------

    def _begin_forward(self):
        self._fusion_cache = {}

    def _fused(self, subset_index: int):
        if subset_index not in self._fusion_cache:
            self._fusion_cache[subset_index] = fuse(self.fusion, subset_index)
        return self._fusion_cache[subset_index]

    def _resolve_block(self, j: int) -> dict:
        blk = self.blocks[j - 1]
        comp = {
            "dw_w": blk.dw_w, "dw_b": blk.dw_b, "bn1": blk.bn1,
            "pw_w": blk.pw_w, "pw_b": blk.pw_b, "bn2": blk.bn2,
        }
        flags = self.topology.flags
        if flags.share_pwise:
            i = self.topology.subset_of(j)
            if self.fusion is not None:
                w, fused_b = self._fused(i)
                comp["pw_w"] = w
                if flags.share_bias:
                    comp["pw_b"] = fused_b
            if self.transforms is not None and j != self._first_member[j]:
                a, b = self.transforms.coeffs[j]
                comp["pw_w"] = dynamic_transform(comp["pw_w"], a, b, self.transforms.g)
        return comp

    # -- inventory -----------------------------------------------------------

    def named_parameters(self):
        out = [(n, t) for n, t in super().named_parameters() if t is not None]
        if self.transforms is not None:
            out.extend(self.transforms.named_parameters())
        if self.fusion is not None:
            out.extend(self.fusion.named_parameters())
        return out


def apply_sharing(net: IsoNet, topology: SharingTopology) -> SharedIsoNet:
    """Tie the flagged components of `net` according to `topology`. The
    result reads and trains the same underlying tensors as `net`."""
    return SharedIsoNet(net, topology)


def attach_transforms(net: SharedIsoNet, g: int, seed: int | None = None) -> SharedIsoNet:
    """Give every non-first subset member an identity-initialized grouped
    affine transform of the shared pointwise weight."""
    if not isinstance(net, SharedIsoNet):
        raise ConfigurationError("transforms need a shared net; apply_sharing first")
    if not net.topology.flags.share_pwise:
        raise ConfigurationError(
            "dynamic transforms remix the shared pointwise weight; enable share_pwise"
        )
    c = net.config.channels
    if c % g != 0:
        raise ConfigurationError(f"channels {c} not divisible by group size {g}")
    plan = TransformPlan(g=g)
    for subset in net.topology.subsets:
        for j in subset[1:]:
            a0, b0 = identity_transform_coeffs(c, g)
            plan.coeffs[j] = (
                Tensor(a0, requires_grad=True),
                Tensor(b0, requires_grad=True),
            )
    net.transforms = plan
    return net


def attach_fusion(
    net: SharedIsoNet,
    strategy: str,
    teacher: IsoNet | None = None,
    seed: int = 0,
) -> SharedIsoNet:
    """Replace each subset's tied pointwise weight with a fusion over
    per-member source tensors.

    With a teacher, the sources copy the teacher's per-layer pointwise
    weights and biases, and every other component of `net` is warm-started
    from the teacher too. Without one, the sources are freshly initialized
    (the regular-init ablation) and the rest of the net is left alone.
    """
    if not isinstance(net, SharedIsoNet):
        raise ConfigurationError("fusion needs a shared net; apply_sharing first")
    if not net.topology.flags.share_pwise:
        raise ConfigurationError(
            "fusion builds the shared pointwise weight; enable share_pwise"
        )
    if strategy not in FUSION_STRATEGIES:
        raise ValidationError(f"unknown fusion strategy {strategy!r}")
    cfg = net.config
    if teacher is not None:
        if teacher.config != cfg:
            raise ValidationError(
                f"teacher architecture {teacher.config} differs from {cfg}"
            )
        _warm_start_from(net, teacher)
    rng = np.random.default_rng(seed)
    entries = []
    for subset in net.topology.subsets:
        sources_w, sources_b = [], []
        for j in subset:
            if teacher is not None:
                w0 = teacher.blocks[j - 1].pw_w.data.copy()
                b0 = teacher.blocks[j - 1].pw_b.data.copy()
            else:
                w0 = _kaiming_uniform(rng, (cfg.channels, cfg.channels, 1, 1), cfg.channels)
                b0 = np.zeros(cfg.channels)
            sources_w.append(Tensor(w0, requires_grad=True))
            sources_b.append(Tensor(b0, requires_grad=True))
        entries.append(make_fusion_entry(strategy, sources_w, sources_b))
    net.fusion = FusionPlan(strategy, entries, pretrained=teacher is not None)
    # the tied pointwise weight now comes from the fusion graph
    for blk in net.blocks:
        blk.pw_w = None
        if net.topology.flags.share_bias:
            blk.pw_b = None
    return net


def _warm_start_from(net: SharedIsoNet, teacher: IsoNet):
    """Copy every non-fused component's values from the teacher. Tied slots
    take the first owning layer's teacher values."""
    np.copyto(net.patch_w.data, teacher.patch_w.data)
    np.copyto(net.patch_b.data, teacher.patch_b.data)
    _copy_bn(net.patch_bn, teacher.patch_bn)
    np.copyto(net.head_w.data, teacher.head_w.data)
    np.copyto(net.head_b.data, teacher.head_b.data)
    seen = set()
    for blk, tblk in zip(net.blocks, teacher.blocks):
        for slot in ("dw_w", "dw_b", "pw_b"):
            t = getattr(blk, slot)
            if t is not None and id(t) not in seen:
                seen.add(id(t))
                np.copyto(t.data, getattr(tblk, slot).data)
        for slot in ("bn1", "bn2"):
            bn = getattr(blk, slot)
            if bn is not None and id(bn) not in seen:
                seen.add(id(bn))
                _copy_bn(bn, getattr(tblk, slot))


def _copy_bn(dst: BatchNorm2d, src: BatchNorm2d):
    np.copyto(dst.gamma.data, src.gamma.data)
    np.copyto(dst.beta.data, src.beta.data)
    np.copyto(dst.running_mean, src.running_mean)
    np.copyto(dst.running_var, src.running_var)


# -- constant folding --------------------------------------------------------


def constant_fold(net: SharedIsoNet) -> SharedIsoNet:
    """Materialize the fusion outputs into plain tied tensors and return an
    independent inference net. Transforms are left live: they differ per
    layer while the shared tensor is stored once, so folding them would
    duplicate storage instead of saving it."""
    if not isinstance(net, SharedIsoNet):
        raise ConfigurationError("constant_fold expects a shared net")
    clones: dict[int, object] = {}

    def clone_tensor(t):
        if t is None:
            return None
        if id(t) not in clones:
            clones[id(t)] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        return clones[id(t)]

    def clone_bn(bn):
        if id(bn) not in clones:
            fresh = BatchNorm2d(bn.gamma.shape[0], eps=bn.eps, momentum=bn.momentum)
            np.copyto(fresh.gamma.data, bn.gamma.data)
            np.copyto(fresh.beta.data, bn.beta.data)
            np.copyto(fresh.running_mean, bn.running_mean)
            np.copyto(fresh.running_var, bn.running_var)
            clones[id(bn)] = fresh
        return clones[id(bn)]

    base = IsoNet.__new__(IsoNet)
    base.config = net.config
    base.patch_w = clone_tensor(net.patch_w)
    base.patch_b = clone_tensor(net.patch_b)
    base.patch_bn = clone_bn(net.patch_bn)
    base.head_w = clone_tensor(net.head_w)
    base.head_b = clone_tensor(net.head_b)
    base.blocks = [
        Block(
            clone_tensor(b.dw_w), clone_tensor(b.dw_b), clone_bn(b.bn1),
            clone_tensor(b.pw_w), clone_tensor(b.pw_b), clone_bn(b.bn2),
        )
        for b in net.blocks
    ]

    if net.fusion is not None:
        for i, subset in enumerate(net.topology.subsets):
            with T.no_grad():
                w, b = fuse(net.fusion, i)
            w_t = Tensor(w.data.copy(), requires_grad=True)
            b_t = Tensor(b.data.copy(), requires_grad=True)
            for j in subset:
                base.blocks[j - 1].pw_w = w_t
                if net.topology.flags.share_bias:
                    base.blocks[j - 1].pw_b = b_t

    folded = SharedIsoNet(base, net.topology)
    if net.transforms is not None:
        plan = TransformPlan(g=net.transforms.g)
        for j, (a, b) in net.transforms.coeffs.items():
            plan.coeffs[j] = (
                Tensor(a.data.copy(), requires_grad=True),
                Tensor(b.data.copy(), requires_grad=True),
            )
        folded.transforms = plan
    return folded


# -- divergence detection ------------------------------------------------------


class DivergenceGuard:
    """Flags a loss stream as diverged on NaN/Inf, or when the loss exceeds
    `factor` times its initial value for `window` consecutive observations."""

    def __init__(self, factor: float = 10.0, window: int = 50):
        self.factor = factor
        self.window = window
        self.initial: float | None = None
        self._high_streak = 0
        self.diverged = False

    def observe(self, loss: float) -> str:
        if self.diverged:
            return "diverged"
        if not math.isfinite(loss):
            self.diverged = True
            return "diverged"
        if self.initial is None:
            self.initial = loss
        if loss > self.factor * self.initial:
            self._high_streak += 1
            if self._high_streak >= self.window:
                self.diverged = True
                return "diverged"
        else:
            self._high_streak = 0
        return "ok"

    @property
    def status(self) -> str:
        return "diverged" if self.diverged else "ok"
