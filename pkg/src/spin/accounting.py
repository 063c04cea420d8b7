"""Exact parameter and multiply-accumulate accounting.

count_params walks the storage layout implied by the architecture,
topology flags, and transform plan, counting every scalar that persists at
inference exactly once: tied tensors once per subset, per-layer tensors
once per layer, transform coefficients once per transformed layer.
Fusion machinery (sources and mixing coefficients) is training-time only,
folds away before inference, and is therefore never counted. BatchNorm
running statistics are buffers, not parameters.

count_flops counts one MAC per convolution/linear kernel multiply, one per
bias application, one per element for the inference-time batchnorm affine,
and the per-forward multiplies of dynamic transforms. Activations,
pooling, and residual adds are free. Tying weights without transforms
leaves the MAC count unchanged.
"""
from __future__ import annotations

from .errors import ValidationError
from .isonet import IsoNet, IsoNetConfig
from .sharing import SharedIsoNet, TransformPlan
from .topology import SharingTopology, require_valid


def _resolve(net, topology, transforms):
    if isinstance(net, SharedIsoNet):
        if topology is None:
            topology = net.topology
        if transforms is None:
            transforms = net.transforms
    cfg = net if isinstance(net, IsoNetConfig) else net.config
    if topology is not None:
        require_valid(topology)
        if topology.L != cfg.depth:
            raise ValidationError(
                f"topology covers {topology.L} layers, network has depth "
                f"{cfg.depth}"
            )
    if transforms is not None and topology is None:
        raise ValidationError("a transform plan needs a topology to attach to")
    return cfg, topology, transforms


def _transform_layer_count(topology, transforms):
    if isinstance(transforms, TransformPlan):
        return len(transforms.coeffs), transforms.g
    # plain group size: placement is all-but-first of every subset
    g = int(transforms)
    return sum(len(s) - 1 for s in topology.subsets), g


def count_params(
    net: IsoNet | IsoNetConfig,
    topology: SharingTopology | None = None,
    transforms: TransformPlan | int | None = None,
) -> int:
    cfg, topology, transforms = _resolve(net, topology, transforms)
    c, k = cfg.channels, cfg.kernel_size
    comp = {
        "pw_w": c * c,
        "dw_w": c * k * k,
        "bias": 2 * c,      # both conv biases of a block
        "bn": 4 * c,        # both batchnorm affine pairs of a block
    }
    block_total = sum(comp.values())

    total = c * cfg.in_channels * cfg.patch_size ** 2 + c  # patch conv
    total += 2 * c                                          # patch bn affine
    total += cfg.num_classes * c + cfg.num_classes          # head

    if topology is None:
        total += cfg.depth * block_total
    else:
        flags = topology.flags
        per_extra_member = block_total
        if flags.share_pwise:
            per_extra_member -= comp["pw_w"]
        if flags.share_dwise:
            per_extra_member -= comp["dw_w"]
        if flags.share_bias:
            per_extra_member -= comp["bias"]
        if flags.share_bn:
            per_extra_member -= comp["bn"]
        for subset in topology.subsets:
            total += block_total + (len(subset) - 1) * per_extra_member

    if transforms is not None:
        n_layers, g = _transform_layer_count(topology, transforms)
        total += n_layers * (c * g + c)
    return total


def count_flops(
    net: IsoNet | IsoNetConfig,
    transforms: TransformPlan | int | None = None,
    topology: SharingTopology | None = None,
) -> int:
    """Multiply-accumulate count for one forward image."""
    cfg, topology, transforms = _resolve(net, topology, transforms)
    c, k = cfg.channels, cfg.kernel_size
    t = cfg.tokens_per_side ** 2

    total = c * cfg.in_channels * cfg.patch_size ** 2 * t + c * t  # patch conv
    total += c * t                                                  # patch bn
    per_block = (c * k * k * t + c * t + c * t) + (c * c * t + c * t + c * t)
    total += cfg.depth * per_block
    total += cfg.num_classes * c + cfg.num_classes                  # head

    if transforms is not None:
        n_layers, g = _transform_layer_count(topology, transforms)
        total += n_layers * (c * c * g)
    return total
