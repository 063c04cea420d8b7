"""Binary checkpoint container.

Layout: magic "SPIN", format version (u32 little-endian), header length
(u32 little-endian), canonical JSON header, then the concatenated
little-endian float64 tensor payload. The header carries the architecture
descriptor, the topology descriptor (when shared), transform/fusion plan
metadata, and the tensor index (name, shape, param/buffer kind, element
offset). Round-trips are bit-exact: saving a freshly loaded net
reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError, ValidationError
from .isonet import IsoNetConfig, build
from .sharing import (
    SharedIsoNet,
    apply_sharing,
    attach_fusion,
    attach_transforms,
)
from .topology import SharingTopology

MAGIC = b"SPIN"
FORMAT_VERSION = 1


def _unique_state(net):
    """(name, array, kind) triads in walk order, one entry per storage."""
    out = []
    seen = set()
    for name, t in net.named_parameters():
        if id(t) in seen:
            continue
        seen.add(id(t))
        out.append((name, t.data, "param"))
    for name, buf in net.named_buffers():
        if id(buf) in seen:
            continue
        seen.add(id(buf))
        out.append((name, buf, "buffer"))
    return out


def save_checkpoint(net, path):
    header = {
        "config": net.config.to_dict(),
        "topology": None,
        "transforms": None,
        "fusion": None,
        "tensors": [],
    }
    if isinstance(net, SharedIsoNet):
        header["topology"] = json.loads(net.topology.to_json_bytes().decode("utf-8"))
        if net.transforms is not None:
            header["transforms"] = {
                "g": net.transforms.g,
                "layers": net.transforms.layers(),
            }
        if net.fusion is not None:
            header["fusion"] = {
                "strategy": net.fusion.strategy,
                "pretrained": net.fusion.pretrained,
            }
    state = _unique_state(net)
    offset = 0
    for name, arr, kind in state:
        header["tensors"].append(
            {"name": name, "shape": list(arr.shape), "kind": kind, "offset": offset}
        )
        offset += arr.size
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for _, arr, _ in state:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated container header", offset=len(raw))
    if raw[:4] != MAGIC:
        raise FormatError(
            f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}", offset=0
        )
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{path}: unsupported format version {version}", offset=4
        )
    if len(raw) < 12 + hlen:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))

    config = IsoNetConfig.from_dict(header["config"])
    net = build(config, seed=0)
    if header["topology"] is not None:
        topo = SharingTopology.from_json_bytes(
            json.dumps(header["topology"]).encode("utf-8")
        )
        net = apply_sharing(net, topo)
        if header["transforms"] is not None:
            attach_transforms(net, header["transforms"]["g"])
        if header["fusion"] is not None:
            attach_fusion(net, header["fusion"]["strategy"], teacher=None)
            net.fusion.pretrained = bool(header["fusion"]["pretrained"])

    targets = {}
    for name, t in net.named_parameters():
        targets.setdefault(name, t.data)
    for name, buf in net.named_buffers():
        targets.setdefault(name, buf)

    payload = raw[12 + hlen :]
    expected = sum(int(np.prod(e["shape"])) for e in header["tensors"])
    if len(payload) != expected * 8:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, index promises "
            f"{expected * 8}", offset=12 + hlen + min(len(payload), expected * 8),
        )
    for entry in header["tensors"]:
        name = entry["name"]
        if name not in targets:
            raise ValidationError(
                f"{path}: tensor {name!r} does not exist in the rebuilt net"
            )
        shape = tuple(entry["shape"])
        dst = targets[name]
        if tuple(dst.shape) != shape:
            raise ValidationError(
                f"{path}: tensor {name!r} has shape {tuple(dst.shape)}, "
                f"file says {shape}"
            )
        start = entry["offset"] * 8
        count = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(payload, dtype="<f8", offset=start, count=count)
        np.copyto(dst, vals.reshape(shape))
    return net
