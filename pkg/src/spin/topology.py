"""Sharing topologies: construction, validation, serialization, counting.

A topology is an ordered collection of disjoint, nonempty subsets of the
layer indices 1..L whose union covers every layer. Layers inside one
subset read the same stored weight tensor; share rate is L / P where P is
the number of subsets. Construction covers the four mappings (Sequential,
Strided, Pyramid, Random) crossed with the four distributions (Uniform,
Front, Middle, Back).

The counting half of the module works in exact big integers: omega and
omega_exact are closed forms, omega_staged is a memoized recursion over
network stages, and enumerate_staged_bruteforce is the vectorized oracle
the recursion is tested against.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import ResourceError, ValidationError

MAPPINGS = ("sequential", "strided", "pyramid", "random")
DISTRIBUTIONS = ("uniform", "front", "middle", "back")

TOPOLOGY_FORMAT_VERSION = 1

_BRUTE_FORCE_GUARD = 10_000_000
_CHUNK = 1 << 20


@dataclass(frozen=True)
class ComponentFlags:
    """Which block components a subset ties. The default (pointwise weights
    only) is the configuration that trains best; bias covers both conv
    biases of a block and bn covers both batchnorm affine pairs."""

    share_pwise: bool = True
    share_dwise: bool = False
    share_bias: bool = False
    share_bn: bool = False

    def to_dict(self):
        return {
            "share_pwise": self.share_pwise,
            "share_dwise": self.share_dwise,
            "share_bias": self.share_bias,
            "share_bn": self.share_bn,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: bool(v) for k, v in d.items()})

    def any(self):
        return self.share_pwise or self.share_dwise or self.share_bias or self.share_bn


@dataclass(frozen=True)
class PyramidSpec:
    """Sequence of (count, rate) pairs, expanded left to right: each pair
    contributes `count` consecutive subsets of `rate` consecutive layers."""

    pairs: tuple

    def __post_init__(self):
        pairs = tuple((int(n), int(s)) for n, s in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        for n, s in pairs:
            if n <= 0 or s <= 0:
                raise ValidationError(f"pyramid pair ({n}x{s}) must be positive")

    @property
    def total_layers(self):
        return sum(n * s for n, s in self.pairs)

    @property
    def unique_tensors(self):
        return sum(n for n, _ in self.pairs)

    def sizes(self):
        out = []
        for n, s in self.pairs:
            out.extend([s] * n)
        return out


@dataclass(frozen=True)
class SharingTopology:
    L: int
    subsets: tuple  # tuple of tuples of sorted 1-based layer indices
    mapping: str
    distribution: str
    flags: ComponentFlags = field(default_factory=ComponentFlags)
    seed: int = 0

    @property
    def num_subsets(self):
        return len(self.subsets)

    @property
    def share_rate(self):
        return self.L / len(self.subsets)

    def subset_of(self, layer: int) -> int:
        """0-based subset index owning a 1-based layer index."""
        owner = self._owner()
        if layer not in owner:
            raise ValidationError(f"layer {layer} outside 1..{self.L}")
        return owner[layer]

    def _owner(self):
        owner = getattr(self, "_owner_cache", None)
        if owner is None:
            owner = {}
            for i, s in enumerate(self.subsets):
                for j in s:
                    owner[j] = i
            object.__setattr__(self, "_owner_cache", owner)
        return owner

    def with_flags(self, flags: ComponentFlags) -> "SharingTopology":
        return replace(self, flags=flags)

    # -- serialization --------------------------------------------------

    def to_json_bytes(self) -> bytes:
        doc = {
            "version": TOPOLOGY_FORMAT_VERSION,
            "L": self.L,
            "mapping": self.mapping,
            "distribution": self.distribution,
            "subsets": [list(s) for s in self.subsets],
            "component_flags": self.flags.to_dict(),
            "seed": self.seed,
        }
        return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")

    @classmethod
    def from_json_bytes(cls, raw: bytes) -> "SharingTopology":
        doc = json.loads(raw.decode("utf-8"))
        if doc.get("version") != TOPOLOGY_FORMAT_VERSION:
            raise ValidationError(
                f"unsupported topology descriptor version {doc.get('version')}"
            )
        t = cls(
            L=int(doc["L"]),
            subsets=_canonical(doc["subsets"]),
            mapping=doc["mapping"],
            distribution=doc["distribution"],
            flags=ComponentFlags.from_dict(doc["component_flags"]),
            seed=int(doc.get("seed", 0)),
        )
        require_valid(t)
        return t

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_json_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_json_bytes(f.read())


def _canonical(subsets) -> tuple:
    """Sorted indices inside each subset; subsets ordered by minimum element."""
    cleaned = [tuple(sorted(int(i) for i in s)) for s in subsets]
    cleaned.sort(key=lambda s: s[0] if s else 0)
    return tuple(cleaned)


def identity_topology(L: int, flags: ComponentFlags | None = None) -> SharingTopology:
    return SharingTopology(
        L=L,
        subsets=tuple((j,) for j in range(1, L + 1)),
        mapping="sequential",
        distribution="uniform",
        flags=flags or ComponentFlags(),
    )


# -- construction -------------------------------------------------------


def build_topology(
    mapping: str,
    distribution: str,
    L: int,
    share_rate_or_spec,
    seed: int = 0,
    flags: ComponentFlags | None = None,
) -> SharingTopology:
    """Build one of the mapping x distribution combinations.

    `share_rate_or_spec` is
      * an integer rate for uniform Sequential/Strided/Random,
      * a (unique_count, section_rate) pair for Front/Middle/Back, meaning
        `unique_count` subsets of `section_rate` layers form the shared
        section and every other layer stays a singleton,
      * a PyramidSpec for the Pyramid mapping (any distribution; its pairs
        already fix where the large subsets sit).
    """
    mapping = mapping.lower()
    distribution = distribution.lower()
    if mapping not in MAPPINGS:
        raise ValidationError(f"unknown mapping {mapping!r}, expected one of {MAPPINGS}")
    if distribution not in DISTRIBUTIONS:
        raise ValidationError(
            f"unknown distribution {distribution!r}, expected one of {DISTRIBUTIONS}"
        )
    if L <= 0:
        raise ValidationError(f"L must be positive, got {L}")
    flags = flags or ComponentFlags()

    if mapping == "pyramid":
        spec = share_rate_or_spec
        if not isinstance(spec, PyramidSpec):
            raise ValidationError("pyramid mapping needs a PyramidSpec")
        if spec.total_layers != L:
            raise ValidationError(
                f"pyramid spec covers {spec.total_layers} layers "
                f"(= {' + '.join(f'{n}*{s}' for n, s in spec.pairs)}), network has {L}"
            )
        subsets = []
        nxt = 1
        for size in spec.sizes():
            subsets.append(tuple(range(nxt, nxt + size)))
            nxt += size
        t = SharingTopology(L, _canonical(subsets), mapping, distribution, flags, seed)
        require_valid(t)
        return t

    if distribution == "uniform":
        rate = share_rate_or_spec
        if isinstance(rate, tuple):
            raise ValidationError("uniform distribution takes a plain share rate")
        rate = int(rate)
        if rate <= 0 or L % rate != 0:
            raise ValidationError(
                f"share rate {rate} must divide L={L} (L % rate = {L % rate if rate else 'n/a'})"
            )
        p = L // rate
        assign = _section_assignment(mapping, L, p, seed)
        subsets = _assignment_to_subsets(assign, range(1, L + 1), p)
    else:
        try:
            unique, section_rate = share_rate_or_spec
        except (TypeError, ValueError):
            raise ValidationError(
                f"{distribution} distribution takes a (unique_count, section_rate) pair"
            ) from None
        unique, section_rate = int(unique), int(section_rate)
        if unique <= 0 or section_rate <= 1:
            raise ValidationError(
                f"shared section needs unique_count > 0 and section_rate > 1, "
                f"got ({unique}, {section_rate})"
            )
        section_len = unique * section_rate
        if section_len > L:
            raise ValidationError(
                f"shared section {unique}*{section_rate} = {section_len} "
                f"exceeds L = {L}"
            )
        if distribution == "front":
            start = 1
        elif distribution == "back":
            start = L - section_len + 1
        else:  # middle, left tie-break
            start = (L - section_len) // 2 + 1
        section = list(range(start, start + section_len))
        assign = _section_assignment(mapping, section_len, unique, seed)
        subsets = _assignment_to_subsets(assign, section, unique)
        subsets.extend((j,) for j in range(1, L + 1) if j not in set(section))

    t = SharingTopology(L, _canonical(subsets), mapping, distribution, flags, seed)
    require_valid(t)
    return t


def _section_assignment(mapping, n, p, seed):
    """0-based subset index for each of n consecutive positions."""
    if n % p != 0 and mapping in ("sequential", "strided"):
        raise ValidationError(
            f"{mapping} needs the section length {n} divisible by {p} subsets"
        )
    if mapping == "sequential":
        rate = n // p
        return [pos // rate for pos in range(n)]
    if mapping == "strided":
        return [pos % p for pos in range(n)]
    if mapping == "random":
        rng = np.random.default_rng(seed)
        while True:  # rejection-sample until every subset is nonempty
            assign = rng.integers(0, p, size=n)
            if len(np.unique(assign)) == p:
                return [int(a) for a in assign]
    raise ValidationError(f"mapping {mapping!r} has no section assignment rule")


def _assignment_to_subsets(assign, layers, p):
    subsets = [[] for _ in range(p)]
    for layer, a in zip(layers, assign):
        subsets[a].append(layer)
    return [tuple(s) for s in subsets]


# -- validation ----------------------------------------------------------


def validate(t: SharingTopology) -> list:
    """Return a list of violation strings; empty means the topology is valid."""
    violations = []
    if len(t.subsets) > t.L:
        violations.append(f"{len(t.subsets)} subsets exceed L = {t.L}")
    seen = {}
    for i, s in enumerate(t.subsets):
        if not s:
            violations.append(f"subset {i} is empty")
        for layer in s:
            if layer < 1 or layer > t.L:
                violations.append(f"layer {layer} outside 1..{t.L} in subset {i}")
            elif layer in seen:
                violations.append(
                    f"overlap at layer {layer}: subsets {seen[layer]} and {i}"
                )
            else:
                seen[layer] = i
    missing = sorted(set(range(1, t.L + 1)) - set(seen))
    if missing:
        violations.append(f"coverage violation: layers {missing} unassigned")
    return violations


def require_valid(t: SharingTopology) -> SharingTopology:
    violations = validate(t)
    if violations:
        raise ValidationError("invalid topology: " + "; ".join(violations))
    return t


# -- search-space counting -----------------------------------------------


@dataclass(frozen=True)
class SpaceQuery:
    ln: int  # total layers
    ls: int  # layers per stage
    p: int   # weight-tensor budget

    def __post_init__(self):
        if self.ln <= 0 or self.ls <= 0 or self.p < 1:
            raise ValidationError(
                f"space query needs positive sizes, got L_N={self.ln}, "
                f"L_S={self.ls}, P={self.p}"
            )
        if self.ln % self.ls != 0:
            raise ValidationError(
                f"L_N = {self.ln} must be divisible by L_S = {self.ls}"
            )


def omega(L: int, P: int) -> int:
    """P^L: assignments of one of P tensors to each of L layers."""
    if P < 1 or P > L:
        raise ValidationError(f"omega needs 0 < P <= L, got L={L}, P={P}")
    return P ** L


def omega_exact(L: int, P: int) -> int:
    """P^L - (P-1)^L: assignments in which tensor P appears at least once."""
    if P < 1 or P > L:
        raise ValidationError(f"omega_exact needs 0 < P <= L, got L={L}, P={P}")
    return P ** L - (P - 1) ** L


@lru_cache(maxsize=None)
def _surjections(L: int, i: int) -> int:
    """Assignments of L layers onto exactly i tensors (every tensor used),
    by inclusion-exclusion."""
    total = 0
    for j in range(i + 1):
        total += (-1) ** j * math.comb(i, j) * (i - j) ** L
    return total


def omega_staged(q: SpaceQuery) -> int:
    """Number of stage-respecting assignments: each stage of L_S layers uses
    some nonempty set of tensors, and distinct stages use disjoint sets.

    Computed as a memoized recursion over stages: choose which i of the
    remaining P tensors the first stage uses (exactly i of them, counted by
    inclusion-exclusion), then recurse on the rest with base case
    omega_staged(0, ., .) = 1.
    """
    return _omega_staged(q.ln, q.ls, q.p)


@lru_cache(maxsize=None)
def _omega_staged(ln: int, ls: int, p: int) -> int:
    if ln == 0:
        return 1
    total = 0
    for i in range(1, min(ls, p) + 1):
        total += math.comb(p, i) * _surjections(ls, i) * _omega_staged(ln - ls, ls, p - i)
    return total


def enumerate_staged_bruteforce(q: SpaceQuery) -> int:
    """Count stage-disjoint assignments by enumerating all P^L_N of them.

    Guarded so the table of raw assignments stays small; the enumeration is
    vectorized over chunks with per-stage label bitmasks, and an assignment
    is valid iff the popcount of the union equals the sum of per-stage
    popcounts (no label appears in two stages).
    """
    total_assignments = q.p ** q.ln
    if total_assignments > _BRUTE_FORCE_GUARD:
        raise ResourceError(
            f"brute force would enumerate {total_assignments} assignments "
            f"(guard is {_BRUTE_FORCE_GUARD})"
        )
    stages = q.ln // q.ls
    popcount = np.array([bin(v).count("1") for v in range(1 << q.p)], dtype=np.int64)
    count = 0
    for start in range(0, total_assignments, _CHUNK):
        idx = np.arange(start, min(start + _CHUNK, total_assignments), dtype=np.int64)
        labels = np.empty((idx.size, q.ln), dtype=np.int64)
        rem = idx.copy()
        for pos in range(q.ln - 1, -1, -1):
            labels[:, pos] = rem % q.p
            rem //= q.p
        masks = np.left_shift(1, labels)
        union = np.zeros(idx.size, dtype=np.int64)
        pc_sum = np.zeros(idx.size, dtype=np.int64)
        for s in range(stages):
            stage_mask = np.bitwise_or.reduce(
                masks[:, s * q.ls : (s + 1) * q.ls], axis=1
            )
            union |= stage_mask
            pc_sum += popcount[stage_mask]
        count += int(np.count_nonzero(popcount[union] == pc_sum))
    return count
