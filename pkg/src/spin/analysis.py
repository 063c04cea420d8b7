"""Linear centered kernel alignment between layer activations.

Activations enter as (examples x flattened features) matrices. The
similarity index is computed in feature space through the Frobenius-norm
identity, so no examples-by-examples Gram matrix is ever stored:

    cka(X, Y) = |Yc' Xc|_F^2 / (|Xc' Xc|_F * |Yc' Yc|_F)

with Xc, Yc column-centered. The index is 1 at self-similarity and is
invariant to isotropic scaling and to orthogonal transforms of either
feature space.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InputError


class ZeroActivationWarning(UserWarning):
    """A centered activation matrix was identically zero."""


def as_activation_matrix(acts: np.ndarray) -> np.ndarray:
    """Flatten per-example feature maps to a 2-d examples x features array."""
    a = np.asarray(acts, dtype=np.float64)
    if a.ndim < 2:
        raise InputError(f"activations need at least 2 axes, got shape {a.shape}")
    return a.reshape(a.shape[0], -1)


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    x = as_activation_matrix(x)
    y = as_activation_matrix(y)
    if x.shape[0] != y.shape[0]:
        raise InputError(
            f"example counts disagree: {x.shape[0]} vs {y.shape[0]}"
        )
    if x.shape[0] < 2:
        raise InputError("centered similarity needs at least 2 examples")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cross = np.linalg.norm(yc.T @ xc) ** 2
    nx = np.linalg.norm(xc.T @ xc)
    ny = np.linalg.norm(yc.T @ yc)
    if nx == 0.0 or ny == 0.0:
        warnings.warn(
            "centered activations are all-zero; similarity reported as 0",
            ZeroActivationWarning,
            stacklevel=2,
        )
        return 0.0
    return float(cross / (nx * ny))


@dataclass
class CkaMatrix:
    values: np.ndarray               # [L_A, L_B], NaN where masked
    model_a: str = "a"
    model_b: str = "b"
    probe: str = ""
    mask: str = "full"

    @property
    def shape(self):
        return self.values.shape

    def filled(self, fill: float = 0.0) -> np.ndarray:
        out = self.values.copy()
        out[np.isnan(out)] = fill
        return out


def pairwise_cka(acts_a, acts_b, mask: str = "full", model_a: str = "a",
                 model_b: str = "b", probe: str = "") -> CkaMatrix:
    """Entry (i, j) is linear_cka(acts_a[i], acts_b[j]). With
    mask="upper", entries with i >= j (diagonal and lower triangle) are
    masked out, matching the usual display convention."""
    if mask not in ("full", "upper"):
        raise InputError(f"mask must be 'full' or 'upper', got {mask!r}")
    mats_a = [as_activation_matrix(a) for a in acts_a]
    mats_b = [as_activation_matrix(b) for b in acts_b]
    ns = {m.shape[0] for m in mats_a} | {m.shape[0] for m in mats_b}
    if len(ns) != 1:
        raise InputError(f"inconsistent example counts across layers: {sorted(ns)}")
    out = np.empty((len(mats_a), len(mats_b)))
    for i, ma in enumerate(mats_a):
        for j, mb in enumerate(mats_b):
            if mask == "upper" and i >= j:
                out[i, j] = np.nan
            else:
                out[i, j] = linear_cka(ma, mb)
    return CkaMatrix(out, model_a=model_a, model_b=model_b, probe=probe, mask=mask)


def export_matrix(m: CkaMatrix, path_base) -> tuple:
    """Write {path_base}.csv and {path_base}.pgm; returns both paths.

    CSV: header row of 1-based layer indices, one row per layer of model A,
    masked entries as empty cells. PGM: binary 8-bit graymap, pixel value
    round(255 * cka), masked pixels 0.
    """
    path_base = str(path_base)
    csv_path = path_base + ".csv"
    pgm_path = path_base + ".pgm"
    rows, cols = m.values.shape

    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer"] + [str(j + 1) for j in range(cols)])
        for i in range(rows):
            cells = [str(i + 1)]
            for j in range(cols):
                v = m.values[i, j]
                cells.append("" if np.isnan(v) else f"{v:.8f}")
            writer.writerow(cells)

    pixels = np.clip(np.rint(m.filled(0.0) * 255.0), 0, 255).astype(np.uint8)
    with open(pgm_path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
    return csv_path, pgm_path


def read_matrix_csv(path) -> np.ndarray:
    """Parse a matrix CSV written by export_matrix (empty cells -> NaN)."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    body = rows[1:]
    out = np.full((len(body), len(rows[0]) - 1), np.nan)
    for i, row in enumerate(body):
        for j, cell in enumerate(row[1:]):
            if cell != "":
                out[i, j] = float(cell)
    return out
