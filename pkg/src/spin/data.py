"""Dataset ingestion: IDX (MNIST-format) and CIFAR-10 binary loaders,
label-noise injection, batch normalization/iteration, and a deterministic
synthetic digits generator that writes real IDX files (useful where the
original corpus is not redistributable; `python -m spin.data OUT` builds
one).
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, FormatError, InputError, UsageError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_MEAN = (0.1307,)
MNIST_STD = (0.3081,)
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [n, c, h, w]
    labels: np.ndarray  # int64 [n]
    split: str          # "train" | "test"
    num_classes: int
    mean: tuple
    std: tuple

    def __post_init__(self):
        if self.images.ndim != 4:
            raise InputError(f"images must be [n,c,h,w], got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise InputError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.images) == 0:
            raise InputError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InputError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self):
        return len(self.images)

    def subset(self, indices) -> "Dataset":
        return replace(self, images=self.images[indices], labels=self.labels[indices])

    def normalized(self, images_u8: np.ndarray) -> np.ndarray:
        x = images_u8.astype(np.float64) / 255.0
        c = images_u8.shape[1]
        mean = np.asarray(self.mean, dtype=np.float64).reshape(1, c, 1, 1)
        std = np.asarray(self.std, dtype=np.float64).reshape(1, c, 1, 1)
        return (x - mean) / std

    def batches(self, batch_size: int, rng: np.random.Generator | None = None,
                augment: bool = False):
        """Yield (normalized f64 images, labels) batches; shuffled when a
        generator is given."""
        n = len(self)
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            imgs = self.images[idx]
            if augment:
                imgs = augment_crop_flip(imgs, rng)
            yield self.normalized(imgs), self.labels[idx]


def augment_crop_flip(images_u8: np.ndarray, rng: np.random.Generator,
                      pad: int = 4) -> np.ndarray:
    """Zero-pad by `pad`, take a random crop at the original size, and flip
    horizontally with probability one half. Training-time only."""
    n, c, h, w = images_u8.shape
    padded = np.pad(images_u8, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images_u8)
    ys = rng.integers(0, 2 * pad + 1, size=n)
    xs = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5
    for i in range(n):
        crop = padded[i, :, ys[i] : ys[i] + h, xs[i] : xs[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


# -- IDX format ------------------------------------------------------------


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(f) as gz:
                return gz.read()
        return f.read()


def read_idx_images(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated IDX image header", offset=len(raw))
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(
            f"{path}: bad IDX image magic 0x{magic:08x}, expected "
            f"0x{IDX_IMAGES_MAGIC:08x}", offset=0,
        )
    expected = 16 + n * rows * cols
    if len(raw) != expected:
        raise FormatError(
            f"{path}: IDX image payload has {len(raw) - 16} bytes, header "
            f"promises {n * rows * cols}", offset=min(len(raw), expected),
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX label header", offset=len(raw))
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(
            f"{path}: bad IDX label magic 0x{magic:08x}, expected "
            f"0x{IDX_LABELS_MAGIC:08x}", offset=0,
        )
    expected = 8 + n
    if len(raw) != expected:
        raise FormatError(
            f"{path}: IDX label payload has {len(raw) - 8} bytes, header "
            f"promises {n}", offset=min(len(raw), expected),
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def write_idx_images(path, images: np.ndarray):
    """images: uint8, [n, h, w] or [n, 1, h, w]."""
    if images.ndim == 4:
        if images.shape[1] != 1:
            raise InputError("IDX images are single-channel")
        images = images[:, 0]
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())


def write_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def _find_idx_file(directory, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"),
                 stem.replace("-idx", ".idx") + ".gz"):
        p = os.path.join(directory, name)
        if os.path.exists(p):
            return p
    raise FormatError(f"no IDX file for {stem!r} under {directory}")


def load_mnist(directory) -> tuple:
    """(train, test) datasets from IDX files in `directory`. Accepts the
    standard file names, with or without gzip."""
    train_images = read_idx_images(_find_idx_file(directory, "train-images-idx3-ubyte"))
    train_labels = read_idx_labels(_find_idx_file(directory, "train-labels-idx1-ubyte"))
    test_images = read_idx_images(_find_idx_file(directory, "t10k-images-idx3-ubyte"))
    test_labels = read_idx_labels(_find_idx_file(directory, "t10k-labels-idx1-ubyte"))
    datasets = []
    for split, images, labels in (
        ("train", train_images, train_labels),
        ("test", test_images, test_labels),
    ):
        if labels.max() > 9:
            raise FormatError(
                f"{split} labels exceed 9 (got {labels.max()})",
                offset=8 + int(np.argmax(labels > 9)),
            )
        datasets.append(
            Dataset(images[:, None, :, :], labels, split, 10, MNIST_MEAN, MNIST_STD)
        )
    return tuple(datasets)


# -- CIFAR-10 binary batches -------------------------------------------------

_CIFAR_RECORD = 1 + 3 * 32 * 32


def _read_cifar_batch(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % _CIFAR_RECORD != 0:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of the {_CIFAR_RECORD}-byte "
            f"record", offset=(len(raw) // _CIFAR_RECORD) * _CIFAR_RECORD,
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(
            f"{path}: record {bad} has label {labels[bad]} > 9",
            offset=bad * _CIFAR_RECORD,
        )
    images = arr[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory) -> tuple:
    """(train, test) datasets from the binary-batch distribution."""
    sub = os.path.join(directory, "cifar-10-batches-bin")
    if os.path.isdir(sub):
        directory = sub

    def batch_path(name):
        for cand in (name, name + ".bin"):
            p = os.path.join(directory, cand)
            if os.path.exists(p):
                return p
        raise FormatError(f"missing CIFAR-10 batch {name!r} under {directory}")

    train_parts = [_read_cifar_batch(batch_path(f"data_batch_{i}")) for i in range(1, 6)]
    train_images = np.concatenate([p[0] for p in train_parts])
    train_labels = np.concatenate([p[1] for p in train_parts])
    test_images, test_labels = _read_cifar_batch(batch_path("test_batch"))
    return (
        Dataset(train_images, train_labels, "train", 10, CIFAR10_MEAN, CIFAR10_STD),
        Dataset(test_images, test_labels, "test", 10, CIFAR10_MEAN, CIFAR10_STD),
    )


# -- label noise ---------------------------------------------------------------


def inject_label_noise(d: Dataset, level: float, seed: int) -> Dataset:
    """Redraw the labels of exactly round(level * n) distinct training
    examples, uniformly over all classes (a redraw may restate the original
    label). Evaluation splits refuse the operation; images are untouched."""
    if d.split != "train":
        raise UsageError(f"label noise applies to training splits, not {d.split!r}")
    if not 0.0 <= level <= 1.0:
        raise InputError(f"noise level must lie in [0, 1], got {level}")
    n = len(d)
    k = int(round(level * n))
    labels = d.labels.copy()
    if k > 0:
        rng = np.random.default_rng(seed)
        idx = rng.choice(n, size=k, replace=False)
        labels[idx] = rng.integers(0, d.num_classes, size=k)
    return replace(d, labels=labels)


# -- synthetic digits ------------------------------------------------------------


def _find_fonts():
    import matplotlib

    font_dir = os.path.join(os.path.dirname(matplotlib.__file__),
                            "mpl-data", "fonts", "ttf")
    names = [
        "DejaVuSans.ttf", "DejaVuSans-Bold.ttf", "DejaVuSans-Oblique.ttf",
        "DejaVuSerif.ttf", "DejaVuSerif-Bold.ttf", "DejaVuSansMono.ttf",
    ]
    found = [os.path.join(font_dir, n) for n in names
             if os.path.exists(os.path.join(font_dir, n))]
    if not found:
        raise ConfigurationError(f"no usable fonts under {font_dir}")
    return found


def render_digits(n: int, seed: int, image_size: int = 28) -> tuple:
    """Render n class-balanced digit images (uint8 [n, 1, s, s]) with
    per-sample font, size, rotation, shift, and pixel-noise draws."""
    from PIL import Image, ImageDraw, ImageFont

    rng = np.random.default_rng(seed)
    font_paths = _find_fonts()
    labels = np.tile(np.arange(10), (n + 9) // 10)[:n].astype(np.int64)
    rng.shuffle(labels)
    fonts = {}
    big = image_size * 2
    images = np.empty((n, 1, image_size, image_size), dtype=np.uint8)
    for i in range(n):
        face = font_paths[rng.integers(0, len(font_paths))]
        size = int(rng.integers(18, 27))
        key = (face, size)
        if key not in fonts:
            fonts[key] = ImageFont.truetype(face, size)
        canvas = Image.new("L", (big, big), 0)
        draw = ImageDraw.Draw(canvas)
        draw.text((big // 2, big // 2), str(labels[i]), fill=255,
                  font=fonts[key], anchor="mm")
        # rotations are kept small enough that 6 and 9 stay unambiguous
        angle = float(rng.uniform(-10.0, 10.0))
        canvas = canvas.rotate(angle, resample=Image.BILINEAR,
                               center=(big // 2, big // 2))
        dx = int(rng.integers(-2, 3))
        dy = int(rng.integers(-2, 3))
        left = (big - image_size) // 2 + dx
        top = (big - image_size) // 2 + dy
        tile = np.asarray(
            canvas.crop((left, top, left + image_size, top + image_size)),
            dtype=np.float64,
        )
        sigma = float(rng.uniform(0.0, 5.0))
        tile += rng.normal(0.0, sigma, size=tile.shape)
        images[i, 0] = np.clip(tile, 0, 255).astype(np.uint8)
    return images, labels


def make_synthetic_digits(out_dir, n_train: int = 8000, n_test: int = 2000,
                          seed: int = 0, image_size: int = 28):
    """Write a synthetic MNIST-format dataset (four IDX files) to out_dir
    and return (train, test) loaded through the production loader."""
    os.makedirs(out_dir, exist_ok=True)
    train_images, train_labels = render_digits(n_train, seed, image_size)
    test_images, test_labels = render_digits(n_test, seed + 1, image_size)
    write_idx_images(os.path.join(out_dir, "train-images-idx3-ubyte"), train_images)
    write_idx_labels(os.path.join(out_dir, "train-labels-idx1-ubyte"), train_labels)
    write_idx_images(os.path.join(out_dir, "t10k-images-idx3-ubyte"), test_images)
    write_idx_labels(os.path.join(out_dir, "t10k-labels-idx1-ubyte"), test_labels)
    return load_mnist(out_dir)


def _main(argv=None):
    import argparse

    ap = argparse.ArgumentParser(
        prog="python -m spin.data",
        description="Generate a synthetic MNIST-format digits dataset.",
    )
    ap.add_argument("out_dir")
    ap.add_argument("--n-train", type=int, default=8000)
    ap.add_argument("--n-test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    train, test = make_synthetic_digits(
        args.out_dir, n_train=args.n_train, n_test=args.n_test, seed=args.seed
    )
    print(f"wrote {len(train)} train / {len(test)} test images to {args.out_dir}")


if __name__ == "__main__":
    _main()
