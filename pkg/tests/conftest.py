import os

# Pin BLAS threading before numpy loads anywhere so that every test run,
# including the acceptance suite, is bit-reproducible.
os.environ["SPIN_DETERMINISTIC"] = "1"

import pytest  # noqa: E402

from spin.data import load_mnist, make_synthetic_digits  # noqa: E402


def resolve_dataset_dir(tmp_root, n_train=4096, n_test=1024):
    """Real MNIST when a copy is available, otherwise a deterministic
    synthetic digits set written through the same IDX pipeline.

    Returns (directory, label) where label is "mnist" or "synthetic".
    """
    for candidate in (os.environ.get("SPIN_MNIST_DIR"),
                      os.path.join(os.getcwd(), "data", "mnist")):
        if candidate and os.path.isdir(candidate):
            try:
                load_mnist(candidate)
                return candidate, "mnist"
            except Exception:
                pass
    out = os.path.join(tmp_root, f"digits-{n_train}-{n_test}")
    if not os.path.isdir(out):
        make_synthetic_digits(out, n_train=n_train, n_test=n_test, seed=0)
    return out, "synthetic"


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    """(path, label) for the desk-scale training tests."""
    root = tmp_path_factory.mktemp("data")
    return resolve_dataset_dir(str(root))


@pytest.fixture(scope="session")
def mini_digits_dir(tmp_path_factory):
    """A small synthetic set for fast harness/CLI tests."""
    out = tmp_path_factory.mktemp("data") / "digits-mini"
    make_synthetic_digits(str(out), n_train=512, n_test=128, seed=1)
    return str(out)
