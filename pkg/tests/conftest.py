"""Shared fixtures: digits IDX corpus, reference trained models, MNIST gate.

The digits corpus (sklearn load_digits written through data.write_idx) is
the default stand-in for every data-dependent suite; tests that state the
MNIST protocol verbatim gate on ORTHOCLF_MNIST_DIR and skip when unset.
"""

import os

import numpy as np
import pytest

from orthoclf import data as dat
from orthoclf import losses, models, orthoweights
from orthoclf.harness import run as hrun
from orthoclf.harness.config import RunConfig

DIGITS_TRAIN_N = 1437  # 80/20 split of the 1797 digits

# encoder + head of the reference robustness runs on digits
ROBUST_SPEC = models.EncoderSpec(64, (48, 32), "prelu", 32)
ROBUST_SEED = 1234
ATTACK_SEED = 55

MNIST_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def train_quick(train, test, spec, w, loss_cfg, lr, epochs, seed,
                batch_size=50, decay=(), momentum=0.0):
    """Train an encoder with the real driver, no files written."""
    cfg = RunConfig(
        dataset={}, spec=spec, head_kind=w.kind, head_t=w.T, head_k=w.K,
        head_s=w.s, head_p=w.P, loss=loss_cfg, lr=lr, momentum=momentum,
        epochs=epochs, batch_size=batch_size, decay_epochs=tuple(decay),
        attacks=[], seed=seed, out="", eval_n=0,
    )
    _, params, rows, _, _ = hrun.train_model(cfg, w=w, train=train, test=test)
    return params, rows


def tiny_model(seed=0, input_dim=8, hidden=(6,), feature_dim=4, activation="prelu"):
    spec = models.EncoderSpec(input_dim, hidden, activation, feature_dim)
    return spec, models.init_params(spec, seed)


@pytest.fixture(scope="session")
def digits_idx_dir(tmp_path_factory):
    datasets = pytest.importorskip("sklearn.datasets")
    digits = datasets.load_digits()
    imgs = np.round(digits.images * (255.0 / 16.0)).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    d = tmp_path_factory.mktemp("digits_idx")
    n = DIGITS_TRAIN_N
    dat.write_idx(imgs[:n], labels[:n],
                  d / "train-images.idx", d / "train-labels.idx")
    dat.write_idx(imgs[n:], labels[n:],
                  d / "test-images.idx", d / "test-labels.idx")
    return d


@pytest.fixture(scope="session")
def digits_train(digits_idx_dir):
    return dat.load_idx(digits_idx_dir / "train-images.idx",
                        digits_idx_dir / "train-labels.idx", "train")


@pytest.fixture(scope="session")
def digits_test(digits_idx_dir):
    return dat.load_idx(digits_idx_dir / "test-images.idx",
                        digits_idx_dir / "test-labels.idx", "test")


@pytest.fixture(scope="session")
def digits_ce_model(digits_train, digits_test):
    """CE-trained reference MLP on digits (the robustness baseline).

    Returns (head, spec, params). Session-scoped: the attack sanity suite
    and the robustness acceptance criteria all evaluate this same model.
    """
    w = orthoweights.build_hadamard(5, 10, 10.0)
    params, rows = train_quick(
        digits_train, digits_test, ROBUST_SPEC, w,
        losses.LossConfig(mode=losses.MODE_SOFTMAX_CE),
        lr=0.1, epochs=30, seed=ROBUST_SEED, decay=(20,),
    )
    assert rows[-1][3] > 0.95  # sanity: the baseline must actually train
    return w, ROBUST_SPEC, params


@pytest.fixture(scope="session")
def mnist_dir():
    root = os.environ.get("ORTHOCLF_MNIST_DIR")
    if not root:
        pytest.skip("set ORTHOCLF_MNIST_DIR to a directory with the MNIST IDX files")
    missing = [f for f in MNIST_FILES if not os.path.exists(os.path.join(root, f))]
    if missing:
        pytest.skip(f"ORTHOCLF_MNIST_DIR is missing {missing}")
    return root
