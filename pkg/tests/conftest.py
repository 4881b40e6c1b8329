import numpy as np
import pytest

from ccloss import MLPBackbone, Model, Tensor
from ccloss.rng import stream_gen


@pytest.fixture
def toy_model_factory():
    """Small dense model + batch for end-to-end checks (4 samples, D=8, K=3)."""

    def make(seed=1, dtype=np.float64, in_dim=5, width=6, hidden=8, classes=3, n=4):
        init = stream_gen(seed, "init")
        backbone = MLPBackbone.init(in_dim, [width], init, dtype)
        model = Model.init(backbone, hidden, classes, init, dtype)
        x = Tensor(stream_gen(seed, "bench").standard_normal((n, in_dim)).astype(dtype))
        labels = stream_gen(seed, "eval").integers(0, classes, size=n)
        return model, x, labels.astype(np.int64)

    return make


def write_idx_pair(tmp_path, images, labels, stem="fixture"):
    """Write a raw IDX image/label pair; returns (images_path, labels_path)."""
    import struct

    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    m, rows, cols = images.shape
    img_path = tmp_path / f"{stem}-images-idx3-ubyte"
    lbl_path = tmp_path / f"{stem}-labels-idx1-ubyte"
    with open(img_path, "wb") as fh:
        fh.write(struct.pack(">IIII", 2051, m, rows, cols))
        fh.write(images.tobytes())
    with open(lbl_path, "wb") as fh:
        fh.write(struct.pack(">II", 2049, m))
        fh.write(labels.tobytes())
    return img_path, lbl_path
