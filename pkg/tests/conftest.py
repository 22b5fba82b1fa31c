from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from patchbank.onnxlite import GraphDef, ModelDef, NodeDef, encode_model


def _write_png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)


def _texture(rng, size, base=120):
    img = np.full((size, size, 3), base, dtype=np.float64)
    img += rng.uniform(-6, 6, size=(size, size, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def make_synthetic_dataset(
    root,
    category="synthcat",
    n_train=12,
    n_test_normal=10,
    n_test_anom=10,
    size=64,
    square=14,
    seed=0,
):
    """Plain-texture normals with bright-square anomalies plus masks."""
    rng = np.random.default_rng(seed)
    cat = root / category
    for i in range(n_train):
        _write_png(cat / "train" / "good" / f"{i:03d}.png", _texture(rng, size))
    for i in range(n_test_normal):
        _write_png(cat / "test" / "good" / f"{i:03d}.png", _texture(rng, size))
    for i in range(n_test_anom):
        img = _texture(rng, size).astype(np.int16)
        y = int(rng.integers(0, size - square))
        x = int(rng.integers(0, size - square))
        img[y : y + square, x : x + square] += 90
        mask = np.zeros((size, size), dtype=np.uint8)
        mask[y : y + square, x : x + square] = 255
        _write_png(cat / "test" / "spot" / f"{i:03d}.png", np.clip(img, 0, 255).astype(np.uint8))
        _write_png(cat / "ground_truth" / "spot" / f"{i:03d}_mask.png", mask)
    return root


def make_toy_dataset(root, categories=("alpha", "beta"), size=16):
    """Minimal well-formed tree: 4 train / 2 normal test / 2 anomalous test."""
    rng = np.random.default_rng(7)
    for cat in categories:
        base = root / cat
        for i in range(4):
            _write_png(base / "train" / "good" / f"{i:03d}.png", _texture(rng, size))
        for i in range(2):
            _write_png(base / "test" / "good" / f"{i:03d}.png", _texture(rng, size))
        for i in range(2):
            img = _texture(rng, size).astype(np.int16)
            img[2:6, 2:6] += 100
            mask = np.zeros((size, size), dtype=np.uint8)
            mask[2:6, 2:6] = 255
            _write_png(base / "test" / "dent" / f"{i:03d}.png", np.clip(img, 0, 255).astype(np.uint8))
            _write_png(base / "ground_truth" / "dent" / f"{i:03d}_mask.png", mask)
    return root


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory):
    return make_synthetic_dataset(tmp_path_factory.mktemp("synthetic"))


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    return make_toy_dataset(tmp_path_factory.mktemp("toy"))


def identity_model_bytes(side=8):
    graph = GraphDef(
        name="identity",
        nodes=[NodeDef(op_type="Identity", inputs=["input"], outputs=["out"], name="id")],
        inputs=[("input", ["batch", 3, side, side])],
        outputs=[("out", ["batch", 3, side, side])],
    )
    return encode_model(ModelDef(graph=graph, producer_name="fixture"))


@pytest.fixture(scope="session")
def identity_onnx(tmp_path_factory):
    path = tmp_path_factory.mktemp("models") / "identity.onnx"
    path.write_bytes(identity_model_bytes(side=64))
    return path
