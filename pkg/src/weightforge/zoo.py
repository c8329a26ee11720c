"""Architectures, training loop, evaluation and the model file format.

Model files: 8-byte magic "WFORGE01", a u32-LE length-prefixed UTF-8 JSON
header (architecture + provenance), then raw little-endian float64 parameter
blobs in layer order (weights, then bias, per parameterized layer).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .layers import DTYPE, Conv2D, Dense, Flatten, MaxPool2D
from .model import Model, NumericsError, backward, forward, sgd_step
from .triggers import predict

MAGIC = b"WFORGE01"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


def _he_init(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(DTYPE)


def build_fc(input_dim, n_h, num_classes, seed=0):
    """Two dense layers: hidden ReLU of width n_h, then a linear readout."""
    if min(input_dim, n_h, num_classes) < 1:
        raise ValueError("all dimensions must be positive")
    rng = np.random.default_rng(seed)
    layers = [
        Dense(_he_init(rng, (n_h, input_dim), input_dim), np.zeros(n_h, dtype=DTYPE), "relu"),
        Dense(_he_init(rng, (num_classes, n_h), n_h), np.zeros(num_classes, dtype=DTYPE), "none"),
    ]
    return Model(layers=layers, input_shape=[input_dim], num_classes=num_classes,
                 provenance={"arch": "fc", "init_seed": seed})


def build_cnn(input_shape, num_classes, seed=0, filters=32, dense_units=256, kernel=5):
    """Conv(32,5x5,s1,ReLU) x2, MaxPool(s2), Dense(256,ReLU), Dense(classes)."""
    h, w, c = input_shape
    after = h - 2 * (kernel - 1)
    if after < 2 or w - 2 * (kernel - 1) < 2:
        raise ValueError(f"input {input_shape} too small for two valid {kernel}x{kernel} convs")
    rng = np.random.default_rng(seed)
    pooled_h = (h - 2 * (kernel - 1)) // 2
    pooled_w = (w - 2 * (kernel - 1)) // 2
    flat = pooled_h * pooled_w * filters
    layers = [
        Conv2D(_he_init(rng, (filters, c, kernel, kernel), c * kernel * kernel),
               np.zeros(filters, dtype=DTYPE), "relu", stride=1),
        Conv2D(_he_init(rng, (filters, filters, kernel, kernel), filters * kernel * kernel),
               np.zeros(filters, dtype=DTYPE), "relu", stride=1),
        MaxPool2D(stride=2),
        Flatten(),
        Dense(_he_init(rng, (dense_units, flat), flat), np.zeros(dense_units, dtype=DTYPE), "relu"),
        Dense(_he_init(rng, (num_classes, dense_units), dense_units),
              np.zeros(num_classes, dtype=DTYPE), "none"),
    ]
    return Model(layers=layers, input_shape=list(input_shape), num_classes=num_classes,
                 provenance={"arch": "cnn", "init_seed": seed})


def model_inputs(model, images):
    """Reshape [N,H,W,C] images to the model's expected input layout."""
    want = int(np.prod(model.input_shape))
    flat = images.reshape(len(images), -1)
    if flat.shape[1] != want:
        raise ValueError(
            f"images with {flat.shape[1]} values per sample cannot feed input {model.input_shape}"
        )
    return flat.reshape(len(images), *model.input_shape)


def evaluate(model, dataset, batch_size=1024):
    """Argmax accuracy over the dataset (ties resolve to the lowest class)."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    hits = 0
    for i in range(0, len(dataset), batch_size):
        preds = predict(model, dataset.images[i : i + batch_size])
        hits += int(np.sum(preds == dataset.labels[i : i + batch_size]))
    return hits / len(dataset)


def train(model, dataset, cfg, eval_dataset=None, log=None):
    """SGD-with-momentum training; deterministic for a fixed seed.

    Returns the per-epoch accuracy history (on eval_dataset when given,
    else on the training set). The model is mutated in place.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if cfg.batch_size > len(dataset):
        raise ValueError("batch_size exceeds dataset size")
    rng = np.random.default_rng(cfg.seed)
    inputs = model_inputs(model, dataset.images)
    labels = dataset.labels
    velocity = None
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for i in range(0, len(dataset), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            grads = backward(model, inputs[idx], labels[idx])
            if not np.isfinite(grads.loss):
                raise NumericsError(f"training diverged at epoch {epoch}: loss={grads.loss}")
            velocity = sgd_step(model, grads, cfg.lr, cfg.momentum, velocity)
        acc = evaluate(model, eval_dataset if eval_dataset is not None else dataset)
        history.append(acc)
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs}: accuracy {acc:.4f}")
    model.provenance.setdefault("training", []).append(
        {"epochs": cfg.epochs, "batch_size": cfg.batch_size, "lr": cfg.lr,
         "momentum": cfg.momentum, "seed": cfg.seed, "samples": len(dataset)}
    )
    return history


class ModelFileError(ValueError):
    """Model file parse/validation failure, carrying a byte offset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _layer_descriptor(layer):
    if isinstance(layer, Dense):
        return {"kind": "dense", "out": layer.weights.shape[0], "in": layer.weights.shape[1],
                "activation": layer.activation}
    if isinstance(layer, Conv2D):
        f, cin, k, _ = layer.weights.shape
        return {"kind": "conv2d", "filters": f, "in_channels": cin, "kernel": k,
                "stride": layer.stride, "activation": layer.activation}
    if isinstance(layer, MaxPool2D):
        return {"kind": "maxpool2d", "stride": layer.stride}
    if isinstance(layer, Flatten):
        return {"kind": "flatten"}
    raise TypeError(f"unserializable layer {type(layer).__name__}")


def save(model, path):
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "float64",
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "layers": [_layer_descriptor(l) for l in model.layers],
        "provenance": model.provenance,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for layer in model.layers:
            for _, p in layer.params():
                f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def _build_layer(desc, take):
    kind = desc.get("kind")
    if kind == "dense":
        w = take((desc["out"], desc["in"]))
        b = take((desc["out"],))
        return Dense(w, b, desc["activation"])
    if kind == "conv2d":
        w = take((desc["filters"], desc["in_channels"], desc["kernel"], desc["kernel"]))
        b = take((desc["filters"],))
        return Conv2D(w, b, desc["activation"], desc["stride"])
    if kind == "maxpool2d":
        return MaxPool2D(desc["stride"])
    if kind == "flatten":
        return Flatten()
    raise ModelFileError(f"unknown layer kind {kind!r} in header", len(MAGIC))


def load(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 4:
        raise ModelFileError("file too short for magic and header length", len(raw))
    if raw[: len(MAGIC)] != MAGIC:
        raise ModelFileError(f"bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}", 0)
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    body = len(MAGIC) + 4
    if body + hlen > len(raw):
        raise ModelFileError(f"header length {hlen} exceeds file size", body)
    try:
        header = json.loads(raw[body : body + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFileError(f"malformed JSON header: {e}", body) from e
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelFileError(
            f"unsupported format_version {header.get('format_version')!r}", body
        )
    offset = body + hlen

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) * 8
        if offset + n > len(raw):
            raise ModelFileError(f"truncated parameter blob (need {n} bytes)", offset)
        arr = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)), offset=offset)
        offset += n
        return arr.reshape(shape).astype(DTYPE)

    layers = [_build_layer(d, take) for d in header["layers"]]
    if offset != len(raw):
        raise ModelFileError(f"{len(raw) - offset} trailing bytes after parameters", offset)
    return Model(layers=layers, input_shape=list(header["input_shape"]),
                 num_classes=int(header["num_classes"]),
                 provenance=header.get("provenance", {}))
