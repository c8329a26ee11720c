"""Model container, forward/backward passes, loss and SGD update.

Softmax is folded into the cross-entropy loss (log-sum-exp stabilized);
models store and expose raw logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import DTYPE, Conv2D, Dense, Flatten, MaxPool2D, ShapeError

LAYER_KINDS = {"dense": Dense, "conv2d": Conv2D, "maxpool2d": MaxPool2D, "flatten": Flatten}


class NumericsError(RuntimeError):
    """Raised when a non-finite value appears where the contract forbids it."""


@dataclass
class Model:
    layers: list
    input_shape: list
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        last = self.layers[-1]
        if not isinstance(last, Dense) or last.weights.shape[0] != self.num_classes:
            raise ValueError("final layer must be dense with num_classes outputs")

    def param_layers(self):
        return [i for i, l in enumerate(self.layers) if l.params()]

    def conv_layers(self):
        return [i for i, l in enumerate(self.layers) if isinstance(l, Conv2D)]

    def dense_layers(self):
        return [i for i, l in enumerate(self.layers) if isinstance(l, Dense)]

    def hidden_dense_layers(self):
        return self.dense_layers()[:-1]

    def num_params(self):
        return sum(p.size for l in self.layers for _, p in l.params())

    def copy(self):
        layers = []
        for l in self.layers:
            if isinstance(l, Dense):
                layers.append(Dense(l.weights.copy(), l.bias.copy(), l.activation))
            elif isinstance(l, Conv2D):
                layers.append(Conv2D(l.weights.copy(), l.bias.copy(), l.activation, l.stride))
            elif isinstance(l, MaxPool2D):
                layers.append(MaxPool2D(l.stride))
            else:
                layers.append(Flatten())
        return Model(layers, list(self.input_shape), self.num_classes, dict(self.provenance))

    def get_params(self):
        """Flat copy of every parameter, concatenated in layer order."""
        chunks = [p.ravel().copy() for l in self.layers for _, p in l.params()]
        return np.concatenate(chunks) if chunks else np.zeros(0, dtype=DTYPE)

    def set_params(self, flat):
        offset = 0
        for l in self.layers:
            for _, p in l.params():
                n = p.size
                p[...] = flat[offset : offset + n].reshape(p.shape)
                offset += n
        if offset != flat.size:
            raise ShapeError(f"parameter vector length {flat.size}, expected {offset}")


@dataclass
class ForwardTrace:
    per_layer_activations: list
    logits: np.ndarray


def _check_batch(model, batch):
    batch = np.asarray(batch, dtype=DTYPE)
    if batch.shape[1:] != tuple(model.input_shape):
        raise ShapeError(
            f"batch shape {batch.shape[1:]} does not match input shape {tuple(model.input_shape)}"
        )
    return batch


def forward(model, batch):
    """Run the batch through every layer, capturing post-activation outputs."""
    batch = _check_batch(model, batch)
    x = batch
    acts = []
    for layer in model.layers:
        x, _ = layer.forward(x)
        acts.append(x)
    return ForwardTrace(per_layer_activations=acts, logits=acts[-1])


def _forward_with_caches(model, batch):
    x = batch
    caches = []
    acts = []
    for layer in model.layers:
        x, cache = layer.forward(x)
        caches.append(cache)
        acts.append(x)
    return acts, caches


def forward_from(model, start_layer, activation):
    """Re-run layers start_layer+1..end given the activation at start_layer."""
    x = activation
    for layer in model.layers[start_layer + 1 :]:
        x, _ = layer.forward(x)
    return x


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy, log-sum-exp stabilized."""
    labels = np.asarray(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


@dataclass
class Gradients:
    per_layer: list  # dict of parameter-name -> array, or None for param-free layers
    input: np.ndarray
    loss: float

    def flat(self):
        chunks = []
        for g in self.per_layer:
            if g:
                chunks.extend(v.ravel() for v in g.values())
        return np.concatenate(chunks)


def backward(model, batch, labels):
    """Gradient of the mean cross-entropy loss w.r.t. every parameter and the input."""
    batch = _check_batch(model, batch)
    labels = np.asarray(labels)
    if labels.ndim != 1 or len(labels) != len(batch):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {len(batch)}")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError("labels out of range")
    acts, caches = _forward_with_caches(model, batch)
    logits = acts[-1]
    loss = cross_entropy(logits, labels)
    b = len(batch)
    dlogits = softmax(logits)
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    dout = dlogits
    per_layer = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        dout, grads = model.layers[i].backward(dout, caches[i])
        per_layer[i] = grads
    return Gradients(per_layer=per_layer, input=dout, loss=loss)


def backward_from_layer(model, batch, layer_index, d_activation):
    """Backpropagate an arbitrary gradient on layer_index's output to the input."""
    batch = _check_batch(model, batch)
    _, caches = _forward_with_caches(model, batch)
    dout = d_activation
    for i in range(layer_index, -1, -1):
        dout, _ = model.layers[i].backward(dout, caches[i])
    return dout


def sgd_step(model, gradients, lr, momentum=0.0, velocity=None):
    """One SGD(+momentum) update in place: v <- momentum*v + g; p <- p - lr*v.

    Returns the velocity state to thread into the next call.
    """
    if velocity is None:
        velocity = [
            {name: np.zeros_like(p) for name, p in layer.params()} or None
            for layer in model.layers
        ]
    for i, layer in enumerate(model.layers):
        grads = gradients.per_layer[i]
        if not grads:
            continue
        for name, p in layer.params():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient for layer {i} parameter '{name}'")
            v = velocity[i][name]
            v *= momentum
            v += g
            p -= lr * v
    return velocity
