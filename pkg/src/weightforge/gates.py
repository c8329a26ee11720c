"""Single-neuron logic gates under ReLU, and a tiny demonstration circuit.

Conventions for binary signals: logical 0 is the value 0.0 and logical 1 is
any strictly positive activation. NOT inverts and can amplify; AND fires only
on (1,1); OR fires unless both inputs are 0. The OR bias sits at half the
weaker weight below zero, which realizes the truth table for every valid
weight pair (a bias of -min(w1,w2)-eps would also fire on (0,0)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import DTYPE, Dense
from .model import Model, forward


@dataclass
class GateSpec:
    weights: tuple
    bias: float
    epsilon: float

    def __post_init__(self):
        if self.epsilon <= 0 or self.epsilon >= min(abs(w) for w in self.weights):
            raise ValueError("epsilon must satisfy 0 < epsilon < min(|w|)")

    def response(self, inputs):
        z = sum(w * x for w, x in zip(self.weights, inputs)) + self.bias
        return max(z, 0.0)


def gate_not(w_magnitude, epsilon=0.5):
    """ReLU(-w*x + w): maps 1 -> 0 and 0 -> w (amplified inversion for w > 1)."""
    if w_magnitude <= 0:
        raise ValueError("w_magnitude must be positive")
    return GateSpec(weights=(-w_magnitude,), bias=w_magnitude, epsilon=min(epsilon, w_magnitude / 2))


def gate_and(w1, w2, epsilon):
    """Active only on (1,1): bias -max(w1,w2)-epsilon, epsilon < min(w1,w2)."""
    if w1 <= 0 or w2 <= 0:
        raise ValueError("gate weights must be positive")
    if not 0 < epsilon < min(w1, w2):
        raise ValueError("epsilon must be in (0, min(w1, w2))")
    return GateSpec(weights=(w1, w2), bias=-max(w1, w2) - epsilon, epsilon=epsilon)


def gate_or(w1, w2, epsilon):
    """Active unless (0,0): bias -min(w1,w2)/2, inside the valid (-min, 0) band."""
    if w1 <= 0 or w2 <= 0:
        raise ValueError("gate weights must be positive")
    if not 0 < epsilon < min(w1, w2):
        raise ValueError("epsilon must be in (0, min(w1, w2))")
    return GateSpec(weights=(w1, w2), bias=-min(w1, w2) / 2.0, epsilon=epsilon)


def gate_table(gate, arity=None):
    """Truth table {inputs: output} of a gate over binary inputs."""
    arity = arity if arity is not None else len(gate.weights)
    table = {}
    for bits in np.ndindex(*(2,) * arity):
        table[bits] = gate.response([float(b) for b in bits])
    return table


def build_example_backdoor(amplification=10.0, epsilon=0.5):
    """Two-input network firing its single logit only when (x1, x2) = (0, 1).

    Layer 1 holds a NOT neuron on x1 and a pass-through of x2; layer 2 ANDs
    them; the readout weight amplifies the AND activation.
    """
    inv = gate_not(1.0, epsilon)
    land = gate_and(1.0, 1.0, epsilon)
    l1 = Dense(np.array([[inv.weights[0], 0.0], [0.0, 1.0]], dtype=DTYPE),
               np.array([inv.bias, 0.0], dtype=DTYPE), "relu")
    l2 = Dense(np.array([list(land.weights)], dtype=DTYPE),
               np.array([land.bias], dtype=DTYPE), "relu")
    out = Dense(np.array([[amplification]], dtype=DTYPE), np.zeros(1, dtype=DTYPE), "none")
    return Model(layers=[l1, l2, out], input_shape=[2], num_classes=1,
                 provenance={"arch": "example-backdoor"})


def example_backdoor_table(model):
    table = {}
    for bits in np.ndindex(2, 2):
        x = np.array([[float(bits[0]), float(bits[1])]], dtype=DTYPE)
        table[bits] = float(forward(model, x).logits[0, 0])
    return table
