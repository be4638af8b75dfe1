"""Neural building blocks: dense layers, soft attention, LSTM, dropout.

Every layer holds its weights as named `Parameter`s and computes through
the primitives in `attnpop.tensor`, so gradients come for free from the
active tape. Construction is deterministic given a numpy Generator.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Parameter, Tensor

DENSE_ACTIVATIONS = ("tanh", "relu", "sigmoid", "identity")


def glorot_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> Tensor:
    """Weight init: uniform in ±sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return Tensor(rng.uniform(-limit, limit, size=(out_dim, in_dim)))


class DenseLayer:
    """activation(W x + b) for rank-1 inputs."""

    def __init__(self, weight: Parameter, bias: Parameter, activation: str):
        if activation not in DENSE_ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if weight.value.rank != 2 or bias.value.rank != 1:
            raise ShapeError("dense layer needs rank-2 weight and rank-1 bias")
        if weight.value.shape[0] != bias.value.shape[0]:
            raise ShapeError(
                f"weight rows {weight.value.shape[0]} != bias length {bias.value.shape[0]}")
        self.weight = weight
        self.bias = bias
        self.activation = activation

    @classmethod
    def create(cls, name: str, in_dim: int, out_dim: int, activation: str,
               rng: np.random.Generator) -> "DenseLayer":
        weight = Parameter(f"{name}.weight", glorot_uniform(rng, out_dim, in_dim))
        bias = Parameter(f"{name}.bias", T.zeros(out_dim))
        return cls(weight, bias, activation)

    @property
    def in_dim(self) -> int:
        return self.weight.value.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.value.shape[0]

    def parameters(self) -> list:
        return [self.weight, self.bias]

    def forward(self, x: Tensor) -> Tensor:
        if x.rank != 1 or x.shape[0] != self.in_dim:
            raise ShapeError(
                f"dense layer expects input of shape ({self.in_dim},), got {x.shape}")
        pre = T.add(T.matmul(self.weight.value, x), self.bias.value)
        return T.map_activation(pre, self.activation)


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    return layer.forward(x)


class AttentionBlock:
    """Two-layer scorer producing softmax weights over a set of vectors.

    Hidden representation is tanh(W_u q + b_u); the unnormalized score is
    the single output of a linear layer on top of it.
    """

    def __init__(self, hidden: DenseLayer, score: DenseLayer):
        if hidden.activation != "tanh" or score.activation != "identity":
            raise ValueError("attention block uses a tanh hidden layer and a linear scorer")
        if score.in_dim != hidden.out_dim or score.out_dim != 1:
            raise ShapeError("scorer must map the hidden representation to one value")
        if hidden.out_dim < 1:
            raise ShapeError("attention hidden dimension must be >= 1")
        self.hidden = hidden
        self.score = score

    @classmethod
    def create(cls, name: str, in_dim: int, hidden_dim: int,
               rng: np.random.Generator) -> "AttentionBlock":
        hidden = DenseLayer.create(f"{name}.hidden", in_dim, hidden_dim, "tanh", rng)
        score = DenseLayer.create(f"{name}.score", hidden_dim, 1, "identity", rng)
        # The softmax cancels any uniform shift of the scores, so the
        # scorer bias has an exactly-zero derivative; training it would
        # only random-walk on rounding noise. Keep it frozen at zero.
        score.bias.trainable = False
        return cls(hidden, score)

    @property
    def in_dim(self) -> int:
        return self.hidden.in_dim

    def parameters(self) -> list:
        return self.hidden.parameters() + self.score.parameters()

    def forward(self, inputs: Sequence[Tensor]):
        return attention_forward(self, inputs)


def attention_forward(block: AttentionBlock, inputs: Sequence[Tensor]):
    """Score each input, softmax the scores, and pool.

    Returns (weights [N], pooled [in_dim]); pooled is the weights-weighted
    sum of the inputs, a convex combination.
    """
    if len(inputs) == 0:
        raise ValueError("attention over an empty sequence")
    for q in inputs:
        if q.rank != 1 or q.shape[0] != block.in_dim:
            raise ShapeError(
                f"attention expects inputs of shape ({block.in_dim},), got {q.shape}")
    scores = [block.score.forward(block.hidden.forward(q)) for q in inputs]
    weights = T.stable_softmax(T.concat(scores) if len(scores) > 1 else scores[0])
    pooled = T.weighted_sum(weights, list(inputs))
    return weights, pooled


class LstmCell:
    """Standard LSTM cell; every gate reads the concatenation [x; h]."""

    GATES = ("input_gate", "forget_gate", "output_gate", "candidate")

    def __init__(self, input_gate: DenseLayer, forget_gate: DenseLayer,
                 output_gate: DenseLayer, candidate: DenseLayer):
        dims = {(g.in_dim, g.out_dim)
                for g in (input_gate, forget_gate, output_gate, candidate)}
        if len(dims) != 1:
            raise ShapeError("all four gates must share dimensionality")
        self.input_gate = input_gate
        self.forget_gate = forget_gate
        self.output_gate = output_gate
        self.candidate = candidate
        self.hidden_dim = input_gate.out_dim
        self.input_dim = input_gate.in_dim - self.hidden_dim
        if self.input_dim < 1:
            raise ShapeError("gate input dimension must exceed hidden dimension")

    @classmethod
    def create(cls, name: str, input_dim: int, hidden_dim: int,
               rng: np.random.Generator) -> "LstmCell":
        gates = {}
        for gate in cls.GATES:
            kind = "tanh" if gate == "candidate" else "sigmoid"
            layer = DenseLayer.create(
                f"{name}.{gate}", input_dim + hidden_dim, hidden_dim, kind, rng)
            gates[gate] = layer
        # forget bias starts at 1 so early training does not erase state
        gates["forget_gate"].bias.value = Tensor(np.ones(hidden_dim))
        return cls(gates["input_gate"], gates["forget_gate"],
                   gates["output_gate"], gates["candidate"])

    def parameters(self) -> list:
        return (self.input_gate.parameters() + self.forget_gate.parameters()
                + self.output_gate.parameters() + self.candidate.parameters())


def lstm_step(cell: LstmCell, x: Tensor, h: Tensor, c: Tensor):
    """One recurrence step; returns (h_next, c_next)."""
    if x.rank != 1 or x.shape[0] != cell.input_dim:
        raise ShapeError(
            f"lstm step expects input of shape ({cell.input_dim},), got {x.shape}")
    if h.shape != (cell.hidden_dim,) or c.shape != (cell.hidden_dim,):
        raise ShapeError(
            f"lstm state must have shape ({cell.hidden_dim},), got h {h.shape} c {c.shape}")
    z = T.concat([x, h])
    i = cell.input_gate.forward(z)
    f = cell.forget_gate.forward(z)
    o = cell.output_gate.forward(z)
    g = cell.candidate.forward(z)
    c_next = T.add(T.multiply(f, c), T.multiply(i, g))
    h_next = T.multiply(o, T.map_activation(c_next, "tanh"))
    return h_next, c_next


class BiLstm:
    """Two independent LSTM cells run over a sequence in both directions."""

    def __init__(self, forward_cell: LstmCell, backward_cell: LstmCell):
        if (forward_cell.input_dim != backward_cell.input_dim
                or forward_cell.hidden_dim != backward_cell.hidden_dim):
            raise ShapeError("both directions must share dimensionality")
        self.forward_cell = forward_cell
        self.backward_cell = backward_cell
        self.hidden_dim = forward_cell.hidden_dim
        self.input_dim = forward_cell.input_dim

    @classmethod
    def create(cls, name: str, input_dim: int, hidden_dim: int,
               rng: np.random.Generator) -> "BiLstm":
        return cls(LstmCell.create(f"{name}.fwd", input_dim, hidden_dim, rng),
                   LstmCell.create(f"{name}.bwd", input_dim, hidden_dim, rng))

    def parameters(self) -> list:
        return self.forward_cell.parameters() + self.backward_cell.parameters()

    def forward(self, seq: Sequence[Tensor]):
        return bilstm_forward(self, seq)


def _run_direction(cell: LstmCell, seq: Sequence[Tensor]):
    h = T.zeros(cell.hidden_dim)
    c = T.zeros(cell.hidden_dim)
    states = []
    for x in seq:
        h, c = lstm_step(cell, x, h, c)
        states.append(h)
    return states


def bilstm_forward(net: BiLstm, seq: Sequence[Tensor]):
    """Per-position concatenation of forward and backward hidden states."""
    if len(seq) == 0:
        raise ValueError("bilstm over an empty sequence")
    fwd = _run_direction(net.forward_cell, seq)
    bwd = _run_direction(net.backward_cell, list(seq)[::-1])[::-1]
    return [T.concat([f, b]) for f, b in zip(fwd, bwd)]


def dropout_apply(t: Tensor, rate: float, seed: int, training: bool,
                  counter: int = 0) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors.

    The mask generator is seeded by (seed, counter), so a fixed counter
    assignment per call site makes whole training runs reproducible.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return t
    rng = np.random.default_rng((int(seed), int(counter)))
    keep = rng.random(t.shape) >= rate
    mask = Tensor(keep.astype(float) / (1.0 - rate))
    return T.multiply(t, mask)
