"""Neural building blocks shared by both task heads: bidirectional
highway-gated LSTM stacks, fully connected layers, and the bias-augmented
deep-biaffine scorer."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...],
                 fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.W = Tensor(uniform_init(rng, (d_in, d_out), d_in, d_out), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.W
        return y + self.b if self.b is not None else y

    def parameters(self) -> list[Tensor]:
        return [self.W] + ([self.b] if self.b is not None else [])


class LstmCell:
    """Standard LSTM cell with gates packed as [input, forget, cell, output].

    The forget-gate bias starts at 1.0.
    """

    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator):
        self.d_h = d_h
        self.Wx = Tensor(uniform_init(rng, (d_in, 4 * d_h), d_in + d_h, d_h),
                         requires_grad=True)
        self.Wh = Tensor(uniform_init(rng, (d_h, 4 * d_h), d_in + d_h, d_h),
                         requires_grad=True)
        b = np.zeros(4 * d_h)
        b[d_h : 2 * d_h] = 1.0
        self.b = Tensor(b, requires_grad=True)

    def run(self, x: Tensor, reverse: bool = False) -> Tensor:
        """Process a (sequence length, d_in) matrix, returning one hidden row
        per position, in input order regardless of direction."""
        n = x.shape[0]
        d = self.d_h
        xw = x @ self.Wx
        h = Tensor(np.zeros((1, d)))
        c = Tensor(np.zeros((1, d)))
        rows: list[Tensor | None] = [None] * n
        order = range(n - 1, -1, -1) if reverse else range(n)
        for t in order:
            z = xw[t : t + 1] + (h @ self.Wh) + self.b
            i = ad.sigmoid(z[:, 0:d])
            f = ad.sigmoid(z[:, d : 2 * d])
            g = ad.tanh(z[:, 2 * d : 3 * d])
            o = ad.sigmoid(z[:, 3 * d : 4 * d])
            c = f * c + i * g
            h = o * ad.tanh(c)
            rows[t] = h
        return ad.concat(rows, axis=0) if n > 1 else rows[0]

    def parameters(self) -> list[Tensor]:
        return [self.Wx, self.Wh, self.b]


class _HighwayLayer:
    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator):
        self.fwd = LstmCell(d_in, d_h, rng)
        self.bwd = LstmCell(d_in, d_h, rng)
        self.gate = Linear(d_in, 2 * d_h, rng)
        # carry path is the identity when dimensions agree; otherwise a
        # learned projection reconciles them (only ever needed at layer 1)
        self.carry = Linear(d_in, 2 * d_h, rng, bias=False) if d_in != 2 * d_h else None

    def __call__(self, x: Tensor) -> Tensor:
        lstm_out = ad.concat([self.fwd.run(x), self.bwd.run(x, reverse=True)], axis=1)
        t = ad.sigmoid(self.gate(x))
        carried = self.carry(x) if self.carry is not None else x
        return t * lstm_out + (1.0 - t) * carried

    def parameters(self) -> list[Tensor]:
        params = self.fwd.parameters() + self.bwd.parameters() + self.gate.parameters()
        if self.carry is not None:
            params += self.carry.parameters()
        return params


class HighwayLstmStack:
    """Stacked bidirectional LSTM whose vertical flow is gated:
    out = T * LSTM(x) + (1 - T) * x, with T = sigmoid(W x + b).

    Both directions are concatenated per layer (output dim 2 * hidden) and a
    ReLU is applied to the final output.  Inter-layer dropout acts on the
    inputs of layers 2..L in training mode.
    """

    def __init__(self, d_in: int, hidden: int, num_layers: int, dropout: float,
                 rng: np.random.Generator):
        if num_layers < 1:
            raise ValueError("need at least one layer")
        self.hidden = hidden
        self.dropout = dropout
        self.layers = []
        cur = d_in
        for _ in range(num_layers):
            self.layers.append(_HighwayLayer(cur, hidden, rng))
            cur = 2 * hidden

    @property
    def d_out(self) -> int:
        return 2 * self.hidden

    def __call__(self, x: Tensor, mode: str = "eval",
                 rng: np.random.Generator | None = None) -> Tensor:
        if x.shape[0] < 1:
            raise ValueError("cannot encode a zero-length sequence")
        train = mode == "train"
        h = x
        for i, layer in enumerate(self.layers):
            if train and i > 0 and self.dropout > 0.0:
                h = ad.dropout(h, self.dropout, rng, True)
            h = layer(h)
        return ad.relu(h)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


def hlstm_forward(stack: HighwayLstmStack, inputs: Tensor, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> Tensor:
    return stack(inputs, mode=mode, rng=rng)


def _augment(x: Tensor) -> Tensor:
    """Append a constant 1 column so the bilinear form gains affine terms."""
    ones = Tensor(np.ones((x.shape[0], 1)))
    return ad.concat([x, ones], axis=1)


class BiaffineScorer:
    """Two role projections (head, dependent) followed by a bias-augmented
    bilinear form with ``n_outputs`` output channels."""

    def __init__(self, d_in: int, d_inner: int, n_outputs: int, rng: np.random.Generator):
        self.fc_dep = Linear(d_in, d_inner, rng)
        self.fc_head = Linear(d_in, d_inner, rng)
        self.n_outputs = n_outputs
        self.p = d_inner + 1
        self.U = Tensor(
            uniform_init(rng, (self.p, n_outputs * self.p), self.p, self.p),
            requires_grad=True,
        )

    def roles(self, states: Tensor) -> tuple[Tensor, Tensor]:
        """Bias-augmented dependent-role and head-role matrices."""
        return (
            _augment(ad.relu(self.fc_dep(states))),
            _augment(ad.relu(self.fc_head(states))),
        )

    def edge_matrix(self, states: Tensor) -> Tensor:
        """Scores for every ordered (dependent, head) pair; n_outputs must
        be 1.  Row = dependent, column = candidate head."""
        if self.n_outputs != 1:
            raise ValueError("edge_matrix needs a single output channel")
        dep, head = self.roles(states)
        return (dep @ self.U) @ head.T

    def label_tensor(self, states: Tensor) -> Tensor:
        """(m, m, n_outputs) scores; rows are dependents, columns heads."""
        dep, head = self.roles(states)
        mixed = dep @ self.U  # (m, n_outputs * p)
        head_t = head.T
        channels = [
            mixed[:, k * self.p : (k + 1) * self.p] @ head_t
            for k in range(self.n_outputs)
        ]
        return ad.stack(channels, axis=2)

    def parameters(self) -> list[Tensor]:
        return self.fc_dep.parameters() + self.fc_head.parameters() + [self.U]


def biaffine_score(scorer: BiaffineScorer, v_dep: Tensor, v_head: Tensor) -> Tensor:
    """Score one (dependent, head) pair of role vectors across all output
    channels: out[k] = [v_dep; 1] . U_k . [v_head; 1]."""
    d = _augment(ad.reshape(v_dep, (1, -1)))
    h = _augment(ad.reshape(v_head, (1, -1)))
    mixed = d @ scorer.U  # (1, n_outputs * p)
    parts = [
        mixed[:, k * scorer.p : (k + 1) * scorer.p] @ h.T
        for k in range(scorer.n_outputs)
    ]
    return ad.reshape(ad.concat(parts, axis=1), (scorer.n_outputs,))
