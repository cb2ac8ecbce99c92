"""GRU and fully connected layers plus the Adam optimizer.

The GRU recurrence is pinned to the reset-before-candidate form with
separate input and recurrent biases:

    r_t = sigmoid(W_r x_t + b_rx + U_r h_{t-1} + b_rh)
    z_t = sigmoid(W_z x_t + b_zx + U_z h_{t-1} + b_zh)
    n_t = tanh(W_n x_t + b_nx + r_t * (U_n h_{t-1} + b_nh))
    h_t = (1 - z_t) * n_t + z_t * h_{t-1}

Gate parameters are packed row-wise as [reset; update; candidate] so each
step costs two matrix products per layer.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeError, TrainingError
from .tensor import Tensor


def uniform_init(rng, shape, fan_in):
    """Weights ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)); deterministic per rng."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear:
    """y = x @ weight^T + bias, with weight shaped [out, in]."""

    def __init__(self, weight, bias):
        self.weight = weight
        self.bias = bias
        self.out_dim, self.in_dim = weight.shape

    @classmethod
    def build(cls, in_dim, out_dim, rng):
        weight = uniform_init(rng, (out_dim, in_dim), in_dim)
        bias = Tensor(np.zeros(out_dim), requires_grad=True)
        return cls(weight, bias)

    def make_ctx(self, batch):
        # transpose/broadcast once per sequence, reused across steps
        wt = T.transpose(self.weight)
        rows = T.broadcast_to(T.reshape(self.bias, (1, self.out_dim)), (batch, self.out_dim))
        return wt, rows

    def apply_ctx(self, ctx, x):
        wt, rows = ctx
        return T.add(T.matmul(x, wt), rows)

    def __call__(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"linear: expected [batch, {self.in_dim}] input, got {x.shape}"
            )
        return self.apply_ctx(self.make_ctx(x.shape[0]), x)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class GruLayer:
    """One GRU layer; w_x [3H, in], w_h [3H, H], b_x and b_h [3H]."""

    def __init__(self, w_x, w_h, b_x, b_h):
        self.w_x = w_x
        self.w_h = w_h
        self.b_x = b_x
        self.b_h = b_h
        self.hidden = w_h.shape[1]
        self.in_dim = w_x.shape[1]

    @classmethod
    def build(cls, in_dim, hidden, rng):
        w_x = uniform_init(rng, (3 * hidden, in_dim), in_dim)
        w_h = uniform_init(rng, (3 * hidden, hidden), hidden)
        b_x = Tensor(np.zeros(3 * hidden), requires_grad=True)
        b_h = Tensor(np.zeros(3 * hidden), requires_grad=True)
        return cls(w_x, w_h, b_x, b_h)

    def make_ctx(self, batch):
        three = 3 * self.hidden
        return (
            T.transpose(self.w_x),
            T.transpose(self.w_h),
            T.broadcast_to(T.reshape(self.b_x, (1, three)), (batch, three)),
            T.broadcast_to(T.reshape(self.b_h, (1, three)), (batch, three)),
        )

    def step(self, ctx, x, h):
        wxt, wht, bx, bh = ctx
        xa = T.add(T.matmul(x, wxt), bx)
        ha = T.add(T.matmul(h, wht), bh)
        H = self.hidden
        r = T.sigmoid(T.add(T.narrow(xa, 1, 0, H), T.narrow(ha, 1, 0, H)))
        z = T.sigmoid(T.add(T.narrow(xa, 1, H, H), T.narrow(ha, 1, H, H)))
        n = T.tanh(T.add(T.narrow(xa, 1, 2 * H, H), T.mul(r, T.narrow(ha, 1, 2 * H, H))))
        return T.add(T.mul(T.sub(1.0, z), n), T.mul(z, h))

    def parameters(self):
        return [("w_x", self.w_x), ("w_h", self.w_h), ("b_x", self.b_x), ("b_h", self.b_h)]


class GruStack:
    """Stacked GRU layers; layer l > 0 consumes layer l-1's hidden state."""

    def __init__(self, layers):
        self.layers = layers
        self.hidden = layers[0].hidden
        self.in_dim = layers[0].in_dim

    @classmethod
    def build(cls, in_dim, hidden, num_layers, rng):
        layers = []
        for l in range(num_layers):
            layers.append(GruLayer.build(in_dim if l == 0 else hidden, hidden, rng))
        return cls(layers)

    @property
    def num_layers(self):
        return len(self.layers)

    def make_ctx(self, batch):
        return [layer.make_ctx(batch) for layer in self.layers]

    def step(self, ctxs, x, hs):
        """One time step through the stack; returns (top output, new states)."""
        new_hs = []
        inp = x
        for layer, ctx, h in zip(self.layers, ctxs, hs):
            inp = layer.step(ctx, inp, h)
            new_hs.append(inp)
        return inp, new_hs

    def split_h0(self, h0, batch):
        expect = (self.num_layers, batch, self.hidden)
        if h0.shape != expect:
            raise ShapeError(f"gru: h0 must be {expect}, got {h0.shape}")
        return [
            T.reshape(T.narrow(h0, 0, l, 1), (batch, self.hidden))
            for l in range(self.num_layers)
        ]

    def forward(self, inputs, h0):
        """inputs [batch, steps, in], h0 [layers, batch, hidden].

        Returns (outputs [batch, steps, hidden], hT [layers, batch, hidden])
        where outputs is the top layer's hidden sequence.
        """
        if inputs.ndim != 3 or inputs.shape[2] != self.in_dim:
            raise ShapeError(
                f"gru: expected [batch, steps, {self.in_dim}] inputs, got {inputs.shape}"
            )
        batch, steps, _ = inputs.shape
        hs = self.split_h0(h0, batch)
        ctxs = self.make_ctx(batch)
        tops = []
        for t in range(steps):
            x_t = T.reshape(T.narrow(inputs, 1, t, 1), (batch, self.in_dim))
            top, hs = self.step(ctxs, x_t, hs)
            tops.append(T.reshape(top, (batch, 1, self.hidden)))
        outputs = T.concat(tops, 1) if len(tops) > 1 else tops[0]
        h_t = T.concat(
            [T.reshape(h, (1, batch, self.hidden)) for h in hs], 0
        ) if self.num_layers > 1 else T.reshape(hs[0], (1, batch, self.hidden))
        return outputs, h_t

    def parameters(self):
        out = []
        for l, layer in enumerate(self.layers):
            out.extend((f"l{l}.{name}", p) for name, p in layer.parameters())
        return out


def gru_forward(stack, inputs, h0):
    return stack.forward(inputs, h0)


def linear_forward(layer, x):
    return layer(x)


class Adam:
    """Adam with bias correction: p <- p - lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, grads):
        """Apply one update from a {tensor: gradient tensor} map."""
        for name, p in self.params:
            g = grads[p].data
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        self.steps += 1
        c1 = 1.0 - self.beta1**self.steps
        c2 = 1.0 - self.beta2**self.steps
        for name, p in self.params:
            g = grads[p].data
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            # rebind rather than write in place: live tapes may hold views of p.data
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def snapshot_params(params):
    """Copy parameter values, e.g. to keep the best validation state."""
    return {name: p.data.copy() for name, p in params}


def restore_params(params, snapshot):
    for name, p in params:
        p.data = snapshot[name].copy()
