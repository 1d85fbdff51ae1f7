"""Small neural-network building blocks on top of :mod:`acflow.diffcore`."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter


class Module:
    """Container that discovers :class:`Parameter` attributes recursively.

    Parameter names are dotted attribute paths, e.g. ``layers.0.net.dense.1.w``.
    """

    def named_parameters(self, prefix=""):
        out = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        out[f"{name}.{i}"] = item
                    elif isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        if not prefix:
            for name, p in out.items():
                p.name = name
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _glorot(rng, fan_in, fan_out, gain=1.0):
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Dense(Module):
    def __init__(self, n_in, n_out, rng, gain=1.0):
        self.w = Parameter(_glorot(rng, n_in, n_out, gain))
        self.b = Parameter(np.zeros(n_out))

    def __call__(self, x):
        return dc.matmul(x, self.w) + self.b


class MLP(Module):
    """Fully connected network with tanh hidden activations and a linear output.

    ``out_gain`` scales the initial output layer; a small value starts the
    network near a constant output.
    """

    def __init__(self, n_in, hidden, n_out, rng, out_gain=1.0):
        sizes = [n_in, *hidden, n_out]
        self.dense = [
            Dense(a, b, rng, gain=out_gain if i == len(sizes) - 2 else 1.0)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x):
        for layer in self.dense[:-1]:
            x = dc.tanh(layer(x))
        return self.dense[-1](x)


class GRU(Module):
    """Stacked GRU; :meth:`step` advances all layers by one time step."""

    def __init__(self, n_in, hidden, n_layers, rng):
        self.hidden = hidden
        self.w_in = []
        self.w_h = []
        self.b_in = []
        self.b_h = []
        for layer in range(n_layers):
            fan_in = n_in if layer == 0 else hidden
            scale = 1.0 / np.sqrt(hidden)
            self.w_in.append(Parameter(rng.uniform(-scale, scale, size=(fan_in, 3 * hidden))))
            self.w_h.append(Parameter(rng.uniform(-scale, scale, size=(hidden, 3 * hidden))))
            self.b_in.append(Parameter(np.zeros(3 * hidden)))
            self.b_h.append(Parameter(np.zeros(3 * hidden)))

    @property
    def n_layers(self):
        return len(self.w_in)

    def initial_state(self, batch):
        return [dc.Tensor(np.zeros((batch, self.hidden))) for _ in range(self.n_layers)]

    def project_input(self, x):
        """First-layer input projection ``x W + b``; split so constant parts are reused."""
        return dc.matmul(x, self.w_in[0]) + self.b_in[0]

    def step(self, xproj, state):
        """Advance one step from a first-layer input projection; returns (output, state)."""
        new_state = []
        h = dc.gru_step(xproj, state[0], self.w_h[0], self.b_h[0])
        new_state.append(h)
        for layer in range(1, self.n_layers):
            h = dc.gru_cell(h, state[layer], self.w_in[layer], self.w_h[layer], self.b_in[layer], self.b_h[layer])
            new_state.append(h)
        return h, new_state
