"""Small dense networks with hand-written reverse-mode gradients.

Shared by the denoiser and the trained victims. Hidden layers use a smooth
activation so input gradients exist everywhere; the output layer is linear.
"""

from __future__ import annotations

import numpy as np

from .errors import BackwardStateError

__all__ = ["MLP", "Adam", "ACTIVATIONS"]


def _tanh(z):
    h = np.tanh(z)
    return h, 1.0 - h * h


def _identity(z):
    return z, np.ones_like(z)


def _softplus(z):
    return np.logaddexp(0.0, z), 0.5 * (1.0 + np.tanh(0.5 * z))


ACTIVATIONS = {"tanh": _tanh, "identity": _identity, "softplus": _softplus}


class MLP:
    """Fully connected network ``widths[0] -> ... -> widths[-1]``.

    Parameters live in ``self.params`` as ``[W0, b0, W1, b1, ...]`` with
    ``W`` of shape ``(fan_in, fan_out)`` so rows of ``X`` are samples.
    """

    def __init__(self, widths, rng=None, activation="tanh", init="xavier"):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = [int(w) for w in widths]
        self.activation = activation
        self.params = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            if init == "zero":
                W = np.zeros((fan_in, fan_out))
            elif init == "xavier":
                if rng is None:
                    raise ValueError("xavier init needs an rng")
                W = rng.standard_normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in)
            else:
                raise ValueError(f"unknown init {init!r}")
            self.params += [W, np.zeros(fan_out)]
        self._cache = None

    @property
    def num_layers(self):
        return len(self.params) // 2

    def copy(self):
        other = MLP.__new__(MLP)
        other.widths = list(self.widths)
        other.activation = self.activation
        other.params = [p.copy() for p in self.params]
        other._cache = None
        return other

    def forward(self, X, record=True):
        X = np.asarray(X, dtype=np.float64)
        act = ACTIVATIONS[self.activation]
        inputs, slopes = [], []
        h = X
        for layer in range(self.num_layers):
            W, b = self.params[2 * layer], self.params[2 * layer + 1]
            inputs.append(h)
            z = h @ W + b
            if layer < self.num_layers - 1:
                h, slope = act(z)
                slopes.append(slope)
            else:
                h = z
        if record:
            self._cache = (inputs, slopes)
        return h

    __call__ = forward

    def backward(self, dY):
        """Gradients of ``sum(dY * forward(X))`` for the last recorded ``X``.

        Returns ``(param_grads, dX)`` with ``param_grads`` aligned to ``params``.
        """
        if self._cache is None:
            raise BackwardStateError("backward() called before forward()")
        inputs, slopes = self._cache
        grads = [None] * len(self.params)
        g = np.asarray(dY, dtype=np.float64)
        for layer in reversed(range(self.num_layers)):
            W = self.params[2 * layer]
            if layer < self.num_layers - 1:
                g = g * slopes[layer]
            grads[2 * layer] = inputs[layer].T @ g
            grads[2 * layer + 1] = g.sum(axis=0)
            g = g @ W.T
        return grads, g

    def input_jacobian(self, X):
        """Per-row Jacobian ``d out / d X`` with shape ``(n, out, in)``."""
        X = np.asarray(X, dtype=np.float64)
        act = ACTIVATIONS[self.activation]
        n = X.shape[0]
        J = np.broadcast_to(np.eye(X.shape[1]), (n, X.shape[1], X.shape[1]))
        h = X
        for layer in range(self.num_layers):
            W, b = self.params[2 * layer], self.params[2 * layer + 1]
            z = h @ W + b
            J = np.einsum("oi,nij->noj", W.T, J)
            if layer < self.num_layers - 1:
                h, slope = act(z)
                J = slope[:, :, None] * J
            else:
                h = z
        return J


class Adam:
    """Adam with bias correction, updating a parameter list in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr:
                p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
