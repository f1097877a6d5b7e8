"""Minimal dense-network toolkit on numpy, double precision throughout.

Everything the learning modules need and nothing more: feedforward nets
with explicit backward passes, a flat-vector Adam, numerically safe
softmax with its Jacobian-vector product, finite-difference gradient
checking, and JSON checkpoints. Parameters live in (and are exchanged
as) flat float64 vectors so optimizers and checkpoints stay trivial.
"""
from __future__ import annotations

import json
import os
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ACTIVATIONS",
    "DenseNet",
    "Adam",
    "softmax",
    "softmax_backward",
    "mse_loss",
    "soft_update",
    "fd_gradient",
    "fd_check",
    "net_to_dict",
    "net_from_dict",
    "adam_to_dict",
    "adam_from_dict",
    "save_checkpoint",
    "load_checkpoint",
]


def _tanh_forward(z):
    return np.tanh(z)


def _tanh_backward(z, a):
    return 1.0 - a * a


def _relu_forward(z):
    return np.maximum(z, 0.0)


def _relu_backward(z, a):
    return (z > 0.0).astype(float)


def _identity_forward(z):
    return z


def _identity_backward(z, a):
    return np.ones_like(z)


ACTIVATIONS = {
    "tanh": (_tanh_forward, _tanh_backward),
    "relu": (_relu_forward, _relu_backward),
    "identity": (_identity_forward, _identity_backward),
}


class DenseNet:
    """Fully connected net; layer l maps a W + b through its activation.

    Weights and biases initialize uniformly in +-1/sqrt(fan_in) from the
    given seed, so two nets built with the same sizes and seed are
    bitwise identical.
    """

    def __init__(self, layer_sizes: Sequence[int], activations: Sequence[str],
                 seed: int = 0):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if len(activations) != len(layer_sizes) - 1:
            raise ValueError(
                f"{len(layer_sizes) - 1} layers need {len(layer_sizes) - 1} "
                f"activations, got {len(activations)}"
            )
        for name in activations:
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.activations = tuple(activations)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.layer_sizes, self.layer_sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = theta[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = theta[pos:pos + b.size].copy()
            pos += b.size

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray):
        """Returns (output, cache); feed the cache to backward()."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.layer_sizes[0]:
            raise ValueError(
                f"input width {x.shape[1]} != expected {self.layer_sizes[0]}")
        cache = []
        a = x
        for w, b, name in zip(self.weights, self.biases, self.activations):
            z = a @ w + b
            out = ACTIVATIONS[name][0](z)
            cache.append((a, z, out))
            a = out
        return (a[0] if squeeze else a), (cache, squeeze)

    def backward(self, cache, grad_out: np.ndarray):
        """Backpropagate dL/d(output); returns (flat param grad, dL/d(input))."""
        layers, squeeze = cache
        g = np.asarray(grad_out, dtype=float)
        if squeeze:
            g = g[None, :]
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        for i in range(len(self.weights) - 1, -1, -1):
            a_in, z, a_out = layers[i]
            dz = g * ACTIVATIONS[self.activations[i]][1](z, a_out)
            grads_w[i] = a_in.T @ dz
            grads_b[i] = dz.sum(axis=0)
            g = dz @ self.weights[i].T
        flat = np.concatenate(
            [np.concatenate([gw.ravel(), gb]) for gw, gb in zip(grads_w, grads_b)]
        )
        return flat, (g[0] if squeeze else g)

    def clone(self) -> "DenseNet":
        other = DenseNet(self.layer_sizes, self.activations, seed=self.seed)
        other.set_flat(self.get_flat())
        return other


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, grad_p: np.ndarray, axis: int = -1) -> np.ndarray:
    """dL/dz given p = softmax(z) and dL/dp, without forming the Jacobian."""
    inner = np.sum(grad_p * p, axis=axis, keepdims=True)
    return p * (grad_p - inner)


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all entries and its gradient w.r.t. pred."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


class Adam:
    """Adam on a flat parameter vector with bias-corrected moments."""

    def __init__(self, n_params: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        grad = np.asarray(grad, dtype=float)
        if grad.shape != self.m.shape:
            raise ValueError(f"gradient shape {grad.shape} != {self.m.shape}")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def apply(self, net: DenseNet, grad: np.ndarray) -> None:
        net.set_flat(self.step(net.get_flat(), grad))


def soft_update(target: DenseNet, source: DenseNet, omega: float) -> None:
    """target <- omega * source + (1 - omega) * target, in place."""
    mixed = (1.0 - omega) * target.get_flat() + omega * source.get_flat()
    target.set_flat(mixed)


def fd_gradient(fun: Callable[[np.ndarray], float], theta: np.ndarray,
                step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += step
        down = theta.copy()
        down[i] -= step
        grad[i] = (fun(up) - fun(down)) / (2.0 * step)
    return grad


def fd_check(fun: Callable[[np.ndarray], float],
             grad: np.ndarray,
             theta: np.ndarray,
             step: float = 1e-5) -> float:
    """Worst relative disagreement between `grad` and finite differences."""
    numeric = fd_gradient(fun, theta, step)
    analytic = np.asarray(grad, dtype=float)
    denom = np.maximum(np.abs(numeric) + np.abs(analytic), 1e-8)
    return float(np.max(np.abs(numeric - analytic) / denom))


# ---------------------------------------------------------------------------
# checkpoints

def net_to_dict(net: DenseNet) -> dict:
    return {
        "layer_sizes": list(net.layer_sizes),
        "activations": list(net.activations),
        "seed": net.seed,
        "weights": net.get_flat().tolist(),
    }


def net_from_dict(doc: dict) -> DenseNet:
    net = DenseNet(doc["layer_sizes"], doc["activations"], seed=doc.get("seed", 0))
    net.set_flat(np.array(doc["weights"], dtype=float))
    return net


def adam_to_dict(opt: Adam) -> dict:
    return {
        "lr": opt.lr,
        "beta1": opt.beta1,
        "beta2": opt.beta2,
        "eps": opt.eps,
        "t": opt.t,
        "m": opt.m.tolist(),
        "v": opt.v.tolist(),
    }


def adam_from_dict(doc: dict) -> Adam:
    opt = Adam(len(doc["m"]), lr=doc["lr"], beta1=doc["beta1"],
               beta2=doc["beta2"], eps=doc["eps"])
    opt.t = int(doc["t"])
    opt.m = np.array(doc["m"], dtype=float)
    opt.v = np.array(doc["v"], dtype=float)
    return opt


def save_checkpoint(path: str, payload: dict) -> None:
    """Write a JSON checkpoint atomically (tmp file + rename)."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)
