"""Embedding network: ReLU MLP with spectrally normalized weights, linear
decoder and hand-written reverse-mode gradients."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class MlpParams:
    """Weights ``W[l]`` have shape (out, in). Hidden layers carry biases
    (unless ``use_bias`` is False); the output layer is linear without bias."""

    weights: list
    biases: list
    gamma: float = 10.0
    use_bias: bool = True

    @property
    def K(self):
        return self.weights[-1].shape[0]

    @property
    def layer_dims(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_layers(self):
        return len(self.weights)

    def copy(self):
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                         self.gamma, self.use_bias)

    def validate(self):
        dims = self.layer_dims
        for l, W in enumerate(self.weights):
            if W.shape != (dims[l + 1], dims[l]):
                raise ValueError(f"layer {l} has shape {W.shape}, expected {(dims[l + 1], dims[l])}")
        if len(self.biases) != len(self.weights) - 1:
            raise ValueError("one bias vector per hidden layer expected")
        for W in self.weights:
            if not np.all(np.isfinite(W)):
                raise ValueError("non-finite weights")


def init_mlp(layer_dims=(6, 128, 128, 24), gamma=10.0, seed=0, use_bias=True):
    """Kaiming-uniform initialization for ReLU layers."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for l in range(len(layer_dims) - 1):
        fan_in, fan_out = layer_dims[l], layer_dims[l + 1]
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        if l < len(layer_dims) - 2:
            if use_bias:
                bb = 1.0 / np.sqrt(fan_in)
                biases.append(rng.uniform(-bb, bb, size=fan_out))
            else:
                biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, gamma, use_bias)


def embed(chi, params: MlpParams):
    """Forward pass; ``chi`` is (6,) or (n, 6)."""
    x = np.asarray(chi, dtype=float)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    for l, W in enumerate(params.weights[:-1]):
        h = h @ W.T
        if params.use_bias:
            h = h + params.biases[l]
        h = np.maximum(h, 0.0)
    z = h @ params.weights[-1].T
    return z[0] if single else z


def forward_with_cache(X, params: MlpParams):
    """Batch forward keeping pre-activations for the backward pass."""
    h = np.asarray(X, dtype=float)
    inputs, pre = [h], []
    for l, W in enumerate(params.weights[:-1]):
        a = h @ W.T
        if params.use_bias:
            a = a + params.biases[l]
        pre.append(a)
        h = np.maximum(a, 0.0)
        inputs.append(h)
    z = h @ params.weights[-1].T
    return z, (inputs, pre)


def backprop_mlp(dZ, cache, params: MlpParams):
    """Gradients of a scalar loss w.r.t. the (effective) weights and biases,
    given dL/dZ for a batch."""
    inputs, pre = cache
    n = params.n_layers
    dW = [None] * n
    db = [None] * (n - 1)
    g = dZ
    dW[-1] = g.T @ inputs[-1]
    g = g @ params.weights[-1]
    for l in range(n - 2, -1, -1):
        g = g * (pre[l] > 0.0)
        dW[l] = g.T @ inputs[l]
        db[l] = g.sum(axis=0) if params.use_bias else np.zeros_like(params.biases[l])
        g = g @ params.weights[l]
    return dW, db


# ------------------------------------------------------------ spectral norm


def power_iteration(W, u=None, n_iter=50, tol=1e-10):
    """Largest singular value with its left/right vectors.

    Stops after ``n_iter`` iterations or when the relative change of the
    estimate drops below ``tol``. Returns (sigma, u, v).
    """
    W = np.asarray(W, dtype=float)
    if not np.any(W):
        return 0.0, np.zeros(W.shape[0]), np.zeros(W.shape[1])
    if u is None or not np.any(u):
        u = np.random.default_rng(0).standard_normal(W.shape[0])
    u = u / np.linalg.norm(u)
    sigma = 0.0
    v = np.zeros(W.shape[1])
    for _ in range(n_iter):
        v = W.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            u = np.random.default_rng(1).standard_normal(W.shape[0])
            u /= np.linalg.norm(u)
            continue
        v /= nv
        wu = W @ v
        new_sigma = np.linalg.norm(wu)
        u = wu / new_sigma
        converged = abs(new_sigma - sigma) <= tol * new_sigma
        sigma = new_sigma
        if converged:
            break
    return float(sigma), u, v


def spectral_norm(W, n_iter=5000, tol=1e-13):
    """Largest singular value by power iteration run to convergence."""
    return power_iteration(W, n_iter=n_iter, tol=tol)[0]


def layer_target(params: MlpParams):
    return params.gamma ** (1.0 / params.n_layers)


class SpectralNormalizer:
    """Keeps one persistent power-iteration vector per layer.

    ``normalize`` returns the effective parameters used in the forward pass;
    ``backward`` maps gradients w.r.t. the effective weights back to the
    raw weights (treating u, v as the exact singular vectors).
    """

    def __init__(self, params: MlpParams, seed=0):
        rng = np.random.default_rng(seed)
        self.u = [rng.standard_normal(W.shape[0]) for W in params.weights]
        self.sigmas = [1.0] * params.n_layers
        self.v = [np.zeros(W.shape[1]) for W in params.weights]
        self.zero_layers = []

    def normalize(self, params: MlpParams, n_iter=1, tol=0.0):
        c = layer_target(params)
        out = params.copy()
        self.zero_layers = []
        for l, W in enumerate(params.weights):
            sigma, u, v = power_iteration(W, self.u[l], n_iter=n_iter, tol=tol)
            self.sigmas[l], self.u[l], self.v[l] = sigma, u, v
            if sigma == 0.0:
                self.zero_layers.append(l)
                continue
            out.weights[l] = W * (c / sigma)
        return out

    def backward(self, params: MlpParams, dW_hat):
        c = layer_target(params)
        grads = []
        for l, (W, G) in enumerate(zip(params.weights, dW_hat)):
            s = self.sigmas[l]
            if s == 0.0:
                grads.append(G.copy())
                continue
            proj = np.sum(G * W) / s
            grads.append((c / s) * (G - proj * np.outer(self.u[l], self.v[l])))
        return grads


def apply_spectral_normalization(params: MlpParams, n_iter=5000, tol=1e-13):
    """Return parameters with every layer rescaled to spectral norm gamma^(1/(L+1)).

    Zero layers are left unchanged with a warning.
    """
    c = layer_target(params)
    out = params.copy()
    for l, W in enumerate(params.weights):
        sigma = spectral_norm(W, n_iter=n_iter, tol=tol)
        if sigma == 0.0:
            warnings.warn(f"layer {l} is zero; spectral normalization skipped")
            continue
        out.weights[l] = W / sigma * c
    return out


def lipschitz_certificate(params: MlpParams):
    """Upper bound on the Lipschitz constant: product of layer spectral norms."""
    return float(np.prod([spectral_norm(W) for W in params.weights]))


@dataclass
class Decoder:
    """Linear reconstruction chi = C z, C of shape (6, K)."""

    C: np.ndarray = field(default_factory=lambda: np.zeros((6, 24)))

    def __call__(self, z):
        return np.asarray(z) @ self.C.T
