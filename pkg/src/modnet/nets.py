"""Minimal deterministic forward/backward engine for the two reference architectures.

Everything is float64 numpy. There are exactly two architectures: a bias-free
MLP for 28x28 grayscale inputs (784 -> 64 -> 64 -> 10) and a bias-free CNN for
3x32x32 inputs (conv 3->16 k3 s1 p1, ReLU, 2x2 max-pool, flatten to 4096,
4096 -> 64 -> 64 -> 10). No biases anywhere, no batch-norm, no GPU.
"""

from __future__ import annotations

import copy
import zipfile
from dataclasses import dataclass

import numpy as np

ARCH_MLP_MNIST = "mlp_mnist"
ARCH_CNN_CIFAR = "cnn_cifar"

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Raised when a checkpoint file cannot be parsed or does not match."""


class Linear:
    """Fully connected layer, weight stored out_features x in_features, no bias."""

    kind = "linear"

    def __init__(self, in_features: int, out_features: int):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = np.zeros((out_features, in_features))
        self.grad = np.zeros_like(self.weight)

    def forward(self, x):
        return x @ self.weight.T

    def backward(self, x, dy):
        self.grad += dy.T @ x
        return dy @ self.weight


class ReLU:
    kind = "relu"
    weight = None

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, x, dy):
        return dy * (x > 0.0)


class Flatten:
    kind = "flatten"
    weight = None

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, x, dy):
        return dy.reshape(x.shape)


class MaxPool2D:
    """2x2 max pooling with stride 2. Ties go to the first window position."""

    kind = "maxpool2d"
    weight = None

    def forward(self, x):
        return self._pool(x)[0]

    def backward(self, x, dy):
        _, idx = self._pool(x)
        n, c, oh, ow = dy.shape
        windows = np.zeros((n, c, oh, ow, 4))
        np.put_along_axis(windows, idx[..., None], dy[..., None], axis=-1)
        windows = windows.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return windows.reshape(n, c, oh * 2, ow * 2)

    @staticmethod
    def _pool(x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"max-pool 2x2 needs even spatial dims, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, idx


class Conv2D:
    """2D convolution without bias, weight stored out_ch x in_ch x kh x kw."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = np.zeros((out_channels, in_channels, kernel_size, kernel_size))
        self.grad = np.zeros_like(self.weight)

    def _im2col(self, x):
        n, c, h, w = x.shape
        k, s, p = self.kernel_size, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        cols = np.empty((n, c * k * k, oh * ow))
        row = 0
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    patch = xp[:, ci, i:i + s * oh:s, j:j + s * ow:s]
                    cols[:, row, :] = patch.reshape(n, -1)
                    row += 1
        return cols, oh, ow

    def forward(self, x):
        cols, oh, ow = self._im2col(x)
        wmat = self.weight.reshape(self.out_channels, -1)
        out = np.matmul(wmat, cols)
        return out.reshape(x.shape[0], self.out_channels, oh, ow)

    def backward(self, x, dy):
        n, _, h, w = x.shape
        k, s, p = self.kernel_size, self.stride, self.padding
        cols, oh, ow = self._im2col(x)
        dym = dy.reshape(n, self.out_channels, oh * ow)
        self.grad += np.matmul(dym, cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.weight.shape)
        wmat = self.weight.reshape(self.out_channels, -1)
        dcols = np.matmul(wmat.T, dym)
        dxp = np.zeros((n, self.in_channels, h + 2 * p, w + 2 * p))
        row = 0
        for ci in range(self.in_channels):
            for i in range(k):
                for j in range(k):
                    dxp[:, ci, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, row, :].reshape(n, oh, ow)
                    row += 1
        if p:
            return dxp[:, :, p:-p, p:-p]
        return dxp


LAYER_KINDS = {
    "linear": Linear,
    "relu": ReLU,
    "flatten": Flatten,
    "maxpool2d": MaxPool2D,
    "conv2d": Conv2D,
}


class Network:
    """Ordered layer list plus the architecture tag it was built from."""

    def __init__(self, arch: str, layers: list):
        self.arch = arch
        self.layers = layers

    def param_layers(self):
        """(layer index, layer) pairs for layers that carry weights."""
        return [(i, l) for i, l in enumerate(self.layers) if l.weight is not None]

    def linear_indices(self):
        return [i for i, l in enumerate(self.layers) if l.kind == "linear"]

    def zero_grads(self):
        for _, l in self.param_layers():
            l.grad[...] = 0.0

    def clone(self):
        return copy.deepcopy(self)

    def input_shape(self):
        if self.arch == ARCH_MLP_MNIST:
            return (784,)
        return (3, 32, 32)


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_network(arch: str, seed: int) -> Network:
    """Construct and initialize one of the two architectures.

    Weights are Kaiming-uniform with fan-in scaling, drawn in layer order from
    a single generator seeded with `seed`, so initialization is reproducible.
    """
    rng = np.random.default_rng(seed)
    if arch == ARCH_MLP_MNIST:
        layers = [Linear(784, 64), ReLU(), Linear(64, 64), ReLU(), Linear(64, 10)]
    elif arch == ARCH_CNN_CIFAR:
        layers = [
            Conv2D(3, 16, kernel_size=3, stride=1, padding=1),
            ReLU(),
            MaxPool2D(),
            Flatten(),
            Linear(16 * 16 * 16, 64),
            ReLU(),
            Linear(64, 64),
            ReLU(),
            Linear(64, 10),
        ]
    else:
        raise ValueError(f"unknown architecture tag: {arch!r}")
    net = Network(arch, layers)
    for _, layer in net.param_layers():
        if layer.kind == "linear":
            fan_in = layer.in_features
        else:
            fan_in = layer.in_channels * layer.kernel_size ** 2
        layer.weight[...] = _kaiming_uniform(rng, layer.weight.shape, fan_in)
    return net


@dataclass
class ActivationTrace:
    """Every activation of one forward pass: values[0] is the batch input,
    values[i + 1] is the output of layer i. Retained for backward and so the
    evaluation code can re-run forward with neuron masks applied."""

    values: list

    @property
    def logits(self):
        return self.values[-1]


def forward(net: Network, batch: np.ndarray, masks: dict | None = None) -> ActivationTrace:
    """Run the network on a batch, retaining all intermediate activations.

    `masks` optionally maps a trace index to a per-neuron multiplier applied
    to that activation before it feeds the next layer (index 0 masks the
    input itself). Used by cluster ablation; masked values are what the trace
    stores.
    """
    batch = np.asarray(batch, dtype=np.float64)
    expected = net.input_shape()
    if batch.ndim != len(expected) + 1 or batch.shape[1:] != expected:
        raise ValueError(
            f"batch shape {batch.shape} does not match {net.arch} input {('N',) + expected}")
    a = batch
    values = []
    for i, layer in enumerate(net.layers):
        if masks is not None and i in masks:
            a = a * masks[i]
        values.append(a)
        a = layer.forward(a)
    if masks is not None and len(net.layers) in masks:
        a = a * masks[len(net.layers)]
    values.append(a)
    if not np.isfinite(a).all():
        raise FloatingPointError("non-finite logits in forward pass")
    return ActivationTrace(values)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    targets = np.asarray(targets)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} does not match batch of {n}")
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logz - z[np.arange(n), targets]))
    dlogits = softmax(logits)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    return loss, dlogits


def backward(net: Network, trace: ActivationTrace, targets) -> float:
    """Accumulate dL_CE/dparams into layer grads; returns the mean loss."""
    if len(trace.values) != len(net.layers) + 1:
        raise ValueError("trace does not match network depth")
    loss, dy = cross_entropy(trace.logits, targets)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    for i in range(len(net.layers) - 1, -1, -1):
        dy = net.layers[i].backward(trace.values[i], dy)
    return loss


class Adam:
    """Standard Adam with bias correction; step() consumes and zeroes grads."""

    def __init__(self, net: Network, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {i: np.zeros_like(l.weight) for i, l in net.param_layers()}
        self.v = {i: np.zeros_like(l.weight) for i, l in net.param_layers()}

    def step(self, net: Network):
        self.t += 1
        for i, layer in net.param_layers():
            g = layer.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            layer.weight -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            layer.grad[...] = 0.0


def save_checkpoint(net: Network, path, seed: int) -> None:
    """Write a versioned checkpoint: architecture tag, seed, parameters.

    Parameters are stored as little-endian float64 npz entries, so the
    round-trip is bit-exact.
    """
    arrays = {
        "version": np.array(CHECKPOINT_VERSION, dtype="<i8"),
        "arch": np.array(net.arch),
        "seed": np.array(int(seed), dtype="<i8"),
    }
    for i, layer in net.param_layers():
        arrays[f"param_{i}"] = layer.weight.astype("<f8")
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path):
    """Rebuild (network, seed) from a checkpoint; structured errors on mismatch."""
    try:
        with np.load(path, allow_pickle=False) as data:
            contents = {k: data[k] for k in data.files}
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    for key in ("version", "arch", "seed"):
        if key not in contents:
            raise CheckpointError(f"checkpoint {path} is missing field {key!r}")
    version = int(contents["version"])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported "
                              f"(expected {CHECKPOINT_VERSION})")
    arch = str(contents["arch"])
    if arch not in (ARCH_MLP_MNIST, ARCH_CNN_CIFAR):
        raise CheckpointError(f"unknown architecture tag {arch!r}")
    seed = int(contents["seed"])
    net = build_network(arch, seed=0)
    for i, layer in net.param_layers():
        key = f"param_{i}"
        if key not in contents:
            raise CheckpointError(f"checkpoint {path} is missing {key}")
        w = contents[key]
        if w.shape != layer.weight.shape:
            raise CheckpointError(
                f"shape mismatch for layer {i}: checkpoint {w.shape}, "
                f"architecture expects {layer.weight.shape}")
        layer.weight[...] = w.astype(np.float64)
    return net, seed
