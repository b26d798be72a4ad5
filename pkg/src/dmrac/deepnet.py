"""Fully connected tanh feature network with a linear output layer.

The network maps x (n) -> Phi(x) (k, last hidden layer) -> theta_out^T Phi (m).
Each inner layer is stored as an ``(h_out, h_in + 1)`` matrix whose last
column is the bias. Networks are immutable values: every update returns a
new network, which lets the control loop hold a consistent snapshot while
training works on another.

With no inner layers the features are the raw input (Phi(x) = x), which
reduces the model to the linear map ``theta_out^T x``.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyBatch

MAGIC = b"DMRN"
FORMAT_VERSION = 1


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TrainBatch:
    xs: np.ndarray  # (M, n)
    ys: np.ndarray  # (M, m)

    def __post_init__(self):
        xs = np.atleast_2d(np.asarray(self.xs, dtype=float))
        ys = np.atleast_2d(np.asarray(self.ys, dtype=float))
        if xs.shape[0] == 0 or xs.size == 0:
            raise EmptyBatch("batch must contain at least one pair")
        if xs.shape[0] != ys.shape[0]:
            raise DimensionMismatch(f"{xs.shape[0]} inputs but {ys.shape[0]} targets")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            raise ValueError("batch entries must be finite")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    def __len__(self):
        return self.xs.shape[0]


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    epochs: int = 10
    minibatch: int = 20

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1 or self.minibatch < 1:
            raise ValueError("epochs and minibatch must be positive")


@dataclass(frozen=True)
class DeepFeatureNetwork:
    inner: tuple  # of (h_out, h_in + 1) arrays
    output: np.ndarray  # (k, m)

    def __post_init__(self):
        inner = tuple(_frozen(w) for w in self.inner)
        output = _frozen(np.atleast_2d(self.output))
        for prev, cur in zip(inner, inner[1:]):
            if cur.shape[1] != prev.shape[0] + 1:
                raise DimensionMismatch(f"layer shapes {prev.shape} -> {cur.shape} do not chain")
        if inner and output.shape[0] != inner[-1].shape[0]:
            raise DimensionMismatch(f"output layer {output.shape} does not match feature width {inner[-1].shape[0]}")
        for w in inner + (output,):
            if not np.all(np.isfinite(w)):
                raise ValueError("network weights must be finite")
        object.__setattr__(self, "inner", inner)
        object.__setattr__(self, "output", output)

    @property
    def n(self):
        return self.inner[0].shape[1] - 1 if self.inner else self.output.shape[0]

    @property
    def k(self):
        return self.output.shape[0]

    @property
    def m(self):
        return self.output.shape[1]

    @property
    def layer_dims(self):
        return [self.n] + [w.shape[0] for w in self.inner] + [self.m]

    def n_weights(self):
        return sum(w.size for w in self.inner) + self.output.size

    def forward_features(self, x):
        return forward_features(self, x)

    def forward_output(self, x):
        return forward_output(self, x)


def init_network(layer_dims, m, rng, output=None):
    """Seeded network with dims ``[n, h1, ..., k]`` and m outputs.

    Inner weights are uniform in +-1/sqrt(fan_in), biases zero; the output
    layer is zero unless given.
    """
    layer_dims = [int(d) for d in layer_dims]
    if len(layer_dims) < 1 or min(layer_dims) < 1:
        raise ValueError(f"bad layer dims {layer_dims}")
    inner = []
    for fan_in, fan_out in zip(layer_dims, layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        inner.append(np.hstack([w, np.zeros((fan_out, 1))]))
    k = layer_dims[-1]
    out = np.zeros((k, m)) if output is None else output
    return DeepFeatureNetwork(tuple(inner), out)


def _forward_all(net, X):
    """Activations per layer for a batch X (M, n); returns list [X, a1, ..., Phi]."""
    acts = [X]
    a = X
    for w in net.inner:
        a = np.tanh(a @ w[:, :-1].T + w[:, -1])
        acts.append(a)
    return acts


def forward_features(net, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (net.n,):
        raise DimensionMismatch(f"expected input of size {net.n}, got shape {x.shape}")
    a = x
    for w in net.inner:
        a = np.tanh(w[:, :-1] @ a + w[:, -1])
    return a


def forward_output(net, x):
    return net.output.T @ forward_features(net, x)


def batch_loss(net, batch):
    """Mean squared l2 residual ``(1/M) sum ||y_i - f(x_i)||^2``."""
    if len(batch) == 0:
        raise EmptyBatch("empty batch")
    phi = _forward_all(net, batch.xs)[-1]
    r = batch.ys - phi @ net.output
    return float(np.sum(r * r) / len(batch))


def batch_gradient(net, batch):
    """Exact gradient of :func:`batch_loss`.

    Returns ``(inner_grads, output_grad)`` with the same shapes as the
    network's layers.
    """
    if len(batch) == 0:
        raise EmptyBatch("empty batch")
    M = len(batch)
    acts = _forward_all(net, batch.xs)
    phi = acts[-1]
    resid = phi @ net.output - batch.ys  # (M, m)
    d_out = (2.0 / M) * resid
    g_output = phi.T @ d_out
    grads = [None] * len(net.inner)
    delta = d_out @ net.output.T  # dL/dPhi, (M, k)
    for i in range(len(net.inner) - 1, -1, -1):
        a_out = acts[i + 1]
        a_in = acts[i]
        dz = delta * (1.0 - a_out * a_out)
        grads[i] = np.hstack([dz.T @ a_in, dz.sum(axis=0)[:, None]])
        if i > 0:
            delta = dz @ net.inner[i][:, :-1]
    return tuple(grads), g_output


def sgd_step(net, batch, eta, gradient=batch_gradient):
    g_inner, g_out = gradient(net, batch)
    inner = tuple(w - eta * g for w, g in zip(net.inner, g_inner))
    return DeepFeatureNetwork(inner, net.output - eta * g_out)


def train(net, sample_batch, config, batches_per_epoch=1, gradient=batch_gradient):
    """Run ``config.epochs`` epochs of mini-batch SGD.

    ``sample_batch()`` must return a fresh :class:`TrainBatch`. Returns the
    trained network and the loss on the last mini-batch.
    """
    loss = float("nan")
    for _ in range(config.epochs):
        for _ in range(batches_per_epoch):
            batch = sample_batch()
            net = sgd_step(net, batch, config.learning_rate, gradient)
        loss = batch_loss(net, batch)
    return net, loss


def swap_features(net, new_inner):
    """Replace the inner layers, keeping the output layer and feature width."""
    candidate = DeepFeatureNetwork(tuple(new_inner), net.output)
    if candidate.n != net.n or candidate.k != net.k:
        raise DimensionMismatch(f"swap changes input/feature size ({net.n}, {net.k}) -> ({candidate.n}, {candidate.k})")
    return candidate


def with_output(net, output):
    return DeepFeatureNetwork(net.inner, output)


# --------------------------------------------------------------------------
# Binary weights file:
#   "DMRN" | version u32 | layer count u32 | dims u32 * (count + 1)
#   then each inner layer (h_out, h_in + 1) and the output layer (k, m),
#   row-major float64 little-endian.


def save_network(net, path):
    dims = net.layer_dims
    n_layers = len(net.inner) + 1
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, n_layers))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        for w in net.inner + (net.output,):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_network(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a DMRN weights file")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    dims = struct.unpack_from(f"<{n_layers + 1}I", data, 12)
    offset = 12 + 4 * (n_layers + 1)
    shapes = [(dims[i + 1], dims[i] + 1) for i in range(n_layers - 1)]
    shapes.append((dims[-2], dims[-1]))
    mats = []
    for shape in shapes:
        count = shape[0] * shape[1]
        if offset + 8 * count > len(data):
            raise ValueError(f"{path}: truncated weights file")
        mats.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float))
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes in weights file")
    return DeepFeatureNetwork(tuple(mats[:-1]), mats[-1])
