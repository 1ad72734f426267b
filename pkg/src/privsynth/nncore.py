"""Dense networks with per-example gradients and plain SGD.

Parameters flatten in a fixed order: for each layer, the weight matrix
``W`` (shape ``(fan_in, fan_out)``) in row-major order, then the bias.

Checkpoint layout (little-endian)::

    b"PSNN"  magic
    u32      format version (1)
    u32      layer count L
    L x (u32 fan_in, u32 fan_out, u8 activation code)
    f64[...] flattened parameters
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid")
LOSSES = ("mse", "cross_entropy", "gan_d", "gan_g")
LOGIT_CLAMP = 30.0

_MAGIC = b"PSNN"
_VERSION = 1


class NetError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise NetError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise NetError("bias length must equal the weight matrix's output width")


@dataclass(frozen=True)
class DenseNet:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise NetError("a network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.W.shape[1] != b.W.shape[0]:
                raise NetError("adjacent layer dimensions do not chain")
        for layer in self.layers:
            if not (np.all(np.isfinite(layer.W)) and np.all(np.isfinite(layer.b))):
                raise NetError("non-finite parameters")

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[1]

    @property
    def n_params(self) -> int:
        return sum(l.W.size + l.b.size for l in self.layers)

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.W.ravel(), l.b]) for l in self.layers])

    def unflatten(self, theta: np.ndarray) -> "DenseNet":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise NetError(f"expected {self.n_params} parameters, got {theta.shape}")
        layers, pos = [], 0
        for l in self.layers:
            nw, nb = l.W.size, l.b.size
            W = theta[pos : pos + nw].reshape(l.W.shape).copy()
            b = theta[pos + nw : pos + nw + nb].copy()
            layers.append(Layer(W, b, l.activation))
            pos += nw + nb
        return DenseNet(tuple(layers))


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray | None = None
    aux: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        n = self.inputs.shape[0]
        if self.aux is not None:
            self.aux = np.asarray(self.aux, dtype=np.float64).reshape(n, -1)
        if self.targets is not None:
            self.targets = np.asarray(self.targets)
            if self.targets.shape[0] != n:
                raise NetError("targets and inputs disagree on row count")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def design(self) -> np.ndarray:
        if self.aux is None:
            return self.inputs
        return np.hstack([self.inputs, self.aux])


def init_dense(sizes, activations, rng: np.random.Generator) -> DenseNet:
    """He-style initialisation; ``activations`` has one tag per layer."""
    if len(activations) != len(sizes) - 1:
        raise NetError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        scale = np.sqrt((2.0 if act == "relu" else 1.0) / fan_in)
        layers.append(Layer(rng.normal(0.0, scale, (fan_in, fan_out)), np.zeros(fan_out), act))
    return DenseNet(tuple(layers))


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return a * (1.0 - a)


def _as_design(net: DenseNet, x) -> np.ndarray:
    X = x.design if isinstance(x, Batch) else np.atleast_2d(np.asarray(x, dtype=np.float64))
    if X.shape[1] != net.in_dim:
        raise NetError(f"network expects {net.in_dim} inputs, got {X.shape[1]}")
    return X


def forward(net: DenseNet, batch) -> np.ndarray:
    """Evaluate the network on a :class:`Batch` or a raw ``(b, d)`` matrix."""
    a = _as_design(net, batch)
    for l in net.layers:
        a = _act(l.activation, a @ l.W + l.b)
    return a


def _forward_cache(net: DenseNet, X: np.ndarray):
    acts, pre = [X], []
    a = X
    for l in net.layers:
        z = a @ l.W + l.b
        a = _act(l.activation, z)
        pre.append(z)
        acts.append(a)
    return acts, pre


def _backward(net: DenseNet, acts, pre, delta_out: np.ndarray, need_input: bool):
    """Per-example parameter gradients for upstream gradient ``delta_out``."""
    b = delta_out.shape[0]
    chunks = []
    delta = delta_out
    for i in range(len(net.layers) - 1, -1, -1):
        l = net.layers[i]
        delta = delta * _act_grad(l.activation, pre[i], acts[i + 1])
        gW = np.einsum("bi,bo->bio", acts[i], delta).reshape(b, -1)
        chunks.append(np.concatenate([gW, delta], axis=1))
        if i > 0 or need_input:
            delta = delta @ l.W.T
    grads = np.concatenate(chunks[::-1], axis=1)
    return grads, (delta if need_input else None)


def _logits(z: np.ndarray) -> np.ndarray:
    return np.clip(z.reshape(-1), -LOGIT_CLAMP, LOGIT_CLAMP)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def loss_and_delta(out: np.ndarray, targets, loss: str):
    """Per-example losses and their gradient with respect to the network output.

    ``mse``           sum of squared errors against a target matrix
    ``cross_entropy`` fused log-softmax / negative log-likelihood on integer labels
    ``gan_d``         discriminator logistic loss; targets are 1 (real) or 0 (fake)
    ``gan_g``         non-saturating generator loss ``-log sigmoid(logit)``

    The two GAN losses clamp logits to +-LOGIT_CLAMP; past the clamp the
    gradient is zero, which is how a saturated discriminator is handled.
    """
    if loss == "mse":
        t = np.asarray(targets, dtype=np.float64).reshape(out.shape)
        r = out - t
        return np.sum(r * r, axis=1), 2.0 * r
    if loss == "cross_entropy":
        y = np.asarray(targets).astype(np.int64).reshape(-1)
        if np.any(y < 0) or np.any(y >= out.shape[1]):
            raise NetError("class label outside the output range")
        shifted = out - out.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        rows = np.arange(out.shape[0])
        delta = np.exp(logp)
        delta[rows, y] -= 1.0
        return -logp[rows, y], delta
    if loss in ("gan_d", "gan_g"):
        if out.shape[1] != 1:
            raise NetError("GAN losses need a single-logit output")
        raw = out.reshape(-1)
        z = _logits(out)
        inside = (np.abs(raw) < LOGIT_CLAMP).astype(np.float64)
        if loss == "gan_d":
            y = np.asarray(targets, dtype=np.float64).reshape(-1)
            losses = y * _softplus(-z) + (1.0 - y) * _softplus(z)
            dz = _sigmoid(z) - y
        else:
            losses = _softplus(-z)
            dz = _sigmoid(z) - 1.0
        return losses, (dz * inside)[:, None]
    raise NetError(f"unsupported loss {loss!r}")


def per_example_losses(net: DenseNet, batch: Batch, loss: str) -> np.ndarray:
    return loss_and_delta(forward(net, batch), batch.targets, loss)[0]


def per_example_grads(net: DenseNet, batch: Batch, loss: str) -> np.ndarray:
    """``(b, n_params)`` matrix of per-example loss gradients, canonical order."""
    if loss not in LOSSES:
        raise NetError(f"unsupported loss {loss!r}")
    X = _as_design(net, batch)
    acts, pre = _forward_cache(net, X)
    _, delta = loss_and_delta(acts[-1], batch.targets, loss)
    grads, _ = _backward(net, acts, pre, delta, need_input=False)
    return grads


def vjp(net: DenseNet, x, out_grad: np.ndarray):
    """Per-example parameter gradients and input gradients for a given output gradient."""
    X = _as_design(net, x)
    acts, pre = _forward_cache(net, X)
    return _backward(net, acts, pre, np.asarray(out_grad, dtype=np.float64), need_input=True)


def batch_grad(net: DenseNet, batch: Batch, loss: str) -> np.ndarray:
    """Gradient of the mean loss over the batch."""
    return per_example_grads(net, batch, loss).mean(axis=0)


def sgd_step(net: DenseNet, grad: np.ndarray, eta: float) -> DenseNet:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (net.n_params,):
        raise NetError(f"gradient length {grad.shape} does not match {net.n_params} parameters")
    return net.unflatten(net.flatten() - eta * grad)


def write_net(fh: BinaryIO, net: DenseNet) -> None:
    fh.write(_MAGIC)
    fh.write(struct.pack("<II", _VERSION, len(net.layers)))
    for l in net.layers:
        fh.write(struct.pack("<IIB", l.W.shape[0], l.W.shape[1], ACTIVATIONS.index(l.activation)))
    fh.write(net.flatten().astype("<f8").tobytes())


def read_net(fh: BinaryIO) -> DenseNet:
    if fh.read(4) != _MAGIC:
        raise NetError("not a network checkpoint")
    head = fh.read(8)
    if len(head) != 8:
        raise NetError("truncated checkpoint header")
    version, n_layers = struct.unpack("<II", head)
    if version != _VERSION:
        raise NetError(f"unsupported checkpoint version {version}")
    shapes = []
    for _ in range(n_layers):
        rec = fh.read(9)
        if len(rec) != 9:
            raise NetError("truncated checkpoint header")
        fan_in, fan_out, code = struct.unpack("<IIB", rec)
        if code >= len(ACTIVATIONS):
            raise NetError(f"bad activation code {code}")
        shapes.append((fan_in, fan_out, ACTIVATIONS[code]))
    n = sum(i * o + o for i, o, _ in shapes)
    raw = fh.read(8 * n)
    if len(raw) != 8 * n:
        raise NetError("truncated checkpoint body")
    skeleton = DenseNet(tuple(Layer(np.zeros((i, o)), np.zeros(o), a) for i, o, a in shapes))
    return skeleton.unflatten(np.frombuffer(raw, dtype="<f8").astype(np.float64))


def save_net(path, net: DenseNet) -> None:
    with open(path, "wb") as fh:
        write_net(fh, net)


def load_net(path) -> DenseNet:
    with open(path, "rb") as fh:
        return read_net(fh)


def net_to_bytes(net: DenseNet) -> bytes:
    buf = io.BytesIO()
    write_net(buf, net)
    return buf.getvalue()
