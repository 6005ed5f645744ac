"""Small feedforward embedding networks with hand-written backprop.

Activations are NHWC float64 arrays. A network maps a batch of shape
``(N, *input_shape)`` to embeddings of shape ``(N, embedding_dim)``; there is
no softmax layer, the cross-entropy head applies it inside its loss.
"""

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, FormatError, UsageError

CHECKPOINT_MAGIC = b"MOODNET1"


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    kind = "dense"

    def descriptor(self):
        return {"type": "dense", "in": self.in_features, "out": self.out_features}

    def output_shape(self, shape):
        if int(np.prod(shape)) != self.in_features:
            raise ValueError(f"expects {self.in_features} inputs, got shape {tuple(shape)}")
        return (self.out_features,)

    def param_shapes(self):
        return {"weight": (self.in_features, self.out_features), "bias": (self.out_features,)}

    def fan(self):
        return self.in_features, self.out_features

    def forward(self, x, params):
        flat = x.reshape(len(x), -1)
        return flat @ params["weight"] + params["bias"], (x.shape, flat)

    def backward(self, dout, cache, params):
        shape, flat = cache
        grads = {"weight": flat.T @ dout, "bias": dout.sum(axis=0)}
        return (dout @ params["weight"].T).reshape(shape), grads


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1

    kind = "conv2d"

    def descriptor(self):
        return {"type": "conv2d", "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel": self.kernel,
                "stride": self.stride}

    def output_shape(self, shape):
        if len(shape) != 3 or shape[2] != self.in_channels:
            raise ValueError(f"expects (H, W, {self.in_channels}) input, got {tuple(shape)}")
        h, w, _ = shape
        if h < self.kernel or w < self.kernel:
            raise ValueError(f"input {h}x{w} smaller than kernel {self.kernel}")
        oh = (h - self.kernel) // self.stride + 1
        ow = (w - self.kernel) // self.stride + 1
        return (oh, ow, self.out_channels)

    def param_shapes(self):
        k = self.kernel
        return {"weight": (k, k, self.in_channels, self.out_channels),
                "bias": (self.out_channels,)}

    def fan(self):
        k2 = self.kernel * self.kernel
        return k2 * self.in_channels, k2 * self.out_channels

    def forward(self, x, params):
        n, h, w, _ = x.shape
        k, s = self.kernel, self.stride
        oh, ow = (h - k) // s + 1, (w - k) // s + 1
        cols = kernels.im2col(x, k, k, s)
        wmat = params["weight"].reshape(-1, self.out_channels)
        out = cols @ wmat + params["bias"]
        return out.reshape(n, oh, ow, self.out_channels), (x.shape, cols)

    def backward(self, dout, cache, params):
        x_shape, cols = cache
        d2 = dout.reshape(-1, self.out_channels)
        wmat = params["weight"].reshape(-1, self.out_channels)
        grads = {"weight": (cols.T @ d2).reshape(params["weight"].shape),
                 "bias": d2.sum(axis=0)}
        dx = kernels.col2im(d2 @ wmat.T, x_shape, self.kernel, self.kernel, self.stride)
        return dx, grads


@dataclass(frozen=True)
class MaxPool2D:
    window: int

    kind = "maxpool2d"

    def descriptor(self):
        return {"type": "maxpool2d", "window": self.window}

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ValueError(f"expects (H, W, C) input, got {tuple(shape)}")
        h, w, c = shape
        if h % self.window or w % self.window:
            raise ValueError(f"{h}x{w} not divisible by window {self.window}")
        return (h // self.window, w // self.window, c)

    def param_shapes(self):
        return {}

    def forward(self, x, params):
        out, idx = kernels.maxpool_forward(x, self.window)
        return out, (x.shape, idx)

    def backward(self, dout, cache, params):
        x_shape, idx = cache
        return kernels.maxpool_backward(dout, idx, x_shape, self.window), {}


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def descriptor(self):
        return {"type": "relu"}

    def output_shape(self, shape):
        return tuple(shape)

    def param_shapes(self):
        return {}

    def forward(self, x, params):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dout, mask, params):
        return np.where(mask, dout, 0.0), {}


def layer_from_descriptor(desc):
    desc = dict(desc)
    kind = desc.pop("type", None)
    if kind == "dense":
        return Dense(int(desc["in"]), int(desc["out"]))
    if kind == "conv2d":
        return Conv2D(int(desc["in_channels"]), int(desc["out_channels"]),
                      int(desc["kernel"]), int(desc.get("stride", 1)))
    if kind == "maxpool2d":
        return MaxPool2D(int(desc["window"]))
    if kind == "relu":
        return ReLU()
    raise ConfigurationError(f"unknown layer type {kind!r}")


@dataclass
class Activations:
    """Per-layer caches retained by :meth:`EmbeddingNetwork.forward`."""

    caches: list
    fingerprint: int
    network_id: int


class EmbeddingNetwork:
    """Layered map from images to ``embedding_dim``-dimensional vectors.

    ``params[i]`` is a dict of arrays (``weight``, ``bias``) for layer ``i``;
    parameter-free layers hold an empty dict.
    """

    def __init__(self, input_shape, layers, params=None):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        if not self.layers:
            raise ConfigurationError("network needs at least one layer")
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                self.shapes.append(layer.output_shape(self.shapes[-1]))
            except ValueError as exc:
                raise ConfigurationError(f"layer {i} ({layer.kind}): {exc}") from None
        if len(self.shapes[-1]) != 1:
            raise ConfigurationError(
                f"layer {len(self.layers) - 1} ({self.layers[-1].kind}): final output must be flat, "
                f"got {self.shapes[-1]}")
        if params is None:
            params = [{k: np.zeros(s) for k, s in layer.param_shapes().items()} for layer in self.layers]
        self.params = params
        self._check_params()

    def _check_params(self):
        if len(self.params) != len(self.layers):
            raise ConfigurationError("one parameter dict per layer required")
        for i, (layer, p) in enumerate(zip(self.layers, self.params)):
            expected = layer.param_shapes()
            if set(p) != set(expected):
                raise ConfigurationError(f"layer {i} ({layer.kind}): parameters {sorted(p)} != {sorted(expected)}")
            for name, shape in expected.items():
                if p[name].shape != tuple(shape):
                    raise ConfigurationError(
                        f"layer {i} ({layer.kind}): {name} shape {p[name].shape} != {tuple(shape)}")

    @property
    def embedding_dim(self):
        return self.shapes[-1][0]

    def descriptors(self):
        return [layer.descriptor() for layer in self.layers]

    def parameters(self):
        """Flat list of parameter arrays in a fixed (layer, name) order."""
        return [p[name] for p in self.params for name in sorted(p)]

    def parameter_names(self):
        return [(i, name) for i, p in enumerate(self.params) for name in sorted(p)]

    def n_parameters(self):
        return sum(a.size for a in self.parameters())

    def _fingerprint(self):
        crc = 0
        for a in self.parameters():
            crc = zlib.crc32(a.tobytes(), crc)
        return crc

    def forward(self, batch):
        """Embed ``batch``; returns ``(embeddings, activations)``."""
        x = np.asarray(batch, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ConfigurationError(
                f"layer 0 ({self.layers[0].kind}): batch sample shape {x.shape[1:]} "
                f"!= network input shape {self.input_shape}")
        caches = []
        for layer, p in zip(self.layers, self.params):
            x, cache = layer.forward(x, p)
            caches.append(cache)
        return x, Activations(caches, self._fingerprint(), id(self))

    def embed(self, batch, batch_size=1024):
        """Forward without retaining activations, in chunks."""
        batch = np.asarray(batch, dtype=np.float64)
        out = np.empty((len(batch), self.embedding_dim))
        for start in range(0, len(batch), batch_size):
            x = batch[start:start + batch_size]
            if x.shape[1:] != self.input_shape:
                raise ConfigurationError(
                    f"layer 0 ({self.layers[0].kind}): batch sample shape {x.shape[1:]} "
                    f"!= network input shape {self.input_shape}")
            for layer, p in zip(self.layers, self.params):
                x, _ = layer.forward(x, p)
            out[start:start + len(x)] = x
        return out

    def backward(self, activations, grad_output):
        """Parameter gradients, as a list shaped like :attr:`params`."""
        if activations is None:
            raise UsageError("backward called without retained activations")
        if activations.network_id != id(self) or activations.fingerprint != self._fingerprint():
            raise UsageError("stale activations: parameters changed since forward")
        dout = np.asarray(grad_output, dtype=np.float64)
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            dout, grads[i] = self.layers[i].backward(dout, activations.caches[i], self.params[i])
        return grads

    def flat_gradients(self, grads):
        return [g[name] for g in grads for name in sorted(g)]


def forward(net, batch):
    return net.forward(batch)


def backward(net, activations, grad_output):
    return net.backward(activations, grad_output)


# -- construction -------------------------------------------------------------


def initialize(net, seed):
    """He-uniform for layers feeding a ReLU, Glorot-uniform for the rest.

    Each layer draws from its own stream keyed by (seed, layer index), so two
    networks differing only in head width share all earlier weights.
    """
    layers = net.layers
    for i, layer in enumerate(layers):
        shapes = layer.param_shapes()
        if not shapes:
            continue
        fan_in, fan_out = layer.fan()
        feeds_relu = i + 1 < len(layers) and isinstance(layers[i + 1], ReLU)
        if feeds_relu:
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        rng = np.random.default_rng([seed, i])
        net.params[i]["weight"][...] = rng.uniform(-limit, limit, size=shapes["weight"])
        net.params[i]["bias"][...] = 0.0
    return net


def lenet_layers(input_shape, embedding_dim):
    h, w, c = input_shape
    layers = [Conv2D(c, 8, 5), ReLU(), MaxPool2D(2), Conv2D(8, 16, 5), ReLU(), MaxPool2D(2)]
    oh = ((h - 4) // 2 - 4) // 2
    ow = ((w - 4) // 2 - 4) // 2
    return layers + [Dense(16 * oh * ow, 64), ReLU(), Dense(64, embedding_dim)]


def mlp_layers(input_shape, embedding_dim, hidden):
    layers = []
    width = int(np.prod(input_shape))
    for h in hidden:
        layers += [Dense(width, h), ReLU()]
        width = h
    return layers + [Dense(width, embedding_dim)]


def build_network(architecture, input_shape, embedding_dim, seed=0):
    """Build and initialise a network from an architecture string.

    ``"lenet"`` is conv(8,5)-relu-pool2-conv(16,5)-relu-pool2-dense(64)-relu-dense(d);
    ``"mlp:64,32"`` is a ReLU MLP with the listed hidden widths.
    """
    arch = architecture.strip().lower()
    if arch == "lenet":
        if len(input_shape) != 3:
            raise ConfigurationError(f"lenet needs (H, W, C) input, got {tuple(input_shape)}")
        layers = lenet_layers(input_shape, embedding_dim)
    elif arch == "mlp" or arch.startswith("mlp:"):
        spec = arch.partition(":")[2]
        try:
            hidden = [int(h) for h in spec.split(",") if h.strip()]
        except ValueError:
            raise ConfigurationError(f"bad mlp architecture {architecture!r}") from None
        layers = mlp_layers(input_shape, embedding_dim, hidden)
    else:
        raise ConfigurationError(f"unknown architecture {architecture!r}")
    return initialize(EmbeddingNetwork(input_shape, layers), seed)


# -- gradient oracle ------------------------------------------------------------


def finite_difference_gradient(net, batch, loss_fn, step=1e-5):
    """Central-difference gradients of ``loss_fn(net.embed(batch))``.

    Returns a list shaped like ``net.params``. Parameters are restored
    bit-exactly afterwards.
    """
    if step <= 0:
        raise UsageError("finite-difference step must be positive")
    batch = np.asarray(batch, dtype=np.float64)
    grads = []
    for p in net.params:
        g = {}
        for name, arr in p.items():
            est = np.zeros_like(arr)
            flat, gflat = arr.reshape(-1), est.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                plus = loss_fn(net.embed(batch))
                flat[k] = orig - step
                minus = loss_fn(net.embed(batch))
                flat[k] = orig
                gflat[k] = (plus - minus) / (2.0 * step)
            g[name] = est
        grads.append(g)
    return grads


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(net, path, meta=None):
    """Write header JSON plus raw little-endian float64 parameter bytes."""
    arrays = []
    for i, p in enumerate(net.params):
        for name in sorted(p):
            arrays.append({"layer": i, "name": name, "shape": list(p[name].shape)})
    header = {
        "format": 1,
        "input_shape": list(net.input_shape),
        "embedding_dim": net.embedding_dim,
        "layers": net.descriptors(),
        "arrays": arrays,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for a in arrays:
            f.write(np.ascontiguousarray(net.params[a["layer"]][a["name"]], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(network, meta)``."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic at byte 0")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header at byte 8")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen])
    except ValueError:
        raise FormatError(f"{path}: unreadable header at byte 16") from None
    layers = [layer_from_descriptor(d) for d in header["layers"]]
    net = EmbeddingNetwork(header["input_shape"], layers)
    offset = 16 + hlen
    for a in header["arrays"]:
        count = int(np.prod(a["shape"]))
        end = offset + 8 * count
        if end > len(data):
            raise FormatError(f"{path}: truncated parameter data at byte {offset}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64)
        net.params[a["layer"]][a["name"]] = arr.reshape(a["shape"])
        offset = end
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes at byte {offset}")
    net._check_params()
    if net.embedding_dim != header["embedding_dim"]:
        raise FormatError(f"{path}: embedding_dim mismatch")
    return net, header.get("meta", {})
