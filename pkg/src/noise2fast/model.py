"""The fixed denoising network: nine spatial-size-preserving conv layers.

Eight 3x3 ReLU layers with output channels (32, 32, 64, 64, 128, 128, 256,
256) followed by a single-output 1x1 layer.  The final sigmoid is folded
into the training loss; ``predict`` applies it explicitly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .rng import CounterRng, derive_seed
from .tensor import AdamState, ConvLayer, ShapeError, sigmoid

CHANNEL_PLAN = (32, 32, 64, 64, 128, 128, 256, 256)

_CHECKPOINT_MAGIC = b"N2FW"
_CHECKPOINT_VERSION = 1


@dataclass
class Network:
    """Ordered conv layers plus per-parameter optimizer state."""

    layers: list[ConvLayer]
    opt_states: list[tuple[AdamState, AdamState]]  # (weights, bias) per layer
    in_channels: int
    seed: int


def _layer_specs(in_channels: int):
    specs = []
    prev = in_channels
    for out in CHANNEL_PLAN:
        specs.append((prev, out, 3, "relu"))
        prev = out
    specs.append((prev, 1, 1, "identity"))
    return specs


def build_network(in_channels: int, seed: int, lr: float = 0.001) -> Network:
    """He-uniform weights from a per-layer seeded stream; zero biases."""
    if in_channels < 1:
        raise ValueError("in_channels must be >= 1")
    dtype = tensor.default_dtype()
    layers = []
    opt_states = []
    for idx, (c_in, c_out, k, act) in enumerate(_layer_specs(in_channels)):
        fan_in = c_in * k * k
        bound = math.sqrt(6.0 / fan_in)
        stream = CounterRng(derive_seed(seed, idx))
        w = stream.uniform(c_out * fan_in, -bound, bound).astype(dtype)
        w = w.reshape(c_out, c_in, k, k)
        b = np.zeros(c_out, dtype=dtype)
        layer = ConvLayer(weights=w, bias=b, padding=(k - 1) // 2, activation=act)
        layers.append(layer)
        opt_states.append(
            (AdamState.zeros_like(w, lr=lr), AdamState.zeros_like(b, lr=lr))
        )
    return Network(layers=layers, opt_states=opt_states, in_channels=in_channels, seed=seed)


def parameter_count(net: Network) -> int:
    return sum(layer.weights.size + layer.bias.size for layer in net.layers)


def forward(net: Network, x, keep_cache: bool = False):
    """Run the network; returns (logits, cache).

    The cache holds each layer's input and pre-activation, as needed by
    ``backward``; it is None when keep_cache is false.
    """
    x = tensor.as_nchw(x, "input")
    if x.shape[1] != net.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, network expects {net.in_channels}"
        )
    cache = [] if keep_cache else None
    for layer in net.layers:
        out, pre = tensor.conv2d_forward(x, layer, return_preact=True)
        if keep_cache:
            cache.append((x, pre))
        x = out
    return x, cache


def backward(net: Network, cache, grad_logits):
    """Gradients of a scalar loss w.r.t. every weight and bias.

    ``cache`` must come from a keep_cache forward on the same network
    state.  Returns a list of (grad_weights, grad_bias) per layer.
    """
    if cache is None or len(cache) != len(net.layers):
        raise ValueError("backward requires the cache from forward(..., keep_cache=True)")
    grad = tensor.as_nchw(grad_logits, "grad_logits")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)
    for idx in range(len(net.layers) - 1, -1, -1):
        saved_input, preact = cache[idx]
        grad_in, gw, gb = tensor.conv2d_backward(
            grad,
            saved_input,
            net.layers[idx],
            preact=preact,
            need_grad_input=idx > 0,
        )
        grads[idx] = (gw, gb)
        grad = grad_in
    return grads


def apply_gradients(net: Network, grads) -> None:
    """One Adam step on every parameter tensor."""
    for layer, (st_w, st_b), (gw, gb) in zip(net.layers, net.opt_states, grads):
        tensor.adam_step(layer.weights, gw, st_w)
        tensor.adam_step(layer.bias, gb, st_b)


def predict(net: Network, image: np.ndarray) -> np.ndarray:
    """Denoise one normalized 2-D image; output strictly inside (0, 1).

    The image is fed through the network as a 1x1xHxW tensor and the final
    sigmoid is applied here.  Saturated sigmoid values are nudged off the
    interval endpoints so the open-range contract survives float rounding.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"predict expects a 2-D image, got shape {image.shape}")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("predict expects values in [0, 1]")
    x = image[None, None].astype(tensor.default_dtype(), copy=False)
    logits, _ = forward(net, x, keep_cache=False)
    out = sigmoid(logits[0, 0])
    tiny = np.nextafter(out.dtype.type(0), out.dtype.type(1))
    top = np.nextafter(out.dtype.type(1), out.dtype.type(0))
    return np.clip(out, tiny, top)


def save_checkpoint(net: Network, path) -> None:
    """Versioned header (magic, version, channel plan, seed) + float32 data."""
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", _CHECKPOINT_VERSION, net.in_channels, len(net.layers)))
        for layer in net.layers:
            fh.write(struct.pack("<IIII", *layer.weights.shape))
        fh.write(struct.pack("<Q", net.seed & 0xFFFFFFFFFFFFFFFF))
        for layer in net.layers:
            fh.write(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())


def load_checkpoint(path, lr: float = 0.001) -> Network:
    dtype = tensor.default_dtype()
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"not a weight checkpoint (bad magic {magic!r})")
        version, in_channels, n_layers = struct.unpack("<III", fh.read(12))
        if version != _CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        shapes = [struct.unpack("<IIII", fh.read(16)) for _ in range(n_layers)]
        (seed,) = struct.unpack("<Q", fh.read(8))
        layers = []
        opt_states = []
        for idx, shape in enumerate(shapes):
            out_ch, c_in, kh, kw = shape
            w = np.frombuffer(fh.read(4 * out_ch * c_in * kh * kw), dtype="<f4")
            b = np.frombuffer(fh.read(4 * out_ch), dtype="<f4")
            act = "identity" if idx == n_layers - 1 else "relu"
            layer = ConvLayer(
                weights=w.reshape(shape).astype(dtype),
                bias=b.astype(dtype),
                padding=(kh - 1) // 2,
                activation=act,
            )
            layers.append(layer)
            opt_states.append(
                (AdamState.zeros_like(layer.weights, lr=lr), AdamState.zeros_like(layer.bias, lr=lr))
            )
    return Network(layers=layers, opt_states=opt_states, in_channels=in_channels, seed=int(seed))
