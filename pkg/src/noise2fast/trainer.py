"""Single-image training loop with self-validation early stopping.

One epoch feeds the four downsampled pairs through the network in fixed
order at batch size 1, then scores the net by the MSE between its output on
the full noisy image and that same noisy image.  Training stops after
``patience_epochs`` epochs without a strict improvement of the best score
(or at the ``max_epochs`` cap), and the result is the elementwise mean of
the last ``avg_window`` validation outputs, mapped back to the input scale.
"""

from __future__ import annotations

import dataclasses
import json
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import downsample, imaging, model, tensor
from .imaging import ImageData, NormParams
from .rng import derive_seed

_LOSSES = ("bce", "mse")
_SCHEMES = ("checkerboard", "quad", "exact")


@dataclass
class TrainConfig:
    loss: str = "bce"
    scheme: str = "checkerboard"
    lr: float = 0.001
    patience_epochs: int = 100
    avg_window: int = 100
    max_epochs: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.loss not in _LOSSES:
            raise ValueError(f"loss must be one of {_LOSSES}, got {self.loss!r}")
        if self.scheme not in _SCHEMES:
            raise ValueError(f"scheme must be one of {_SCHEMES}, got {self.scheme!r}")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")
        if self.avg_window < 1:
            raise ValueError("avg_window must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class TrainState:
    """Best-score tracking plus the ring buffer of recent validation outputs."""

    avg_window: int
    epoch: int = 0
    best_score: float = np.inf
    epochs_since_improvement: int = 0
    outputs: deque = field(default_factory=deque)
    val_history: list = field(default_factory=list)

    def __post_init__(self):
        self.outputs = deque(self.outputs, maxlen=self.avg_window)


@dataclass
class DenoiseResult:
    denoised: np.ndarray  # 2-D, original value scale
    epochs_run: int
    val_history: list
    wall_time: float
    stop_reason: str  # "patience" | "max_epochs" | "degenerate"


def update_stop_state(state: TrainState, score: float, output: np.ndarray, config: TrainConfig) -> str:
    """Record one validation result; returns "continue" or "stop".

    Only a strict improvement (score < best) resets the patience counter;
    a tie counts as no improvement.
    """
    state.epoch += 1
    state.val_history.append(score)
    state.outputs.append(output)
    if score < state.best_score:
        state.best_score = score
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
    if state.epochs_since_improvement >= config.patience_epochs:
        return "stop"
    return "continue"


def validate(net: model.Network, normalized_noisy: np.ndarray):
    """Score the net against the noisy image itself; returns (mse, output)."""
    output = model.predict(net, normalized_noisy)
    diff = output.astype(np.float64) - np.asarray(normalized_noisy, dtype=np.float64)
    return float(np.mean(diff * diff)), output


def finalize_output(state: TrainState, norm_params: NormParams) -> np.ndarray:
    """Mean of the buffered validation outputs, mapped back to input scale."""
    if not state.outputs:
        raise ValueError("no validation outputs buffered; train at least one epoch")
    mean = np.mean(np.stack(tuple(state.outputs)), axis=0)
    return imaging.denormalize_plane(mean, norm_params)


def _loss_and_grad(logits: np.ndarray, target: np.ndarray, loss: str):
    if loss == "bce":
        return tensor.bce_with_logits(logits, target)
    s = tensor.sigmoid(logits)
    value, grad_s = tensor.mse_loss(s, target)
    return value, grad_s * s * (1 - s)


def _write_telemetry(sink, record: dict) -> None:
    if sink is not None:
        sink.write(json.dumps(record) + "\n")


def train_single_channel(
    noisy: np.ndarray,
    config: TrainConfig,
    clean: np.ndarray | None = None,
    telemetry=None,
    telemetry_tags: dict | None = None,
) -> DenoiseResult:
    """Denoise one 2-D image by training a fresh network on it.

    ``clean`` is required by (and only by) the "exact" scheme.  ``telemetry``
    is an optional writable text sink receiving one JSON line per epoch.
    """
    t0 = time.perf_counter()
    noisy = np.asarray(noisy, dtype=np.float64)
    if noisy.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {noisy.shape}")
    if noisy.shape[0] < 4 or noisy.shape[1] < 4:
        raise ValueError(f"image must be at least 4x4, got {noisy.shape}")
    if not np.isfinite(noisy).all():
        raise ValueError("image contains non-finite values")
    if config.scheme == "exact":
        if clean is None:
            raise ValueError("the exact scheme requires the clean ground-truth image")
        clean = np.asarray(clean, dtype=np.float64)
        if clean.shape != noisy.shape:
            raise ValueError(f"clean shape {clean.shape} != noisy shape {noisy.shape}")

    norm, params = imaging.normalize_plane(noisy)
    if params.degenerate:
        return DenoiseResult(
            denoised=noisy.copy(),
            epochs_run=0,
            val_history=[],
            wall_time=time.perf_counter() - t0,
            stop_reason="degenerate",
        )

    dtype = tensor.default_dtype()
    norm = norm.astype(dtype)
    if config.scheme == "exact":
        clean_norm = ((clean - params.vmin) / (params.vmax - params.vmin)).astype(dtype)
        pairs = downsample.make_exact_pairs(norm, clean_norm)
    else:
        pairs = downsample.make_training_pairs(norm, config.scheme)

    pair_tensors = []
    for pair in pairs:
        tgt = pair.target
        if config.loss == "bce":
            # exact-scheme targets can stray slightly outside the BCE domain
            tgt = np.clip(tgt, 0.0, 1.0)
        pair_tensors.append((pair.input[None, None], tgt[None, None]))

    net = model.build_network(1, config.seed, lr=config.lr)
    state = TrainState(avg_window=config.avg_window)
    tags = telemetry_tags or {}
    stop_reason = "max_epochs"
    for epoch in range(1, config.max_epochs + 1):
        pair_losses = []
        for inp, tgt in pair_tensors:
            logits, cache = model.forward(net, inp, keep_cache=True)
            loss_value, grad = _loss_and_grad(logits, tgt, config.loss)
            grads = model.backward(net, cache, grad)
            model.apply_gradients(net, grads)
            pair_losses.append(loss_value)
        score, output = validate(net, norm)
        verdict = update_stop_state(state, score, output, config)
        _write_telemetry(
            telemetry,
            {
                **tags,
                "epoch": epoch,
                "train_loss_per_pair": pair_losses,
                "val_mse": score,
                "timestamp": time.time(),
            },
        )
        if verdict == "stop":
            stop_reason = "patience"
            break

    denoised = finalize_output(state, params)
    return DenoiseResult(
        denoised=denoised,
        epochs_run=state.epoch,
        val_history=list(state.val_history),
        wall_time=time.perf_counter() - t0,
        stop_reason=stop_reason,
    )


def denoise_image(
    image: ImageData,
    config: TrainConfig,
    clean: ImageData | None = None,
    telemetry=None,
):
    """Denoise every channel of every slice with independent training runs.

    Each (channel, slice) run draws its seed from (config.seed, channel
    index, slice index), so runs are independent of execution order.
    Returns (denoised ImageData, list of per-run DenoiseResult in slice-major
    order).
    """
    if not 1 <= image.channels <= 4:
        raise ValueError(f"expected 1-4 channels, got {image.channels}")
    if config.scheme == "exact":
        if clean is None:
            raise ValueError("the exact scheme requires the clean ground-truth image")
        if clean.samples.shape != image.samples.shape:
            raise ValueError("clean image layout differs from noisy image")
    out = np.empty_like(image.samples, dtype=np.float32)
    runs = []
    for sl in range(image.n_slices):
        for ch in range(image.channels):
            sub = dataclasses.replace(config, seed=derive_seed(config.seed, ch, sl))
            result = train_single_channel(
                image.samples[sl, :, :, ch],
                sub,
                clean=None if clean is None else clean.samples[sl, :, :, ch],
                telemetry=telemetry,
                telemetry_tags={"slice": sl, "channel": ch},
            )
            out[sl, :, :, ch] = result.denoised
            runs.append(result)
    return ImageData(out, image.bit_depth, image.data_range), runs
