"""Image I/O, normalization, synthetic Gaussian noise, and quality metrics.

Supported containers: PNG (8-bit grayscale/RGB) and TIFF (8/16-bit integer
and 32-bit float grayscale, single- or multi-page).  The float TIFF is the
canonical interchange format for unclipped noisy data; integer saves clamp
to the nominal range and round half away from zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageSequence
from scipy.ndimage import correlate1d

from .rng import CounterRng, derive_seed


class ImageFormatError(ValueError):
    """Raised for unsupported or corrupt image files."""


@dataclass
class ImageData:
    """Decoded image: float samples in (slices, height, width, channels) order."""

    samples: np.ndarray
    bit_depth: str  # "uint8" | "uint16" | "float32"
    data_range: float | None  # nominal range (255, 65535) or None for float data

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 4:
            raise ValueError(
                f"samples must be (slices, h, w, channels), got shape {self.samples.shape}"
            )
        if min(self.samples.shape) < 1:
            raise ValueError(f"empty image dimension: {self.samples.shape}")
        if self.bit_depth not in ("uint8", "uint16", "float32"):
            raise ValueError(f"unknown bit depth {self.bit_depth!r}")

    @property
    def n_slices(self) -> int:
        return self.samples.shape[0]

    @property
    def height(self) -> int:
        return self.samples.shape[1]

    @property
    def width(self) -> int:
        return self.samples.shape[2]

    @property
    def channels(self) -> int:
        return self.samples.shape[3]

    def plane(self, sl: int = 0, ch: int = 0) -> np.ndarray:
        """One 2-D (height, width) plane."""
        return self.samples[sl, :, :, ch]


@dataclass
class NormParams:
    """Per-channel min/max observed in the noisy input."""

    vmin: float
    vmax: float

    def __post_init__(self):
        if self.vmax < self.vmin:
            raise ValueError(f"max {self.vmax} < min {self.vmin}")

    @property
    def degenerate(self) -> bool:
        return self.vmax == self.vmin


def from_plane(plane: np.ndarray, bit_depth: str = "float32", data_range=None) -> ImageData:
    """Wrap a single 2-D array as a one-slice, one-channel ImageData."""
    plane = np.asarray(plane, dtype=np.float32)
    if plane.ndim != 2:
        raise ValueError(f"expected 2-D plane, got {plane.shape}")
    return ImageData(plane[None, :, :, None], bit_depth, data_range)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

_PNG_MODES = {"L": 1, "RGB": 3}
_TIFF_MODES = {"L": "uint8", "I;16": "uint16", "F": "float32"}


def load_image(path) -> ImageData:
    """Decode a PNG or TIFF file into float samples plus depth metadata."""
    path = Path(path)
    try:
        img = Image.open(path)
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from exc
    suffix = path.suffix.lower()
    if suffix == ".png":
        if img.mode not in _PNG_MODES:
            raise ImageFormatError(f"{path}: PNG mode {img.mode!r} unsupported (L or RGB)")
        arr = np.asarray(img, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return ImageData(arr[None], "uint8", 255.0)
    if suffix in (".tif", ".tiff"):
        if img.mode not in _TIFF_MODES:
            raise ImageFormatError(
                f"{path}: TIFF mode {img.mode!r} unsupported (grayscale 8/16-bit or float32)"
            )
        depth = _TIFF_MODES[img.mode]
        pages = [np.asarray(p, dtype=np.float32) for p in ImageSequence.Iterator(img)]
        stack = np.stack(pages)[:, :, :, None]
        data_range = {"uint8": 255.0, "uint16": 65535.0, "float32": None}[depth]
        return ImageData(stack, depth, data_range)
    raise ImageFormatError(f"{path}: unsupported container (PNG or TIFF only)")


def _quantize(values: np.ndarray, limit: float, dtype) -> np.ndarray:
    clipped = np.clip(values, 0.0, limit)
    # round half away from zero (values are non-negative after the clamp)
    return np.floor(clipped + 0.5).astype(dtype)


def save_image(img: ImageData, path) -> None:
    """Write an ImageData; the container follows the file extension.

    Float data written to PNG or to an integer TIFF is quantized: clamped to
    the nominal range, then rounded half away from zero.  Float-32 TIFF is a
    lossless round trip.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    s = img.samples
    if suffix == ".png":
        if img.n_slices != 1:
            raise ImageFormatError("PNG cannot hold multi-slice stacks; use TIFF")
        if img.channels not in (1, 3):
            raise ImageFormatError(f"PNG supports 1 or 3 channels, got {img.channels}")
        arr = _quantize(s[0], 255.0, np.uint8)
        Image.fromarray(arr[:, :, 0] if img.channels == 1 else arr).save(path)
        return
    if suffix in (".tif", ".tiff"):
        if img.channels != 1:
            raise ImageFormatError("TIFF output is grayscale only; split channels first")
        if img.bit_depth == "uint8":
            pages = [Image.fromarray(_quantize(s[i, :, :, 0], 255.0, np.uint8)) for i in range(img.n_slices)]
        elif img.bit_depth == "uint16":
            pages = [
                Image.fromarray(_quantize(s[i, :, :, 0], 65535.0, np.uint16)) for i in range(img.n_slices)
            ]
        else:
            pages = [Image.fromarray(s[i, :, :, 0], mode="F") for i in range(img.n_slices)]
        pages[0].save(path, save_all=len(pages) > 1, append_images=pages[1:])
        return
    raise ImageFormatError(f"{path}: unsupported container (PNG or TIFF only)")


# ---------------------------------------------------------------------------
# noise synthesis
# ---------------------------------------------------------------------------


def add_gaussian_noise(img: ImageData, sigma: float, seed: int) -> ImageData:
    """Add i.i.d. N(0, sigma^2) to every sample, without clipping.

    Sigma is on the image's nominal scale.  The result is float data (values
    may leave [0, range]); the nominal data range is kept for metrics.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = CounterRng(derive_seed(seed, 0x6E6F6973))  # stream tag: "nois"
    noise = rng.normal(img.samples.size, sigma=sigma).astype(np.float32)
    noisy = img.samples + noise.reshape(img.samples.shape)
    return ImageData(noisy, "float32", img.data_range)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def normalize_plane(plane: np.ndarray):
    """Map a 2-D image to [0, 1] by (x - min) / (max - min).

    A constant image is degenerate (max == min): the output is all 0.5 and
    the returned NormParams flags it.
    """
    plane = np.asarray(plane)
    if not np.isfinite(plane).all():
        raise ValueError("image contains non-finite values")
    vmin = float(plane.min())
    vmax = float(plane.max())
    params = NormParams(vmin, vmax)
    if params.degenerate:
        return np.full_like(plane, 0.5, dtype=np.float64), params
    out = (plane.astype(np.float64) - vmin) / (vmax - vmin)
    return out, params


def denormalize_plane(plane: np.ndarray, params: NormParams) -> np.ndarray:
    if params.degenerate:
        return np.full_like(np.asarray(plane), params.vmin, dtype=np.float64)
    return np.asarray(plane, dtype=np.float64) * (params.vmax - params.vmin) + params.vmin


def normalize(img: ImageData):
    """Per-channel normalization of a whole image; returns (image, params list)."""
    out = np.empty_like(img.samples, dtype=np.float32)
    params = []
    for c in range(img.channels):
        chan = img.samples[:, :, :, c]
        if not np.isfinite(chan).all():
            raise ValueError("image contains non-finite values")
        vmin = float(chan.min())
        vmax = float(chan.max())
        p = NormParams(vmin, vmax)
        params.append(p)
        out[:, :, :, c] = 0.5 if p.degenerate else (chan - vmin) / (vmax - vmin)
    return ImageData(out, "float32", 1.0), params


def denormalize(img: ImageData, params) -> ImageData:
    if len(params) != img.channels:
        raise ValueError(f"{len(params)} params for {img.channels} channels")
    out = np.empty_like(img.samples, dtype=np.float32)
    for c, p in enumerate(params):
        if p.degenerate:
            out[:, :, :, c] = p.vmin
        else:
            out[:, :, :, c] = img.samples[:, :, :, c] * (p.vmax - p.vmin) + p.vmin
    return ImageData(out, "float32", None)


# ---------------------------------------------------------------------------
# quality metrics
# ---------------------------------------------------------------------------


def _as_samples(x) -> np.ndarray:
    return x.samples if isinstance(x, ImageData) else np.asarray(x)


def psnr(a, b, data_range: float) -> float:
    """Peak signal-to-noise ratio 10*log10(range^2 / MSE), in dB.

    Identical images (MSE == 0) report +inf.
    """
    a = _as_samples(a).astype(np.float64)
    b = _as_samples(b).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _window_mean(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable windowed mean, cropped to fully valid positions."""
    pad = (win.size - 1) // 2
    y = correlate1d(x, win, axis=0, mode="constant")
    y = correlate1d(y, win, axis=1, mode="constant")
    return y[pad:-pad, pad:-pad]


def ssim(a, b, data_range: float, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Single-channel images only; both dimensions must be at least the window
    size.  Windowed statistics use only fully valid positions.
    """
    a = _as_samples(a).astype(np.float64)
    b = _as_samples(b).astype(np.float64)
    a = np.squeeze(a)
    b = np.squeeze(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("ssim expects a single-channel 2-D image per call")
    if min(a.shape) < 11:
        raise ValueError(f"image {a.shape} smaller than the 11x11 window")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    win = _gaussian_window()
    mu_a = _window_mean(a, win)
    mu_b = _window_mean(b, win)
    var_a = _window_mean(a * a, win) - mu_a * mu_a
    var_b = _window_mean(b * b, win) - mu_b * mu_b
    cov = _window_mean(a * b, win) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# channel plumbing
# ---------------------------------------------------------------------------


def split_channels(img: ImageData) -> list[ImageData]:
    """One single-channel ImageData per channel, order preserved."""
    return [
        ImageData(img.samples[:, :, :, c : c + 1].copy(), img.bit_depth, img.data_range)
        for c in range(img.channels)
    ]


def merge_channels(parts: list[ImageData]) -> ImageData:
    """Inverse of split_channels; all parts must agree in shape and depth."""
    if not parts:
        raise ValueError("no channels to merge")
    base = parts[0]
    for p in parts[1:]:
        if p.samples.shape[:3] != base.samples.shape[:3]:
            raise ValueError("channel shapes differ")
        if p.channels != 1:
            raise ValueError("merge_channels expects single-channel parts")
    stacked = np.concatenate([p.samples for p in parts], axis=3)
    return ImageData(stacked, base.bit_depth, base.data_range)
