"""Checkerboard and 2x2-block downsampling of a single image.

A pixel (i, j) is "even" when i + j is even, "odd" otherwise -- the two
complementary classes of a checkerboard.  Compacting the even class column-
wise ("up") or row-wise ("left") produces half-size images:

    even_up(i, j)   = x(i, 2j + (i mod 2))          shape (m, n/2)
    odd_up(i, j)    = x(i, 2j + ((i+1) mod 2))
    even_left(i, j) = x(2i + (j mod 2), j)          shape (m/2, n)
    odd_left(i, j)  = x(2i + ((j+1) mod 2), j)

The odd-class column index alternates complementarily to the even class so
that both land in range for every row parity; see the project notes on the
index convention.  All functions are exact rearrangements: no filtering, no
interpolation, and the even/odd halves partition the input pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class DownsamplePair:
    """One (input -> target) training pair of equally shaped half-images."""

    input: np.ndarray
    target: np.ndarray
    orientation: str  # "up", "left", or a quadrant tag like "tl>tr"
    direction: str  # which half is the input, e.g. "even>odd"


def _require_even(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {x.shape}")
    m, n = x.shape
    if m % 2 or n % 2:
        raise ValueError(f"image dimensions must be even, got {m}x{n}")
    return x


def checkerboard_down(x: np.ndarray):
    """Split an even-sized image into its four checkerboard compactions.

    Returns (even_up, odd_up, even_left, odd_left); the up pair has shape
    (m, n/2), the left pair (m/2, n).
    """
    x = _require_even(x)
    m, n = x.shape
    even_up = np.empty((m, n // 2), dtype=x.dtype)
    odd_up = np.empty((m, n // 2), dtype=x.dtype)
    even_up[0::2] = x[0::2, 0::2]
    even_up[1::2] = x[1::2, 1::2]
    odd_up[0::2] = x[0::2, 1::2]
    odd_up[1::2] = x[1::2, 0::2]

    even_left = np.empty((m // 2, n), dtype=x.dtype)
    odd_left = np.empty((m // 2, n), dtype=x.dtype)
    even_left[:, 0::2] = x[0::2, 0::2]
    even_left[:, 1::2] = x[1::2, 1::2]
    odd_left[:, 0::2] = x[1::2, 0::2]
    odd_left[:, 1::2] = x[0::2, 1::2]
    return even_up, odd_up, even_left, odd_left


def checkerboard_recombine(even: np.ndarray, odd: np.ndarray, orientation: str) -> np.ndarray:
    """Exact inverse of checkerboard_down for one orientation."""
    even = np.asarray(even)
    odd = np.asarray(odd)
    if even.shape != odd.shape:
        raise ValueError(f"halves differ in shape: {even.shape} vs {odd.shape}")
    if orientation == "up":
        m, half = even.shape
        x = np.empty((m, 2 * half), dtype=even.dtype)
        x[0::2, 0::2] = even[0::2]
        x[1::2, 1::2] = even[1::2]
        x[0::2, 1::2] = odd[0::2]
        x[1::2, 0::2] = odd[1::2]
    elif orientation == "left":
        half, n = even.shape
        x = np.empty((2 * half, n), dtype=even.dtype)
        x[0::2, 0::2] = even[:, 0::2]
        x[1::2, 1::2] = even[:, 1::2]
        x[1::2, 0::2] = odd[:, 0::2]
        x[0::2, 1::2] = odd[:, 1::2]
    else:
        raise ValueError(f"orientation must be 'up' or 'left', got {orientation!r}")
    return x


def quad_down(x: np.ndarray):
    """Split an even-sized image into the four phase sub-images of 2x2 blocks.

    Returns (TL, TR, BL, BR), each of shape (m/2, n/2).
    """
    x = _require_even(x)
    return x[0::2, 0::2], x[0::2, 1::2], x[1::2, 0::2], x[1::2, 1::2]


def crop_even(x: np.ndarray) -> np.ndarray:
    """Drop the last row/column when a dimension is odd."""
    x = np.asarray(x)
    m, n = x.shape
    return x[: m - m % 2, : n - n % 2]


def make_training_pairs(image: np.ndarray, scheme: str = "checkerboard"):
    """Build the fixed four-pair training set for one image.

    The image is cropped to even dimensions first.  Checkerboard order:
    (even_up -> odd_up), (odd_up -> even_up), (even_left -> odd_left),
    (odd_left -> even_left).  Quad order: (TL -> TR), (TR -> TL),
    (TL -> BL), (BL -> TL).  The order is fixed and never shuffled.
    """
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] < 2 or image.shape[1] < 2:
        raise ValueError(f"image must be at least 2x2, got shape {image.shape}")
    x = crop_even(image)
    if scheme == "checkerboard":
        even_up, odd_up, even_left, odd_left = checkerboard_down(x)
        return [
            DownsamplePair(even_up, odd_up, "up", "even>odd"),
            DownsamplePair(odd_up, even_up, "up", "odd>even"),
            DownsamplePair(even_left, odd_left, "left", "even>odd"),
            DownsamplePair(odd_left, even_left, "left", "odd>even"),
        ]
    if scheme == "quad":
        tl, tr, bl, _ = quad_down(x)
        return [
            DownsamplePair(tl, tr, "quad", "tl>tr"),
            DownsamplePair(tr, tl, "quad", "tr>tl"),
            DownsamplePair(tl, bl, "quad", "tl>bl"),
            DownsamplePair(bl, tl, "quad", "bl>tl"),
        ]
    raise ValueError(f"unknown scheme {scheme!r}")


def make_exact_pairs(noisy: np.ndarray, clean: np.ndarray):
    """Checkerboard pairs with the ground-truth signal difference removed.

    For the (even -> odd) pair the target becomes x_odd - (s_odd - s_even),
    and analogously for the other three, so each target carries the input
    half's signal plus the target half's noise only.  Requires the clean
    image; used by the "exact" ablation.
    """
    noisy = np.asarray(noisy)
    clean = np.asarray(clean)
    if noisy.shape != clean.shape:
        raise ValueError(f"noisy shape {noisy.shape} != clean shape {clean.shape}")
    if noisy.ndim != 2 or noisy.shape[0] < 2 or noisy.shape[1] < 2:
        raise ValueError(f"image must be at least 2x2, got shape {noisy.shape}")
    x = crop_even(noisy)
    s = crop_even(clean)
    x_eu, x_ou, x_el, x_ol = checkerboard_down(x)
    s_eu, s_ou, s_el, s_ol = checkerboard_down(s)
    return [
        DownsamplePair(x_eu, x_ou - (s_ou - s_eu), "up", "even>odd"),
        DownsamplePair(x_ou, x_eu - (s_eu - s_ou), "up", "odd>even"),
        DownsamplePair(x_el, x_ol - (s_ol - s_el), "left", "even>odd"),
        DownsamplePair(x_ol, x_el - (s_el - s_ol), "left", "odd>even"),
    ]
