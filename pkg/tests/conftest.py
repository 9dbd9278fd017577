import numpy as np
import pytest

from noise2fast import tensor


@pytest.fixture
def f64_mode():
    """Run a test with the engine in 64-bit verification mode."""
    with tensor.using_dtype(np.float64):
        yield


def natural_crops(size=128):
    """Named grayscale crops from the scikit-image sample photographs."""
    import skimage.data

    cam = skimage.data.camera().astype(np.float64)
    coins = skimage.data.coins().astype(np.float64)
    moon = skimage.data.moon().astype(np.float64)
    return {
        "cam_a": cam[128 : 128 + size, 192 : 192 + size],
        "cam_b": cam[320 : 320 + size, 64 : 64 + size],
        "coins": coins[100 : 100 + size, 150 : 150 + size],
        "moon": moon[200 : 200 + size, 200 : 200 + size],
        "cam_c": cam[64 : 64 + size, 320 : 320 + size],
    }


def random_conv_layer(rng, in_ch, out_ch, k, activation="identity", dtype=np.float32):
    w = rng.standard_normal((out_ch, in_ch, k, k)).astype(dtype)
    b = rng.standard_normal(out_ch).astype(dtype)
    return tensor.ConvLayer(weights=w, bias=b, padding=(k - 1) // 2, activation=activation)
