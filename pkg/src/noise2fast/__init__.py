"""Single-image blind denoising via checkerboard-downsampled self-training."""

from .downsample import (
    DownsamplePair,
    checkerboard_down,
    checkerboard_recombine,
    make_exact_pairs,
    make_training_pairs,
    quad_down,
)
from .imaging import (
    ImageData,
    NormParams,
    add_gaussian_noise,
    load_image,
    merge_channels,
    normalize,
    denormalize,
    psnr,
    save_image,
    split_channels,
    ssim,
)
from .model import Network, build_network, forward, backward, predict
from .tensor import (
    AdamState,
    ConvLayer,
    adam_step,
    bce_with_logits,
    conv2d_backward,
    conv2d_forward,
    mse_loss,
    relu,
    set_default_dtype,
    sigmoid,
    using_dtype,
)
from .trainer import DenoiseResult, TrainConfig, denoise_image, train_single_channel

__version__ = "0.1.0"
