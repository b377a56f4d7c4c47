from .io import FormatError, load as load_checkpoint, save as save_checkpoint
from .optim import Adam, AdamState, adam_step
from .rng import ALGORITHM_ID as RNG_ALGORITHM, Rng, rng_normal
from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    bce_with_logits,
    binary_cross_entropy,
    concat_channels,
    conv3d,
    depth_to_space,
    exp,
    masked_select,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    sigmoid,
    silu,
    square,
    sub,
    sum_,
    upsample3d,
)
