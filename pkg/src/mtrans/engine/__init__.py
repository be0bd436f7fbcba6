from .tensor import Tape, TapeError, Tensor, backward
from .ops import (
    ShapeError,
    absolute,
    add,
    add_bias,
    as_tensor,
    concat_channels,
    concat_cols,
    concat_rows,
    conv2d,
    kink_monitor,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    patchify,
    pixel_shuffle,
    pixel_unshuffle,
    relu,
    reshape,
    scale,
    slice_cols,
    softmax_rows,
    sub,
    total,
    transpose,
    unpatchify,
)
from .gradcheck import GradCheckReport, grad_check, rel_err
