"""Tensor primitives with exact gradients and the encoder-decoder segmenter."""

from .layers import (
    MERGE_MODES,
    conv2d_bwd,
    conv2d_fwd,
    downsample2x_bwd,
    downsample2x_fwd,
    merge_bwd,
    merge_fwd,
    relu_bwd,
    relu_fwd,
    sigmoid_bwd,
    sigmoid_fwd,
    upsample2x_bwd,
    upsample2x_fwd,
)
from .params import Param, ParamSet, decode_weights, encode_weights, load_weights, save_weights
from .segmenter import (
    NetConfig,
    infer_config,
    init_params,
    param_shapes,
    predict,
    segmenter_bwd,
    segmenter_fwd,
)
