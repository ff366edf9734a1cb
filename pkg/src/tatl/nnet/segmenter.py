"""A small encoder-decoder segmenter with add (Link-shape) or concat (U-shape)
skip merges.

Layout for ``depth`` stages, ``C_s = base_channels * 2**s``:

* encoder stage ``s``: conv3x3-relu-conv3x3-relu to ``C_s``, kept as skip,
  then 2x2 max pooling
* bottleneck: conv block to ``base_channels * 2**depth``
* decoder stage ``s`` (deepest first): nearest upsample, conv3x3-relu down
  to ``C_s``, merge with skip ``s``, conv block to ``C_s``
* head: 1x1 conv to one channel followed by the logistic function

Encoder stages and the bottleneck are tagged ``encoder``; everything after
is ``decoder``. Only decoder shapes depend on the merge mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError
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
from .params import Param, ParamSet


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 3
    merge_mode: str = "concat"
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.merge_mode not in MERGE_MODES:
            raise ValueError(f"merge_mode must be one of {MERGE_MODES}")

    def channels(self, stage: int) -> int:
        return self.base_channels * 2**stage

    def check_input(self, x) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"expected input (N,{self.in_channels},H,W), got {x.shape}")
        k = 2**self.depth
        if x.shape[2] % k or x.shape[3] % k:
            raise DimensionError(f"spatial extents {x.shape[2:]} not divisible by 2**depth = {k}")


def param_shapes(cfg: NetConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    """``(name, tag, shape)`` for every parameter, in creation order."""
    specs = []

    def conv(name, tag, cin, cout, k=3):
        specs.append((f"{name}.w", tag, (cout, cin, k, k)))
        specs.append((f"{name}.b", tag, (cout,)))

    cin = cfg.in_channels
    for s in range(cfg.depth):
        c = cfg.channels(s)
        conv(f"enc{s}.conv1", "encoder", cin, c)
        conv(f"enc{s}.conv2", "encoder", c, c)
        cin = c
    cb = cfg.channels(cfg.depth)
    conv("bottleneck.conv1", "encoder", cin, cb)
    conv("bottleneck.conv2", "encoder", cb, cb)
    cin = cb
    for s in reversed(range(cfg.depth)):
        c = cfg.channels(s)
        conv(f"dec{s}.up", "decoder", cin, c)
        conv(f"dec{s}.conv1", "decoder", 2 * c if cfg.merge_mode == "concat" else c, c)
        conv(f"dec{s}.conv2", "decoder", c, c)
        cin = c
    conv("head", "decoder", cin, 1, k=1)
    return specs


def init_params(cfg: NetConfig) -> ParamSet:
    """Glorot-uniform kernels, zero biases, drawn deterministically from ``cfg.seed``.

    Encoder parameters are drawn first, so nets that differ only in merge
    mode share identical encoder weights.
    """
    rng = np.random.default_rng(cfg.seed)
    params = []
    for name, tag, shape in param_shapes(cfg):
        if name.endswith(".b"):
            value = np.zeros(shape)
        else:
            cout, cin, kh, kw = shape
            limit = np.sqrt(6.0 / ((cin + cout) * kh * kw))
            value = rng.uniform(-limit, limit, size=shape)
        params.append(Param.new(name, tag, value))
    return ParamSet(params)


def infer_config(params: ParamSet, seed: int = 0) -> NetConfig:
    """Recover the architecture of a parameter set from its shapes."""
    depth = 0
    while f"enc{depth}.conv1.w" in params:
        depth += 1
    if depth == 0 or "dec0.conv1.w" not in params:
        raise DimensionError("parameter set does not describe a segmenter")
    first = params["enc0.conv1.w"].value
    base, in_ch = first.shape[0], first.shape[1]
    merge = "concat" if params["dec0.conv1.w"].value.shape[1] == 2 * base else "add"
    cfg = NetConfig(in_channels=in_ch, base_channels=base, depth=depth, merge_mode=merge, seed=seed)
    expected = [(n, t, s) for n, t, s in param_shapes(cfg)]
    actual = [(p.name, p.tag, p.value.shape) for p in params]
    if expected != actual:
        raise DimensionError("parameter shapes do not match any segmenter configuration")
    return cfg


def _conv_relu(x, params, name):
    y, cc = conv2d_fwd(x, params[f"{name}.w"].value, params[f"{name}.b"].value)
    y, rc = relu_fwd(y)
    return y, (name, cc, rc)


def _conv_relu_bwd(dy, params, cache):
    name, cc, rc = cache
    dy = relu_bwd(dy, rc)
    dx, dw, db = conv2d_bwd(dy, cc)
    params[f"{name}.w"].grad += dw
    params[f"{name}.b"].grad += db
    return dx


def segmenter_fwd(x, params: ParamSet, cfg: NetConfig):
    """Probability map ``(N,1,H,W)`` for input ``(N,C,H,W)``, plus the backward cache.

    Internally activations are channels-last.
    """
    x = np.asarray(x, dtype=np.float64)
    cfg.check_input(x)
    caches = []
    skips = []
    h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    for s in range(cfg.depth):
        h, c1 = _conv_relu(h, params, f"enc{s}.conv1")
        h, c2 = _conv_relu(h, params, f"enc{s}.conv2")
        skips.append(h)
        h, pc = downsample2x_fwd(h)
        caches.append((c1, c2, pc))
    h, b1 = _conv_relu(h, params, "bottleneck.conv1")
    h, b2 = _conv_relu(h, params, "bottleneck.conv2")
    caches.append((b1, b2))
    for s in reversed(range(cfg.depth)):
        h, _ = upsample2x_fwd(h)
        h, uc = _conv_relu(h, params, f"dec{s}.up")
        h, mc = merge_fwd(skips[s], h, cfg.merge_mode)
        h, c1 = _conv_relu(h, params, f"dec{s}.conv1")
        h, c2 = _conv_relu(h, params, f"dec{s}.conv2")
        caches.append((uc, mc, c1, c2))
    logits, hc = conv2d_fwd(h, params["head.w"].value, params["head.b"].value)
    prob, sc = sigmoid_fwd(logits)
    caches.append((hc, sc))
    return prob.transpose(0, 3, 1, 2), caches


def segmenter_bwd(dprob, caches, params: ParamSet, cfg: NetConfig):
    """Accumulate parameter gradients into ``params``; returns the input gradient."""
    hc, sc = caches[-1]
    dlogits = sigmoid_bwd(np.asarray(dprob).transpose(0, 2, 3, 1), sc)
    dh, dw, db = conv2d_bwd(dlogits, hc)
    params["head.w"].grad += dw
    params["head.b"].grad += db
    dskips = [None] * cfg.depth
    for i, s in enumerate(range(cfg.depth)):
        uc, mc, c1, c2 = caches[-2 - i]
        dh = _conv_relu_bwd(dh, params, c2)
        dh = _conv_relu_bwd(dh, params, c1)
        dskip, dh = merge_bwd(dh, mc)
        dskips[s] = dskip
        dh = _conv_relu_bwd(dh, params, uc)
        dh = upsample2x_bwd(dh)
    b1, b2 = caches[cfg.depth]
    dh = _conv_relu_bwd(dh, params, b2)
    dh = _conv_relu_bwd(dh, params, b1)
    for s in reversed(range(cfg.depth)):
        c1, c2, pc = caches[s]
        dh = downsample2x_bwd(dh, pc) + dskips[s]
        dh = _conv_relu_bwd(dh, params, c2)
        dh = _conv_relu_bwd(dh, params, c1)
    return dh.transpose(0, 3, 1, 2)


def predict(x, params: ParamSet, cfg: NetConfig) -> np.ndarray:
    prob, _ = segmenter_fwd(x, params, cfg)
    return prob
