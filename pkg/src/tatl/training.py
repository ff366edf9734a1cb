"""Optimisers, early stopping and the three-stage transfer pipeline.

Stage 1 trains a lesion segmenter and crops every sample to the predicted
lesion box (grown by ``crop_offset``) before rescaling it back to full
size. Stage 2 trains the attribute-agnostic segmenter on union masks.
Stage 3 trains one segmenter per attribute, initialised from an exact copy
of the stage-2 weights when stage 2 ran, or from ``init`` otherwise.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Sample, network_input, resize_image, stack
from .errors import DataError, DimensionError, RangeError
from .losses import DEFAULT_LOSS, LossConfig, batch_loss
from .maskops import (
    ATTRIBUTES,
    AttributeMaskSet,
    CropBox,
    binarize,
    crop,
    lesion_bbox,
    paste,
    resize_mask,
)
from .nnet import NetConfig, ParamSet, init_params, segmenter_bwd, segmenter_fwd

log = logging.getLogger(__name__)

OPT_MODES = ("momentum", "theory")


@dataclass(frozen=True)
class OptConfig:
    mode: str = "momentum"
    learning_rate: float = 0.01
    momentum: float = 0.9
    c: float = 0.01           # theory mode: step t uses c / t
    max_epochs: int = 40
    patience: int = 10
    batch_size: int = 4
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in OPT_MODES:
            raise ValueError(f"mode must be one of {OPT_MODES}, got {self.mode!r}")
        if not self.learning_rate > 0 or not self.c > 0:
            raise RangeError("learning_rate and c must be > 0")
        if not 0 <= self.momentum < 1:
            raise RangeError("momentum must lie in [0, 1)")
        if self.max_epochs < 0 or self.patience < 1 or self.patience > max(self.max_epochs, 1):
            raise RangeError("need 1 <= patience <= max_epochs")
        if self.batch_size < 1:
            raise RangeError("batch_size must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise RangeError("val_fraction must lie in [0, 1)")


def step_size(t: int, cfg: OptConfig) -> float:
    """Learning rate of step ``t`` (1-based)."""
    if cfg.mode == "theory":
        if t < 1:
            raise RangeError(f"theory-mode step index must be >= 1, got {t}")
        return cfg.c / t
    return cfg.learning_rate


def sgd_step(params: ParamSet, state: dict, t: int, cfg: OptConfig, frozen: tuple[str, ...] = ()) -> None:
    """Apply one update in place and zero all gradients.

    theory: ``w -= (c / t) * g``. momentum: ``v = mu * v + g; w -= lr * v``.
    Parameters whose tag is in ``frozen`` are left untouched.
    """
    lr = step_size(t, cfg)
    for p in params:
        if p.tag not in frozen:
            if cfg.mode == "theory":
                p.value -= lr * p.grad
            else:
                v = state.get(p.name)
                if v is None:
                    v = state[p.name] = np.zeros_like(p.value)
                v *= cfg.momentum
                v += p.grad
                p.value -= lr * v
        p.grad.fill(0.0)


class EarlyStopping:
    """Keeps the best-validation checkpoint; signals a stop after
    ``patience`` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.best_params: ParamSet | None = None
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float, params: ParamSet) -> bool:
        """Record an epoch; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_params = params.copy()
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    encoder_checksums: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _validation_split(n: int, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_val = int(round(fraction * n)) if n > 1 else 0
    if fraction > 0 and n > 1:
        n_val = min(max(n_val, 1), n - 1)
    if n_val == 0:
        return order, order
    return order[n_val:], order[:n_val]


def _mean_loss(x, y, params, net: NetConfig, loss_cfg: LossConfig, batch: int = 32) -> float:
    total = 0.0
    for i in range(0, len(x), batch):
        prob, _ = segmenter_fwd(x[i:i + batch], params, net)
        v, _ = batch_loss(prob[:, 0], y[i:i + batch], loss_cfg)
        total += v * len(prob)
    return total / len(x)


def fit(x, y, init: ParamSet, net: NetConfig, opt: OptConfig, loss_cfg: LossConfig = DEFAULT_LOSS,
        freeze_encoder: bool = False, label: str = "") -> tuple[ParamSet, History]:
    """Minibatch training of a segmenter on ``x (n,C,H,W)``, ``y (n,H,W)``.

    Training starts from an exact copy of ``init``. A seeded ``val_fraction``
    shard is held out for early stopping; the best-validation checkpoint is
    returned. With ``max_epochs == 0`` the copy of ``init`` is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise DataError("cannot train on an empty dataset")
    if len(x) != len(y):
        raise DimensionError(f"{len(x)} images but {len(y)} targets")
    rng = np.random.default_rng(opt.seed)
    tr, va = _validation_split(len(x), opt.val_fraction, rng)
    params = init.copy()
    frozen = ("encoder",) if freeze_encoder else ()
    ref_encoder = init.checksum("encoder") if freeze_encoder else None
    history = History()
    stopper = EarlyStopping(opt.patience)
    state: dict = {}
    t = 0
    for epoch in range(1, opt.max_epochs + 1):
        order = tr[rng.permutation(len(tr))]
        losses = []
        for i in range(0, len(order), opt.batch_size):
            idx = order[i:i + opt.batch_size]
            prob, cache = segmenter_fwd(x[idx], params, net)
            value, grad = batch_loss(prob[:, 0], y[idx], loss_cfg)
            segmenter_bwd(grad[:, None], cache, params, net)
            t += 1
            sgd_step(params, state, t, opt, frozen)
            losses.append(value * len(idx))
        history.train_loss.append(float(sum(losses) / len(order)))
        val = _mean_loss(x[va], y[va], params, net, loss_cfg)
        history.val_loss.append(float(val))
        history.epochs_run = epoch
        if freeze_encoder:
            digest = params.checksum("encoder")
            history.encoder_checksums.append(digest)
            if digest != ref_encoder:
                raise RuntimeError("frozen encoder parameters changed during training")
        log.debug("%s epoch %d train %.4f val %.4f", label, epoch, history.train_loss[-1], val)
        if stopper.update(epoch, val, params):
            break
    if stopper.best_params is None:
        return params, history
    history.best_epoch = stopper.best_epoch
    return stopper.best_params, history


@dataclass
class TrainPlan:
    stages: tuple[int, ...] = (1, 2, 3)
    freeze_encoder: bool = False
    attributes: tuple[str, ...] = ATTRIBUTES
    crop_offset: int = 40
    opt: OptConfig = field(default_factory=OptConfig)
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        self.stages = tuple(sorted(set(int(s) for s in self.stages)))
        if not self.stages or not set(self.stages) <= {1, 2, 3}:
            raise ValueError(f"stages must be a nonempty subset of {{1, 2, 3}}, got {self.stages}")
        bad = [a for a in self.attributes if a not in ATTRIBUTES]
        if bad:
            raise ValueError(f"unknown attributes {bad}")
        self.attributes = tuple(self.attributes)
        if self.crop_offset < 0:
            raise RangeError("crop_offset must be >= 0")

    def segnet_config(self) -> NetConfig:
        return replace(self.net, merge_mode="concat")

    def to_dict(self) -> dict:
        return asdict(self)


def _require(dataset):
    if not dataset:
        raise DataError("dataset is empty")


def train_segment_net(dataset: list[Sample], plan: TrainPlan, init: ParamSet | None = None):
    _require(dataset)
    if any(s.masks.lesion is None for s in dataset):
        raise DataError("stage 1 needs a lesion mask for every sample")
    cfg = plan.segnet_config()
    x, y = stack(dataset)
    return fit(x, y, init if init is not None else init_params(cfg), cfg, plan.opt, plan.loss, label="segnet")


def train_pretext(dataset: list[Sample], init: ParamSet, plan: TrainPlan):
    """Train the attribute-agnostic segmenter on union masks."""
    _require(dataset)
    x, y = stack(dataset, union=True)
    return fit(x, y, init, plan.net, plan.opt, plan.loss, label="pretext")


def train_downstream(dataset: list[Sample], pretext: ParamSet, attribute: str, plan: TrainPlan):
    """Train the segmenter for one attribute starting from an exact copy of ``pretext``.

    Samples without that attribute use an all-zero target.
    """
    _require(dataset)
    if attribute not in ATTRIBUTES:
        raise ValueError(f"unknown attribute {attribute!r}")
    x, y = stack(dataset, attribute)
    return fit(x, y, pretext, plan.net, plan.opt, plan.loss,
               freeze_encoder=plan.freeze_encoder, label=f"attr-{attribute}")


# -- stage-1 cropping -----------------------------------------------------

def crop_boxes(samples: list[Sample], segnet: ParamSet, cfg: NetConfig, offset: int) -> list[CropBox]:
    """Lesion boxes from the segment net's binarised predictions."""
    x = network_input(samples)
    boxes = []
    for i in range(0, len(x), 32):
        prob, _ = segmenter_fwd(x[i:i + 32], segnet, cfg)
        boxes.extend(lesion_bbox(binarize(p[0]), offset) for p in prob)
    return boxes


def crop_sample(sample: Sample, box: CropBox) -> Sample:
    """Crop image and masks to ``box`` and rescale to the original size."""
    h, w = sample.masks.shape
    image = resize_image(crop(sample.image, box), h, w)
    masks = {a: resize_mask(crop(m, box), h, w) for a, m in sample.masks.masks.items()}
    lesion = sample.masks.lesion
    if lesion is not None:
        lesion = resize_mask(crop(lesion, box), h, w)
    return Sample(sample.id, image, AttributeMaskSet((h, w), masks, lesion))


def uncrop_probs(prob: np.ndarray, box: CropBox, shape: tuple[int, int]) -> np.ndarray:
    """Map a full-size probability map of a cropped input back to the original frame."""
    small = np.clip(resize_image(prob, box.height, box.width), 0.0, 1.0)
    return paste(small, box, shape)


@dataclass
class PipelineResult:
    plan: TrainPlan
    segnet: ParamSet | None = None
    pretext: ParamSet | None = None
    attribute_params: dict[str, ParamSet] = field(default_factory=dict)
    histories: dict[str, History] = field(default_factory=dict)
    boxes: dict[str, CropBox] = field(default_factory=dict)


def run_pipeline(dataset: list[Sample], plan: TrainPlan, init: ParamSet | None = None,
                 segnet: ParamSet | None = None) -> PipelineResult:
    """Run the requested stages.

    ``{3}`` trains every attribute from ``init``; ``{2, 3}`` transfers the
    pretext weights; adding stage 1 first crops all samples to the
    predicted lesion box. A trained ``segnet`` skips stage-1 training.
    """
    _require(dataset)
    if init is None:
        init = init_params(plan.net)
    result = PipelineResult(plan)
    data = dataset
    if 1 in plan.stages:
        if segnet is None:
            seg, hist = train_segment_net(dataset, plan)
            result.histories["segnet"] = hist
        else:
            seg = segnet
        result.segnet = seg
        boxes = crop_boxes(dataset, seg, plan.segnet_config(), plan.crop_offset)
        result.boxes = {s.id: b for s, b in zip(dataset, boxes)}
        data = [crop_sample(s, b) for s, b in zip(dataset, boxes)]
    start = init
    if 2 in plan.stages:
        start, hist = train_pretext(data, init, plan)
        result.pretext, result.histories["pretext"] = start, hist
    if 3 in plan.stages:
        for a in plan.attributes:
            w, hist = train_downstream(data, start, a, plan)
            result.attribute_params[a], result.histories[a] = w, hist
    return result


# -- inference -------------------------------------------------------------

def ensemble_predict(x, params_concat: ParamSet, params_add: ParamSet,
                     cfg_concat: NetConfig, cfg_add: NetConfig) -> np.ndarray:
    """Mean of the probability maps of two segmenters."""
    a, _ = segmenter_fwd(x, params_concat, cfg_concat)
    b, _ = segmenter_fwd(x, params_add, cfg_add)
    if a.shape != b.shape:
        raise DimensionError(f"ensemble members disagree on output shape: {a.shape} vs {b.shape}")
    return 0.5 * (a + b)


def predict_probs(samples: list[Sample], members: list[tuple[ParamSet, NetConfig]],
                  segnet: tuple[ParamSet, NetConfig] | None = None, offset: int = 40) -> np.ndarray:
    """Probability maps ``(n,H,W)`` in the original frame.

    ``members`` holds one or two (params, config) pairs; two are averaged.
    With ``segnet`` the inputs are first cropped to the predicted lesion box
    and predictions are pasted back.
    """
    if not members or len(members) > 2:
        raise ValueError("need one or two ensemble members")
    boxes = None
    if segnet is not None:
        boxes = crop_boxes(samples, segnet[0], segnet[1], offset)
        x = network_input([crop_sample(s, b) for s, b in zip(samples, boxes)])
    else:
        x = network_input(samples)
    out = []
    for i in range(0, len(x), 32):
        xb = x[i:i + 32]
        if len(members) == 2:
            (pa, ca), (pb, cb) = members
            prob = ensemble_predict(xb, pa, pb, ca, cb)
        else:
            prob, _ = segmenter_fwd(xb, members[0][0], members[0][1])
        out.append(prob[:, 0])
    probs = np.concatenate(out)
    if boxes is not None:
        shape = samples[0].masks.shape
        probs = np.stack([uncrop_probs(p, b, shape) for p, b in zip(probs, boxes)])
    return probs


def make_folds(n: int, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Seeded shuffle of ``range(n)`` cut into ``k`` contiguous chunks."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise DataError(f"cannot make {k} folds from {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(order, k)]
