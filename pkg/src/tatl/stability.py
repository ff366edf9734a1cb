"""Comparative generalisation-bound scores for candidate initialisations.

For an initialisation ``w`` and ``m`` samples::

    R       = mean per-sample loss at w
    gamma   = mean_i ||Hessian of loss_i at w||_2 + sqrt(R)
    gamma+- = gamma +- m ** (-1/4)
    score   = (1 + 1 / (c gamma-)) * R ** (c gamma+ / (1 + c gamma+))
              * sqrt(ln K) / m ** (1 / (1 + c gamma+))

The score drops the unknown constant of the underlying big-O bound, so it
is only meaningful for ranking candidates on the same data. Hessian norms
come from power iteration over finite-difference Hessian-vector products.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import DataError, NumericsError, RangeError
from .losses import DEFAULT_LOSS, LossConfig, combined_loss
from .nnet import NetConfig, ParamSet, infer_config, segmenter_bwd, segmenter_fwd

GAMMA_FLOOR = 1e-6

ASSUMPTIONS = (
    "loss Hessian is Lipschitz (constant not estimated)",
    "loss is smooth; step-size admissibility c <= min(1/smoothness, 1/(4(2 smoothness ln T)^2)) not checked",
    "SGD step sizes follow c/t with i.i.d. sample indices",
    "score omits the constant hidden in the big-O bound; compare candidates only",
)


@dataclass(frozen=True)
class BoundInputs:
    c: float = 0.01
    K: int = 4
    power_iters: int = 20
    power_tol: float = 1e-3
    fd_step: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if not self.c > 0:
            raise RangeError("c must be > 0")
        if self.K < 1:
            raise RangeError("K must be >= 1")
        if self.power_iters < 1 or not self.fd_step > 0:
            raise RangeError("power_iters must be >= 1 and fd_step > 0")


# -- per-sample loss and gradient ----------------------------------------

def sample_losses(params: ParamSet, x, y, net: NetConfig, loss_cfg: LossConfig = DEFAULT_LOSS,
                  batch: int = 32) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = []
    for i in range(0, len(x), batch):
        prob, _ = segmenter_fwd(x[i:i + batch], params, net)
        out.extend(combined_loss(p[0], t, loss_cfg)[0] for p, t in zip(prob, y[i:i + batch]))
    return np.array(out)


def empirical_risk(params: ParamSet, x, y, net: NetConfig, loss_cfg: LossConfig = DEFAULT_LOSS) -> float:
    """Mean combined loss over all samples, with compensated summation."""
    if len(x) == 0:
        raise DataError("empirical risk of an empty dataset")
    return math.fsum(sample_losses(params, x, y, net, loss_cfg)) / len(x)


def gradient_fn(params: ParamSet, x1, y1, net: NetConfig,
                loss_cfg: LossConfig = DEFAULT_LOSS) -> Callable[[np.ndarray], np.ndarray]:
    """Closure mapping a flat parameter vector to the flat loss gradient on one sample."""
    work = params.copy()
    x1 = np.asarray(x1, dtype=np.float64)[None]
    y1 = np.asarray(y1)

    def grad(w):
        work.set_flat_values(w)
        work.zero_grad()
        prob, cache = segmenter_fwd(x1, work, net)
        _, g = combined_loss(prob[0, 0], y1, loss_cfg)
        segmenter_bwd(g[None, None], cache, work, net)
        return work.flat_grads()

    return grad


def hessian_vec(grad: Callable[[np.ndarray], np.ndarray], w, v, fd_step: float = 1e-5) -> np.ndarray:
    """Central-difference Hessian-vector product of the function whose gradient is ``grad``.

    Uses ``h = fd_step * (1 + |w|) / |v|``.
    """
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nv = np.linalg.norm(v)
    if not nv > 0:
        raise RangeError("Hessian-vector product needs a nonzero direction")
    h = fd_step * (1.0 + np.linalg.norm(w)) / nv
    return (grad(w + h * v) - grad(w - h * v)) / (2.0 * h)


def spectral_norm(matvec: Callable[[np.ndarray], np.ndarray], dim: int, iters: int = 100,
                  tol: float = 1e-6, seed: int = 0) -> float:
    """Largest eigenvalue magnitude of a symmetric operator by power iteration.

    The estimate is ``|A v|`` for the current unit iterate ``v``, i.e. the
    root of the Rayleigh quotient of ``A^2``. Unlike ``v.A v`` it also
    converges when the two extreme eigenvalues have opposite signs and
    nearly equal magnitude. Stops when successive estimates differ by less
    than ``tol`` relative.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = np.asarray(matvec(v), dtype=np.float64)
        if not np.all(np.isfinite(w)):
            raise NumericsError("operator produced non-finite values")
        new = float(np.linalg.norm(w))
        if new == 0.0:
            return 0.0
        v = w / new
        if abs(new - est) <= tol * new:
            return new
        est = new
    return est


def hessian_norm(params: ParamSet, x1, y1, net: NetConfig, inputs: BoundInputs,
                 loss_cfg: LossConfig = DEFAULT_LOSS) -> float:
    grad = gradient_fn(params, x1, y1, net, loss_cfg)
    w = params.flat_values()
    return spectral_norm(lambda v: hessian_vec(grad, w, v, inputs.fd_step), w.size,
                         inputs.power_iters, inputs.power_tol, inputs.seed)


# -- the score ----------------------------------------------------------------

@dataclass
class GammaStats:
    gamma_hat: float
    gamma_plus: float
    gamma_minus: float
    clamped: bool
    mean_hessian_norm: float
    empirical_risk: float
    m: int


def gamma_from_norms(norms, risk: float) -> GammaStats:
    """Combine per-sample Hessian norms and the empirical risk."""
    m = len(norms)
    if m == 0:
        raise DataError("need at least one sample")
    mean_norm = math.fsum(norms) / m
    g = mean_norm + math.sqrt(risk)
    half = m ** -0.25
    minus, clamped = g - half, False
    if minus <= 0:
        minus, clamped = GAMMA_FLOOR, True
    return GammaStats(g, g + half, minus, clamped, mean_norm, risk, m)


def gamma_hat(params: ParamSet, x, y, inputs: BoundInputs, net: NetConfig | None = None,
              loss_cfg: LossConfig = DEFAULT_LOSS) -> GammaStats:
    if len(x) == 0:
        raise DataError("gamma statistics of an empty dataset")
    net = net or infer_config(params)
    norms = [hessian_norm(params, xi, yi, net, inputs, loss_cfg) for xi, yi in zip(x, y)]
    return gamma_from_norms(norms, empirical_risk(params, x, y, net, loss_cfg))


def bound_score(gamma_plus: float, gamma_minus: float, risk: float, m: int, K: int, c: float) -> float:
    if gamma_minus <= 0:
        raise RangeError("gamma_minus must be > 0 (clamp it first)")
    if risk < 0:
        raise RangeError("empirical risk must be >= 0")
    if K < 2:
        warnings.warn(f"log K <= 0 for K={K}; the score degenerates to 0", RuntimeWarning, stacklevel=2)
    log_k = max(math.log(K), 0.0)
    cg = c * gamma_plus
    risk_term = risk ** (cg / (1.0 + cg)) if risk > 0 else 0.0
    return (1.0 + 1.0 / (c * gamma_minus)) * risk_term * math.sqrt(log_k) / m ** (1.0 / (1.0 + cg))


@dataclass
class CandidateBound:
    candidate: str
    empirical_risk: float
    mean_hessian_norm: float
    gamma_hat: float
    gamma_plus: float
    gamma_minus: float
    clamped: bool
    bound_score: float
    m: int
    c: float
    K: int
    seed: int


@dataclass
class BoundReport:
    candidates: list[CandidateBound]
    argmin: str
    assumptions: list[str] = field(default_factory=lambda: list(ASSUMPTIONS))

    def to_json(self) -> str:
        return json.dumps({
            "candidates": [asdict(c) for c in self.candidates],
            "argmin": self.argmin,
            "assumptions": self.assumptions,
        }, indent=2, sort_keys=True)


def compare_inits(candidates: dict[str, ParamSet], x, y, inputs: BoundInputs = BoundInputs(),
                  loss_cfg: LossConfig = DEFAULT_LOSS) -> BoundReport:
    """Score every candidate initialisation on the same samples.

    Ties on the score are broken by candidate name.
    """
    if not candidates:
        raise ValueError("need at least one candidate")
    K = inputs.K
    rows = []
    for name in sorted(candidates):
        params = candidates[name]
        st = gamma_hat(params, x, y, inputs, infer_config(params), loss_cfg)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            score = bound_score(st.gamma_plus, st.gamma_minus, st.empirical_risk, st.m, K, inputs.c)
        rows.append(CandidateBound(name, st.empirical_risk, st.mean_hessian_norm, st.gamma_hat,
                                   st.gamma_plus, st.gamma_minus, st.clamped, score, st.m,
                                   inputs.c, K, inputs.seed))
    best = min(rows, key=lambda r: (r.bound_score, r.candidate))
    return BoundReport(rows, best.candidate)
