"""Partial-observation processes, completeness calibration, and mask priors.

Two evaluation-time processes are provided: right-censoring of the time axis
(only a prefix of each sequence is observed) and a low-rank logistic model
whose observation probability couples negatively to a per-coordinate importance
profile, so the most label-relevant coordinates go missing first.

Training-time coarse views are not drawn from the evaluation process directly.
Instead calibration masks are generated on a held-out split at completeness
0.5, a product-Bernoulli prior is fitted to their per-coordinate frequencies,
and training masks are resampled from that prior at a batch completeness drawn
uniformly from [0.05, 1.0]. The right-censored benchmark skips the prior and
samples prefixes directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset
from .rng import Rng


class CalibrationError(RuntimeError):
    pass


class ContractError(RuntimeError):
    pass


TRAIN_C_RANGE = (0.05, 1.0)
EVAL_C_GRID = (0.05, 0.2, 0.4, 0.6, 0.8)
LOGIT_CLIP = 6.0
DELTA_BRACKET = 30.0
DELTA_TOL = 1e-3
CALIBRATION_LATENTS = 4096


@dataclass
class MaskBatch:
    M: np.ndarray            # [B, T, D] with entries exactly 0.0 or 1.0
    target_c: float

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=np.float64)
        if not np.all((self.M == 0.0) | (self.M == 1.0)):
            raise ContractError("mask entries must be exactly 0 or 1")

    @property
    def realized_c(self) -> float:
        return float(self.M.mean())

    @property
    def shape(self):
        return self.M.shape


def right_censor_mask(b, t, d, c) -> MaskBatch:
    """Observe the time prefix t <= L with L = round(c*T), all features."""
    if not 0.0 <= c <= 1.0:
        raise ContractError(f"completeness {c} outside [0, 1]")
    prefix = int(np.floor(c * t + 0.5))
    m = np.zeros((b, t, d))
    m[:, :prefix, :] = 1.0
    return MaskBatch(m, float(c))


@dataclass
class LogisticMaskParams:
    """Low-rank logistic missingness over T timesteps or D features.

    Pr(observe coordinate j for sample i)
        = sigmoid(b_j + s_i + z_i . l_j - beta * q_j + delta)
    with z_i ~ N(0, I_r), s_i ~ N(0, tau^2), and delta calibrated per target
    completeness. axis "time" masks whole timesteps, "feature" masks features.
    """

    b: np.ndarray            # [n_coords] base logits
    loadings: np.ndarray     # [n_coords, r]
    q: np.ndarray            # [n_coords] importance profile, max 1
    axis: str                # "time" | "feature"
    beta: float = 5.0
    tau: float = 0.12
    _delta_cache: dict = field(default_factory=dict, repr=False)

    BASE_SCALE = 0.04
    LOADING_SCALE = 0.05
    RANK = 3

    @classmethod
    def make(cls, q, axis, seed, beta=5.0, tau=0.12):
        q = np.asarray(q, dtype=np.float64)
        rng = Rng(seed).split(f"logistic_mask_{axis}")
        b = rng.normal(0.0, cls.BASE_SCALE, size=q.shape[0])
        loadings = rng.normal(0.0, cls.LOADING_SCALE, size=(q.shape[0], cls.RANK))
        return cls(b=b, loadings=loadings, q=q, axis=axis, beta=beta, tau=tau)

    @property
    def n_coords(self) -> int:
        return self.b.shape[0]

    def logits(self, z, s):
        """[n_latents, n_coords] pre-shift logits for latent draws (z, s)."""
        return (self.b + z @ self.loadings.T + s[:, None]
                - self.beta * self.q)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _bisect_delta(expected_frac, c, tol):
    lo, hi = -DELTA_BRACKET, DELTA_BRACKET
    if expected_frac(lo) > c or expected_frac(hi) < c:
        raise CalibrationError(f"target completeness {c} not bracketed; "
                               "mask parameters are degenerate")
    delta = 0.0
    for _ in range(200):
        delta = 0.5 * (lo + hi)
        f = expected_frac(delta)
        if abs(f - c) < tol:
            return delta
        if f < c:
            lo = delta
        else:
            hi = delta
    return delta


def calibrate_delta(params: LogisticMaskParams, c, tol=DELTA_TOL,
                    n_latents=CALIBRATION_LATENTS, seed=0) -> float:
    """Shift delta such that the expected observed fraction equals c.

    The expectation is a Monte Carlo average over latent draws of the exact
    per-cell observation probability (no Bernoulli sampling involved), and the
    same latents are reused across bisection iterates so it is monotone.
    """
    if not 0.0 < c < 1.0:
        raise CalibrationError(f"completeness {c} must be in (0, 1)")
    key = (round(c, 12), tol, n_latents, seed)
    if key in params._delta_cache:
        return params._delta_cache[key]
    rng = Rng(seed).split("delta_calibration")
    z = rng.normal(size=(n_latents, LogisticMaskParams.RANK))
    s = rng.normal(0.0, params.tau, size=n_latents)
    base = params.logits(z, s)
    delta = _bisect_delta(lambda d: float(_sigmoid(base + d).mean()), c, tol)
    params._delta_cache[key] = delta
    return delta


def _expand(coord_mask, t, d, axis) -> np.ndarray:
    if axis == "time":
        return np.repeat(coord_mask[:, :, None], d, axis=2)
    return coord_mask[:, None, :]


def logistic_mask(params: LogisticMaskParams, b, c, rng: Rng, t=None, d=None) -> MaskBatch:
    """Sample B masks at target completeness c from the logistic process."""
    delta = calibrate_delta(params, c)
    z = rng.normal(size=(b, LogisticMaskParams.RANK))
    s = rng.normal(0.0, params.tau, size=b)
    probs = _sigmoid(params.logits(z, s) + delta)
    coord_mask = (rng.random(probs.shape) < probs).astype(np.float64)
    if params.axis == "time":
        t = params.n_coords if t is None else t
        m = _expand(coord_mask, t, d, "time")
    else:
        d = params.n_coords if d is None else d
        m = _expand(coord_mask, t or 1, d, "feature")
    return MaskBatch(m, float(c))


def estimate_importance(train: Dataset) -> np.ndarray:
    """Per-coordinate importance profile on the training split, max-normalized.

    Synthetic processes expose their construction directly (binary indicator of
    label-relevant timesteps or coordinates). External data falls back to the
    magnitude of one-vs-rest label correlation per coordinate.
    """
    if train.kind == "tsim":
        q = np.zeros(train.t_len)
        q[train.gen_params["label_frames"]] = 1.0
        return q
    if train.kind == "tsim_rc":
        q = np.zeros(train.t_len)
        q[train.gen_params["label_timesteps"]] = 1.0
        return q
    if train.kind == "ssim":
        q = np.zeros(train.d)
        q[train.gen_params["support"]] = 1.0
        return q
    return _correlation_importance(train)


def _correlation_importance(train: Dataset) -> np.ndarray:
    x, y = train.X, train.y
    n = x.shape[0]
    onehot = np.zeros((n, train.n_classes))
    onehot[np.arange(n), y] = 1.0
    yc = onehot - onehot.mean(axis=0)
    y_sd = yc.std(axis=0)
    flat = x.reshape(n, -1)
    xc = flat - flat.mean(axis=0)
    x_sd = xc.std(axis=0)
    denom = np.outer(x_sd, y_sd)
    corr = np.zeros_like(denom)
    np.divide(xc.T @ yc / n, denom, out=corr, where=denom > 0)
    score = np.abs(corr).max(axis=1).reshape(train.t_len, train.d)
    q = score.mean(axis=1) if train.t_len > 1 else score[0]
    peak = q.max()
    return q / peak if peak > 0 else q


@dataclass
class MaskPrior:
    """Independent-Bernoulli product model over coordinates, fitted from
    calibration masks, resampled at any target completeness via a logit shift."""

    logits: np.ndarray       # [n_coords], clipped to +-LOGIT_CLIP
    axis: str
    _shift_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_coords(self) -> int:
        return self.logits.shape[0]

    def shift_for(self, c, tol=DELTA_TOL) -> float:
        if not 0.0 < c < 1.0:
            raise CalibrationError(f"completeness {c} must be in (0, 1)")
        key = (round(c, 12), tol)
        if key not in self._shift_cache:
            self._shift_cache[key] = _bisect_delta(
                lambda d: float(_sigmoid(self.logits + d).mean()), c, tol)
        return self._shift_cache[key]

    def sample(self, b, c, rng: Rng, t=None, d=None) -> MaskBatch:
        shift = self.shift_for(c)
        probs = _sigmoid(self.logits + shift)
        coord_mask = (rng.random((b, self.n_coords)) < probs).astype(np.float64)
        if self.axis == "time":
            m = _expand(coord_mask, self.n_coords if t is None else t, d, "time")
        else:
            m = _expand(coord_mask, t or 1, self.n_coords if d is None else d, "feature")
        return MaskBatch(m, float(c))


def fit_mask_prior(calibration_masks: MaskBatch, axis: str) -> MaskPrior:
    """Convert per-coordinate empirical observation frequencies to clipped logits."""
    m = calibration_masks.M
    if m.shape[0] == 0:
        raise ContractError("cannot fit a mask prior on an empty batch")
    if axis == "time":
        freq = m.mean(axis=(0, 2))
    elif axis == "feature":
        freq = m.mean(axis=(0, 1))
    else:
        raise ContractError(f"unknown prior axis {axis!r}")
    with np.errstate(divide="ignore"):
        logits = np.clip(_logit(np.clip(freq, 1e-12, 1 - 1e-12)),
                         -LOGIT_CLIP, LOGIT_CLIP)
    return MaskPrior(logits=logits, axis=axis)


@dataclass
class RightCensorFamily:
    """Direct sampling of prefix masks; no prior fitting involved."""
    t: int
    d: int

    def sample(self, b, c, rng: Rng = None, t=None, d=None) -> MaskBatch:
        return right_censor_mask(b, self.t, self.d, c)


@dataclass
class LogisticFamily:
    """Sampler adapter for a fixed logistic missingness process."""
    params: LogisticMaskParams

    def sample(self, b, c, rng: Rng, t=None, d=None) -> MaskBatch:
        return logistic_mask(self.params, b, c, rng, t=t, d=d)


def sample_training_mask(source, b, rng: Rng, t=None, d=None) -> MaskBatch:
    """Draw one training batch of coarse-view masks.

    Batch completeness is drawn uniformly from TRAIN_C_RANGE, then the mask
    source (a fitted MaskPrior or the predefined right-censor family) is
    sampled at that completeness.
    """
    lo, hi = TRAIN_C_RANGE
    c = float(rng.split("completeness").uniform(lo, hi))
    batch = source.sample(b, min(c, 1.0 - 1e-9) if isinstance(source, MaskPrior) else c,
                          rng.split("cells"), t=t, d=d)
    return MaskBatch(batch.M, c)
