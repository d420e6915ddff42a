"""Synthetic data-generating processes, splits, and oracle conditional sampling.

Three generator families share the measurement map phi(s) = s + alpha*tanh(s)
applied to a clean signal plus Gaussian noise:

* ``tsim_rc``   stable lower-triangular linear dynamics, labels concentrated on
                the last few timesteps (right-censoring removes them first)
* ``tsim``      independent per-timestep latent factors, labels read from a
                fixed set of frames and a fixed coordinate subset
* ``ssim``      static vectors with one shared factor plus per-coordinate pair
                factors; proxy coordinates share those factors so label signal
                is partially recoverable when the predictive set is masked

Because generation is fully known, a self-normalized importance sampler
(likelihood weighting) can draw completions of a partially observed sample,
which serves as a reference refinement source in diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .rng import Rng


class ConfigError(ValueError):
    pass


class UnsupportedError(RuntimeError):
    pass


SYNTHETIC_KINDS = ("tsim_rc", "tsim", "ssim")


@dataclass
class Dataset:
    X: np.ndarray                     # [N, T, D] float64
    y: np.ndarray                     # [N] int64, values in [0, K)
    kind: str                         # tsim_rc | tsim | ssim | external
    n_classes: int
    gen_params: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def t_len(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.X.shape[2]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.kind, self.n_classes,
                       self.gen_params, self.seed)


@dataclass
class SplitSpec:
    train_n: float
    priorfit_n: float
    test_n: float


def _phi(s, alpha):
    return s + alpha * np.tanh(s)


def _phi_inv(x, alpha, iters=40):
    """Invert s + alpha*tanh(s) = x coordinatewise by Newton (alpha > -1)."""
    if alpha == 0.0:
        return np.asarray(x, dtype=np.float64)
    s = np.asarray(x, dtype=np.float64).copy()
    for _ in range(iters):
        t = np.tanh(s)
        f = s + alpha * t - x
        s -= f / (1.0 + alpha * (1.0 - t * t))
    return s


def _stable_lower_triangular(d, rng: Rng, max_norm=1.2):
    """Lower-triangular transition with diagonal entries in [0.5, 0.9].

    Triangularity makes the spectral radius the largest diagonal entry, safely
    below 0.95 by construction; the strictly lower coupling part is shrunk
    only if the spectral norm gets large enough to cause wild transients.
    """
    a = np.zeros((d, d))
    np.fill_diagonal(a, rng.uniform(0.5, 0.9, size=d))
    low = np.tril(rng.normal(0.0, 0.3 / np.sqrt(d), size=(d, d)), k=-1)
    a_full = a + low
    while np.linalg.norm(a_full, 2) >= max_norm:
        low *= 0.8
        a_full = a + low
    return a_full


def _stationary_cov(a, sigma):
    """Sigma0 with A Sigma0 A^T + sigma^2 I = Sigma0."""
    return sla.solve_discrete_lyapunov(a, sigma ** 2 * np.eye(a.shape[0]))


TSIM_RC_T = 16
TSIM_RC_D = 16
TSIM_RC_WINDOW = 5
TSIM_T = 16
TSIM_D = 32
TSIM_K_FACTORS = 8
TSIM_LABEL_FRAMES = (8, 9, 10, 15)
SSIM_D = 16
N_CLASSES = 5
N_PREDICTIVE = 5
NOISE_SIGMA = 0.2
NONLIN_ALPHA = 0.2


def gen_tsim_rc(n, seed, alpha=NONLIN_ALPHA, sigma=NOISE_SIGMA) -> Dataset:
    """Causal linear dynamics with a bounded nonlinearity; five classes read
    from a weighted combination of the final timesteps."""
    rng = Rng(seed).split("tsim_rc")
    t_len, d = TSIM_RC_T, TSIM_RC_D
    a = _stable_lower_triangular(d, rng.split("transition"))
    cov0 = _stationary_cov(a, sigma)
    chol0 = np.linalg.cholesky(cov0)
    w_label = np.arange(1, TSIM_RC_WINDOW + 1, dtype=np.float64)
    w_label /= w_label.sum()
    # label reads the fast-mixing coordinates only: their late values are set
    # by recent dynamics (so right-censoring removes the direct signal first),
    # yet stay partly predictable from the persistent coordinates coupled in
    # through the triangular transition
    fast = np.argsort(np.diag(a))[:d // 2]
    w_rc = np.zeros((N_CLASSES, d))
    w_rc[:, fast] = rng.split("label_map").normal(size=(N_CLASSES, len(fast)))

    draws = rng.split("paths")
    x0 = draws.normal(size=(n, d)) @ chol0.T
    x = np.empty((n, t_len, d))
    state = x0
    for t in range(t_len):
        pre = state @ a.T + sigma * draws.normal(size=(n, d))
        state = _phi(pre, alpha)
        x[:, t, :] = state
    summary = np.tensordot(w_label, x[:, -TSIM_RC_WINDOW:, :], axes=(0, 1))
    y = np.argmax(summary @ w_rc.T, axis=1).astype(np.int64)
    params = dict(A=a, Sigma0=cov0, sigma=sigma, alpha=alpha,
                  W_label=w_rc, window_weights=w_label,
                  label_timesteps=np.arange(t_len - TSIM_RC_WINDOW, t_len))
    return Dataset(x, y, "tsim_rc", N_CLASSES, params, seed)


def gen_tsim(n, seed, alpha=NONLIN_ALPHA, sigma=NOISE_SIGMA) -> Dataset:
    """Independent latent factors per timestep; labels depend only on the
    frames in TSIM_LABEL_FRAMES and on a fixed 5-coordinate subset."""
    rng = Rng(seed).split("tsim")
    t_len, d, k = TSIM_T, TSIM_D, TSIM_K_FACTORS
    b_t = rng.split("loadings").normal(0.0, 1.0 / np.sqrt(k), size=(t_len, d, k))
    support = np.sort(rng.split("support").choice(d, size=N_PREDICTIVE, replace=False))
    w_st = rng.split("label_map").normal(size=(N_CLASSES, d))

    draws = rng.split("samples")
    z = draws.normal(size=(n, t_len, k))
    clean = np.einsum("ntk,tdk->ntd", z, b_t)
    pre = clean + sigma * draws.normal(size=(n, t_len, d))
    x = _phi(pre, alpha)
    y = label_tsim(x, support, w_st)
    params = dict(B_t=b_t, sigma=sigma, alpha=alpha, support=support,
                  W_label=w_st, label_frames=np.array(TSIM_LABEL_FRAMES))
    return Dataset(x, y, "tsim", N_CLASSES, params, seed)


def label_tsim(x, support, w_st):
    summary = np.tanh(x[:, TSIM_LABEL_FRAMES, :].mean(axis=1))
    masked = np.zeros_like(summary)
    masked[:, support] = summary[:, support]
    return np.argmax(masked @ w_st.T, axis=1).astype(np.int64)


def gen_ssim(n, seed, alpha=NONLIN_ALPHA, sigma=NOISE_SIGMA) -> Dataset:
    """Static tabular process: a shared factor plus per-coordinate pair factors.

    Predictive coordinates (the label support) and their proxy partners load on
    the same factors with positive unit-scale affine coefficients; the rest are
    independent standard normal. The label is a linear multiclass score
    supported only on the predictive set.
    """
    rng = Rng(seed).split("ssim")
    d, s = SSIM_D, N_PREDICTIVE
    perm = rng.split("support").permutation(d)
    support = np.sort(perm[:s])
    proxies = np.sort(perm[s:2 * s])
    coefs = rng.split("loadings")
    a_pred = coefs.uniform(0.5, 1.5, size=s)
    b_pred = coefs.uniform(0.5, 1.5, size=s)
    a_prox = coefs.uniform(0.5, 1.5, size=s)
    b_prox = coefs.uniform(0.5, 1.5, size=s)
    intercept = coefs.uniform(-0.5, 0.5, size=d)

    # clean = loadings @ latent + intercept, latent = (g, f_1..f_s, eta_noise)
    noise_coords = np.setdiff1d(np.arange(d), np.concatenate([support, proxies]))
    m = 1 + s + len(noise_coords)
    loadings = np.zeros((d, m))
    loadings[support, 0] = a_pred
    loadings[support, 1 + np.arange(s)] = b_pred
    loadings[proxies, 0] = a_prox
    loadings[proxies, 1 + np.arange(s)] = b_prox
    loadings[noise_coords, 1 + s + np.arange(len(noise_coords))] = 1.0

    w = np.zeros((N_CLASSES, d))
    w[:, support] = rng.split("label_map").normal(size=(N_CLASSES, s))

    draws = rng.split("samples")
    latent = draws.normal(size=(n, m))
    clean = latent @ loadings.T + intercept
    pre = clean + sigma * draws.normal(size=(n, d))
    x = _phi(pre, alpha)[:, None, :]
    y = np.argmax(x[:, 0, :] @ w.T, axis=1).astype(np.int64)
    params = dict(loadings=loadings, intercept=intercept, sigma=sigma,
                  alpha=alpha, support=support, proxies=proxies,
                  noise_coords=noise_coords, W_label=w)
    return Dataset(x, y, "ssim", N_CLASSES, params, seed)


_GENERATORS = {"tsim_rc": gen_tsim_rc, "tsim": gen_tsim, "ssim": gen_ssim}


def generate(kind, n, seed, **kwargs) -> Dataset:
    try:
        return _GENERATORS[kind](n, seed, **kwargs)
    except KeyError:
        raise ConfigError(f"unknown synthetic dataset kind {kind!r}") from None


def split(ds: Dataset, spec: SplitSpec, seed) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint shuffled index partition into (train, priorfit, test).

    Counts <= 1 are interpreted as fractions of N. A zero priorfit count yields
    an empty middle partition (the right-censored benchmark has none).
    """
    counts = []
    for c in (spec.train_n, spec.priorfit_n, spec.test_n):
        counts.append(int(round(c * ds.n)) if 0 < c <= 1 else int(c))
    if sum(counts) > ds.n:
        raise ConfigError(f"split {counts} oversubscribes N={ds.n}")
    perm = Rng(seed).split("split").permutation(ds.n)
    a, b, c = counts
    return (ds.subset(perm[:a]),
            ds.subset(perm[a:a + b]),
            ds.subset(perm[a + b:a + b + c]))


@dataclass
class OracleDraws:
    draws: np.ndarray        # [n_draws, T, D] completions for one sample
    ess: float               # effective sample size of the importance weights
    flagged: bool            # ess below the diagnostic threshold

    ESS_FLAG_THRESHOLD = 50.0


def _resample_merge(x_obs, mask, proposals, logw, clean, sigma, alpha,
                    n_draws, rng, fresh_noise):
    logw = logw - logw.max()
    w = np.exp(logw)
    w_sum = w.sum()
    probs = w / w_sum
    ess = float(w_sum ** 2 / (w * w).sum())
    idx = rng.choice(len(w), size=n_draws, replace=True, p=probs)
    draws = proposals[idx].copy()
    if fresh_noise:
        # regenerate measurement noise for missing coords given resampled latents
        miss = ~mask
        eps = sigma * rng.normal(size=(n_draws,) + x_obs.shape)
        regen = _phi(clean[idx] + eps, alpha)
        draws[:, miss] = regen[:, miss]
    draws[:, mask] = x_obs[mask]
    return draws, ess


def _oracle_ssim(params, x_obs, mask, n_draws, n_prop, rng):
    loadings, intercept = params["loadings"], params["intercept"]
    sigma, alpha = params["sigma"], params["alpha"]
    d, m = loadings.shape
    obs = mask[0]
    latent = rng.normal(size=(n_prop, m))
    clean = latent @ loadings.T + intercept
    s_obs = _phi_inv(x_obs[0, obs], alpha)
    logw = -0.5 * ((s_obs[None, :] - clean[:, obs]) ** 2).sum(axis=1) / sigma ** 2
    return _resample_merge(x_obs, mask, clean[:, None, :], logw,
                           clean[:, None, :], sigma, alpha, n_draws, rng,
                           fresh_noise=True)


def _oracle_tsim(params, x_obs, mask, n_draws, n_prop, rng):
    """Frames are independent, so each is importance-sampled on its own pool."""
    b_t, sigma, alpha = params["B_t"], params["sigma"], params["alpha"]
    t_len, d, k = b_t.shape
    draws = np.empty((n_draws, t_len, d))
    ess_min = np.inf
    for t in range(t_len):
        z = rng.normal(size=(n_prop, k))
        clean = z @ b_t[t].T
        obs = mask[t]
        if obs.any():
            s_obs = _phi_inv(x_obs[t, obs], alpha)
            logw = -0.5 * ((s_obs[None, :] - clean[:, obs]) ** 2).sum(axis=1) / sigma ** 2
        else:
            logw = np.zeros(n_prop)
        frame, ess = _resample_merge(x_obs[t][None, :], obs[None, :],
                                     clean[:, None, :], logw, clean[:, None, :],
                                     sigma, alpha, n_draws, rng, fresh_noise=True)
        draws[:, t, :] = frame[:, 0, :]
        ess_min = min(ess_min, ess)
    return draws, ess_min


def _oracle_tsim_rc(params, x_obs, mask, n_draws, n_prop, rng):
    """Likelihood weighting along the dynamics: observed cells are clamped and
    contribute Gaussian weights against the proposal's predicted mean; missing
    cells are rolled forward from the prior."""
    a, cov0 = params["A"], params["Sigma0"]
    sigma, alpha = params["sigma"], params["alpha"]
    t_len, d = x_obs.shape
    chol0 = np.linalg.cholesky(cov0)
    state = rng.normal(size=(n_prop, d)) @ chol0.T
    paths = np.empty((n_prop, t_len, d))
    logw = np.zeros(n_prop)
    for t in range(t_len):
        m_t = state @ a.T
        obs = mask[t]
        new_state = np.empty_like(state)
        if obs.any():
            s_obs = _phi_inv(x_obs[t, obs], alpha)
            logw += -0.5 * ((s_obs[None, :] - m_t[:, obs]) ** 2).sum(axis=1) / sigma ** 2
            new_state[:, obs] = x_obs[t, obs]
        miss = ~obs
        if miss.any():
            pre = m_t[:, miss] + sigma * rng.normal(size=(n_prop, miss.sum()))
            new_state[:, miss] = _phi(pre, alpha)
        paths[:, t, :] = new_state
        state = new_state
    return _resample_merge(x_obs, mask, paths, logw, paths, sigma, alpha,
                           n_draws, rng, fresh_noise=False)


_ORACLES = {"ssim": _oracle_ssim, "tsim": _oracle_tsim, "tsim_rc": _oracle_tsim_rc}

ORACLE_PROPOSALS = 4096


def oracle_conditional_sample(ds: Dataset, x_coarse, mask, n_draws, rng: Rng,
                              n_proposals=ORACLE_PROPOSALS):
    """Draw completions of one partially observed sample from the known process.

    ``x_coarse`` and ``mask`` are [T, D]; observed coordinates of every draw
    equal x_coarse exactly. Returns OracleDraws with the effective sample size
    of the importance weights; low-ESS calls are flagged, not failed.
    """
    if ds.kind not in _ORACLES:
        raise UnsupportedError(f"oracle sampling needs a synthetic process, got {ds.kind!r}")
    x_coarse = np.asarray(x_coarse, dtype=np.float64)
    mask_b = np.asarray(mask).astype(bool)
    if x_coarse.shape != mask_b.shape or x_coarse.shape != (ds.t_len, ds.d):
        raise ConfigError(f"oracle sampler expects [T, D] inputs, got {x_coarse.shape}")
    if mask_b.all():
        return OracleDraws(np.repeat(x_coarse[None], n_draws, axis=0), float(n_proposals), False)
    draws, ess = _ORACLES[ds.kind](ds.gen_params, x_coarse, mask_b, n_draws,
                                   n_proposals, rng)
    return OracleDraws(draws, ess, ess < OracleDraws.ESS_FLAG_THRESHOLD)
