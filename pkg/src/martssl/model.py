"""Encoder, heads, imputer, stochastic refinement, and EMA shadow parameters.

The encoder is a per-timestep MLP applied to the masked input x * M; pooled
representations are masked means over timesteps with at least one observed
feature. The imputer is a linear readout (shared across timesteps) from the
per-timestep representation of a noise-perturbed coarse view; merging its
output onto the missing coordinates of x yields a stochastic completion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .maskgen import MaskBatch
from .rng import Rng


class ConfigError(ValueError):
    pass


ENCODER_WIDTHS = (128, 64, 32)
DROPOUT_RATE = 0.1
NOISE_SCALE = 0.25

PARAM_MODES = ("online", "online_frozen", "ema")


def _init_linear(params, prefix, d_in, d_out, rng: Rng):
    scale = np.sqrt(2.0 / d_in)
    params[f"{prefix}.w"] = nd.param(rng.normal(0.0, scale, size=(d_in, d_out)))
    params[f"{prefix}.b"] = nd.param(np.zeros(d_out))


class ModelBundle:
    """Named parameter collections for one training run.

    Heads are created on demand: ``cls`` (pooled representation to class
    logits), ``rec`` (per-timestep representation back to the feature space,
    shared across timesteps), and ``imputer`` (same shape as rec). EMA shadows
    mirror a chosen subset of parameters and are updated only by ema_update.
    """

    def __init__(self, d_in, n_classes, rng: Rng, widths=ENCODER_WIDTHS,
                 dropout_rate=DROPOUT_RATE, with_cls=True, with_rec=True,
                 with_imputer=True, extras=()):
        self.d_in = int(d_in)
        self.n_classes = int(n_classes)
        self.widths = tuple(widths)
        self.rep_dim = self.widths[-1]
        self.dropout_rate = float(dropout_rate)
        self.params: dict[str, nd.Node] = {}
        dims = (self.d_in,) + self.widths
        for i in range(len(self.widths)):
            _init_linear(self.params, f"enc.l{i}", dims[i], dims[i + 1], rng.split(f"enc{i}"))
        if with_cls:
            _init_linear(self.params, "cls", self.rep_dim, n_classes, rng.split("cls"))
        if with_rec:
            _init_linear(self.params, "rec", self.rep_dim, d_in, rng.split("rec"))
        if with_imputer:
            _init_linear(self.params, "imp", self.rep_dim, d_in, rng.split("imp"))
        for prefix, d_a, d_b in extras:
            _init_linear(self.params, prefix, d_a, d_b, rng.split(prefix))
        self.ema: dict[str, np.ndarray] = {}

    def has(self, prefix: str) -> bool:
        return f"{prefix}.w" in self.params

    def init_ema(self, prefixes) -> None:
        """Shadow the given parameter groups, starting as exact copies."""
        for name, p in self.params.items():
            if any(name.startswith(pre) for pre in prefixes):
                self.ema[name] = p.value.copy()

    def fetch(self, name: str, which: str) -> nd.Node:
        if which == "online":
            return self.params[name]
        if which == "online_frozen":
            return nd.constant(self.params[name].value)
        if which == "ema":
            if name not in self.ema:
                raise ConfigError(f"no EMA shadow for parameter {name!r}")
            return nd.constant(self.ema[name])
        raise ConfigError(f"unknown parameter mode {which!r}")

    def parameter_count(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self.params[k].value = np.asarray(v, dtype=np.float64).copy()


def ema_update(bundle: ModelBundle, tau_ema: float) -> None:
    """Shadow <- tau * shadow + (1 - tau) * online, per parameter."""
    if not 0.0 <= tau_ema < 1.0:
        raise nd.DomainError(f"EMA decay {tau_ema} outside [0, 1)")
    for name, shadow in bundle.ema.items():
        shadow *= tau_ema
        shadow += (1.0 - tau_ema) * bundle.params[name].value


def timestep_obs(mask: MaskBatch) -> np.ndarray:
    """A timestep counts as observed for pooling iff any feature in it is."""
    return (mask.M.max(axis=2) > 0).astype(np.float64)


def _mlp(bundle: ModelBundle, x: nd.Node, mode: str, rng, which: str) -> nd.Node:
    b, t, _ = x.shape
    h = nd.reshape(x, (b * t, x.shape[2]))
    n_layers = len(bundle.widths)
    for i in range(n_layers):
        h = nd.add_bias(nd.matmul(h, bundle.fetch(f"enc.l{i}.w", which)),
                        bundle.fetch(f"enc.l{i}.b", which))
        if i < n_layers - 1:
            h = nd.gelu(h)
            if mode == "train":
                h = nd.dropout(h, bundle.dropout_rate, rng.split(f"drop{i}"), training=True)
    return nd.reshape(h, (b, t, bundle.rep_dim))


def encode(bundle: ModelBundle, x, mask: MaskBatch | None, mode="eval",
           rng: Rng | None = None, which="online"):
    """Representations of a (possibly masked) batch.

    Returns (pooled [B, rep], unpooled [B, T, rep]). With a mask the encoder
    sees x * M and pools over observed timesteps; mask=None means the input is
    treated as fully observed. Dropout is active only in train mode.
    """
    if mode == "train" and rng is None:
        raise ConfigError("train-mode encoding needs an rng for dropout")
    x = nd.constant(x)
    if mask is not None:
        x = nd.mul(x, nd.constant(mask.M))
        obs = timestep_obs(mask)
    else:
        obs = np.ones(x.shape[:2])
    unpooled = _mlp(bundle, x, mode, rng, which)
    pooled = nd.masked_mean_pool(unpooled, obs)
    return pooled, unpooled


def predict(bundle: ModelBundle, z: nd.Node, head: str, which="online") -> nd.Node:
    """Apply a head: cls on pooled [B, rep] -> [B, K]; rec/imp on unpooled
    [B, T, rep] -> [B, T, D] with the same linear map at every timestep."""
    if head not in ("cls", "rec", "imp"):
        raise ConfigError(f"unknown head {head!r}")
    if not bundle.has(head):
        raise ConfigError(f"bundle has no {head!r} head")
    w = bundle.fetch(f"{head}.w", which)
    bvec = bundle.fetch(f"{head}.b", which)
    if head == "cls":
        return nd.add_bias(nd.matmul(z, w), bvec)
    b, t, r = z.shape
    flat = nd.add_bias(nd.matmul(nd.reshape(z, (b * t, r)), w), bvec)
    return nd.reshape(flat, (b, t, bundle.d_in))


@dataclass
class RefinedPair:
    """Coarse representation plus two stochastic completions of the same batch.

    Observed coordinates of both completions equal the original x exactly; the
    two branches use rng streams with distinct names, recorded for bookkeeping.
    """

    x_hat_a: nd.Node         # [B, T, D]
    x_hat_b: nd.Node
    z: nd.Node               # pooled coarse representation [B, rep]
    z_a: nd.Node
    z_b: nd.Node
    z_unpooled: nd.Node      # [B, T, rep] counterparts for per-timestep heads
    z_a_unpooled: nd.Node
    z_b_unpooled: nd.Node
    noise_scale: float
    stream_a: tuple
    stream_b: tuple


def stochastic_completion(bundle: ModelBundle, x_np, mask: MaskBatch, noise_scale,
                          rng: Rng, mode="train", refined_params="online"):
    """One stochastic completion of a coarse view.

    Gaussian noise (scale noise_scale) perturbs the missing coordinates, the
    imputer fills them from the per-timestep representation of that noised
    view, and observed coordinates are copied from x verbatim. Returns
    (x_hat, pooled, unpooled) with the completion encoded as fully observed.
    """
    miss = 1.0 - mask.M
    xm = x_np * mask.M
    xi = rng.normal(0.0, noise_scale, size=x_np.shape) if noise_scale > 0 else 0.0
    x_tilde = nd.constant(xm + xi * miss)
    z_tilde = _mlp(bundle, x_tilde, mode, rng, "online")
    imputed = predict(bundle, z_tilde, "imp", "online")
    x_hat = nd.add(nd.constant(xm), nd.mul(imputed, nd.constant(miss)))
    if refined_params != "online":
        x_hat_enc = nd.stopgrad(x_hat)
    else:
        x_hat_enc = x_hat
    unpooled = _mlp(bundle, x_hat_enc, mode, rng.split("enc"), refined_params)
    pooled = nd.masked_mean_pool(unpooled, np.ones(x_np.shape[:2]))
    return x_hat, pooled, unpooled


def sample_refinements(bundle: ModelBundle, x, mask: MaskBatch,
                       noise_scale=NOISE_SCALE, rng: Rng | None = None,
                       mode="train", refined_params="online",
                       coarse=None) -> RefinedPair:
    """Build two conditionally independent completions and encode all views.

    ``refined_params`` selects the weights used to encode the completions:
    "online" differentiates the refined branch end to end, "online_frozen" and
    "ema" detach it entirely (the completions are still built with the online
    imputer, but no gradient flows through the target path). A precomputed
    coarse encoding (pooled, unpooled) can be passed to avoid recomputation.
    """
    if noise_scale < 0:
        raise nd.DomainError("noise_scale must be nonnegative")
    if refined_params not in PARAM_MODES:
        raise ConfigError(f"unknown refined_params {refined_params!r}")
    x_np = x.value if isinstance(x, nd.Node) else np.asarray(x, dtype=np.float64)
    rng = rng if rng is not None else Rng(0)
    rng_a, rng_b = rng.split("refine_a"), rng.split("refine_b")
    if coarse is None:
        coarse = encode(bundle, x_np, mask, mode, rng.split("coarse"))
    z, z_unpooled = coarse

    # both branches ride one stacked [2B, T, D] pass; their refinement noise
    # still comes from the two distinct named streams
    b = x_np.shape[0]
    miss = 1.0 - mask.M
    xm = x_np * mask.M
    def noised(r):
        if noise_scale == 0:
            return xm
        return xm + r.normal(0.0, noise_scale, size=x_np.shape) * miss
    x_tilde2 = nd.constant(np.concatenate([noised(rng_a), noised(rng_b)]))
    z_tilde2 = _mlp(bundle, x_tilde2, mode, rng.split("noised_pair"), "online")
    imputed2 = predict(bundle, z_tilde2, "imp", "online")
    x_hat2 = nd.add(nd.constant(np.concatenate([xm, xm])),
                    nd.mul(imputed2, nd.constant(np.concatenate([miss, miss]))))
    x_hat_enc = nd.stopgrad(x_hat2) if refined_params != "online" else x_hat2
    unpooled2 = _mlp(bundle, x_hat_enc, mode, rng.split("refined_pair"), refined_params)
    pooled2 = nd.masked_mean_pool(unpooled2, np.ones((2 * b, x_np.shape[1])))
    xa, xb = nd.slice0(x_hat2, 0, b), nd.slice0(x_hat2, b, 2 * b)
    za, zb = nd.slice0(pooled2, 0, b), nd.slice0(pooled2, b, 2 * b)
    za_u, zb_u = nd.slice0(unpooled2, 0, b), nd.slice0(unpooled2, b, 2 * b)
    return RefinedPair(xa, xb, z, za, zb, z_unpooled, za_u, zb_u,
                       float(noise_scale), rng_a.path, rng_b.path)
