"""Training objectives: predictive terms, imputation, two-sample martingale
penalties in prediction and latent space, the warmup-ramp schedule, the total
objective, and contrastive/bootstrap baselines with a latent add-on.

The martingale penalty estimates || u - E[v | coarse view] ||^2 without the
plug-in bias of a finite Monte Carlo average: with two conditionally
independent refinements, mean_i (u_i - v_a_i)^T (u_i - v_b_i) has exactly that
conditional expectation. Individual batch values may be negative; that is the
price of unbiasedness, not a bug, and they are passed to the optimizer
unclipped unless a clip is configured.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .maskgen import MaskBatch, MaskPrior, sample_training_mask
from .model import ModelBundle, RefinedPair, encode, ema_update, predict, sample_refinements
from .rng import Rng


class ConfigError(ValueError):
    pass


EPS_IMP = 1e-8

VARIANTS = ("base", "base_imp", "mart_pred", "mart_pred_ema",
            "mart_latent", "mart_latent_ema")
CONTRASTIVE_VARIANTS = ("simclr", "simclr_imp", "simclr_mart_latent",
                        "byol", "byol_imp", "byol_mart_latent")
MODES = ("semi", "fully")


@dataclass
class LossWeights:
    lam_imp: float = 0.0
    lam_mart: float = 0.0
    warmup_steps: int = 100
    ramp_steps: int = 400
    mart_clip: float | None = None

    def gamma(self, step: int) -> float:
        """0 during warmup, linear over the ramp, 1 afterwards."""
        if step < self.warmup_steps:
            return 0.0
        if self.ramp_steps <= 0:
            return 1.0
        return min(1.0, (step - self.warmup_steps) / self.ramp_steps)

    def effective_mart(self, step: int) -> float:
        return self.lam_mart * self.gamma(step)


@dataclass
class ContrastiveParams:
    proj_widths: tuple = (32, 128, 64)
    temperature: float = 0.1
    predictor_widths: tuple = (64, 256, 64)
    target_decay: float = 0.99


def loss_pred_cls(bundle: ModelBundle, x_full, y, mode="train", rng=None) -> nd.Node:
    """Cross-entropy of the classification head on the fully observed view."""
    z, _ = encode(bundle, x_full, None, mode, rng)
    return nd.softmax_cross_entropy(predict(bundle, z, "cls"), y)


def loss_pred_rec(bundle: ModelBundle, x_full, mode="train", rng=None) -> nd.Node:
    """Mean squared reconstruction error over all B*T*D coordinates of the
    fully observed view."""
    _, z_u = encode(bundle, x_full, None, mode, rng)
    err = nd.sub(predict(bundle, z_u, "rec"), nd.constant(x_full))
    return nd.mean_(nd.mul(err, err))


def loss_imp(bundle: ModelBundle, x_full, mask: MaskBatch, mode="train",
             rng=None, coarse=None) -> nd.Node:
    """Imputer squared error on genuinely missing coordinates only, normalized
    by the missing count plus a small epsilon (zero when nothing is missing)."""
    x_np = np.asarray(x_full, dtype=np.float64)
    miss = 1.0 - mask.M
    _, z_u = coarse if coarse is not None else encode(bundle, x_np, mask, mode, rng)
    err = nd.mul(nd.sub(predict(bundle, z_u, "imp"), nd.constant(x_np)),
                 nd.constant(miss))
    return nd.mul(nd.sum_(nd.mul(err, err)), 1.0 / (miss.sum() + EPS_IMP))


def mart_two_sample(u: nd.Node, v_a: nd.Node, v_b: nd.Node,
                    mart_clip=None) -> nd.Node:
    """Batch mean of per-sample (u - v_a) . (u - v_b).

    Unbiased for the squared deviation from the conditional-expectation
    identity when v_a, v_b are conditionally independent refinements; may be
    negative on a finite batch.
    """
    if not (u.shape == v_a.shape == v_b.shape) or u.ndim != 2:
        raise nd.DimensionError(
            f"two-sample estimator expects matching [B, d]: {u.shape}, {v_a.shape}, {v_b.shape}")
    per_sample = nd.sum_(nd.mul(nd.sub(u, v_a), nd.sub(u, v_b)), axis=1)
    out = nd.mean_(per_sample)
    if mart_clip is not None:
        out = nd.clip_(out, -mart_clip, mart_clip)
    return out


def mart_nonnested(u1: nd.Node, u2: nd.Node, u_cap_a: nd.Node, u_cap_b: nd.Node,
                   mart_clip=None) -> nd.Node:
    """Cross estimator for two overlapping (non-nested) views.

    With draw a producing predictions (u1, u_cap_a) for the two views and draw
    b producing (u2, u_cap_b), conditionally independent given the shared
    information, mean_i (u1 - u_cap_a) . (u2 - u_cap_b) is unbiased for the
    squared gap between the two views' conditional mean predictions. When the
    first view is contained in the second, u1 == u2 and this reduces to the
    nested two-sample estimator.
    """
    shapes = {u1.shape, u2.shape, u_cap_a.shape, u_cap_b.shape}
    if len(shapes) != 1 or u1.ndim != 2:
        raise nd.DimensionError(f"non-nested estimator expects matching [B, d], got {shapes}")
    per_sample = nd.sum_(nd.mul(nd.sub(u1, u_cap_a), nd.sub(u2, u_cap_b)), axis=1)
    out = nd.mean_(per_sample)
    if mart_clip is not None:
        out = nd.clip_(out, -mart_clip, mart_clip)
    return out


def _flatten_head(out: nd.Node) -> nd.Node:
    if out.ndim == 2:
        return out
    b = out.shape[0]
    return nd.reshape(out, (b, int(np.prod(out.shape[1:]))))


def mart_loss(bundle: ModelBundle, x, mask: MaskBatch, space: str,
              target_params: str, rng: Rng, mode="semi", run_mode="train",
              noise_scale=None, mart_clip=None, pair: RefinedPair | None = None,
              coarse=None) -> nd.Node:
    """Martingale penalty for one batch.

    space "pred" compares head outputs of the coarse view against two refined
    completions (head selected by the objective mode: cls for semi, rec for
    fully); space "latent" compares pooled representations directly. With
    target_params "ema" the refined branch is computed with shadow weights and
    detached, so it moves only through ema_update.
    """
    if space not in ("pred", "latent"):
        raise ConfigError(f"unknown martingale space {space!r}")
    if target_params not in ("online", "ema"):
        raise ConfigError(f"unknown target_params {target_params!r}")
    head = "cls" if mode == "semi" else "rec"
    if target_params == "ema":
        needed = f"{head}." if space == "pred" else "enc."
        if not any(k.startswith(needed) for k in bundle.ema):
            raise ConfigError(f"EMA requested but no shadow for {needed}* parameters")
    if pair is None:
        if space == "pred":
            refined = "online" if target_params == "online" else "online_frozen"
        else:
            refined = "online" if target_params == "online" else "ema"
        kwargs = {} if noise_scale is None else {"noise_scale": noise_scale}
        pair = sample_refinements(bundle, x, mask, rng=rng, mode=run_mode,
                                  refined_params=refined, coarse=coarse, **kwargs)
    if space == "latent":
        return mart_two_sample(pair.z, pair.z_a, pair.z_b, mart_clip)
    which_target = "ema" if target_params == "ema" else "online"
    if head == "cls":
        u = predict(bundle, pair.z, "cls")
        v_a = predict(bundle, pair.z_a, "cls", which_target)
        v_b = predict(bundle, pair.z_b, "cls", which_target)
    else:
        u = _flatten_head(predict(bundle, pair.z_unpooled, "rec"))
        v_a = _flatten_head(predict(bundle, pair.z_a_unpooled, "rec", which_target))
        v_b = _flatten_head(predict(bundle, pair.z_b_unpooled, "rec", which_target))
    if which_target == "ema":
        v_a, v_b = nd.stopgrad(v_a), nd.stopgrad(v_b)
    return mart_two_sample(u, v_a, v_b, mart_clip)


_VARIANT_TERMS = {
    "base": (False, None, None),
    "base_imp": (True, None, None),
    "mart_pred": (True, "pred", "online"),
    "mart_pred_ema": (True, "pred", "ema"),
    "mart_latent": (True, "latent", "online"),
    "mart_latent_ema": (True, "latent", "ema"),
}


def total_loss(bundle: ModelBundle, x, y, mask: MaskBatch, weights: LossWeights,
               step: int, variant: str, mode: str, rng: Rng,
               noise_scale=None, run_mode="train"):
    """Combined objective L_pred + lam_imp * L_imp + gamma(step) * lam_mart * L_mart.

    Returns (scalar loss node, per-term breakdown dict). Term inclusion follows
    the variant: base drops both auxiliary terms, base_imp keeps imputation
    only, mart_* add the penalty in the stated space with online or EMA
    targets.
    """
    if variant not in _VARIANT_TERMS:
        raise ConfigError(f"unknown variant {variant!r}")
    if mode not in MODES:
        raise ConfigError(f"unknown objective mode {mode!r}")
    with_imp, space, target = _VARIANT_TERMS[variant]
    if mode == "semi":
        pred = loss_pred_cls(bundle, x, y, run_mode, rng.split("pred"))
    else:
        pred = loss_pred_rec(bundle, x, run_mode, rng.split("pred"))
    total = pred
    breakdown = {"pred": float(pred.value), "imp": 0.0, "mart": 0.0,
                 "gamma": weights.gamma(step)}
    coarse = None
    if (with_imp and weights.lam_imp > 0) or (space is not None and weights.lam_mart > 0):
        coarse = encode(bundle, np.asarray(x, dtype=np.float64), mask, run_mode,
                        rng.split("coarse"))
    if with_imp and weights.lam_imp > 0:
        imp = loss_imp(bundle, x, mask, run_mode, rng.split("imp"), coarse=coarse)
        total = nd.add(total, nd.mul(imp, weights.lam_imp))
        breakdown["imp"] = float(imp.value)
    lam_eff = weights.effective_mart(step)
    if space is not None and weights.lam_mart > 0:
        mart = mart_loss(bundle, x, mask, space, target, rng.split("mart"),
                         mode=mode, run_mode=run_mode, noise_scale=noise_scale,
                         mart_clip=weights.mart_clip, coarse=coarse)
        breakdown["mart"] = float(mart.value)
        if lam_eff > 0:
            total = nd.add(total, nd.mul(mart, lam_eff))
    breakdown["total"] = float(total.value)
    return total, breakdown


def _proj_mlp(bundle, prefix, z, n_layers):
    h = z
    for i in range(n_layers):
        h = nd.add_bias(nd.matmul(h, bundle.params[f"{prefix}.l{i}.w"]),
                        bundle.params[f"{prefix}.l{i}.b"])
        if i < n_layers - 1:
            h = nd.relu(h)
    return h


def _proj_mlp_ema(bundle, prefix, z, n_layers):
    h = z
    for i in range(n_layers):
        h = nd.add_bias(nd.matmul(h, nd.constant(bundle.ema[f"{prefix}.l{i}.w"])),
                        nd.constant(bundle.ema[f"{prefix}.l{i}.b"]))
        if i < n_layers - 1:
            h = nd.relu(h)
    return h


def contrastive_extras(params: ContrastiveParams, byol=False):
    """(prefix, d_in, d_out) triples for the projection / predictor MLPs."""
    extras = []
    pw = params.proj_widths
    for i in range(len(pw) - 1):
        extras.append((f"proj.l{i}", pw[i], pw[i + 1]))
    if byol:
        qw = params.predictor_widths
        for i in range(len(qw) - 1):
            extras.append((f"predh.l{i}", qw[i], qw[i + 1]))
    return extras


def nt_xent(embeddings: nd.Node, temperature: float) -> nd.Node:
    """Normalized-temperature cross-entropy over 2B stacked views.

    Row i's positive is row (i + B) mod 2B; the diagonal is excluded. Cosine
    similarity via row normalization makes the loss scale invariant.
    """
    n = embeddings.shape[0]
    if n < 4 or n % 2:
        raise ConfigError("contrastive batch needs at least 2 samples (4 views)")
    z = nd.l2_normalize(embeddings)
    sims = nd.mul(nd.matmul(z, nd.transpose(z)), 1.0 / temperature)
    sims = nd.add(sims, nd.constant(np.diag(np.full(n, -1e9))))
    b = n // 2
    partners = np.concatenate([np.arange(b) + b, np.arange(b)])
    return nd.softmax_cross_entropy(sims, partners)


def _two_views(bundle, x, prior: MaskPrior, rng: Rng, run_mode):
    b, t, d = np.asarray(x).shape
    views = []
    for name in ("view_a", "view_b"):
        r = rng.split(name)
        m = sample_training_mask(prior, b, r.split("mask"), t=t, d=d)
        z, _ = encode(bundle, x, m, run_mode, r.split("enc"))
        views.append(z)
    return views


def loss_simclr(bundle: ModelBundle, x, prior: MaskPrior, params: ContrastiveParams,
                rng: Rng, run_mode="train") -> nd.Node:
    """Contrastive loss over two independently masked views of each sample."""
    za, zb = _two_views(bundle, x, prior, rng, run_mode)
    n_layers = len(params.proj_widths) - 1
    pa = _proj_mlp(bundle, "proj", za, n_layers)
    pb = _proj_mlp(bundle, "proj", zb, n_layers)
    return nt_xent(nd.concat0([pa, pb]), params.temperature)


def loss_byol(bundle: ModelBundle, x, prior: MaskPrior, params: ContrastiveParams,
              rng: Rng, run_mode="train") -> nd.Node:
    """Bootstrap loss: predictor outputs regress normalized EMA-target
    projections of the other view; both directions averaged."""
    x_np = np.asarray(x, dtype=np.float64)
    b, t, d = x_np.shape
    n_proj = len(params.proj_widths) - 1
    n_pred = len(params.predictor_widths) - 1
    sides = []
    for name in ("view_a", "view_b"):
        r = rng.split(name)
        m = sample_training_mask(prior, b, r.split("mask"), t=t, d=d)
        z_on, _ = encode(bundle, x_np, m, run_mode, r.split("enc"))
        q = _proj_mlp(bundle, "predh", _proj_mlp(bundle, "proj", z_on, n_proj), n_pred)
        z_tg, _ = encode(bundle, x_np, m, "eval", which="ema")
        p_tg = _proj_mlp_ema(bundle, "proj", z_tg, n_proj)
        sides.append((q, nd.stopgrad(p_tg)))
    (qa, ta), (qb, tb) = sides
    la = nd.sub(nd.l2_normalize(qa), nd.l2_normalize(tb))
    lb = nd.sub(nd.l2_normalize(qb), nd.l2_normalize(ta))
    per = nd.add(nd.sum_(nd.mul(la, la), axis=1), nd.sum_(nd.mul(lb, lb), axis=1))
    return nd.mul(nd.mean_(per), 0.5)


def byol_target_update(bundle: ModelBundle, params: ContrastiveParams) -> None:
    ema_update(bundle, params.target_decay)
