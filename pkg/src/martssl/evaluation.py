"""Frozen-encoder evaluation: linear probing across completeness levels,
martingale-violation metrics, calibration diagnostics, completeness-adjusted
association, and the estimator-bias diagnostic.

Probes are trained on full-observation embeddings and tested on embeddings of
data masked by the benchmark's evaluation-time process, never by the training
mask prior. All operations here are read-only over the model bundle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import ndcore as nd
from .datagen import Dataset, oracle_conditional_sample
from .maskgen import EVAL_C_GRID, MaskBatch
from .model import (NOISE_SCALE, ModelBundle, encode, predict,
                    sample_refinements, stochastic_completion)
from .rng import Rng


class UnsupportedError(RuntimeError):
    pass


PROBE_EPOCHS = 10
PROBE_LR = 1e-2
PROBE_WD = 0.0
PROBE_BATCH = 1000
VIOLATION_K = 128


EMBED_CHUNK = 512


def embed(bundle: ModelBundle, x, mask: MaskBatch | None = None) -> np.ndarray:
    """Pooled eval-mode representations (deterministic, no dropout).

    Processed in chunks so intermediate activations stay cache-resident.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty((x.shape[0], bundle.rep_dim))
    for start in range(0, x.shape[0], EMBED_CHUNK):
        sl = slice(start, start + EMBED_CHUNK)
        m = MaskBatch(mask.M[sl], mask.target_c) if mask is not None else None
        z, _ = encode(bundle, x[sl], m, mode="eval")
        out[sl] = z.value
    return out


@dataclass
class ProbeResult:
    accuracy_by_c: dict          # completeness -> accuracy, including c = 1.0
    weights: dict                # probe parameters (w, b)

    @property
    def grid_accuracies(self) -> list:
        return [self.accuracy_by_c[c] for c in EVAL_C_GRID]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.grid_accuracies))

    @property
    def full_accuracy(self) -> float:
        return self.accuracy_by_c[1.0]


def fit_linear_probe(embeddings, labels, n_classes, rng: Rng,
                     epochs=PROBE_EPOCHS, lr=PROBE_LR, wd=PROBE_WD,
                     batch=PROBE_BATCH):
    """Multinomial linear head on frozen embeddings, trained with the
    decoupled-weight-decay adaptive-moment optimizer."""
    emb = np.asarray(embeddings, dtype=np.float64)
    n, d = emb.shape
    w = nd.param(np.zeros((d, n_classes)))
    b = nd.param(np.zeros(n_classes))
    opt = nd.AdamW({"w": w, "b": b}, lr=lr, weight_decay=wd)
    order_rng = rng.split("probe_batches")
    for epoch in range(epochs):
        perm = order_rng.split(f"e{epoch}").permutation(n)
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            logits = nd.add_bias(nd.matmul(nd.constant(emb[idx]), w), b)
            loss = nd.softmax_cross_entropy(logits, labels[idx])
            opt.zero_grad()
            nd.backward(loss)
            opt.step()
    return {"w": w.value.copy(), "b": b.value.copy()}


def probe_logits(weights, embeddings) -> np.ndarray:
    return np.asarray(embeddings) @ weights["w"] + weights["b"]


def probe_accuracy(weights, embeddings, labels) -> float:
    return float((probe_logits(weights, embeddings).argmax(axis=1) == labels).mean())


def train_probe(bundle: ModelBundle, train_ds: Dataset, test_ds: Dataset,
                eval_masker, rng: Rng, c_grid=EVAL_C_GRID) -> ProbeResult:
    """Probe on full-observation train embeddings, tested at each completeness
    using the benchmark's evaluation-time masking process."""
    weights = fit_linear_probe(embed(bundle, train_ds.X), train_ds.y,
                               train_ds.n_classes, rng)
    acc = {1.0: probe_accuracy(weights, embed(bundle, test_ds.X), test_ds.y)}
    for c in c_grid:
        m = eval_masker.sample(test_ds.n, c, rng.split(f"evalmask_c{c}"),
                               t=test_ds.t_len, d=test_ds.d)
        acc[c] = probe_accuracy(weights, embed(bundle, test_ds.X, m), test_ds.y)
    return ProbeResult(acc, weights)


def _refinement_outputs(bundle, x, mask, head, rng, n_draws, source,
                        ds: Dataset | None, noise_scale):
    """Head outputs (and pooled latents) of n_draws stochastic completions."""
    b = x.shape[0]
    x = np.asarray(x, dtype=np.float64)
    ns = NOISE_SCALE if noise_scale is None else noise_scale
    outs, lats = [], []
    if source == "imputer":
        for k in range(n_draws):
            _, z_p, z_u = stochastic_completion(bundle, x, mask, ns,
                                                rng.split(f"k{k}"), mode="eval")
            outs.append(_head_out(bundle, head, z_p, z_u))
            lats.append(z_p.value)
    elif source == "oracle":
        if ds is None or ds.kind == "external":
            raise UnsupportedError("oracle refinements need a synthetic dataset")
        draws = np.empty((n_draws, b) + x.shape[1:])
        for i in range(b):
            od = oracle_conditional_sample(ds, x[i], mask.M[i], n_draws,
                                           rng.split(f"sample{i}"))
            draws[:, i] = od.draws
        for k in range(n_draws):
            z_p, z_u = encode(bundle, draws[k], None, mode="eval")
            outs.append(_head_out(bundle, head, z_p, z_u))
            lats.append(z_p.value)
    else:
        raise UnsupportedError(f"unknown refinement source {source!r}")
    return np.stack(outs), np.stack(lats)


def _head_out(bundle, head, z_pooled, z_unpooled) -> np.ndarray:
    if head == "cls":
        return predict(bundle, z_pooled, "cls").value
    out = predict(bundle, z_unpooled, "rec").value
    return out.reshape(out.shape[0], -1)


def coarse_outputs(bundle: ModelBundle, x, mask: MaskBatch, head: str):
    z_p, z_u = encode(bundle, x, mask, mode="eval")
    return _head_out(bundle, head, z_p, z_u), z_p.value


def violation_pred(bundle: ModelBundle, x, mask: MaskBatch, head: str, rng: Rng,
                   k=VIOLATION_K, source="imputer", ds: Dataset | None = None,
                   noise_scale=None) -> float:
    """Mean squared gap between the coarse prediction and the K-draw mean of
    refined predictions, normalized by N and the output dimension."""
    if k < 2:
        raise nd.ContractError("K must be at least 2")
    u, _ = coarse_outputs(bundle, x, mask, head)
    vs, _ = _refinement_outputs(bundle, x, mask, head, rng, k, source, ds, noise_scale)
    gap = u - vs.mean(axis=0)
    return float((gap ** 2).sum() / (gap.shape[0] * gap.shape[1]))


def violation_lat(bundle: ModelBundle, x, mask: MaskBatch, rng: Rng,
                  noise_scale=None) -> float:
    """Two-completion inner-product violation in latent space, 1/(N d_z)
    normalized; may be negative on a finite batch."""
    pair = sample_refinements(bundle, x, mask, rng=rng, mode="eval",
                              noise_scale=noise_scale)
    z, za, zb = pair.z.value, pair.z_a.value, pair.z_b.value
    return float(((z - za) * (z - zb)).sum() / (z.shape[0] * z.shape[1]))


@dataclass
class ViolationCurve:
    v_pred: dict                 # completeness -> value
    v_lat: dict
    d_pred: int
    d_lat: int


def violation_curve(bundle: ModelBundle, test_ds: Dataset, eval_masker, head: str,
                    rng: Rng, c_grid=EVAL_C_GRID, k=VIOLATION_K,
                    n_samples=512, noise_scale=None) -> ViolationCurve:
    x = test_ds.X[:n_samples]
    v_pred, v_lat = {}, {}
    for c in c_grid:
        m = eval_masker.sample(x.shape[0], c, rng.split(f"mask_c{c}"),
                               t=test_ds.t_len, d=test_ds.d)
        v_pred[c] = violation_pred(bundle, x, m, head, rng.split(f"vp_c{c}"),
                                   k=k, noise_scale=noise_scale)
        v_lat[c] = violation_lat(bundle, x, m, rng.split(f"vl_c{c}"),
                                 noise_scale=noise_scale)
    d_pred = bundle.n_classes if head == "cls" else test_ds.t_len * test_ds.d
    return ViolationCurve(v_pred, v_lat, d_pred, bundle.rep_dim)


ECE_BINS = 10


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def ece(probs, labels, n_bins=ECE_BINS) -> float:
    """Expected calibration error with equal-width confidence bins on the
    maximum class probability."""
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    correct = (pred == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.digitize(conf, edges[1:-1]), 0, n_bins - 1)
    total = len(conf)
    out = 0.0
    for b in range(n_bins):
        sel = idx == b
        if sel.any():
            out += sel.sum() / total * abs(correct[sel].mean() - conf[sel].mean())
    return float(out)


def nll(probs, labels) -> float:
    p = np.clip(probs[np.arange(len(labels)), labels], 1e-300, None)
    return float(-np.log(p).mean())


@dataclass
class CalibrationResult:
    anytime_regret: dict         # completeness -> full-information accuracy deficit
    ece: dict
    nll: dict

    def mean(self, metric: str) -> float:
        return float(np.mean(list(getattr(self, metric).values())))


def calibration_metrics(bundle: ModelBundle, probe: ProbeResult, test_ds: Dataset,
                        eval_masker, rng: Rng, c_grid=EVAL_C_GRID) -> CalibrationResult:
    """Anytime regret, ECE, and NLL of the probe across completeness levels."""
    acc_full = probe.full_accuracy
    regret, ece_by_c, nll_by_c = {}, {}, {}
    for c in c_grid:
        m = eval_masker.sample(test_ds.n, c, rng.split(f"calmask_c{c}"),
                               t=test_ds.t_len, d=test_ds.d)
        logits = probe_logits(probe.weights, embed(bundle, test_ds.X, m))
        probs = _softmax(logits)
        acc = float((probs.argmax(axis=1) == test_ds.y).mean())
        regret[c] = acc_full - acc
        ece_by_c[c] = ece(probs, test_ds.y)
        nll_by_c[c] = nll(probs, test_ds.y)
    return CalibrationResult(regret, ece_by_c, nll_by_c)


def adjusted_spearman(accuracies, violations, c_grid=None):
    """Rank association between accuracy and violation with the completeness
    effect removed.

    Inputs are [n_levels, n_cells] arrays (cells are (method, seed) pairs).
    Within each level both quantities are ranked across cells and the per-level
    mean rank is subtracted; the pooled rank residuals are then correlated.
    Ranks are invariant to any monotone per-level transform, so ranking raw
    violations equals ranking their logarithms. Returns None when any level
    has constant ranks (undefined, reported as missing).
    """
    acc = np.asarray(accuracies, dtype=np.float64)
    vio = np.asarray(violations, dtype=np.float64)
    if acc.shape != vio.shape or acc.ndim != 2:
        raise ValueError("expected matching [n_levels, n_cells] arrays")
    if acc.shape[0] < 3 or acc.shape[1] < 2:
        raise ValueError("need at least 3 levels and 2 cells per level")
    ra = np.stack([rankdata(row) for row in acc])
    rv = np.stack([rankdata(row) for row in vio])
    if np.any(ra.std(axis=1) == 0) or np.any(rv.std(axis=1) == 0):
        return None
    ra = (ra - ra.mean(axis=1, keepdims=True)).ravel()
    rv = (rv - rv.mean(axis=1, keepdims=True)).ravel()
    denom = np.sqrt((ra ** 2).sum() * (rv ** 2).sum())
    if denom == 0:
        return None
    return float((ra * rv).sum() / denom)


@dataclass
class BiasDiagnostic:
    """Per-completeness batch-mean absolute discrepancies against a K-draw
    reference, for the single-sample plug-in and the two-sample estimator."""

    single: dict                 # completeness -> mean |batch L_single - batch L_ref|
    two: dict
    source: str
    k_ref: int = VIOLATION_K
    ess_flags: int = 0


def estimator_bias_diag(bundle: ModelBundle, test_ds: Dataset, eval_masker,
                        head: str, rng: Rng, c_grid=EVAL_C_GRID,
                        refine_source="imputer", k_ref=VIOLATION_K,
                        n_samples=256, batch=64, noise_scale=None) -> BiasDiagnostic:
    """Compare finite-sample estimators of the martingale error on a frozen
    model: reference ||u - mean of K draws||^2, naive ||u - v_a||^2, and the
    two-sample (u - v_a).(u - v_b); discrepancies of batch means, averaged
    over batches."""
    x_all = test_ds.X[:n_samples]
    single, two = {}, {}
    for c in c_grid:
        m_all = eval_masker.sample(x_all.shape[0], c, rng.split(f"mask_c{c}"),
                                   t=test_ds.t_len, d=test_ds.d)
        d_single, d_two = [], []
        for start in range(0, x_all.shape[0], batch):
            x = x_all[start:start + batch]
            mb = MaskBatch(m_all.M[start:start + batch], c)
            r = rng.split(f"c{c}_b{start}")
            u, _ = coarse_outputs(bundle, x, mb, head)
            vs, _ = _refinement_outputs(bundle, x, mb, head, r.split("ref"),
                                        k_ref, refine_source, test_ds, noise_scale)
            l_ref = ((u - vs.mean(axis=0)) ** 2).sum(axis=1)
            va, vb = _refinement_outputs(bundle, x, mb, head, r.split("est"),
                                         2, refine_source, test_ds, noise_scale)[0]
            l_single = ((u - va) ** 2).sum(axis=1)
            l_two = ((u - va) * (u - vb)).sum(axis=1)
            d_single.append(abs(l_single.mean() - l_ref.mean()))
            d_two.append(abs(l_two.mean() - l_ref.mean()))
        single[c] = float(np.mean(d_single))
        two[c] = float(np.mean(d_two))
    return BiasDiagnostic(single, two, refine_source, k_ref)
