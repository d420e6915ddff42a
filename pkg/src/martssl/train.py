"""Deterministic training runs: configuration, the step loop, persistence,
and the regularization-weight sweep.

A RunConfig fully determines a run; its canonical JSON hash names the run
directory, and executing the same config twice reproduces every metric byte
for byte (wall times live in a separate, explicitly nondeterministic file).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import ndcore as nd
from .datagen import Dataset, SplitSpec, generate, split
from .evaluation import (CalibrationResult, ProbeResult, ViolationCurve,
                         calibration_metrics, embed, fit_linear_probe,
                         probe_accuracy, train_probe, violation_curve)
from .ingest import ingest_table
from .maskgen import (EVAL_C_GRID, LogisticFamily, LogisticMaskParams,
                      MaskPrior, RightCensorFamily, estimate_importance,
                      fit_mask_prior, logistic_mask, sample_training_mask)
from .model import ModelBundle, ema_update
from .objectives import (CONTRASTIVE_VARIANTS, MODES, VARIANTS,
                         ContrastiveParams, LossWeights, contrastive_extras,
                         loss_byol, loss_imp, loss_simclr, mart_loss,
                         total_loss)
from .rng import Rng


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step, breakdown):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown


CONFIG_SCHEMA_VERSION = 1

DATASET_DEFAULTS = {
    "tsim_rc": dict(n=6000, split=(3000, 0, 3000)),
    "tsim": dict(n=6500, split=(3000, 500, 3000)),
    "ssim": dict(n=6500, split=(3000, 500, 3000)),
    "external": dict(split=(0.6, 0.1, 0.3)),
}


@dataclass
class RunConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "ssim", "seed": 0})
    variant: str = "base"
    mode: str = "semi"
    lam_imp: float = 0.0
    lam_mart: float = 0.0
    steps: int = 500
    batch: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup: int = 100
    ramp: int = 400
    mart_clip: float | None = None
    ema_decay: float = 0.97
    byol_target_decay: float = 0.99
    noise_scale: float = 0.25
    probe_epochs: int = 10
    probe_lr: float = 1e-2
    probe_wd: float = 0.0
    probe_batch: int = 1000
    eval_grid: tuple = EVAL_C_GRID
    violation_k: int = 128
    violation_samples: int = 512
    widths: tuple = (128, 64, 32)
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS + CONTRASTIVE_VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown objective mode {self.mode!r}")
        self.eval_grid = tuple(float(c) for c in self.eval_grid)
        self.widths = tuple(int(w) for w in self.widths)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema_version"] = CONFIG_SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d.pop("schema_version", None)
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def build_dataset(spec: dict) -> tuple[Dataset, Dataset, Dataset]:
    """Materialize (train, priorfit, test) from a dataset spec dict."""
    kind = spec["kind"]
    if kind not in DATASET_DEFAULTS:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    defaults = DATASET_DEFAULTS[kind]
    seed = int(spec.get("seed", 0))
    if kind == "external":
        ds = ingest_table(spec["path"], spec["schema"])
    else:
        ds = generate(kind, int(spec.get("n", defaults["n"])), seed)
    parts = spec.get("split", defaults["split"])
    return split(ds, SplitSpec(*parts), seed)


@dataclass
class Benchmark:
    """One dataset with its evaluation-time masker and training-mask source."""
    train: Dataset
    priorfit: Dataset
    test: Dataset
    eval_masker: object
    train_mask_source: object
    mask_prior: MaskPrior | None


def build_benchmark(spec: dict) -> Benchmark:
    train, priorfit, test = build_dataset(spec)
    seed = int(spec.get("seed", 0))
    if train.kind == "tsim_rc":
        family = RightCensorFamily(train.t_len, train.d)
        return Benchmark(train, priorfit, test, family, family, None)
    axis = "time" if train.t_len > 1 else "feature"
    q = estimate_importance(train)
    params = LogisticMaskParams.make(q, axis, seed)
    masker = LogisticFamily(params)
    n_calib = max(priorfit.n, 64)
    calib = logistic_mask(params, n_calib, 0.5, Rng(seed).split("prior_calibration"),
                          t=train.t_len, d=train.d)
    prior = fit_mask_prior(calib, axis)
    return Benchmark(train, priorfit, test, masker, prior, prior)


def _ema_prefixes(variant, mode):
    head = "cls." if mode == "semi" else "rec."
    if variant == "mart_pred_ema":
        return (head,)
    if variant == "mart_latent_ema":
        return ("enc.", head)
    if variant.startswith("byol"):
        return ("enc.", "proj.")
    return ()


def build_bundle(config: RunConfig, train_ds: Dataset, rng: Rng) -> ModelBundle:
    contrastive = config.variant in CONTRASTIVE_VARIANTS
    cparams = ContrastiveParams(target_decay=config.byol_target_decay)
    extras = ()
    if contrastive:
        extras = contrastive_extras(cparams, byol=config.variant.startswith("byol"))
    needs_imputer = config.variant not in ("base", "simclr", "byol")
    bundle = ModelBundle(
        train_ds.d, train_ds.n_classes, rng.split("init"),
        widths=config.widths, dropout_rate=config.dropout,
        with_cls=(config.mode == "semi") and not contrastive,
        with_rec=(config.mode == "fully") and not contrastive,
        with_imputer=needs_imputer, extras=extras)
    prefixes = _ema_prefixes(config.variant, config.mode)
    if prefixes:
        bundle.init_ema(prefixes)
    return bundle


@dataclass
class RunRecord:
    config: RunConfig
    config_hash: str
    steps: list                      # per-step loss breakdown dicts
    probe: ProbeResult | None
    violations: ViolationCurve | None
    calibration: CalibrationResult | None
    param_count: int
    wall_time: float                 # never written into metric tables
    grid_score: float | None = None


def _contrastive_step_loss(bundle, config, bench, x, mask, weights, step, rng, cparams):
    base_variant = config.variant.split("_")[0]
    prior = bench.mask_prior
    if prior is None:
        raise ConfigError("contrastive variants need a fitted mask prior")
    if base_variant == "simclr":
        core = loss_simclr(bundle, x, prior, cparams, rng.split("views"))
    else:
        core = loss_byol(bundle, x, prior, cparams, rng.split("views"))
    total = core
    breakdown = {"pred": float(core.value), "imp": 0.0, "mart": 0.0,
                 "gamma": weights.gamma(step)}
    if config.variant.endswith("_imp") or config.variant.endswith("_mart_latent"):
        if weights.lam_imp > 0:
            imp = loss_imp(bundle, x, mask, "train", rng.split("imp"))
            total = nd.add(total, nd.mul(imp, weights.lam_imp))
            breakdown["imp"] = float(imp.value)
    if config.variant.endswith("_mart_latent") and weights.lam_mart > 0:
        mart = mart_loss(bundle, x, mask, "latent", "online", rng.split("mart"),
                         mode=config.mode, noise_scale=config.noise_scale,
                         mart_clip=weights.mart_clip)
        breakdown["mart"] = float(mart.value)
        lam_eff = weights.effective_mart(step)
        if lam_eff > 0:
            total = nd.add(total, nd.mul(mart, lam_eff))
    breakdown["total"] = float(total.value)
    return total, breakdown


def run_training(config: RunConfig, record_eval=True,
                 bench: Benchmark | None = None) -> RunRecord:
    """Execute one run: masked-batch steps, optimizer updates, EMA tracking,
    then frozen-model evaluation. Pure function of the config."""
    nd.tune_allocator()
    t0 = time.perf_counter()
    rng = Rng(config.seed)
    bench = bench if bench is not None else build_benchmark(config.dataset)
    train_ds = bench.train
    bundle = build_bundle(config, train_ds, rng.split("model"))
    opt = nd.AdamW(bundle.params, lr=config.lr, weight_decay=config.weight_decay)
    weights = LossWeights(config.lam_imp, config.lam_mart, config.warmup,
                          config.ramp, config.mart_clip)
    cparams = ContrastiveParams(target_decay=config.byol_target_decay)
    contrastive = config.variant in CONTRASTIVE_VARIANTS
    step_rows = []
    for step in range(config.steps):
        r = rng.split(f"step{step}")
        idx = r.split("batch").integers(0, train_ds.n, size=config.batch)
        x, y = train_ds.X[idx], train_ds.y[idx]
        mask = sample_training_mask(bench.train_mask_source, config.batch,
                                    r.split("mask"), t=train_ds.t_len, d=train_ds.d)
        if contrastive:
            loss, breakdown = _contrastive_step_loss(
                bundle, config, bench, x, mask, weights, step, r.split("loss"), cparams)
        else:
            loss, breakdown = total_loss(bundle, x, y, mask, weights, step,
                                         config.variant, config.mode,
                                         r.split("loss"), config.noise_scale)
        if not np.isfinite(breakdown["total"]):
            raise TrainingDiverged(step, breakdown)
        opt.zero_grad()
        nd.backward(loss)
        opt.step()
        if config.variant.startswith("byol"):
            ema_update(bundle, config.byol_target_decay)
        elif bundle.ema:
            ema_update(bundle, config.ema_decay)
        breakdown["step"] = step
        step_rows.append(breakdown)

    probe = violations = calibration = None
    if record_eval:
        eval_rng = rng.split("eval")
        probe = train_probe(bundle, train_ds, bench.test, bench.eval_masker,
                            eval_rng.split("probe"), config.eval_grid)
        calibration = calibration_metrics(bundle, probe, bench.test,
                                          bench.eval_masker,
                                          eval_rng.split("calibration"),
                                          config.eval_grid)
        if bundle.has("imp"):
            head = "cls" if (config.mode == "semi" and bundle.has("cls")) else "rec"
            if not bundle.has(head):
                head = None
            violations = violation_curve(
                bundle, bench.test, bench.eval_masker, head,
                eval_rng.split("violations"), config.eval_grid,
                k=config.violation_k, n_samples=config.violation_samples,
                noise_scale=config.noise_scale) if head else None
    record = RunRecord(config, config.config_hash(), step_rows, probe,
                       violations, calibration, bundle.parameter_count(),
                       time.perf_counter() - t0)
    record.bundle = bundle
    record.benchmark = bench
    return record


def grid_validation_score(bundle, train_ds, eval_masker, rng: Rng,
                          c_grid=EVAL_C_GRID, probe_kwargs=None) -> float:
    """Mean validation probe accuracy over the completeness grid, with the
    probe fitted on 80 percent of the training data and validated on the rest."""
    n = train_ds.n
    perm = rng.split("val_split").permutation(n)
    cut = int(round(0.8 * n))
    fit_idx, val_idx = perm[:cut], perm[cut:]
    weights = fit_linear_probe(embed(bundle, train_ds.X[fit_idx]),
                               train_ds.y[fit_idx], train_ds.n_classes,
                               rng.split("probe"), **(probe_kwargs or {}))
    accs = []
    val = train_ds.subset(val_idx)
    for c in c_grid:
        m = eval_masker.sample(val.n, c, rng.split(f"valmask_c{c}"),
                               t=val.t_len, d=val.d)
        accs.append(probe_accuracy(weights, embed(bundle, val.X, m), val.y))
    return float(np.mean(accs))


@dataclass
class GridResult:
    imp_grid: tuple
    mart_grid: tuple
    scores: np.ndarray               # [len(imp_grid), len(mart_grid)]
    records: list                    # row-major RunRecords
    best: tuple                      # (lam_imp, lam_mart)

    def record_for(self, lam_imp, lam_mart) -> RunRecord:
        i = self.imp_grid.index(lam_imp)
        j = self.mart_grid.index(lam_mart)
        return self.records[i * len(self.mart_grid) + j]


def run_grid(template: RunConfig, imp_grid, mart_grid, record_eval=False) -> GridResult:
    """Train every (lam_imp, lam_mart) cell and score each by held-out-probe
    validation accuracy; ties break toward the smaller weights."""
    imp_grid, mart_grid = tuple(imp_grid), tuple(mart_grid)
    if not imp_grid or not mart_grid:
        raise ConfigError("sweep grids must be nonempty")
    bench = build_benchmark(template.dataset)
    scores = np.zeros((len(imp_grid), len(mart_grid)))
    records = []
    for i, li in enumerate(imp_grid):
        for j, lm in enumerate(mart_grid):
            config = dataclasses.replace(template, lam_imp=float(li), lam_mart=float(lm))
            rec = run_training(config, record_eval=record_eval, bench=bench)
            score = grid_validation_score(rec.bundle, bench.train,
                                          bench.eval_masker,
                                          Rng(config.seed).split("grid_val"),
                                          template.eval_grid)
            rec.grid_score = score
            scores[i, j] = score
            records.append(rec)
    best_idx = min(
        ((i, j) for i in range(len(imp_grid)) for j in range(len(mart_grid))),
        key=lambda ij: (-scores[ij], imp_grid[ij[0]], mart_grid[ij[1]]))
    best = (imp_grid[best_idx[0]], mart_grid[best_idx[1]])
    return GridResult(imp_grid, mart_grid, scores, records, best)


# ---------------------------------------------------------------------------
# persistence

def _fmt(x) -> str:
    return repr(float(x))


def steps_csv(record: RunRecord) -> str:
    lines = ["step,pred,imp,mart,gamma,total"]
    for row in record.steps:
        lines.append(",".join([str(row["step"]), _fmt(row["pred"]), _fmt(row["imp"]),
                               _fmt(row["mart"]), _fmt(row["gamma"]), _fmt(row["total"])]))
    return "\n".join(lines) + "\n"


def metrics_csv(record: RunRecord) -> str:
    """Long-format (c, metric, value) rows; deterministic for a given config."""
    lines = ["c,metric,value"]

    def put(c, metric, value):
        lines.append(f"{_fmt(c)},{metric},{_fmt(value)}")

    if record.probe is not None:
        for c in sorted(record.probe.accuracy_by_c):
            put(c, "probe_acc", record.probe.accuracy_by_c[c])
        put(-1.0, "mean_probe_acc", record.probe.mean_accuracy)
    if record.violations is not None:
        for c in sorted(record.violations.v_pred):
            put(c, "v_pred", record.violations.v_pred[c])
        for c in sorted(record.violations.v_lat):
            put(c, "v_lat", record.violations.v_lat[c])
    if record.calibration is not None:
        for name in ("anytime_regret", "ece", "nll"):
            values = getattr(record.calibration, name)
            for c in sorted(values):
                put(c, name, values[c])
    lines.append(f"{_fmt(-1.0)},param_count,{_fmt(record.param_count)}")
    return "\n".join(lines) + "\n"


def checkpoint_text(record: RunRecord) -> str:
    """Flat named-parameter checkpoint: one JSON object per line, row-major
    64-bit values serialized exactly via repr round-tripping."""
    lines = [json.dumps({"config_hash": record.config_hash,
                         "format": "martssl-checkpoint-v1"})]
    for name, p in record.bundle.params.items():
        lines.append(json.dumps({"name": name, "shape": list(p.value.shape),
                                 "data": [float(v) for v in p.value.ravel()]}))
    return "\n".join(lines) + "\n"


def load_checkpoint(text: str) -> tuple[str, dict]:
    lines = text.strip().split("\n")
    header = json.loads(lines[0])
    params = {}
    for ln in lines[1:]:
        d = json.loads(ln)
        params[d["name"]] = np.array(d["data"], dtype=np.float64).reshape(d["shape"])
    return header["config_hash"], params
