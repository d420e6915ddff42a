"""Executable checks of the framework's analytic claims.

Three claims are verified numerically:

* the two-sample estimator (u - v_a)^T (u - v_b) with conditionally independent
  draws is unbiased for ||u - E v||^2, while the single-sample plug-in
  ||u - v||^2 is biased upward by exactly trace Var(v);
* on small discrete joint distributions, the coarse-view excess risk is bounded
  by 2 * (martingale violation) + 2 * (fine-view risk), checked by exact
  enumeration;
* in the linear-Gaussian model, the penalized quadratic objective has a block
  closed form whose lambda -> 0 / infinity limits recover ordinary least
  squares and the optimal coarse-view predictor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import Rng


class NumericalError(RuntimeError):
    pass


@dataclass
class LGInstance:
    """Blocked Gaussian regression instance with derived conditional pieces."""

    sigma11: np.ndarray
    sigma12: np.ndarray
    sigma22: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    noise: float = 1.0
    c: np.ndarray = field(init=False)
    sigma_2g1: np.ndarray = field(init=False)

    def __post_init__(self):
        try:
            np.linalg.cholesky(self.full_cov())
        except np.linalg.LinAlgError as e:
            raise NumericalError("covariance is not positive definite") from e
        self.c = self.sigma12.T @ np.linalg.solve(self.sigma11, self.sigma12)
        self.sigma_2g1 = self.sigma22 - self.c

    @property
    def d1(self):
        return self.sigma11.shape[0]

    @property
    def d2(self):
        return self.sigma22.shape[0]

    def full_cov(self):
        return np.block([[self.sigma11, self.sigma12],
                         [self.sigma12.T, self.sigma22]])

    @property
    def w(self):
        return np.concatenate([self.w1, self.w2])


def random_lg_instance(rng: Rng, d1=None, d2=None, diag_load=1e-3,
                       max_cond=1e6, min_c_eig=1e-2) -> LGInstance:
    """Random SPD covariance via a Gram matrix plus diagonal loading.

    Resampled until the covariance condition number is comfortably small and
    the cross-block coupling C is positive definite with a bounded-away-from-
    zero spectrum (well-conditioned instances; the strict-penalty limit is
    meaningless when C is nearly singular).
    """
    d1 = int(rng.integers(2, 5)) if d1 is None else d1
    d2 = int(rng.integers(2, min(d1, 3) + 1)) if d2 is None else d2
    d = d1 + d2
    for _ in range(200):
        m = rng.normal(size=(d, d + 2))
        cov = m @ m.T / (d + 2) + diag_load * np.eye(d)
        if np.linalg.cond(cov) >= max_cond:
            continue
        c = cov[d1:, :d1] @ np.linalg.solve(cov[:d1, :d1], cov[:d1, d1:])
        if np.linalg.eigvalsh(c).min() < min_c_eig:
            continue
        w = rng.normal(size=d)
        return LGInstance(cov[:d1, :d1], cov[:d1, d1:], cov[d1:, d1:],
                          w[:d1], w[d1:])
    raise NumericalError("failed to draw a well-conditioned instance")


def lg_closed_form(inst: LGInstance, lam: float):
    """Block closed form of the penalized minimizer.

    beta2 = (Sigma_{2|1} + lam * C)^{-1} Sigma_{2|1} w2, and beta1 compensates
    through the regression of the penalized block on the observed one.
    """
    if lam < 0:
        raise NumericalError("penalty weight must be nonnegative")
    a = inst.sigma_2g1 + lam * inst.c
    try:
        beta2 = np.linalg.solve(a, inst.sigma_2g1 @ inst.w2)
    except np.linalg.LinAlgError as e:
        raise NumericalError(
            f"singular system (cond ~ {np.linalg.cond(a):.2e})") from e
    beta1 = inst.w1 + np.linalg.solve(inst.sigma11, inst.sigma12 @ (inst.w2 - beta2))
    return beta1, beta2


def lg_numeric_min(inst: LGInstance, lam: float):
    """Minimize (beta - w)^T Sigma (beta - w) + lam * beta2^T C beta2 by solving
    the full stationarity system directly (independent of the block formula)."""
    d1, d2 = inst.d1, inst.d2
    sigma = inst.full_cov()
    pen = np.zeros((d1 + d2, d1 + d2))
    pen[d1:, d1:] = inst.c
    try:
        beta = np.linalg.solve(sigma + lam * pen, sigma @ inst.w)
    except np.linalg.LinAlgError as e:
        raise NumericalError("singular stationarity system") from e
    return beta[:d1], beta[d1:]


def lg_objective(inst: LGInstance, beta1, beta2, lam: float) -> float:
    diff = np.concatenate([beta1, beta2]) - inst.w
    return float(diff @ inst.full_cov() @ diff + lam * beta2 @ inst.c @ beta2)


@dataclass
class UnbiasednessReport:
    dims: int
    n_trials: int
    target: float                 # ||u - mu||^2
    two_sample_mean: float
    two_sample_se: float
    single_sample_mean: float
    single_sample_se: float
    predicted_bias: float         # trace Var(v)

    @property
    def two_sample_ok(self) -> bool:
        return abs(self.two_sample_mean - self.target) < 4 * self.two_sample_se

    @property
    def single_bias_ok(self) -> bool:
        observed = self.single_sample_mean - self.target
        return abs(observed - self.predicted_bias) < 4 * self.single_sample_se


def verify_unbiasedness(dims=4, n_trials=100_000, rng: Rng | None = None,
                        u=None, mu=None, mixing=None) -> UnbiasednessReport:
    """Monte Carlo check of the estimator identities with a sampler of known
    mean and covariance (v = mu + A eta, eta standard normal)."""
    rng = rng if rng is not None else Rng(0)
    draw = rng.split("unbiasedness")
    u = draw.normal(size=dims) if u is None else np.asarray(u, dtype=np.float64)
    mu = draw.normal(size=dims) if mu is None else np.asarray(mu, dtype=np.float64)
    a = (draw.normal(size=(dims, dims)) / np.sqrt(dims)
         if mixing is None else np.asarray(mixing, dtype=np.float64))
    target = float(((u - mu) ** 2).sum())
    trace_var = float((a * a).sum())
    v_a = mu + draw.normal(size=(n_trials, dims)) @ a.T
    v_b = mu + draw.normal(size=(n_trials, dims)) @ a.T
    two = ((u - v_a) * (u - v_b)).sum(axis=1)
    single = ((u - v_a) ** 2).sum(axis=1)
    return UnbiasednessReport(
        dims=dims, n_trials=n_trials, target=target,
        two_sample_mean=float(two.mean()),
        two_sample_se=float(two.std(ddof=1) / np.sqrt(n_trials)),
        single_sample_mean=float(single.mean()),
        single_sample_se=float(single.std(ddof=1) / np.sqrt(n_trials)),
        predicted_bias=trace_var,
    )


@dataclass
class DiscreteInstance:
    """Joint distribution over (x1, x2) with vector target t(x1, x2) and an
    arbitrary pair of predictors for the coarse and fine views."""

    p: np.ndarray        # [n1, n2] joint probabilities
    t: np.ndarray        # [n1, n2, d] target values
    g1: np.ndarray       # [n1, d] coarse-view predictions
    g2: np.ndarray       # [n1, n2, d] fine-view predictions


def random_discrete_instance(rng: Rng, max_states=6, d_max=3) -> DiscreteInstance:
    n1 = int(rng.integers(2, max_states + 1))
    n2 = int(rng.integers(2, max_states + 1))
    d = int(rng.integers(1, d_max + 1))
    p = rng.uniform(0.05, 1.0, size=(n1, n2))
    p /= p.sum()
    return DiscreteInstance(p, rng.normal(size=(n1, n2, d)),
                            rng.normal(size=(n1, d)),
                            rng.normal(size=(n1, n2, d)))


def excess_risk_terms(inst: DiscreteInstance):
    """Exact (lhs, violation, fine_risk) by enumeration."""
    p1 = inst.p.sum(axis=1)
    cond = inst.p / p1[:, None]                       # p(x2 | x1)
    e_y_f2 = inst.t                                   # conditional mean at the fine view
    e_y_f1 = np.einsum("ij,ijd->id", cond, inst.t)
    e_g2_f1 = np.einsum("ij,ijd->id", cond, inst.g2)
    lhs = float(np.einsum("i,id->", p1, (inst.g1 - e_y_f1) ** 2))
    violation = float(np.einsum("i,id->", p1, (inst.g1 - e_g2_f1) ** 2))
    fine_risk = float(np.einsum("ij,ijd->", inst.p, (inst.g2 - e_y_f2) ** 2))
    return lhs, violation, fine_risk


@dataclass
class ExcessRiskReport:
    n_instances: int
    violations: int          # count of inequality failures (should be zero)
    max_slack: float         # max of lhs - (2V + 2R); negative means satisfied

    @property
    def ok(self) -> bool:
        return self.violations == 0


def verify_excess_risk_bound(n_instances=1000, rng: Rng | None = None,
                             tol=1e-9) -> ExcessRiskReport:
    rng = rng if rng is not None else Rng(0)
    draw = rng.split("excess_risk")
    fails = 0
    max_slack = -np.inf
    for i in range(n_instances):
        inst = random_discrete_instance(draw.split(f"i{i}"))
        lhs, v, r = excess_risk_terms(inst)
        slack = lhs - (2 * v + 2 * r)
        max_slack = max(max_slack, slack)
        if slack > tol:
            fails += 1
    return ExcessRiskReport(n_instances, fails, max_slack)
