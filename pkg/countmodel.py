"""
Count regressions for port-cyclone outcomes: NB, NB-Lindley (NBL) and
random-parameter NB-Lindley (RPNBL), fit by Gibbs-within-Metropolis MCMC.

    Y_k ~ NB(theta_k, phi),  theta_k = lambda_k * delta_k
    log lambda_k = x_k' beta + sum_r x_kr v_rk,  v_rk ~ N(0, sigma_r^2)
    delta_k ~ Gamma(1 + z_k, rate psi),  z_k ~ Bernoulli(w(psi))

w(psi) = 1/(1+psi) gives an exact Lindley(psi) mixing density; the literal
weight psi/(1+psi) is available behind ``literal_mixing_weight``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import arviz as az
import numpy as np
import pandas as pd
from scipy.integrate import quad
from scipy.special import gammaln

from config import McmcConfig, PriorConfig
from shared import (
    QuadratureError, ValidationError, log_event, parallel_map, write_json, write_table,
)

Variant = Literal["NB", "NBL", "RPNBL"]
INTERCEPT = "Constant"
SUMMARY_COLUMNS = ["parameter", "mean", "sd", "q2.5", "q97.5", "rhat", "ess"]


# === DENSITIES ===
def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite input")


def _nb_logpmf(y, log_theta, phi):
    """Unchecked NB log-pmf on the log-mean scale (vectorised)."""
    log_phi = np.log(phi)
    log_denom = np.logaddexp(log_phi, log_theta)
    return (gammaln(y + phi) - gammaln(phi) - gammaln(y + 1)
            + phi * (log_phi - log_denom) + y * (log_theta - log_denom))


def nb_logpmf(y, theta, phi):
    """log NB(y | mean theta, dispersion phi) via log-gamma."""
    y, theta, phi = np.asarray(y, dtype=float), np.asarray(theta, dtype=float), np.asarray(phi, dtype=float)
    _check_finite(y, theta, phi)
    if np.any(theta <= 0) or np.any(phi <= 0):
        raise ValueError("theta and phi must be positive")
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("y must be a non-negative integer")
    # log1p keeps the phi -> infinity (Poisson) limit accurate
    out = (gammaln(y + phi) - gammaln(phi) - gammaln(y + 1)
           - phi * np.log1p(theta / phi) + y * (np.log(theta) - np.log(phi + theta)))
    return float(out) if out.ndim == 0 else out


def lindley_logpdf(delta, psi):
    delta, psi = np.asarray(delta, dtype=float), np.asarray(psi, dtype=float)
    _check_finite(delta, psi)
    if np.any(delta <= 0) or np.any(psi <= 0):
        raise ValueError("delta and psi must be positive")
    out = 2 * np.log(psi) - np.log1p(psi) + np.log1p(delta) - psi * delta
    return float(out) if out.ndim == 0 else out


def mixture_logpdf(delta, psi, literal_mixing_weight: bool = False):
    """Mixing density of delta with z marginalised out."""
    if not literal_mixing_weight:
        return lindley_logpdf(delta, psi)
    delta = np.asarray(delta, dtype=float)
    return np.log(psi) - np.log1p(psi) - psi * delta + np.log1p(psi * psi * delta)


def lindley_mean(psi, literal_mixing_weight: bool = False):
    psi = np.asarray(psi, dtype=float)
    if literal_mixing_weight:
        return (2 * psi + 1) / (psi * (1 + psi))
    return (psi + 2) / (psi * (psi + 1))


def z_weight(psi, literal_mixing_weight: bool = False):
    """P(z = 1 | psi), the weight of the Gamma(2, psi) branch."""
    return psi / (1 + psi) if literal_mixing_weight else 1 / (1 + psi)


def marginal_nbl_pmf(y: int, lam: float, phi: float, psi: float, literal_mixing_weight: bool = False) -> float:
    """P(Y = y) with delta integrated out by adaptive quadrature."""
    if min(lam, phi, psi) <= 0:
        raise ValueError("lambda, phi and psi must be positive")

    def integrand(d):
        if d <= 0:
            return 0.0
        return math.exp(float(_nb_logpmf(y, math.log(lam * d), phi)) + float(mixture_logpdf(d, psi, literal_mixing_weight)))

    center = float(lindley_mean(psi, literal_mixing_weight))
    split = 40.0 / psi + 4 * center
    head = quad(integrand, 0.0, split, points=[center], full_output=1, limit=200, epsabs=1e-13, epsrel=1e-10)
    tail = quad(integrand, split, np.inf, full_output=1, limit=200, epsabs=1e-13, epsrel=1e-10)
    for res in (head, tail):
        if len(res) > 3:
            raise QuadratureError(f"quadrature did not converge for y={y}",
                                  {"abserr": res[1], "neval": res[2].get("neval"), "message": res[3]})
    return head[0] + tail[0]


# === DATA ===
@dataclass
class Dataset:
    y: np.ndarray
    X: np.ndarray
    names: List[str]
    kinds: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=float).reshape(len(self.y), len(self.names))
        if np.any(self.y < 0):
            raise ValidationError("response must be non-negative")
        if not np.all(np.isfinite(self.X)):
            raise ValidationError("covariates must be finite")
        for j, name in enumerate(self.names):
            if self.kinds.get(name) == "indicator" and not np.isin(self.X[:, j], (0.0, 1.0)).all():
                raise ValidationError(f"indicator covariate {name} has values outside {{0,1}}")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.y[idx], self.X[idx], list(self.names), dict(self.kinds))

    def columns(self, names: Sequence[str]) -> np.ndarray:
        return self.X[:, [self.names.index(n) for n in names]] if names else np.zeros((len(self.y), 0))

    def to_frame(self, response: str = "y") -> pd.DataFrame:
        df = pd.DataFrame(self.X, columns=self.names)
        df.insert(0, response, self.y)
        return df

    @classmethod
    def from_frame(cls, df: pd.DataFrame, kinds: Optional[Dict[str, str]] = None) -> "Dataset":
        """First column is the response, the rest are covariates."""
        names = list(df.columns[1:])
        return cls(df.iloc[:, 0].to_numpy(), df[names].to_numpy(float), names,
                   {n: (kinds or {}).get(n, "continuous") for n in names})


@dataclass(frozen=True)
class ModelSpec:
    variant: Variant
    covariates: Tuple[str, ...] = ()
    random: Tuple[str, ...] = ()
    priors: PriorConfig = field(default_factory=PriorConfig)
    literal_mixing_weight: bool = False

    def __post_init__(self):
        if not set(self.random) <= set(self.covariates):
            raise ValidationError("random covariates must be included covariates")
        if self.variant == "RPNBL" and not self.random:
            raise ValidationError("RPNBL needs at least one random covariate")
        if self.variant != "RPNBL" and self.random:
            raise ValidationError(f"{self.variant} takes no random covariates")

    @property
    def lindley(self) -> bool:
        return self.variant != "NB"

    @property
    def param_names(self) -> List[str]:
        names = [INTERCEPT, *self.covariates]
        names += [f"sd:{r}" for r in self.random]
        names.append("phi")
        if self.lindley:
            names.append("psi")
        return names


@dataclass(frozen=True)
class TrueParameters:
    beta: np.ndarray
    phi: float
    psi: float = np.inf
    sigma: Tuple[float, ...] = ()


def simulate_rpnbl(spec: ModelSpec, truth: TrueParameters, K: int, seed: int,
                   X: Optional[np.ndarray] = None, kinds: Optional[Dict[str, str]] = None) -> Dataset:
    """Draw v, z, delta then Y in that order. X is drawn (N(0,1) or Bernoulli(0.5)) when not given."""
    rng = np.random.default_rng(seed)
    names = list(spec.covariates)
    kinds = {n: (kinds or {}).get(n, "continuous") for n in names}
    if X is None:
        X = np.column_stack([
            rng.binomial(1, 0.5, K).astype(float) if kinds[n] == "indicator" else rng.standard_normal(K)
            for n in names]) if names else np.zeros((K, 0))
    data = Dataset(np.zeros(K, dtype=np.int64), X, names, kinds)
    log_lam = truth.beta[0] + data.X @ np.asarray(truth.beta[1:], dtype=float)
    Xr = data.columns(spec.random)
    if spec.random:
        v = rng.standard_normal((K, len(spec.random))) * np.asarray(truth.sigma, dtype=float)
        log_lam = log_lam + (Xr * v).sum(axis=1)
    data.y = sample_predictive(np.exp(log_lam), truth.phi, truth.psi, rng, spec.lindley, spec.literal_mixing_weight)
    return data


def sample_predictive(lam, phi: float, psi: float, rng: np.random.Generator, lindley: bool = True,
                      literal_mixing_weight: bool = False, size: Optional[int] = None) -> np.ndarray:
    """Y draws from the generative story at fixed parameters."""
    lam = np.asarray(lam, dtype=float) if size is None else np.full(size, float(lam))
    if lindley:
        z = rng.random(lam.shape) < z_weight(psi, literal_mixing_weight)
        delta = rng.gamma(1.0 + z, 1.0 / psi)
    else:
        delta = np.ones(lam.shape)
    theta = lam * delta
    return rng.negative_binomial(phi, phi / (phi + theta)).astype(np.int64)


def split_80_20(data: Dataset, seed: int, train_fraction: float = 0.8) -> Tuple[Dataset, Dataset]:
    K = len(data)
    if K < 10:
        raise ValidationError(f"need at least 10 observations to split, got {K}")
    n_train = math.ceil(round(train_fraction * K, 9))
    perm = np.random.default_rng(seed).permutation(K)
    return data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train:]))


# === SAMPLER ===
class _Chain:
    """One MCMC chain with its own generator. Adaptation only while adapt=True."""

    def __init__(self, spec: ModelSpec, data: Dataset, mcmc: McmcConfig, rng: np.random.Generator):
        self.spec, self.mcmc, self.rng = spec, mcmc, rng
        self.pr = spec.priors
        self.y = data.y.astype(float)
        self.X = np.column_stack([np.ones(len(data)), data.columns(spec.covariates)])
        self.Xr = data.columns(spec.random)
        K, P = self.X.shape
        R = self.Xr.shape[1]

        ybar = max(self.y.mean(), 0.05)
        self.beta = np.zeros(P)
        self.beta[0] = math.log(ybar) + 0.1 * rng.standard_normal()
        self.v = np.zeros((K, R))
        self.sigma = np.full(R, 0.1)
        self.phi, self.psi = 1.0, 2.0
        self.delta = np.ones(K)
        self.z = np.zeros(K, dtype=bool)

        info = self.X.T @ (self.X * ybar) + np.eye(P) / self.pr.beta_sd ** 2
        self.beta_cov = np.linalg.inv(info)
        self.beta_scale = 2.38 / math.sqrt(P)
        self.steps = {"phi": 0.3, "psi": 0.3, "sigma_nc": np.full(R, 0.3), "sigma_c": np.full(R, 0.3)}
        self.v_step = np.full(R, 0.3)
        self.accept: Dict[str, list] = {k: [] for k in ("beta", "phi", "psi", "sigma_nc", "sigma_c", "v")}
        self.beta_history: List[np.ndarray] = []

        self.kept: List[np.ndarray] = []
        self.deviance: List[float] = []
        self.delta_sum = np.zeros(K)
        self.z_sum = np.zeros(K)
        self.v_sum = np.zeros((K, R))
        self.n_kept = 0
        self.iterations = 0

    # log-lambda and the NB terms that depend on theta (phi fixed)
    def _log_lam(self, beta, v):
        out = self.X @ beta
        if v.shape[1]:
            out = out + (self.Xr * v).sum(axis=1)
        return out

    def _kernel(self, log_lam):
        log_theta = log_lam + np.log(self.delta)
        return self.y * log_theta - (self.phi + self.y) * np.logaddexp(math.log(self.phi), log_theta)

    def _log_rw(self, x, step):
        return x * math.exp(step * self.rng.standard_normal())

    def _mh(self, log_ratio) -> bool:
        return math.log(self.rng.random()) < log_ratio

    def _update_beta(self):
        chol = np.linalg.cholesky(self.beta_scale ** 2 * self.beta_cov + 1e-12 * np.eye(len(self.beta)))
        prop = self.beta + chol @ self.rng.standard_normal(len(self.beta))
        ll_new = self._kernel(self._log_lam(prop, self.v)).sum()
        ll_old = self._kernel(self._log_lam(self.beta, self.v)).sum()
        prior = -(prop @ prop - self.beta @ self.beta) / (2 * self.pr.beta_sd ** 2)
        ok = self._mh(ll_new - ll_old + prior)
        if ok:
            self.beta = prop
        self.accept["beta"].append(ok)

    def _update_v(self):
        base = self.X @ self.beta
        for r in range(self.v.shape[1]):
            prop = self.v.copy()
            prop[:, r] += self.v_step[r] * self.rng.standard_normal(len(self.y))
            old = self._kernel(base + (self.Xr * self.v).sum(axis=1))
            new = self._kernel(base + (self.Xr * prop).sum(axis=1))
            prior = -(prop[:, r] ** 2 - self.v[:, r] ** 2) / (2 * self.sigma[r] ** 2)
            ok = np.log(self.rng.random(len(self.y))) < new - old + prior
            self.v[ok, r] = prop[ok, r]
            self.accept["v"].append(ok.mean())

    def _sigma_prior(self, s):
        return -s * s / (2 * self.pr.sigma_scale ** 2)

    def _update_sigma(self):
        base = self.X @ self.beta
        for r in range(len(self.sigma)):
            # non-centred move: rescale v_r with sigma_r
            s_old = self.sigma[r]
            s_new = self._log_rw(s_old, self.steps["sigma_nc"][r])
            prop = self.v.copy()
            prop[:, r] *= s_new / s_old
            ratio = (self._kernel(base + (self.Xr * prop).sum(axis=1)).sum()
                     - self._kernel(base + (self.Xr * self.v).sum(axis=1)).sum()
                     + self._sigma_prior(s_new) - self._sigma_prior(s_old) + math.log(s_new / s_old))
            ok = self._mh(ratio)
            if ok:
                self.sigma[r], self.v = s_new, prop
            self.accept["sigma_nc"].append(ok)

            # centred move: v fixed
            s_old = self.sigma[r]
            s_new = self._log_rw(s_old, self.steps["sigma_c"][r])
            ss = float(self.v[:, r] @ self.v[:, r])
            K = len(self.y)
            ratio = (-K * math.log(s_new) - ss / (2 * s_new ** 2) + K * math.log(s_old) + ss / (2 * s_old ** 2)
                     + self._sigma_prior(s_new) - self._sigma_prior(s_old) + math.log(s_new / s_old))
            ok = self._mh(ratio)
            if ok:
                self.sigma[r] = s_new
            self.accept["sigma_c"].append(ok)

    def _gamma_prior(self, x, shape, rate):
        return (shape - 1) * math.log(x) - rate * x

    def _update_phi(self):
        log_theta = self._log_lam(self.beta, self.v) + np.log(self.delta)
        new = self._log_rw(self.phi, self.steps["phi"])
        ratio = (_nb_logpmf(self.y, log_theta, new).sum() - _nb_logpmf(self.y, log_theta, self.phi).sum()
                 + self._gamma_prior(new, self.pr.phi_shape, self.pr.phi_rate)
                 - self._gamma_prior(self.phi, self.pr.phi_shape, self.pr.phi_rate)
                 + math.log(new / self.phi))
        ok = self._mh(ratio)
        if ok:
            self.phi = new
        self.accept["phi"].append(ok)

    def _update_psi(self):
        lit = self.spec.literal_mixing_weight
        new = self._log_rw(self.psi, self.steps["psi"])
        ratio = (np.sum(mixture_logpdf(self.delta, new, lit)) - np.sum(mixture_logpdf(self.delta, self.psi, lit))
                 + self._gamma_prior(new, self.pr.psi_shape, self.pr.psi_rate)
                 - self._gamma_prior(self.psi, self.pr.psi_shape, self.pr.psi_rate)
                 + math.log(new / self.psi))
        ok = self._mh(ratio)
        if ok:
            self.psi = new
        self.accept["psi"].append(ok)

    def _update_latents(self):
        # z | delta: odds = w/(1-w) * Gamma(delta|2,psi)/Gamma(delta|1,psi)
        odds = (self.psi ** 2 if self.spec.literal_mixing_weight else 1.0) * self.delta
        self.z = self.rng.random(len(self.y)) < odds / (1.0 + odds)
        lam = np.exp(np.minimum(self._log_lam(self.beta, self.v), 700.0))
        omega = self.rng.gamma(self.phi + self.y, 1.0 / (self.phi + lam * self.delta))
        self.delta = np.maximum(self.rng.gamma(1.0 + self.z + self.y, 1.0 / (self.psi + lam * omega)), 1e-300)

    def _adapt(self):
        w = self.mcmc.adapt_window
        target = self.mcmc.target_accept
        if self.iterations % w:
            return
        nudge = lambda rate: math.exp(0.1 if rate >= target else -0.1)
        self.beta_scale *= nudge(np.mean(self.accept["beta"][-w:]))
        for key in ("phi", "psi"):
            if self.accept[key]:
                self.steps[key] *= nudge(np.mean(self.accept[key][-w:]))
        R = len(self.sigma)
        for key in ("sigma_nc", "sigma_c"):
            recent = np.asarray(self.accept[key][-w * R:]).reshape(-1, R) if R else None
            if R and len(recent):
                self.steps[key] *= np.exp(np.where(recent.mean(axis=0) >= target, 0.1, -0.1))
        if R:
            recent_v = np.asarray(self.accept["v"][-w * R:]).reshape(-1, R)
            self.v_step *= np.exp(np.where(recent_v.mean(axis=0) >= target, 0.1, -0.1))
        if len(self.beta_history) >= 4 * w:
            hist = np.asarray(self.beta_history[len(self.beta_history) // 2:])
            self.beta_cov = np.atleast_2d(np.cov(hist, rowvar=False)) + 1e-10 * np.eye(len(self.beta))

    def _record(self):
        params = [*self.beta, *self.sigma, self.phi]
        if self.spec.lindley:
            params.append(self.psi)
        self.kept.append(np.asarray(params))
        log_theta = self._log_lam(self.beta, self.v) + np.log(self.delta)
        self.deviance.append(float(-2 * _nb_logpmf(self.y, log_theta, self.phi).sum()))
        self.delta_sum += self.delta
        self.z_sum += self.z
        self.v_sum += self.v
        self.n_kept += 1

    def run(self, n: int, adapt: bool, keep: bool) -> "_Chain":
        for _ in range(n):
            if self.spec.lindley:
                self._update_psi()
                self._update_latents()
            self._update_beta()
            if len(self.sigma):
                self._update_v()
                self._update_sigma()
            self._update_phi()
            self.iterations += 1
            if adapt:
                self.beta_history.append(self.beta.copy())
                self._adapt()
            if keep and self.iterations % self.mcmc.thin == 0:
                self._record()
        return self


@dataclass
class PosteriorFit:
    spec: ModelSpec
    param_names: List[str]
    draws: np.ndarray                 # (chains, draws, params)
    deviance: np.ndarray              # (chains, draws)
    rhat: Dict[str, float]
    ess: Dict[str, float]
    converged: bool
    iterations: int
    d_bar: float = float("nan")
    d_hat: float = float("nan")
    delta_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    z_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v_mean: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    n_train: int = 0

    @property
    def p_d(self) -> float:
        return self.d_bar - self.d_hat

    @property
    def dic(self) -> float:
        return self.d_bar + self.p_d

    def param(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.param_names.index(name)].ravel()

    def beta_draws(self) -> np.ndarray:
        return self.draws[:, :, :1 + len(self.spec.covariates)].reshape(-1, 1 + len(self.spec.covariates))

    def sigma_draws(self) -> np.ndarray:
        p = 1 + len(self.spec.covariates)
        return self.draws[:, :, p:p + len(self.spec.random)].reshape(-1, len(self.spec.random))

    def summary(self) -> pd.DataFrame:
        return posterior_summary(self)


def dic_from_deviance(deviance: np.ndarray, d_hat: float) -> Tuple[float, float, float]:
    """(DIC, p_D, D-bar) with p_D = D-bar - D(theta-hat)."""
    d_bar = float(np.mean(deviance))
    p_d = d_bar - d_hat
    return d_bar + p_d, p_d, d_bar


def _diagnostics(draws: np.ndarray, names: List[str]) -> Tuple[Dict[str, float], Dict[str, float]]:
    ds = az.convert_to_dataset({"theta": draws})
    rhat = np.asarray(az.rhat(ds, method="split")["theta"].values, dtype=float).reshape(-1)
    ess = np.asarray(az.ess(ds, method="bulk")["theta"].values, dtype=float).reshape(-1)
    return dict(zip(names, rhat.tolist())), dict(zip(names, ess.tolist()))


def fit(spec: ModelSpec, data: Dataset, mcmc: Optional[McmcConfig] = None, seed: int = 0,
        threads: Optional[int] = None) -> PosteriorFit:
    mcmc = mcmc or McmcConfig()
    design = np.column_stack([np.ones(len(data)), data.columns(spec.covariates)])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise ValidationError(f"design matrix for {spec.variant} is rank deficient")

    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(mcmc.chains)]
    chains = [_Chain(spec, data, mcmc, rng) for rng in rngs]
    parallel_map(lambda c: c.run(mcmc.burn_in, adapt=True, keep=False), chains, threads)
    parallel_map(lambda c: c.run(mcmc.iterations - mcmc.burn_in, adapt=False, keep=True), chains, threads)

    names = spec.param_names
    while True:
        draws = np.stack([np.asarray(c.kept) for c in chains])
        rhat, ess = _diagnostics(draws, names)
        converged = all(np.isfinite(r) and r < mcmc.rhat_threshold for r in rhat.values())
        total = chains[0].iterations
        if converged or total >= mcmc.max_iterations:
            break
        block = min(mcmc.iterations - mcmc.burn_in, mcmc.max_iterations - total)
        log_event("mcmc", f"{spec.variant}: max R-hat {max(rhat.values()):.3f}, extending by {block}", "countmodel")
        parallel_map(lambda c: c.run(block, adapt=False, keep=True), chains, threads)

    n = sum(c.n_kept for c in chains)
    delta_mean = sum(c.delta_sum for c in chains) / n
    z_mean = sum(c.z_sum for c in chains) / n
    v_mean = sum(c.v_sum for c in chains) / n
    means = draws.reshape(-1, len(names)).mean(axis=0)
    p = 1 + len(spec.covariates)
    log_theta = design @ means[:p] + np.log(delta_mean)
    if spec.random:
        log_theta = log_theta + (data.columns(spec.random) * v_mean).sum(axis=1)
    phi_hat = means[names.index("phi")]
    d_hat = float(-2 * _nb_logpmf(data.y.astype(float), log_theta, phi_hat).sum())

    result = PosteriorFit(spec, names, draws, np.stack([np.asarray(c.deviance) for c in chains]),
                          rhat, ess, converged, total, float(np.mean([c.deviance for c in chains])), d_hat,
                          delta_mean, z_mean, v_mean, len(data))
    if not converged:
        log_event("convergence_flag", f"{spec.variant}: R-hat >= {mcmc.rhat_threshold} after {total} "
                  f"iterations ({max(rhat, key=rhat.get)})", "countmodel")
    log_event("fit", f"{spec.variant}: DIC={result.dic:.2f} pD={result.p_d:.2f} converged={converged}", "countmodel")
    return result


def dic(fit_result: PosteriorFit) -> float:
    """Conditional DIC on the training data the fit was run on."""
    return fit_result.dic


# === PREDICTION ===
def predict(fit_result: PosteriorFit, data: Dataset) -> np.ndarray:
    """Posterior mean of E[Y] = lambda * E[delta | psi]; random slopes integrated analytically."""
    spec = fit_result.spec
    X = np.column_stack([np.ones(len(data)), data.columns(spec.covariates)])
    log_lam = fit_result.beta_draws() @ X.T
    if spec.random:
        Xr = data.columns(spec.random)
        log_lam = log_lam + 0.5 * (fit_result.sigma_draws() ** 2) @ (Xr ** 2).T
    mean = np.exp(np.minimum(log_lam, 700.0))
    if spec.lindley:
        mean = mean * lindley_mean(fit_result.param("psi"), spec.literal_mixing_weight)[:, None]
    return mean.mean(axis=0)


def mae_rmse(y, yhat) -> Tuple[float, float]:
    err = np.asarray(y, dtype=float) - np.asarray(yhat, dtype=float)
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err ** 2)))


def predict_and_score(fit_result: PosteriorFit, test: Dataset) -> Tuple[float, float]:
    return mae_rmse(test.y, predict(fit_result, test))


# === TABLES ===
def posterior_summary(fit_result: PosteriorFit) -> pd.DataFrame:
    flat = fit_result.draws.reshape(-1, len(fit_result.param_names))
    rows = []
    for j, name in enumerate(fit_result.param_names):
        col = flat[:, j]
        rows.append((name, col.mean(), col.std(ddof=1) if len(col) > 1 else 0.0,
                     np.quantile(col, 0.025), np.quantile(col, 0.975),
                     fit_result.rhat.get(name), fit_result.ess.get(name)))
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def draws_frame(fit_result: PosteriorFit) -> pd.DataFrame:
    C, S, _ = fit_result.draws.shape
    df = pd.DataFrame(fit_result.draws.reshape(C * S, -1), columns=fit_result.param_names)
    df.insert(0, "draw", np.tile(np.arange(S), C))
    df.insert(0, "chain", np.repeat(np.arange(C), S))
    df["deviance"] = fit_result.deviance.reshape(-1)
    return df


def fit_meta(fit_result: PosteriorFit, kinds: Dict[str, str]) -> dict:
    spec = fit_result.spec
    return {
        "variant": spec.variant, "covariates": list(spec.covariates), "random": list(spec.random),
        "literal_mixing_weight": spec.literal_mixing_weight, "priors": spec.priors.model_dump(),
        "kinds": {n: kinds.get(n, "continuous") for n in spec.covariates},
        "converged": fit_result.converged, "iterations": fit_result.iterations,
        "dic": fit_result.dic, "p_d": fit_result.p_d, "d_bar": fit_result.d_bar, "d_hat": fit_result.d_hat,
        "dic_convention": "conditional", "n_train": fit_result.n_train,
        "rhat": fit_result.rhat, "ess": fit_result.ess,
    }


def save_fit(fit_result: PosteriorFit, kinds: Dict[str, str], prefix: str) -> List[str]:
    paths = [f"{prefix}_summary.csv", f"{prefix}_draws.csv", f"{prefix}_fit.json"]
    write_table(paths[0], posterior_summary(fit_result), SUMMARY_COLUMNS)
    write_table(paths[1], draws_frame(fit_result))
    write_json(paths[2], fit_meta(fit_result, kinds))
    return paths


def load_fit(prefix: str) -> Tuple[PosteriorFit, Dict[str, str]]:
    """Rebuild a fit (draws and diagnostics, no latents) from save_fit output."""
    with open(f"{prefix}_fit.json", "r", encoding="utf-8") as f:
        meta = json.load(f)
    spec = ModelSpec(meta["variant"], tuple(meta["covariates"]), tuple(meta["random"]),
                     PriorConfig(**meta["priors"]), meta["literal_mixing_weight"])
    df = pd.read_csv(f"{prefix}_draws.csv")
    names = spec.param_names
    C = int(df["chain"].max()) + 1
    draws = df[names].to_numpy(float).reshape(C, -1, len(names))
    deviance = df["deviance"].to_numpy(float).reshape(C, -1)
    result = PosteriorFit(spec, names, draws, deviance, meta["rhat"], meta["ess"], meta["converged"],
                          meta["iterations"], meta["d_bar"], meta["d_hat"], n_train=meta["n_train"])
    return result, meta["kinds"]


# === MODEL MATRIX ===
SSHS_LEVELS = (1, 2, 3, 4, 5)
COAST_DUMMIES = {"Gulf": "Coast_Gulf_of_Mexico", "East": "Coast_Atlantic", "Pacific": "Coast_Pacific"}


def build_model_matrix(records: pd.DataFrame, response: str, kinds: Dict[str, str]) -> Dataset:
    """Response plus the storm, socio-economic and port covariates from joined interaction records.

    SSHS dummies use TS as base (TD folds into it); coast dummies use non-coastal as base.
    Real-valued responses are rounded half-to-even.
    """
    df = records.copy()
    if "SSHS" in df:
        for k in SSHS_LEVELS:
            df[f"SSHS_{k}"] = (df["SSHS"] == k).astype(float)
    if "coast" in df:
        for coast, col in COAST_DUMMIES.items():
            df[col] = (df["coast"] == coast).astype(float)
    if "Pop_C" in df and "Ln_Pop_C" not in df:
        df["Ln_Pop_C"] = np.log(df["Pop_C"].where(df["Pop_C"] > 0))

    names = [n for n in kinds if n in df.columns]
    missing = [n for n in kinds if n not in df.columns]
    if missing:
        log_event("matrix_warning", f"covariates not available: {', '.join(missing)}", "countmodel")
    if response not in df.columns:
        raise ValidationError(f"response column {response} not found")
    sub = df[[response, *names]].replace([np.inf, -np.inf], np.nan)
    complete = sub.notna().all(axis=1)
    if not complete.all():
        log_event("matrix_warning", f"{response}: dropped {int((~complete).sum())} incomplete record(s)", "countmodel")
    sub = sub[complete]
    y = np.rint(sub[response].to_numpy(float))
    if (y < 0).any():
        log_event("matrix_warning", f"{response}: {int((y < 0).sum())} negative value(s) clipped to 0", "countmodel")
    y = np.clip(y, 0, None).astype(np.int64)
    # constant columns are dropped
    names = [n for n in names if sub[n].nunique() > 1]
    return Dataset(y, sub[names].to_numpy(float), names, {n: kinds[n] for n in names})
