"""
Covariate screening (VIF), stepwise DIC selection and Halton-draw average
marginal effects.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy.stats import norm, qmc

from config import EffectsConfig, McmcConfig, ModelConfig, PriorConfig
from countmodel import Dataset, ModelSpec, PosteriorFit, fit
from shared import ValidationError, log_event, parallel_map

AME_COLUMNS = ["variable", "AME", "type"]
TRACE_COLUMNS = ["step", "move", "candidate", "DIC"]
VIF_COLUMNS = ["round", "variable", "VIF", "dropped"]
KINDS = ("continuous", "indicator")

# an R^2 this close to 1 is treated as exact collinearity
PERFECT_R2 = 1 - 1e-12


# === VIF ===
def _vif(X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[1])
    for j in range(X.shape[1]):
        others = sm.add_constant(np.delete(X, j, axis=1), has_constant="add")
        r2 = sm.OLS(X[:, j], others).fit().rsquared
        out[j] = np.inf if r2 >= PERFECT_R2 else 1.0 / (1.0 - r2)
    return out


def vif_screen(X: pd.DataFrame, threshold: float = 5.0) -> Tuple[List[str], pd.DataFrame]:
    """Drop the highest-VIF column until every VIF <= threshold. Ties drop the later-listed column."""
    names = list(X.columns)
    for n in names:
        if X[n].nunique() <= 1:
            raise ValidationError(f"constant column {n} cannot be VIF-screened")
    rows = []
    rnd = 0
    while len(names) >= 2:
        vifs = _vif(X[names].to_numpy(float))
        worst = max(range(len(names)), key=lambda j: (vifs[j], j))
        drop = vifs[worst] > threshold
        rnd += 1
        rows += [(rnd, n, float(v), int(drop and j == worst)) for j, (n, v) in enumerate(zip(names, vifs))]
        if not drop:
            break
        log_event("vif", f"dropping {names[worst]} (VIF={vifs[worst]:.3g})", "effects")
        names.pop(worst)
    if len(names) < 2 and not rows:
        rows = [(1, n, 1.0, 0) for n in names]
    return names, pd.DataFrame(rows, columns=VIF_COLUMNS)


# === STEPWISE ===
ScoreFn = Callable[[ModelSpec], Tuple[float, bool]]


@dataclass(frozen=True)
class _Candidate:
    fixed: Tuple[str, ...]
    random: Tuple[str, ...]
    order: Dict[str, int] = field(default_factory=dict, compare=False, hash=False)

    def spec(self, variant: str, priors: PriorConfig, literal_mixing_weight: bool) -> ModelSpec:
        rank = lambda n: self.order.get(n, 0)
        covs = tuple(sorted(set(self.fixed) | set(self.random), key=rank))
        if variant == "RPNBL" and not self.random:
            variant = "NBL"
        random = tuple(sorted(self.random, key=rank)) if variant == "RPNBL" else ()
        return ModelSpec(variant, covs, random, priors, literal_mixing_weight)


def default_score_fn(train: Dataset, mcmc: McmcConfig, seed: int, threads: Optional[int] = None) -> ScoreFn:
    """Score a candidate by fitting it; a rank-deficient design scores (inf, not converged)."""
    def score(spec: ModelSpec) -> Tuple[float, bool]:
        try:
            result = fit(spec, train, mcmc, seed, threads)
        except ValidationError as e:
            log_event("stepwise_warning", f"{spec.variant} {list(spec.covariates)}: {e}", "effects")
            return float("inf"), False
        return result.dic, result.converged
    return score


def stepwise_dic(candidates: Sequence[str], variant: str, score_fn: ScoreFn,
                 random_candidates: Sequence[str] = (), improvement: float = 2.0,
                 priors: Optional[PriorConfig] = None, literal_mixing_weight: bool = False,
                 threads: Optional[int] = None) -> Tuple[ModelSpec, pd.DataFrame]:
    """Bidirectional greedy search on DIC.

    Forward moves add a covariate (for RPNBL also turn an included covariate random); after each
    accepted forward move, backward moves drop covariates while that lowers DIC. A move must improve
    DIC by more than `improvement`. Non-converged candidate fits are skipped.
    """
    priors = priors or PriorConfig()
    order = {n: i for i, n in enumerate(candidates)}
    rand_ok = set(random_candidates) if variant == "RPNBL" else set()
    trace: List[tuple] = []
    step = 0

    def make(fixed, random):
        return _Candidate(tuple(fixed), tuple(random), order)

    def evaluate(moves: List[Tuple[str, str, _Candidate]]) -> List[Tuple[str, str, _Candidate, float]]:
        specs = [c.spec(variant, priors, literal_mixing_weight) for _, _, c in moves]
        scores = parallel_map(score_fn, specs, threads)
        kept = []
        for (move, name, cand), (value, converged) in zip(moves, scores):
            if not converged:
                log_event("stepwise_warning", f"{move} {name}: fit did not converge, skipped", "effects")
                trace.append((step, f"skip-{move}", name, value))
                continue
            trace.append((step, move, name, value))
            kept.append((move, name, cand, value))
        return kept

    current = make((), ())
    current_dic, ok = score_fn(current.spec(variant, priors, literal_mixing_weight))
    trace.append((0, "start", "", current_dic))
    if not ok:
        log_event("stepwise_warning", "intercept-only fit did not converge", "effects")

    while True:
        step += 1
        included = set(current.fixed) | set(current.random)
        moves = [("add", c, make((*current.fixed, c), current.random)) for c in candidates if c not in included]
        moves += [("random", c, make(tuple(f for f in current.fixed if f != c), (*current.random, c)))
                  for c in candidates if c in current.fixed and c in rand_ok]
        if not moves:
            break
        scored = evaluate(moves)
        if not scored:
            break
        move, name, cand, value = min(scored, key=lambda m: (m[3], order[m[1]]))
        if value >= current_dic - improvement:
            break
        current, current_dic = cand, value
        log_event("stepwise", f"{move} {name}: DIC={value:.2f}", "effects")

        while True:
            step += 1
            drops = [("drop", c, make(tuple(f for f in current.fixed if f != c),
                                      tuple(r for r in current.random if r != c)))
                     for c in sorted(set(current.fixed) | set(current.random), key=order.get) if c != name]
            scored = evaluate(drops)
            if not scored:
                break
            _, dname, dcand, dvalue = min(scored, key=lambda m: (m[3], order[m[1]]))
            if dvalue >= current_dic - improvement:
                break
            current, current_dic = dcand, dvalue
            log_event("stepwise", f"drop {dname}: DIC={dvalue:.2f}", "effects")

    spec = current.spec(variant, priors, literal_mixing_weight)
    if variant == "RPNBL" and spec.variant != "RPNBL":
        log_event("stepwise_warning", "no random parameter selected; RPNBL falls back to NBL", "effects")
    return spec, pd.DataFrame(trace, columns=TRACE_COLUMNS)


def select_model(train: Dataset, variant: str, model: ModelConfig, effects: Optional[EffectsConfig] = None,
                 seed: int = 0, threads: Optional[int] = None,
                 score_fn: Optional[ScoreFn] = None) -> Tuple[ModelSpec, pd.DataFrame, pd.DataFrame]:
    """VIF screen then stepwise DIC for one variant. Returns (spec, VIF table, stepwise trace)."""
    effects = effects or EffectsConfig()
    frame = train.to_frame()[train.names]
    constant = [n for n in train.names if frame[n].nunique() <= 1]
    if constant:
        log_event("vif", f"constant in the training split, excluded: {', '.join(constant)}", "effects")
    retained, vif_table = vif_screen(frame.drop(columns=constant), effects.vif_threshold)
    random_ok = [r for r in model.random_candidates if r in retained]
    if not effects.run_stepwise:
        random = tuple(random_ok) if variant == "RPNBL" else ()
        spec = ModelSpec("NBL" if variant == "RPNBL" and not random else variant, tuple(retained), random,
                         model.priors, model.literal_mixing_weight)
        return spec, vif_table, pd.DataFrame(columns=TRACE_COLUMNS)
    score_fn = score_fn or default_score_fn(train, effects.stepwise_mcmc, seed, threads)
    spec, trace = stepwise_dic(retained, variant, score_fn, random_ok, effects.dic_improvement,
                               model.priors, model.literal_mixing_weight, threads)
    return spec, vif_table, trace


# === HALTON ===
def first_primes(n: int) -> List[int]:
    primes: List[int] = []
    k = 2
    while len(primes) < n:
        if all(k % p for p in primes if p * p <= k):
            primes.append(k)
        k += 1
    return primes


def halton(dimension: int, n: int, skip: int = 20) -> np.ndarray:
    """Radical-inverse Halton points in bases first_primes(dimension), dropping the origin and `skip` more."""
    sampler = qmc.Halton(d=dimension, scramble=False)
    sampler.fast_forward(1 + skip)
    return sampler.random(n)


def normal_draws(dimension: int, n: int, skip: int = 20) -> np.ndarray:
    return norm.ppf(halton(dimension, n, skip))


# === MARGINAL EFFECTS ===
@dataclass
class EffectReport:
    names: List[str]
    kinds: Dict[str, str]
    ame: Dict[str, float]
    per_observation: pd.DataFrame
    n_draws: int
    primes: List[int]

    def to_table(self) -> pd.DataFrame:
        return pd.DataFrame([(n, self.ame[n], self.kinds[n]) for n in self.names], columns=AME_COLUMNS)


def _expected_lambda(X1: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """(K, S) matrix of exp(x_k' b_s) for coefficient draws b (S, P)."""
    return np.exp(np.minimum(X1 @ beta.T, 700.0))


def _effects_at(X1: np.ndarray, beta: np.ndarray, names: List[str], kinds: Dict[str, str]) -> np.ndarray:
    K = X1.shape[0]
    out = np.empty((K, len(names)))
    lam = _expected_lambda(X1, beta)
    for j, name in enumerate(names):
        col = j + 1
        if kinds[name] == "continuous":
            out[:, j] = (lam * beta[:, col][None, :]).mean(axis=1)
        else:
            hi, lo = X1.copy(), X1.copy()
            hi[:, col], lo[:, col] = 1.0, 0.0
            out[:, j] = (_expected_lambda(hi, beta) - _expected_lambda(lo, beta)).mean(axis=1)
    return out


def _coefficient_draws(spec: ModelSpec, beta_mean: np.ndarray, sigma: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Halton coefficient draws: random entries beta_l + sigma_l * eps, fixed entries constant."""
    beta = np.tile(beta_mean, (len(eps), 1))
    for r, name in enumerate(spec.random):
        col = 1 + spec.covariates.index(name)
        beta[:, col] = beta_mean[col] + sigma[r] * eps[:, r]
    return beta


def average_marginal_effects(fit_result: PosteriorFit, test: Dataset, kinds: Dict[str, str],
                             draws: int = 200, skip: int = 20, full_posterior: bool = False,
                             max_posterior_draws: int = 200) -> EffectReport:
    spec = fit_result.spec
    names = list(spec.covariates)
    for n in names:
        if kinds.get(n) not in KINDS:
            raise ValueError(f"unknown covariate type for {n}: {kinds.get(n)!r}")
    X1 = np.column_stack([np.ones(len(test)), test.columns(names)])
    R = len(spec.random)
    eps = normal_draws(R, draws, skip) if R else np.zeros((1, 0))
    primes = first_primes(R)

    beta_draws = fit_result.beta_draws()
    sigma_draws = fit_result.sigma_draws() if R else np.zeros((len(beta_draws), 0))
    if full_posterior:
        pick = np.unique(np.linspace(0, len(beta_draws) - 1, min(max_posterior_draws, len(beta_draws))).astype(int))
        per_obs = np.mean([
            _effects_at(X1, _coefficient_draws(spec, beta_draws[i], sigma_draws[i], eps), names, kinds)
            for i in pick], axis=0)
    else:
        coef = _coefficient_draws(spec, beta_draws.mean(axis=0), sigma_draws.mean(axis=0), eps)
        per_obs = _effects_at(X1, coef, names, kinds)

    frame = pd.DataFrame(per_obs, columns=names)
    ame = {n: float(frame[n].mean()) for n in names}
    return EffectReport(names, {n: kinds[n] for n in names}, ame, frame, len(eps), primes)
