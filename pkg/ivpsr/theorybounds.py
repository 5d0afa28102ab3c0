"""Computable finite-sample quantities and Monte Carlo harnesses around them."""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
import pandas as pd
from scipy import stats

from ivpsr.config import settings
from ivpsr.errors import BoundInputError, PsrError
from ivpsr.features import extract_triplets
from ivpsr.oracles import exact_initial_state, exact_triplets, forward_predictive
from ivpsr.schemas import BoundInputs, BoundResult, FeatureSpec, HmmParams, RegressorSpec, SamplerSpec
from ivpsr.seqdata import child_seeds, make_rng, sample_hmm
from ivpsr.twostage import filter_sequence, fit_predictive_model

logger = logging.getLogger(__name__)


# Closed-form bounds
def _zeta(name: str, c: float, lam1: float, tr: float, norm_cross: float, n: float, delta: float,
          cross: bool) -> BoundResult:
    c2 = c * c
    if cross:
        r = c2 + norm_cross
        v = c2 * lam1 + norm_cross ** 2
    else:
        r = c2 + lam1
        v = c2 * lam1 + lam1 ** 2
    k = c2 * tr
    t = max(2.6, 2.0 * math.log(4.0 * k / (delta * v)))
    sqrt_term = math.sqrt(2.0 * v * t / n)
    linear_term = r * t / (3.0 * n)
    return BoundResult(
        name=name, value=sqrt_term + linear_term,
        intermediates={"r": r, "v": v, "k": k, "t": t, "sqrt_term": sqrt_term, "linear_term": linear_term},
    )


def zeta_xy(inputs: BoundInputs) -> BoundResult:
    """Cross-covariance error bound"""
    return _zeta(
        "zeta_xy", inputs.c, max(inputs.lam1_y, inputs.lam1_x), inputs.tr_x + inputs.tr_y,
        inputs.norm_yx, inputs.n, inputs.delta, cross=True,
    )


def zeta_xx(inputs: BoundInputs) -> BoundResult:
    return _zeta("zeta_xx", inputs.c, inputs.lam1_x, inputs.tr_x, 0.0, inputs.n, inputs.delta, cross=False)


def zeta_yy(inputs: BoundInputs) -> BoundResult:
    return _zeta("zeta_yy", inputs.c, inputs.lam1_y, inputs.tr_y, 0.0, inputs.n, inputs.delta, cross=False)


def eta_ols(d_x: int, d_y: int, d_z: int, n: float, delta: float, scale: float = 1.0) -> BoundResult:
    """S1 rate for ordinary least squares; scale is a user calibration constant"""
    if min(d_x, d_y, d_z) < 1 or n <= 0 or not 0 < delta < 1 or scale <= 0:
        raise BoundInputError("eta_ols needs dims >= 1, n > 0, delta in (0, 1) and scale > 0")
    rate = math.sqrt(d_z / n)
    log_term = math.log((d_x + d_y) / delta)
    return BoundResult(name="eta_ols", value=scale * rate * log_term,
                       intermediates={"rate": rate, "log_term": log_term, "scale": scale})


def operator_norm(A: np.ndarray, tol: Optional[float] = None, max_iter: int = 10000) -> float:
    """Largest singular value by power iteration on A^T A"""
    tol = settings.power_iter_tol if tol is None else tol
    A = np.asarray(A, dtype=float)
    M = A.T @ A
    v = make_rng(0).standard_normal(M.shape[0])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = M @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        if abs(norm - est) <= tol * norm:
            return math.sqrt(norm)
        est = norm
    logger.warning("Power iteration for the operator norm hit max_iter")
    return math.sqrt(est)


# Coverage harness
@dataclass
class Population:
    cov: np.ndarray
    c: float
    lam1: float
    trace: float


def sampler_population(spec: SamplerSpec) -> Population:
    d = spec.dim
    if spec.kind == "gaussian":
        raise BoundInputError("gaussian samplers are unbounded; use a bounded construction")
    if spec.kind == "point_mass":
        p = np.asarray(spec.point if spec.point is not None else np.eye(d)[0], float)
        cov = np.outer(p, p)
        norm2 = float(p @ p)
        if norm2 == 0:
            raise BoundInputError("point mass at the origin has no positive scale")
        return Population(cov=cov, c=math.sqrt(norm2), lam1=norm2, trace=norm2)
    # basis_uniform and sign_cube both have covariance I / d and norm 1
    return Population(cov=np.eye(d) / d, c=1.0, lam1=1.0 / d, trace=1.0)


def draw_samples(spec: SamplerSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    d = spec.dim
    if spec.kind == "gaussian":
        raise BoundInputError("gaussian samplers are unbounded; use a bounded construction")
    if spec.kind == "point_mass":
        p = np.asarray(spec.point if spec.point is not None else np.eye(d)[0], float)
        return np.tile(p, (n, 1))
    if spec.kind == "basis_uniform":
        idx = rng.integers(0, d, size=n)
        signs = rng.choice([-1.0, 1.0], size=n)
        X = np.zeros((n, d))
        X[np.arange(n), idx] = signs
        return X
    return rng.choice([-1.0, 1.0], size=(n, d)) / math.sqrt(d)


@dataclass
class CoverageReport:
    n: int
    delta: float
    trials: int
    bound: float
    violations: int
    rate: float
    ci_low: float
    ci_high: float
    nominal_se: float

    def within_nominal(self, n_se: float = 3.0) -> bool:
        return self.rate <= self.delta / 2 + n_se * self.nominal_se

    def as_dict(self) -> Dict[str, float]:
        return dict(self.__dict__)


def check_cov_coverage(
    sampler: SamplerSpec, n: int, delta: float, trials: int, seed: int, statistic: str = "xx"
) -> CoverageReport:
    """Fraction of trials whose empirical (uncentered) covariance misses by at least zeta"""
    pop = sampler_population(sampler)
    inputs = BoundInputs(c=pop.c, lam1_x=pop.lam1, lam1_y=pop.lam1, tr_x=pop.trace, tr_y=pop.trace,
                         norm_yx=pop.lam1, n=n, delta=delta)
    # y = x for the cross statistic, so the population cross-covariance is the covariance itself
    bound = (zeta_xy(inputs) if statistic == "xy" else zeta_xx(inputs)).value
    violations = 0
    for child in child_seeds(seed, trials):
        X = draw_samples(sampler, n, make_rng(child))
        err = operator_norm(X.T @ X / n - pop.cov)
        violations += err >= bound
    ci = stats.binomtest(int(violations), trials).proportion_ci(confidence_level=0.95, method="exact")
    p0 = delta / 2
    report = CoverageReport(
        n=n, delta=delta, trials=trials, bound=bound, violations=int(violations),
        rate=violations / trials, ci_low=float(ci.low), ci_high=float(ci.high),
        nominal_se=math.sqrt(p0 * (1 - p0) / trials),
    )
    logger.info(f"Coverage {sampler.kind} N={n}: {report.violations}/{trials} violations (bound {bound:.4f})")
    return report


# Convergence trends
def spectral_spec(params: HmmParams, reduced: bool = True) -> FeatureSpec:
    return FeatureSpec(kind="discrete_indicator", k=1, history_len=1, alphabet_size=params.n_obs,
                       projection_rank=params.n_states if reduced else None)


def _prediction_error(model, params: HmmParams, test, metric: str) -> float:
    errs = []
    for s in test:
        pred = filter_sequence(model, s).probabilities()
        diff = np.abs(pred - forward_predictive(params, s.steps))
        errs.append(diff.sum(axis=1) if metric == "l1" else diff.max(axis=1))
    return float(np.mean(np.concatenate(errs)))


def _train_cell(params: HmmParams, spec: FeatureSpec, n: int, seed, seq_len: int, lam: Optional[float]):
    n_seqs = math.ceil(n / (seq_len - spec.history_len - spec.k)) + 1
    seqs = sample_hmm(params, seq_len, n_seqs, seed)
    data = extract_triplets(seqs, spec)
    data = data.subset(np.arange(min(n, data.n)))
    return fit_predictive_model(seqs, spec, RegressorSpec(method="ols"), lam=lam, data=data)


def convergence_curve(
    params: HmmParams,
    n_list: Sequence[int],
    seeds: Sequence[int],
    metric: str = "l1",
    lam: Optional[float] = None,
    lam_per_sample: Optional[float] = 1e-3,
    include_exact: bool = False,
    n_test: int = 200,
    test_len: int = 50,
    train_len: int = 50,
    reduced: bool = True,
) -> pd.DataFrame:
    """Held-out one-step error against the forward oracle, one row per (N, seed)

    Without a fixed `lam` the S2 ridge grows as lam_per_sample * N; lam_per_sample=None falls back
    to the trace-scaled default.
    """
    spec = spectral_spec(params, reduced)
    rows: List[Dict] = []
    for seed in seeds:
        train_seed, test_seed = child_seeds(seed, 2)
        test = sample_hmm(params, test_len, n_test, test_seed)
        for n, cell_seed in zip(n_list, train_seed.spawn(len(n_list))):
            try:
                cell_lam = lam if lam is not None or lam_per_sample is None else lam_per_sample * n
                model = _train_cell(params, spec, n, cell_seed, train_len, cell_lam)
                rows.append({"N": float(n), "seed": seed, "error": _prediction_error(model, params, test, metric),
                             "status": "ok"})
            except (PsrError, np.linalg.LinAlgError, ValueError) as e:
                logger.error(f"Convergence cell N={n} seed={seed} failed: {e}")
                rows.append({"N": float(n), "seed": seed, "error": np.nan, "status": str(e)})
        if include_exact:
            model = fit_predictive_model(
                [], spec, RegressorSpec(method="ols"), lam=0.0,
                data=exact_triplets(params, spec), initial=exact_initial_state(params, spec),
            )
            rows.append({"N": math.inf, "seed": seed, "error": _prediction_error(model, params, test, metric),
                         "status": "ok"})
    return pd.DataFrame(rows, columns=["N", "seed", "error", "status"])


def median_curve(cells: pd.DataFrame) -> pd.DataFrame:
    ok = cells[cells["status"] == "ok"]
    return ok.groupby("N", as_index=False)["error"].median().rename(columns={"error": "median_error"})


def lambda_sweep(
    params: HmmParams,
    n: int,
    lam_list: Sequence[float],
    seeds: Sequence[int],
    metric: str = "l1",
    n_test: int = 200,
    test_len: int = 50,
    train_len: int = 50,
    reduced: bool = True,
) -> pd.DataFrame:
    """Fixed-N S2 regulariser sweep, one row per (lam, seed)"""
    spec = spectral_spec(params, reduced)
    rows = []
    for seed in seeds:
        train_seed, test_seed = child_seeds(seed, 2)
        test = sample_hmm(params, test_len, n_test, test_seed)
        for lam in lam_list:
            model = _train_cell(params, spec, n, train_seed, train_len, lam)
            rows.append({"lam": lam, "seed": seed, "error": _prediction_error(model, params, test, metric)})
    return pd.DataFrame(rows, columns=["lam", "seed", "error"])
