"""Filter / predict plugins: observable operators for HMMs and Gaussian moment conditioning."""
from dataclasses import dataclass
from typing import List, Optional, Tuple
import logging

import numpy as np
from scipy import linalg

from ivpsr.config import settings
from ivpsr.errors import ConditioningError, DegenerateNormalizerError, LayoutError
from ivpsr.features import Basis
from ivpsr.regress import pinv_truncated
from ivpsr.schemas import HmmParams
from ivpsr.seqdata import ObservationSeq, child_seeds, make_rng

logger = logging.getLogger(__name__)


# Observable operators
@dataclass(frozen=True)
class HmmOperators:
    B: np.ndarray          # (n_symbols, m, m); B[x] maps q_t to the unnormalised q_{t+1}
    b_inf: np.ndarray
    U: Basis
    projected: bool

    @property
    def n_symbols(self) -> int:
        return self.B.shape[0]


def clamp_simplex(p: np.ndarray, eps: Optional[float] = None) -> np.ndarray:
    """Raise entries below eps to eps and renormalise"""
    eps = settings.clamp_eps if eps is None else eps
    p = np.maximum(p, eps)
    return p / p.sum()


def hmm_operators_from_w(
    W: np.ndarray,
    basis: Optional[Basis] = None,
    b_inf: Optional[np.ndarray] = None,
    alphabet_size: Optional[int] = None,
) -> HmmOperators:
    """B_x = row block x of W, following the e_{o_t} (x) psi_{t+1} layout of xi"""
    W = np.asarray(W, dtype=float)
    d_xi, m = W.shape
    if d_xi % m:
        raise LayoutError(f"W has {d_xi} rows, not a multiple of the state dimension {m}")
    A = d_xi // m
    if alphabet_size is not None and A != alphabet_size:
        raise LayoutError(f"W has {A} symbol blocks, expected {alphabet_size}")
    projected = basis is not None
    if projected and basis.rank != m:
        raise LayoutError(f"basis rank {basis.rank} does not match state dimension {m}")
    if b_inf is None:
        if projected:
            raise LayoutError("a projected model needs an explicit normalizer")
        b_inf = np.ones(m)
    U = basis if projected else Basis(U=np.eye(m), singular_values=np.ones(m))
    return HmmOperators(B=W.reshape(A, m, m), b_inf=np.asarray(b_inf, float), U=U, projected=projected)


def hmm_normalizer(W_s1a: np.ndarray, U: Optional[Basis], P1_hat: np.ndarray) -> np.ndarray:
    """b_inf^T = P1^T (U^T P21)^+ with P21 = W_s1a diag(P1)"""
    P1 = np.asarray(P1_hat, dtype=float)
    P21 = np.asarray(W_s1a, dtype=float) * P1[None, :]
    M = P21 if U is None else U.U.T @ P21
    m = M.shape[0]
    s = np.linalg.svd(M, compute_uv=False)
    rank = int(np.sum(s > settings.pinv_rcond * s[0])) if s.size and s[0] > 0 else 0
    if rank < m:
        logger.warning(f"U^T P21 has numerical rank {rank} < {m}; normalizer uses a pseudo-inverse")
    return pinv_truncated(M).T @ P1


def normalizer_from_states(states: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Least-squares b with b^T q = 1 over a set of predictive states"""
    X = np.asarray(states, dtype=float)
    w = np.ones(len(X)) if weights is None else np.asarray(weights, float)
    sw = np.sqrt(w)[:, None]
    return pinv_truncated(X * sw) @ sw[:, 0]


def _normalise(ops: HmmOperators, v: np.ndarray, floor: Optional[float], eps: Optional[float]) -> np.ndarray:
    floor = settings.normalizer_floor if floor is None else floor
    z = float(ops.b_inf @ v)
    if not np.isfinite(z) or abs(z) < floor:
        raise DegenerateNormalizerError(f"normalizer {z:.3e} below {floor:g}", value=z)
    q = v / z
    if not ops.projected:
        return clamp_simplex(q, eps)
    # U q estimates the future-window distribution; pull it back onto the simplex when it leaves
    window = ops.U.U @ q
    if window.min() < 0:
        q = ops.U.U.T @ clamp_simplex(window, eps)
    return q


def hmm_filter(
    ops: HmmOperators, q: np.ndarray, x: int,
    floor: Optional[float] = None, eps: Optional[float] = None,
) -> np.ndarray:
    """q' = B_x q / (b_inf^T B_x q)"""
    if not 0 <= x < ops.n_symbols:
        raise LayoutError(f"symbol {x} outside the operator alphabet of size {ops.n_symbols}")
    return _normalise(ops, ops.B[x] @ q, floor, eps)


def hmm_predict(
    ops: HmmOperators, q: np.ndarray,
    floor: Optional[float] = None, eps: Optional[float] = None,
) -> np.ndarray:
    """q_{t+1|t-1} = sum_x B_x q, normalised"""
    return _normalise(ops, ops.B.sum(axis=0) @ q, floor, eps)


def hmm_observation_probs(ops: HmmOperators, q: np.ndarray, eps: Optional[float] = None) -> np.ndarray:
    """P(o_t = x | history) = b_inf^T B_x q"""
    probs = np.einsum("m,xmn,n->x", ops.b_inf, ops.B, q)
    return clamp_simplex(probs, eps)


# Gaussian moments
@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.mean)


def psd_clip(cov: np.ndarray) -> np.ndarray:
    cov = (cov + cov.T) / 2
    if cov.size == 0:
        return cov
    w, v = np.linalg.eigh(cov)
    if w.min() < 0:
        level = logging.WARNING if w.min() < -settings.eig_clip_tol * max(1.0, abs(w).max()) else logging.DEBUG
        logger.log(level, f"Clipped covariance eigenvalue {w.min():.3e} to 0")
        cov = (v * np.clip(w, 0.0, None)) @ v.T
        cov = (cov + cov.T) / 2
    return cov


def moment_dim(length: int) -> int:
    """d such that d + d^2 == length"""
    d = int(round((np.sqrt(1 + 4 * length) - 1) / 2))
    if d + d * d != length:
        raise LayoutError(f"{length} is not a 1st+2nd moment length")
    return d


def gaussian_extended_from_moments(p: np.ndarray) -> GaussianBelief:
    """[mean; vec(E[x x^T])] -> (mean, covariance)"""
    p = np.asarray(p, dtype=float)
    d = moment_dim(len(p))
    mean = p[:d]
    second = p[d:].reshape(d, d)
    return GaussianBelief(mean=mean.copy(), cov=psd_clip(second - np.outer(mean, mean)))


def moments_from_gaussian(belief: GaussianBelief) -> np.ndarray:
    second = belief.cov + np.outer(belief.mean, belief.mean)
    return np.concatenate([belief.mean, second.ravel()])


def gaussian_condition(belief: GaussianBelief, o: np.ndarray, jitter: Optional[float] = None) -> GaussianBelief:
    """Condition a joint over (o_t, future) on the leading o_t block"""
    o = np.atleast_1d(np.asarray(o, dtype=float))
    d = len(o)
    if d == 0:
        return belief
    jitter = settings.gaussian_jitter if jitter is None else jitter
    mu_o, mu_f = belief.mean[:d], belief.mean[d:]
    S = belief.cov
    S_oo = S[:d, :d] + jitter * np.trace(S[:d, :d]) / d * np.eye(d)
    S_fo = S[d:, :d]
    try:
        factor = linalg.cho_factor(S_oo)
    except linalg.LinAlgError:
        raise ConditioningError("observation covariance is singular after jitter")
    gain = linalg.cho_solve(factor, S_fo.T).T
    mean = mu_f + gain @ (o - mu_o)
    cov = S[d:, d:] - gain @ S_fo.T
    return GaussianBelief(mean=mean, cov=psd_clip(cov))


def gaussian_marginalize(belief: GaussianBelief, obs_dim: int) -> GaussianBelief:
    """Drop the leading o_t block"""
    return GaussianBelief(mean=belief.mean[obs_dim:].copy(), cov=belief.cov[obs_dim:, obs_dim:].copy())


# Plugins
class HmmPlugin:
    name = "hmm"

    def __init__(self, ops: HmmOperators, k: int = 1, eps: Optional[float] = None, floor: Optional[float] = None):
        self.ops = ops
        self.k = k
        self.eps = eps
        self.floor = floor

    def filter(self, q: np.ndarray, x: int) -> np.ndarray:
        return hmm_filter(self.ops, q, int(x), self.floor, self.eps)

    def predict(self, q: np.ndarray) -> np.ndarray:
        return hmm_predict(self.ops, q, self.floor, self.eps)

    def observation(self, q: np.ndarray) -> np.ndarray:
        if self.ops.projected:
            return hmm_observation_probs(self.ops, q, self.eps)
        A = self.ops.n_symbols
        return clamp_simplex(q.reshape(A, -1).sum(axis=1), self.eps)


class GaussianPlugin:
    name = "gaussian"

    def __init__(self, obs_dim: int, W: np.ndarray, intercept: Optional[np.ndarray] = None):
        self.obs_dim = obs_dim
        self.W = np.asarray(W, dtype=float)
        self.intercept = None if intercept is None else np.asarray(intercept, dtype=float)

    def extended(self, q: np.ndarray) -> np.ndarray:
        """p = W q + c"""
        p = self.W @ q
        return p if self.intercept is None else p + self.intercept

    def filter(self, q: np.ndarray, o: np.ndarray) -> np.ndarray:
        belief = gaussian_extended_from_moments(self.extended(q))
        return moments_from_gaussian(gaussian_condition(belief, o))

    def predict(self, q: np.ndarray) -> np.ndarray:
        belief = gaussian_extended_from_moments(self.extended(q))
        return moments_from_gaussian(gaussian_marginalize(belief, self.obs_dim))

    def observation(self, q: np.ndarray) -> GaussianBelief:
        belief = gaussian_extended_from_moments(q)
        d = self.obs_dim
        return GaussianBelief(mean=belief.mean[:d], cov=belief.cov[:d, :d])


# Classic table-based spectral estimator
@dataclass
class SpectralTables:
    P1: np.ndarray
    P21: np.ndarray
    P3x1: np.ndarray


def spectral_hmm_tables(seqs: List[ObservationSeq], alphabet_size: int) -> SpectralTables:
    """Empirical P(o_{t-1}), P(o_t, o_{t-1}), P(o_{t+1}, o_t = x, o_{t-1}) over consecutive triples"""
    A = alphabet_size
    counts = np.zeros((A, A, A))
    for s in seqs:
        o = s.steps
        if len(o) >= 3:
            np.add.at(counts, (o[1:-1], o[2:], o[:-2]), 1.0)
    total = counts.sum()
    if total == 0:
        raise LayoutError("no sequence has three consecutive observations")
    P3x1 = counts / total
    P21 = P3x1.sum(axis=1)
    return SpectralTables(P1=P21.sum(axis=0), P21=P21, P3x1=P3x1)


def spectral_hmm_w(tables: SpectralTables) -> np.ndarray:
    """W = P_{2:3,1} P_{2,1}^+ in the xi = e_{o_t} (x) e_{o_{t+1}} layout"""
    A = len(tables.P1)
    P231 = tables.P3x1.reshape(A * A, A)
    return P231 @ pinv_truncated(tables.P21)


# EM baseline
def _pad(seqs: List[ObservationSeq]) -> Tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    obs = np.zeros((len(seqs), L), dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        obs[i, :len(s)] = s.steps
        mask[i, :len(s)] = True
    return obs, mask


def _forward_backward(T, O, pi, obs, mask):
    S, L = obs.shape
    m = len(pi)
    E = O[obs]  # (S, L, m)
    alpha = np.empty((S, L, m))
    c = np.ones((S, L))
    for t in range(L):
        a = pi[None, :] * E[:, 0] if t == 0 else (alpha[:, t - 1] @ T.T) * E[:, t]
        z = np.maximum(a.sum(axis=1), np.finfo(float).tiny)
        live = mask[:, t]
        c[:, t] = np.where(live, z, 1.0)
        alpha[:, t] = np.where(live[:, None], a / z[:, None], alpha[:, t - 1] if t else a / z[:, None])
    beta = np.ones((S, L, m))
    for t in range(L - 2, -1, -1):
        b = ((E[:, t + 1] * beta[:, t + 1]) @ T) / c[:, t + 1][:, None]
        beta[:, t] = np.where(mask[:, t + 1][:, None], b, 1.0)
    return alpha, beta, c, E


def baum_welch(
    seqs: List[ObservationSeq], init: HmmParams, n_iters: Optional[int] = None
) -> Tuple[HmmParams, List[float]]:
    """Scaled Baum-Welch; returns final parameters and the log-likelihood before each update"""
    n_iters = settings.em_iters if n_iters is None else n_iters
    obs, mask = _pad(seqs)
    T, O, pi = init.T, init.O, init.pi
    A = O.shape[0]
    onehot = np.eye(A)[obs] * mask[:, :, None]
    history: List[float] = []
    for _ in range(n_iters):
        alpha, beta, c, E = _forward_backward(T, O, pi, obs, mask)
        history.append(float(np.log(c).sum()))
        gamma = alpha * beta * mask[:, :, None]
        gamma /= np.maximum(gamma.sum(axis=2, keepdims=True), np.finfo(float).tiny)
        gamma *= mask[:, :, None]
        # xi[i, j] = sum over steps of P(s_{t+1} = i, s_t = j | o)
        nxt = (E[:, 1:] * beta[:, 1:]) / c[:, 1:, None] * mask[:, 1:, None]
        xi = T * np.einsum("sti,stj->ij", nxt, alpha[:, :-1])
        pi = gamma[:, 0].mean(axis=0)
        col = xi.sum(axis=0)
        T = np.where(col > 0, xi / np.where(col > 0, col, 1.0), T)
        emit = np.einsum("stx,stj->xj", onehot, gamma)
        col = emit.sum(axis=0)
        O = np.where(col > 0, emit / np.where(col > 0, col, 1.0), O)
    for i in range(1, len(history)):
        if history[i] < history[i - 1] - 1e-10 * abs(history[i - 1]):
            logger.warning(f"EM log-likelihood decreased at iteration {i}: {history[i - 1]:.6f} -> {history[i]:.6f}")
    T = T / T.sum(axis=0)
    O = O / O.sum(axis=0)
    return HmmParams.from_arrays(T, O, pi / pi.sum()), history


def random_hmm_init(n_states: int, n_symbols: int, seed) -> HmmParams:
    rng = make_rng(seed)
    T = rng.dirichlet(np.ones(n_states), size=n_states).T
    O = rng.dirichlet(np.ones(n_symbols), size=n_states).T
    pi = rng.dirichlet(np.ones(n_states))
    return HmmParams.from_arrays(T / T.sum(axis=0), O / O.sum(axis=0), pi / pi.sum())


def sequence_loglik(params: HmmParams, seqs: List[ObservationSeq]) -> float:
    obs, mask = _pad(seqs)
    _, _, c, _ = _forward_backward(params.T, params.O, params.pi, obs, mask)
    return float(np.log(c).sum())


def fit_em_hmm(
    seqs: List[ObservationSeq],
    m: int,
    n_iters: Optional[int] = None,
    seed: int = 0,
    n_restarts: Optional[int] = None,
    alphabet_size: Optional[int] = None,
) -> HmmParams:
    """Baum-Welch with random restarts; keeps the restart with the best final likelihood"""
    n_restarts = settings.em_restarts if n_restarts is None else n_restarts
    A = alphabet_size or int(max(s.steps.max() for s in seqs)) + 1
    best, best_ll = None, -np.inf
    for i, child in enumerate(child_seeds(seed, n_restarts)):
        params, _ = baum_welch(seqs, random_hmm_init(m, A, child), n_iters)
        ll = sequence_loglik(params, seqs)
        logger.debug(f"EM restart {i}: log-likelihood {ll:.4f}")
        if ll > best_ll:
            best, best_ll = params, ll
    return best
