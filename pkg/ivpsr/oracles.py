"""Exact-model references: forward algorithm, population moments, Kalman recursion."""
from dataclasses import dataclass
from itertools import product
from typing import Optional, Tuple
import logging

import numpy as np
from scipy import linalg

from ivpsr.features import TripletDataset, encode_future, encode_history, encode_window, Basis
from ivpsr.schemas import FeatureSpec, HmmParams, LdsParams
from ivpsr.seqdata import make_rng

logger = logging.getLogger(__name__)


# HMM references
def forward_predictive(params: HmmParams, obs: np.ndarray) -> np.ndarray:
    """P(o_t = . | o_{1:t-1}) for t = 1..L, one row per step"""
    T, O = params.T, params.O
    belief = params.pi.copy()
    out = np.empty((len(obs), O.shape[0]))
    for t, x in enumerate(np.asarray(obs, dtype=np.int64)):
        out[t] = O @ belief
        post = O[x] * belief
        belief = T @ (post / post.sum())
    return out


def stationary_distribution(T: np.ndarray, tol: float = 1e-14, max_iter: int = 100000) -> np.ndarray:
    """Power iteration on a column-stochastic matrix"""
    q = np.full(T.shape[0], 1.0 / T.shape[0])
    for _ in range(max_iter):
        nxt = T @ q
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - q)) < tol:
            return nxt
        q = nxt
    logger.warning("Power iteration for the stationary distribution hit max_iter")
    return q


@dataclass
class JointTables:
    P1: np.ndarray    # P(o_1 = j)
    P21: np.ndarray   # P(o_2 = i, o_1 = j)
    P3x1: np.ndarray  # P(o_3 = i, o_2 = x, o_1 = j), indexed [x, i, j]


def exact_joint_tables(params: HmmParams, start: Optional[np.ndarray] = None) -> JointTables:
    T, O = params.T, params.O
    rho = stationary_distribution(T) if start is None else np.asarray(start, float)
    P1 = O @ rho
    P21 = O @ T @ np.diag(rho) @ O.T
    P3x1 = np.stack([O @ T @ np.diag(O[x]) @ T @ np.diag(rho) @ O.T for x in range(O.shape[0])])
    return JointTables(P1=P1, P21=P21, P3x1=P3x1)


def string_probabilities(params: HmmParams, strings: np.ndarray, start: np.ndarray) -> np.ndarray:
    T, O = params.T, params.O
    alpha = start[None, :] * O[strings[:, 0]]
    for i in range(1, strings.shape[1]):
        alpha = (alpha @ T.T) * O[strings[:, i]]
    return alpha.sum(axis=1)


def exact_triplets(
    params: HmmParams,
    spec: FeatureSpec,
    start: Optional[np.ndarray] = None,
    basis: Optional[Basis] = None,
) -> TripletDataset:
    """Weighted triplets enumerating every history/future string with its exact probability"""
    A, b, k = params.n_obs, spec.history_len, spec.k
    rho = stationary_distribution(params.T) if start is None else np.asarray(start, float)
    strings = np.array(list(product(range(A), repeat=b + k + 1)), dtype=np.int64)
    probs = string_probabilities(params, strings, rho)
    keep = probs > 0
    strings, probs = strings[keep], probs[keep]
    psi, xi = encode_future(spec, strings[:, b:], basis)
    return TripletDataset(
        H=encode_history(spec, strings[:, :b]), Psi=psi, Xi=xi,
        seq_index=np.zeros(len(strings), dtype=np.int64),
        time_index=np.full(len(strings), b, dtype=np.int64),
        spec=spec, weights=probs / probs.sum(), basis=basis,
    )


def exact_initial_state(params: HmmParams, spec: FeatureSpec, basis: Optional[Basis] = None) -> np.ndarray:
    """E[psi_1] under the model's initial distribution"""
    strings = np.array(list(product(range(params.n_obs), repeat=spec.k)), dtype=np.int64)
    probs = string_probabilities(params, strings, params.pi)
    return sum(p * encode_window(spec, s, basis) for s, p in zip(strings, probs))


def random_hmm(n_states: int, n_symbols: int, seed: int, stay: float = 0.3) -> HmmParams:
    """Random HMM with a diagonal-boosted transition matrix, started at its stationary distribution"""
    rng = make_rng(seed)
    T = stay * np.eye(n_states) + (1 - stay) * rng.dirichlet(np.ones(n_states), size=n_states).T
    O = rng.dirichlet(np.ones(n_symbols), size=n_states).T
    T /= T.sum(axis=0)
    O /= O.sum(axis=0)
    pi = stationary_distribution(T)
    return HmmParams.from_arrays(T, O, pi / pi.sum())


# LDS references
def lyapunov_fixed_point(T: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Sigma = T Sigma T^T + Q"""
    S = linalg.solve_discrete_lyapunov(T, Q)
    return (S + S.T) / 2


def kalman_predictive(params: LdsParams, obs: np.ndarray, k: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the window o_{t:t+k-1} given o_{1:t-1}, for every t"""
    T, O = params.T, params.O
    Q = np.asarray(params.state_noise_cov, float)
    R = np.asarray(params.obs_noise_cov, float)
    n, d = params.n_states, params.obs_dim
    m = T @ np.asarray(params.initial_mean, float)
    P = T @ np.asarray(params.initial_cov, float) @ T.T + Q
    powers = [np.linalg.matrix_power(T, i) for i in range(k)]
    means = np.empty((len(obs), k * d))
    covs = np.empty((len(obs), k * d, k * d))
    for t, o in enumerate(np.asarray(obs, float)):
        for i in range(k):
            means[t, i * d:(i + 1) * d] = O @ powers[i] @ m
            for j in range(k):
                S = powers[i] @ P @ powers[j].T
                for l in range(1, min(i, j) + 1):
                    S = S + powers[i - l] @ Q @ powers[j - l].T
                block = O @ S @ O.T + (R if i == j else 0.0)
                covs[t, i * d:(i + 1) * d, j * d:(j + 1) * d] = block
        S_oo = O @ P @ O.T + R
        gain = linalg.solve(S_oo, O @ P, assume_a="pos").T
        m = m + gain @ (o - O @ m)
        P = P - gain @ O @ P
        m, P = T @ m, T @ P @ T.T + Q
        P = (P + P.T) / 2
    return means, covs
