"""Single-action kernel predictive state model: Gram-form S2 and kernel Bayes rule filtering."""
from dataclasses import dataclass, replace
from typing import Callable, List, Optional
import logging

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist, pdist

from ivpsr.config import settings
from ivpsr.errors import DegenerateNormalizerError, KernelSolveError
from ivpsr.features import extract_windows
from ivpsr.instantiations import clamp_simplex
from ivpsr.regress import fit_cme
from ivpsr.schemas import FeatureSpec, KernelSpec
from ivpsr.seqdata import ObservationSeq

logger = logging.getLogger(__name__)

EIG_TRUNCATION = 1e-12


# Gram matrices
def _points(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 1:
        return x.reshape(-1, 1)
    return x.reshape(len(x), -1)


def resolve_bandwidth(points: np.ndarray, kernel: KernelSpec) -> Optional[float]:
    """Fixed bandwidth, or the median pairwise distance"""
    if kernel.kind == "delta":
        return None
    if kernel.bandwidth is not None:
        return kernel.bandwidth
    dists = pdist(_points(points).astype(float))
    med = float(np.median(dists)) if dists.size else 0.0
    if not med > 0:
        logger.warning("Median pairwise distance is zero; falling back to bandwidth 1.0")
        return 1.0
    return med


def cross_gram(X: np.ndarray, Y: np.ndarray, kernel: KernelSpec, bandwidth: Optional[float] = None) -> np.ndarray:
    X, Y = _points(X), _points(Y)
    if kernel.kind == "delta":
        return (cdist(X, Y, metric="hamming") == 0).astype(float)
    if bandwidth is None:
        bandwidth = resolve_bandwidth(X, kernel)
    sq = cdist(X.astype(float), Y.astype(float), metric="sqeuclidean")
    return np.exp(-sq / (2.0 * bandwidth ** 2))


def gram(points: np.ndarray, kernel: KernelSpec, bandwidth: Optional[float] = None) -> np.ndarray:
    if len(points) == 0:
        raise ValueError("gram needs at least one point")
    G = cross_gram(points, points, kernel, bandwidth)
    return (G + G.T) / 2


def kernel_s1_weights(G_zz: np.ndarray, lam0: float) -> np.ndarray:
    return fit_cme(G_zz, lam0)


def _factor_with_retries(M: np.ndarray, ridge: float, what: str):
    """Cholesky of M + ridge I, multiplying ridge by 10 on failure"""
    eye = np.eye(len(M))
    for attempt in range(settings.kbr_max_retries + 1):
        try:
            return linalg.cho_factor(M + ridge * eye)
        except linalg.LinAlgError:
            logger.warning(f"{what} solve failed with ridge {ridge:.3g}; retrying with {ridge * 10:.3g}")
            ridge *= 10
    raise KernelSolveError(f"{what} solve failed after {settings.kbr_max_retries} retries")


class KernelS2Operator:
    """alpha -> Gamma (B^T G_XX B + lam N I)^-1 B^T g, mapping psi-atom coordinates to xi-atom weights"""

    def __init__(self, G_xx: np.ndarray, B: np.ndarray, Gamma: np.ndarray, lam: float):
        n = len(B)
        S = B.T @ G_xx @ B
        self.B = B
        self.Gamma = Gamma
        self.factor = _factor_with_retries((S + S.T) / 2, lam * n, "S2")

    def __call__(self, g: np.ndarray) -> np.ndarray:
        """g = Psi^T q: kernel evaluations of the state against the psi atoms"""
        return self.Gamma @ linalg.cho_solve(self.factor, self.B.T @ g)


def kernel_s2(G_xx: np.ndarray, B: np.ndarray, Gamma: np.ndarray, lam: float) -> Callable[[np.ndarray], np.ndarray]:
    """Gram-form W applier; compose with G_XX (or a cross Gram) to act on state weights"""
    op = KernelS2Operator(G_xx, B, Gamma, lam)
    return lambda alpha: op(G_xx @ alpha)


# Model
@dataclass
class KernelPsrModel:
    spec: FeatureSpec
    kernel: KernelSpec
    n: int
    s2: KernelS2Operator
    G_psi_shift: np.ndarray
    G_psi_first: np.ndarray
    L: np.ndarray
    L_pinv: np.ndarray
    obs_atoms: np.ndarray
    obs_bandwidth: Optional[float]
    shift_lead: np.ndarray
    first_lead: np.ndarray
    # delta kernels only: index of each shifted atom among the distinct shifted windows
    shift_groups: Optional[np.ndarray] = None

    @property
    def discrete(self) -> bool:
        return self.spec.discrete

    @classmethod
    def fit(
        cls, seqs: List[ObservationSeq], spec: FeatureSpec, kernel: KernelSpec,
        max_train: Optional[int] = None,
    ) -> "KernelPsrModel":
        max_train = max_train or settings.kernel_max_train
        w = extract_windows(seqs, spec)
        n_all = len(w.history)
        rows = np.arange(n_all)
        if n_all > max_train:
            rows = np.unique(np.linspace(0, n_all - 1, max_train).round().astype(int))
            logger.info(f"Subsampled {len(rows)} of {n_all} training windows")
        k = spec.k
        hist = w.history[rows]
        psi, shifted = w.future[rows, :k], w.future[rows, 1:]
        obs = w.future[rows, 0]
        first = np.stack([s.steps[:k] for s in seqs if len(s) >= k])

        bw_h = resolve_bandwidth(hist, kernel)
        bw_psi = resolve_bandwidth(psi, kernel)
        bw_o = resolve_bandwidth(obs, kernel)
        B = kernel_s1_weights(gram(hist, kernel, bw_h), kernel.lam0)
        G_xx = gram(psi, kernel, bw_psi)
        G_oo = gram(obs, kernel, bw_o)

        vals, vecs = np.linalg.eigh(G_oo)
        keep = vals > EIG_TRUNCATION * max(vals.max(), 0.0)
        L = vecs[:, keep] * np.sqrt(vals[keep])
        model = cls(
            spec=spec, kernel=kernel, n=len(rows),
            s2=KernelS2Operator(G_xx, B, B, kernel.s2_lam),
            G_psi_shift=cross_gram(psi, shifted, kernel, bw_psi),
            G_psi_first=cross_gram(psi, first, kernel, bw_psi),
            L=L, L_pinv=np.linalg.pinv(L), obs_atoms=obs, obs_bandwidth=bw_o,
            shift_lead=shifted[:, 0], first_lead=first[:, 0],
            shift_groups=_window_groups(shifted) if kernel.kind == "delta" else None,
        )
        logger.info(f"Fitted kernel model on {model.n} atoms (observation rank {L.shape[1]})")
        return model


@dataclass
class KernelState:
    """alpha: weights over the xi atoms; q_weights: the predictive state over first or shifted psi atoms"""
    alpha: np.ndarray
    q_weights: np.ndarray
    q_atoms: str
    model: KernelPsrModel


def kernel_initial_state(model: KernelPsrModel) -> KernelState:
    u = np.full(model.G_psi_first.shape[1], 1.0 / model.G_psi_first.shape[1])
    return KernelState(alpha=model.s2(model.G_psi_first @ u), q_weights=u, q_atoms="first", model=model)


def _kbr(model: KernelPsrModel, alpha: np.ndarray, ell: np.ndarray, lam: float) -> np.ndarray:
    """D G ((D G)^2 + lam N I)^-1 D g in low-rank form, G = L L^T and g = L ell"""
    L = model.L
    K = L.T @ (alpha[:, None] * L)
    K = (K + K.T) / 2
    factor = _factor_with_retries(K @ K, lam * model.n, "Kernel Bayes rule")
    return alpha * (L @ (K @ linalg.cho_solve(factor, ell)))


def _window_groups(windows: np.ndarray) -> np.ndarray:
    return np.unique(_points(windows), axis=0, return_inverse=True)[1].ravel()


def clamp_window_mass(weights: np.ndarray, groups: np.ndarray, eps: Optional[float] = None) -> np.ndarray:
    """Clamp the per-window mass of atom weights onto the simplex, rescaling each group.

    Under a delta kernel the state is determined by these masses, so this is clamp_simplex
    on the discrete predictive state.
    """
    mass = np.bincount(groups, weights=weights)
    target = clamp_simplex(mass, eps)
    live = np.abs(mass) > settings.normalizer_floor
    scale = np.where(live, target / np.where(live, mass, 1.0), 0.0)
    spread = np.where(live, 0.0, target / np.bincount(groups))
    return weights * scale[groups] + spread[groups]


def _advance(state: KernelState, weights: np.ndarray) -> KernelState:
    total = weights.sum()
    if not np.isfinite(total) or abs(total) < settings.normalizer_floor:
        raise DegenerateNormalizerError(f"kernel state weights sum to {total:.3e}", value=float(total))
    weights = weights / total
    model = state.model
    if model.shift_groups is not None:
        weights = clamp_window_mass(weights, model.shift_groups)
    return replace(state, alpha=model.s2(model.G_psi_shift @ weights), q_weights=weights, q_atoms="shifted")


def kbr_filter_step(state: KernelState, o, lam: Optional[float] = None) -> KernelState:
    """Condition the extended state on o_t and shift to the next predictive state"""
    model = state.model
    lam = model.kernel.lam if lam is None else lam
    g = cross_gram(model.obs_atoms, np.asarray(o)[None], model.kernel, model.obs_bandwidth)[:, 0]
    return _advance(state, _kbr(model, state.alpha, model.L_pinv @ g, lam))


def kbr_predict_step(state: KernelState, lam: Optional[float] = None) -> KernelState:
    """Marginalise o_t by embedding it with the state's own observation distribution"""
    model = state.model
    lam = model.kernel.lam if lam is None else lam
    return _advance(state, _kbr(model, state.alpha, model.L.T @ state.alpha, lam))


def kernel_predict_observation(state: KernelState):
    """Distribution (discrete) or mean (real) of o_t under the predictive state"""
    model = state.model
    lead = model.first_lead if state.q_atoms == "first" else model.shift_lead
    q = state.q_weights
    if model.discrete:
        probs = np.bincount(lead, weights=q, minlength=model.spec.alphabet_size)
        return clamp_simplex(probs)
    return (q @ _points(lead)) / q.sum()


def kernel_filter_sequence(model: KernelPsrModel, seq: ObservationSeq) -> np.ndarray:
    """One-step predictions from t = 1, resetting to the initial state on lost track"""
    initial = kernel_initial_state(model)
    state = initial
    preds = []
    for t, o in enumerate(seq.steps):
        preds.append(kernel_predict_observation(state))
        try:
            state = kbr_filter_step(state, o)
        except DegenerateNormalizerError as e:
            logger.warning(f"Kernel filter lost track in sequence {seq.id} at t={t + 1} ({e.detail})")
            state = initial
    return np.array(preds)
