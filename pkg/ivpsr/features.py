"""History / future / extended-future features and state-space bases."""
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple, Union
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ivpsr.config import settings
from ivpsr.errors import EmptyDatasetError, LayoutError, SequenceFormatError
from ivpsr.schemas import FeatureSpec
from ivpsr.seqdata import ObservationSeq

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Basis:
    U: np.ndarray
    singular_values: np.ndarray

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def rotate(self, Q: np.ndarray) -> "Basis":
        """Same subspace, columns mixed by an orthogonal Q"""
        return Basis(U=self.U @ Q, singular_values=self.singular_values)


@dataclass
class Windows:
    """Raw observation windows: history (N, b[, d]) and extended future (N, k+1[, d])"""
    history: np.ndarray
    future: np.ndarray
    seq_index: np.ndarray
    time_index: np.ndarray


@dataclass
class TripletDataset:
    H: np.ndarray
    Psi: np.ndarray
    Xi: np.ndarray
    seq_index: np.ndarray
    time_index: np.ndarray
    spec: FeatureSpec
    weights: Optional[np.ndarray] = None
    basis: Optional[Basis] = None

    def __post_init__(self):
        n = len(self.H)
        if n < 1:
            raise EmptyDatasetError("triplet dataset has no rows")
        if len(self.Psi) != n or len(self.Xi) != n:
            raise ValueError("H, Psi and Xi must have the same number of rows")
        if self.weights is not None and len(self.weights) != n:
            raise ValueError("weights must have one entry per row")

    @property
    def n(self) -> int:
        return len(self.H)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.H.shape[1], self.Psi.shape[1], self.Xi.shape[1]

    def subset(self, rows: np.ndarray) -> "TripletDataset":
        return replace(
            self, H=self.H[rows], Psi=self.Psi[rows], Xi=self.Xi[rows],
            seq_index=self.seq_index[rows], time_index=self.time_index[rows],
            weights=None if self.weights is None else self.weights[rows],
        )


# Encoders
def one_hot(symbols: np.ndarray, size: int) -> np.ndarray:
    return np.eye(size)[np.asarray(symbols, dtype=np.int64)]


def joint_index(symbols: np.ndarray, alphabet_size: int) -> np.ndarray:
    """Index of each row of symbols in the joint alphabet, oldest symbol most significant"""
    symbols = np.asarray(symbols, dtype=np.int64)
    powers = alphabet_size ** np.arange(symbols.shape[1] - 1, -1, -1)
    return symbols @ powers


def moment_stack(x: np.ndarray) -> np.ndarray:
    """[x; vec(x x^T)]"""
    x = np.asarray(x, dtype=float).ravel()
    return np.concatenate([x, np.outer(x, x).ravel()])


def moment_stack_rows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    second = np.einsum("ni,nj->nij", X, X).reshape(len(X), -1)
    return np.hstack([X, second])


def base_dim(spec: FeatureSpec) -> int:
    """Dimension of the unprojected future window"""
    if spec.discrete:
        return spec.alphabet_size ** spec.k
    return spec.k * spec.obs_dim


def feature_dims(spec: FeatureSpec) -> Tuple[int, int, int]:
    """(d_h, d_psi, d_xi) for a spec, honouring projection_rank"""
    b, k = spec.history_len, spec.k
    if spec.kind == "discrete_indicator":
        d_h = b * spec.alphabet_size
    elif spec.kind == "discrete_joint_history":
        d_h = spec.alphabet_size ** b
    elif spec.kind == "binary_history":
        d_h = b
    else:
        d_h = b * spec.obs_dim
    d_psi = spec.projection_rank or base_dim(spec)
    if spec.discrete:
        return d_h, d_psi, spec.alphabet_size * d_psi
    if spec.kind == "stacked_window":
        return d_h, d_psi, spec.obs_dim + d_psi
    dx = (k + 1) * spec.obs_dim
    return d_h, d_psi + d_psi ** 2, dx + dx ** 2


def encode_history(spec: FeatureSpec, history: np.ndarray) -> np.ndarray:
    n = len(history)
    if spec.kind == "discrete_indicator":
        return one_hot(history, spec.alphabet_size).reshape(n, -1)
    if spec.kind == "discrete_joint_history":
        return one_hot(joint_index(history, spec.alphabet_size), spec.alphabet_size ** spec.history_len)
    if spec.kind == "binary_history":
        return np.asarray(history, dtype=float)
    return np.asarray(history, dtype=float).reshape(n, -1)


def encode_future(
    spec: FeatureSpec, future: np.ndarray, basis: Optional[Basis] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Encode extended-future windows o_{t:t+k} into (psi_t, xi_t)"""
    n, k = len(future), spec.k
    if spec.discrete:
        A = spec.alphabet_size
        psi = one_hot(joint_index(future[:, :k], A), A ** k)
        if basis is None:
            xi = one_hot(joint_index(future, A), A ** (k + 1))
        else:
            shifted = one_hot(joint_index(future[:, 1:], A), A ** k) @ basis.U
            xi = (one_hot(future[:, 0], A)[:, :, None] * shifted[:, None, :]).reshape(n, -1)
            psi = psi @ basis.U
        return psi, xi

    window = np.asarray(future[:, :k], dtype=float).reshape(n, -1)
    extended = np.asarray(future, dtype=float).reshape(n, -1)
    if spec.kind == "moment_stacked_window":
        if basis is not None:
            raise LayoutError("moment-stacked features do not support a projection basis")
        return moment_stack_rows(window), moment_stack_rows(extended)
    if basis is None:
        return window, extended
    shifted = np.asarray(future[:, 1:], dtype=float).reshape(n, -1) @ basis.U
    return window @ basis.U, np.hstack([np.asarray(future[:, 0], dtype=float), shifted])


def encode_windows(spec: FeatureSpec, windows: np.ndarray, basis: Optional[Basis] = None) -> np.ndarray:
    """psi for a batch of k-step future windows, shape (N, k[, d])"""
    n = len(windows)
    if spec.discrete:
        psi = one_hot(joint_index(windows, spec.alphabet_size), spec.alphabet_size ** spec.k)
    else:
        psi = np.asarray(windows, dtype=float).reshape(n, -1)
        if spec.kind == "moment_stacked_window":
            if basis is not None:
                raise LayoutError("moment-stacked features do not support a projection basis")
            return moment_stack_rows(psi)
    return psi if basis is None else psi @ basis.U


def encode_window(spec: FeatureSpec, window: np.ndarray, basis: Optional[Basis] = None) -> np.ndarray:
    """psi for a single k-step future window"""
    return encode_windows(spec, np.asarray(window)[None], basis)[0]


# Extraction
def _check_sequences(seqs: List[ObservationSeq], spec: FeatureSpec) -> None:
    for s in seqs:
        if s.discrete != spec.discrete:
            raise SequenceFormatError(f"sequence {s.id} does not match {spec.kind} features")
        if spec.discrete and (s.steps.min() < 0 or s.steps.max() >= spec.alphabet_size):
            raise SequenceFormatError(f"sequence {s.id} has symbols outside [0, {spec.alphabet_size})")
        if not spec.discrete and s.dim != spec.obs_dim:
            raise SequenceFormatError(f"sequence {s.id} has dimension {s.dim}, expected {spec.obs_dim}")


def extract_windows(seqs: List[ObservationSeq], spec: FeatureSpec) -> Windows:
    """Raw windows at every t with a full history and extended future; no padding"""
    _check_sequences(seqs, spec)
    b, k = spec.history_len, spec.k
    span = b + k + 1
    hist, fut, seq_idx, time_idx = [], [], [], []
    for i, s in enumerate(seqs):
        if len(s) < span:
            continue
        win = sliding_window_view(s.steps, span, axis=0)
        if not s.discrete:
            win = np.moveaxis(win, -1, 1)
        hist.append(win[:, :b])
        fut.append(win[:, b:])
        seq_idx.append(np.full(len(win), i))
        time_idx.append(np.arange(b, b + len(win)))
    if not hist:
        raise EmptyDatasetError(f"no sequence is long enough for history {b} and window {k}")
    return Windows(
        history=np.concatenate(hist), future=np.concatenate(fut),
        seq_index=np.concatenate(seq_idx), time_index=np.concatenate(time_idx),
    )


def extract_triplets(
    seqs: List[ObservationSeq], spec: FeatureSpec, basis: Optional[Basis] = None
) -> TripletDataset:
    """(h_t, psi_t, xi_t) for every valid t, in sequence order"""
    w = extract_windows(seqs, spec)
    H = encode_history(spec, w.history)
    psi, xi = encode_future(spec, w.future, basis)
    logger.debug(f"Extracted {len(H)} triplets from {len(seqs)} sequences ({spec.kind})")
    return TripletDataset(
        H=H, Psi=psi, Xi=xi, seq_index=w.seq_index, time_index=w.time_index,
        spec=spec, basis=basis,
    )


def project_dataset(data: TripletDataset, basis: Basis) -> TripletDataset:
    """Apply U^T to psi and to the shifted-future block of xi"""
    if data.basis is not None:
        raise LayoutError("dataset is already projected")
    spec = data.spec
    U = basis.U
    if U.shape[0] != data.Psi.shape[1]:
        raise LayoutError(f"basis has {U.shape[0]} rows, psi has {data.Psi.shape[1]} entries")
    if spec.discrete:
        A = spec.alphabet_size
        xi = (data.Xi.reshape(data.n, A, -1) @ U).reshape(data.n, -1)
    elif spec.kind == "stacked_window":
        d = spec.obs_dim
        xi = np.hstack([data.Xi[:, :d], data.Xi[:, d:] @ U])
    else:
        raise LayoutError("moment-stacked features do not support a projection basis")
    return replace(data, Psi=data.Psi @ U, Xi=xi, basis=basis)


# Bases
def cross_covariance(data: TripletDataset) -> np.ndarray:
    """Empirical E[psi h^T], weighted when the dataset carries weights"""
    w = data.weights if data.weights is not None else np.full(data.n, 1.0 / data.n)
    return (data.Psi * w[:, None]).T @ data.H


def learn_basis(source: Union[TripletDataset, np.ndarray], m: int) -> Basis:
    """Top-m left singular vectors with the largest-magnitude entry of each column positive"""
    M = cross_covariance(source) if isinstance(source, TripletDataset) else np.asarray(source, float)
    if m < 1 or m > M.shape[0]:
        raise ValueError(f"basis rank {m} must be in [1, {M.shape[0]}]")
    u, s, _ = np.linalg.svd(M, full_matrices=True)
    rank = int(np.sum(s > settings.pinv_rcond * s[0])) if s.size and s[0] > 0 else 0
    if m > rank:
        logger.warning(f"Requested basis rank {m} exceeds numerical rank {rank}; padding from the full SVD")
    U = u[:, :m].copy()
    pivots = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[pivots, np.arange(m)])
    signs[signs == 0] = 1.0
    U *= signs
    sv = np.zeros(m)
    sv[: min(m, s.size)] = s[:m]
    return Basis(U=U, singular_values=sv)
