"""Stage-1 denoising, stage-2 estimation of W, initial state and the filter / predict loop."""
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Tuple, Union
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ivpsr.config import settings
from ivpsr.errors import DegenerateNormalizerError, EmptyDatasetError, LayoutError
from ivpsr.features import (
    Basis, TripletDataset, base_dim, cross_covariance, encode_windows, extract_triplets,
    learn_basis, moment_stack_rows, project_dataset,
)
from ivpsr.instantiations import (
    GaussianBelief, GaussianPlugin, HmmPlugin, hmm_normalizer, hmm_operators_from_w,
    normalizer_from_states,
)
from ivpsr.regress import FittedRegressor, fit, predict, ridge_solve
from ivpsr.schemas import BasisRecord, FeatureSpec, PredictiveModelRecord, RegressorSpec
from ivpsr.seqdata import ObservationSeq

logger = logging.getLogger(__name__)


@dataclass
class S1Model:
    reg_psi: FittedRegressor
    reg_xi: FittedRegressor
    # Moment layouts regress the first-moment block and rebuild the second moments
    moment: bool = False

    def denoise(self, H: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x, y = predict(self.reg_psi, H), predict(self.reg_xi, H)
        if self.moment:
            x = _moments_with_residual(x, self.reg_psi.residual_cov)
            y = _moments_with_residual(y, self.reg_xi.residual_cov)
        return x, y


@dataclass
class DenoisedRows:
    X: np.ndarray
    Y: np.ndarray
    weights: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return len(self.X)

    def row_weights(self) -> np.ndarray:
        return np.ones(self.n) if self.weights is None else self.weights


def _moments_with_residual(m: np.ndarray, R: np.ndarray) -> np.ndarray:
    """[m; vec(m m^T + R)] per row"""
    stacked = moment_stack_rows(m)
    stacked[:, m.shape[1]:] += R.ravel()[None, :]
    return stacked


# Stage 1
def s1_denoise(
    data: TripletDataset, spec: RegressorSpec, xi_spec: Optional[RegressorSpec] = None
) -> Tuple[S1Model, DenoisedRows]:
    """Regress psi and xi on the history features and return the denoised rows"""
    xi_spec = xi_spec or spec
    moment = data.spec.kind == "moment_stacked_window"
    if moment:
        d_psi = base_dim(data.spec)
        d_xi = d_psi + data.spec.obs_dim
        psi_target, xi_target = data.Psi[:, :d_psi], data.Xi[:, :d_xi]
    else:
        psi_target, xi_target = data.Psi, data.Xi
    model = S1Model(
        reg_psi=fit(data.H, psi_target, spec, weights=data.weights),
        reg_xi=fit(data.H, xi_target, xi_spec, weights=data.weights),
        moment=moment,
    )
    X, Y = model.denoise(data.H)
    return model, DenoisedRows(X=X, Y=Y, weights=data.weights)


# Stage 2
def default_s2_lambda(rows: DenoisedRows) -> float:
    """scale * tr(sum x x^T) / d_psi"""
    w = rows.row_weights()
    return settings.s2_lambda_scale * float(np.sum(w[:, None] * rows.X ** 2)) / rows.X.shape[1]


def s2_regress(rows: DenoisedRows, lam: Optional[float] = None) -> np.ndarray:
    """W = (sum y x^T)(sum x x^T + lam I)^-1"""
    lam = default_s2_lambda(rows) if lam is None else lam
    w = rows.row_weights()
    Xw = rows.X * w[:, None]
    return ridge_solve(Xw.T @ rows.X, Xw.T @ rows.Y, lam, strict=False).T


def s2_regress_affine(rows: DenoisedRows, lam: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Ridge S2 with an unpenalised intercept: y ~ W x + c"""
    w = rows.row_weights()
    x_mean = w @ rows.X / w.sum()
    y_mean = w @ rows.Y / w.sum()
    centred = DenoisedRows(X=rows.X - x_mean, Y=rows.Y - y_mean, weights=rows.weights)
    W = s2_regress(centred, lam)
    return W, y_mean - W @ x_mean


# Initial state
def estimate_initial_state(
    seqs: List[ObservationSeq],
    spec: FeatureSpec,
    basis: Optional[Basis] = None,
    single_sequence: Optional[bool] = None,
) -> np.ndarray:
    """Mean psi at the first step of each sequence, or over all steps in single-sequence mode"""
    single_sequence = spec.single_sequence if single_sequence is None else single_sequence
    k = spec.k
    windows = []
    for s in seqs:
        if len(s) < k:
            continue
        if single_sequence:
            win = sliding_window_view(s.steps, k, axis=0)
            windows.append(win if s.discrete else np.moveaxis(win, -1, 1))
        else:
            windows.append(s.steps[None, :k])
    if not windows:
        raise EmptyDatasetError(f"no sequence has the {k} steps needed for an initial state")
    return encode_windows(spec, np.concatenate(windows), basis).mean(axis=0)


# Predictive model
@dataclass(frozen=True)
class PredictiveModel:
    W: np.ndarray
    q1: np.ndarray
    spec: FeatureSpec
    plugin: str
    lam: float
    clamp_eps: float = field(default_factory=lambda: settings.clamp_eps)
    intercept: Optional[np.ndarray] = None
    basis: Optional[Basis] = None
    b_inf: Optional[np.ndarray] = None

    def __post_init__(self):
        d_xi, d_psi = self.W.shape
        if len(self.q1) != d_psi:
            raise LayoutError(f"q1 has {len(self.q1)} entries, W expects {d_psi}")
        if not np.all(np.isfinite(self.q1)):
            raise LayoutError("q1 must be finite")
        if self.plugin not in ("hmm", "gaussian"):
            raise LayoutError(f"unknown plugin {self.plugin}")

    @cached_property
    def impl(self) -> Union[HmmPlugin, GaussianPlugin]:
        if self.plugin == "hmm":
            ops = hmm_operators_from_w(self.W, self.basis, self.b_inf, self.spec.alphabet_size)
            return HmmPlugin(ops, k=self.spec.k, eps=self.clamp_eps)
        return GaussianPlugin(self.spec.obs_dim, self.W, self.intercept)

    @property
    def warmup(self) -> int:
        return self.spec.history_len


def filter_step(model: PredictiveModel, q: np.ndarray, o) -> np.ndarray:
    """q_{t+1} = f_filter(W q_t, o_t), with the symbol-block operators B_x for HMM plugins"""
    return model.impl.filter(q, o)


def predict_step(model: PredictiveModel, q: np.ndarray) -> np.ndarray:
    return model.impl.predict(q)


def predict_observation(model: PredictiveModel, q: np.ndarray) -> Union[np.ndarray, GaussianBelief]:
    return model.impl.observation(q)


@dataclass
class FilterTrace:
    predictions: list
    states: np.ndarray
    lost_track: List[int]

    def probabilities(self) -> np.ndarray:
        return np.array(self.predictions)

    def means(self) -> np.ndarray:
        return np.array([p.mean for p in self.predictions])


def filter_sequence(model: PredictiveModel, seq: ObservationSeq) -> FilterTrace:
    """One-step predictions from t = 1, resetting to q1 whenever the filter loses track"""
    q = model.q1
    preds, states, lost = [], [], []
    for t, o in enumerate(seq.steps):
        states.append(q)
        preds.append(predict_observation(model, q))
        try:
            q = filter_step(model, q, o)
        except DegenerateNormalizerError as e:
            logger.warning(f"Lost track in sequence {seq.id} at t={t + 1} ({e.detail}); resetting to q1")
            lost.append(t + 1)
            q = model.q1
    return FilterTrace(predictions=preds, states=np.array(states), lost_track=lost)


def _s1_basis_matrix(data: TripletDataset, spec: RegressorSpec, source: str) -> np.ndarray:
    if source == "p21":
        return cross_covariance(data)
    return fit(data.H, data.Psi, spec, weights=data.weights).weights


def fit_predictive_model(
    seqs: List[ObservationSeq],
    spec: FeatureSpec,
    s1: RegressorSpec,
    plugin: str = "hmm",
    lam: Optional[float] = None,
    s1_xi: Optional[RegressorSpec] = None,
    basis_source: str = "s1_weights",
    data: Optional[TripletDataset] = None,
    initial: Optional[np.ndarray] = None,
) -> PredictiveModel:
    """Extract triplets, optionally reduce rank, run S1 and S2, and attach q1 and the normalizer.

    `data` and `initial` replace the empirical triplets and first-step psi, e.g. with exact moments.
    """
    data = extract_triplets(seqs, spec) if data is None else data
    basis = None
    if spec.projection_rank is not None:
        basis = learn_basis(_s1_basis_matrix(data, s1, basis_source), spec.projection_rank)
        data = project_dataset(data, basis)
    s1_model, rows = s1_denoise(data, s1, s1_xi)

    intercept = None
    lam = default_s2_lambda(rows) if lam is None else lam
    if plugin == "gaussian":
        W, intercept = s2_regress_affine(rows, lam)
    else:
        W = s2_regress(rows, lam)

    if initial is not None:
        q1 = np.asarray(initial, float) if basis is None else basis.U.T @ np.asarray(initial, float)
    else:
        q1 = estimate_initial_state(seqs, spec, basis)

    b_inf = None
    if plugin == "hmm" and basis is not None:
        linear = s1.method in ("ols", "ridge")
        if spec.kind == "discrete_indicator" and spec.history_len == 1 and linear:
            w = rows.row_weights()
            b_inf = hmm_normalizer(s1_model.reg_psi.weights, None, w @ data.H / w.sum())
        else:
            b_inf = normalizer_from_states(rows.X, data.weights)
    logger.info(f"Fitted {plugin} model on {data.n} triplets (d_psi={W.shape[1]}, d_xi={W.shape[0]}, lam={lam:.3g})")
    return PredictiveModel(
        W=W, q1=q1, spec=spec, plugin=plugin, lam=lam,
        intercept=intercept, basis=basis, b_inf=b_inf,
    )


# Persistence
def save_model(model: PredictiveModel, path: Union[str, Path]) -> None:
    record = PredictiveModelRecord(
        W=model.W.tolist(), q1=model.q1.tolist(), spec=model.spec, plugin=model.plugin,
        lam=model.lam, clamp_eps=model.clamp_eps,
        intercept=None if model.intercept is None else model.intercept.tolist(),
        basis=None if model.basis is None else BasisRecord(
            U=model.basis.U.tolist(), singular_values=model.basis.singular_values.tolist()),
        b_inf=None if model.b_inf is None else model.b_inf.tolist(),
    )
    Path(path).write_text(record.model_dump_json(indent=2))
    logger.info(f"Saved model to {path}")


def load_model(path: Union[str, Path]) -> PredictiveModel:
    record = PredictiveModelRecord.model_validate_json(Path(path).read_text())
    basis = None
    if record.basis is not None:
        basis = Basis(U=np.asarray(record.basis.U, float),
                      singular_values=np.asarray(record.basis.singular_values, float))
    return PredictiveModel(
        W=np.asarray(record.W, float), q1=np.asarray(record.q1, float), spec=record.spec,
        plugin=record.plugin, lam=record.lam, clamp_eps=record.clamp_eps,
        intercept=None if record.intercept is None else np.asarray(record.intercept, float),
        basis=basis,
        b_inf=None if record.b_inf is None else np.asarray(record.b_inf, float),
    )
