import hashlib

from pydantic import BaseModel, Field, field_validator, model_validator, ConfigDict
from typing import Dict, List, Literal, Optional
import numpy as np

from ivpsr.config import settings

STOCHASTIC_TOL = 1e-12


def _check_column_stochastic(name: str, rows: List[List[float]]) -> None:
    a = np.asarray(rows, dtype=float)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f'{name} must be a non-empty matrix')
    if np.any(a < 0):
        raise ValueError(f'{name} has negative entries')
    sums = a.sum(axis=0)
    if np.max(np.abs(sums - 1.0)) > STOCHASTIC_TOL:
        raise ValueError(f'{name} columns must sum to 1 (got {sums.tolist()})')


def _check_psd(name: str, rows: List[List[float]], dim: int) -> None:
    a = np.asarray(rows, dtype=float)
    if a.shape != (dim, dim):
        raise ValueError(f'{name} must be {dim}x{dim}, got {a.shape}')
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10 * max(1.0, np.abs(a).max(initial=0.0)):
        raise ValueError(f'{name} must be symmetric')
    if dim and np.linalg.eigvalsh(a).min() < -1e-10 * max(1.0, np.abs(a).max()):
        raise ValueError(f'{name} must be positive semidefinite')


# Generative model schemas
class HmmParams(BaseModel):
    n_states: int = Field(..., ge=1)
    transition: List[List[float]]
    emission: List[List[float]]
    initial: List[float]

    @field_validator('transition', 'emission')
    @classmethod
    def validate_stochastic(cls, v, info):
        _check_column_stochastic(info.field_name, v)
        return v

    @field_validator('initial')
    @classmethod
    def validate_initial(cls, v):
        p = np.asarray(v, dtype=float)
        if np.any(p < 0):
            raise ValueError('initial distribution has negative entries')
        if abs(p.sum() - 1.0) > STOCHASTIC_TOL:
            raise ValueError('initial distribution must sum to 1')
        return v

    @model_validator(mode='after')
    def validate_dims(self):
        m = self.n_states
        if np.asarray(self.transition).shape != (m, m):
            raise ValueError(f'transition must be {m}x{m}')
        if np.asarray(self.emission).shape[1] != m:
            raise ValueError(f'emission must have {m} columns')
        if len(self.initial) != m:
            raise ValueError(f'initial must have {m} entries')
        return self

    @classmethod
    def from_arrays(cls, T, O, pi) -> "HmmParams":
        T, O, pi = np.asarray(T, float), np.asarray(O, float), np.asarray(pi, float)
        return cls(n_states=T.shape[0], transition=T.tolist(),
                   emission=O.tolist(), initial=pi.tolist())

    @property
    def T(self) -> np.ndarray:
        return np.asarray(self.transition, dtype=float)

    @property
    def O(self) -> np.ndarray:
        return np.asarray(self.emission, dtype=float)

    @property
    def pi(self) -> np.ndarray:
        return np.asarray(self.initial, dtype=float)

    @property
    def n_obs(self) -> int:
        return len(self.emission)


class BktParams(BaseModel):
    """Bayesian knowledge tracing: state 1 is 'learned', observation 1 is 'correct'"""
    p_init_learned: float = Field(default=0.3, ge=0, le=1)
    p_learn: float = Field(default=0.15, ge=0, le=1)
    p_forget: float = Field(default=0.0, ge=0, le=1)
    # Conventional values; no published tutor fit is assumed
    p_guess: float = Field(default=0.2, ge=0, le=1)
    p_slip: float = Field(default=0.1, ge=0, le=1)

    def to_hmm(self) -> HmmParams:
        T = [[1.0 - self.p_learn, self.p_forget],
             [self.p_learn, 1.0 - self.p_forget]]
        O = [[1.0 - self.p_guess, self.p_slip],
             [self.p_guess, 1.0 - self.p_slip]]
        pi = [1.0 - self.p_init_learned, self.p_init_learned]
        return HmmParams(n_states=2, transition=T, emission=O, initial=pi)


class LdsParams(BaseModel):
    n_states: int = Field(..., ge=1)
    transition: List[List[float]]
    observation: List[List[float]]
    state_noise_cov: List[List[float]]
    obs_noise_cov: List[List[float]]
    initial_mean: List[float]
    initial_cov: List[List[float]]

    @model_validator(mode='after')
    def validate_dims(self):
        n = self.n_states
        if np.asarray(self.transition).shape != (n, n):
            raise ValueError(f'transition must be {n}x{n}')
        obs = np.asarray(self.observation, dtype=float)
        if obs.ndim != 2 or obs.shape[1] != n:
            raise ValueError(f'observation must have {n} columns')
        if len(self.initial_mean) != n:
            raise ValueError(f'initial_mean must have {n} entries')
        _check_psd('state_noise_cov', self.state_noise_cov, n)
        _check_psd('obs_noise_cov', self.obs_noise_cov, obs.shape[0])
        _check_psd('initial_cov', self.initial_cov, n)
        return self

    @classmethod
    def from_arrays(cls, T, O, Q, R, mean, cov) -> "LdsParams":
        T = np.asarray(T, float)
        return cls(n_states=T.shape[0], transition=T.tolist(),
                   observation=np.asarray(O, float).tolist(),
                   state_noise_cov=np.asarray(Q, float).tolist(),
                   obs_noise_cov=np.asarray(R, float).tolist(),
                   initial_mean=np.asarray(mean, float).tolist(),
                   initial_cov=np.asarray(cov, float).tolist())

    @property
    def T(self) -> np.ndarray:
        return np.asarray(self.transition, dtype=float)

    @property
    def O(self) -> np.ndarray:
        return np.asarray(self.observation, dtype=float)

    @property
    def obs_dim(self) -> int:
        return len(self.observation)


# Feature and regression schemas
FeatureKind = Literal[
    "discrete_indicator",
    "discrete_joint_history",
    "binary_history",
    "stacked_window",
    "moment_stacked_window",
]


class FeatureSpec(BaseModel):
    kind: FeatureKind = "discrete_indicator"
    k: int = Field(default=1, ge=1)
    history_len: int = Field(default=1, ge=1)
    alphabet_size: Optional[int] = Field(None, ge=1)
    obs_dim: Optional[int] = Field(None, ge=1)
    # Rank of the learned future basis; None keeps the full feature space
    projection_rank: Optional[int] = Field(None, ge=1)
    single_sequence: bool = False

    @property
    def discrete(self) -> bool:
        return self.kind in ("discrete_indicator", "discrete_joint_history", "binary_history")

    @model_validator(mode='after')
    def validate_kind(self):
        if self.discrete and self.alphabet_size is None:
            raise ValueError(f'{self.kind} features need alphabet_size')
        if self.kind == "binary_history" and self.alphabet_size != 2:
            raise ValueError('binary_history requires a binary alphabet')
        if not self.discrete and self.obs_dim is None:
            raise ValueError(f'{self.kind} features need obs_dim')
        return self


class KernelSpec(BaseModel):
    kind: Literal["rbf", "delta"] = "rbf"
    # None selects the median heuristic
    bandwidth: Optional[float] = Field(None, gt=0)
    lam0: float = Field(default=1e-3, gt=0)
    lam: float = Field(default=1e-3, gt=0)
    s2_lam: float = Field(default=1e-3, gt=0)


class RegressorSpec(BaseModel):
    method: Literal["ols", "ridge", "logistic", "lasso", "kernel_ridge"] = "ols"
    lam0: float = Field(default=0.0, ge=0)
    alpha: float = Field(default=0.0, ge=0)
    max_iter: Optional[int] = Field(None, ge=1)
    tol: Optional[float] = Field(None, gt=0)
    kernel: Optional[KernelSpec] = None

    @model_validator(mode='after')
    def validate_method(self):
        if self.method == "kernel_ridge" and self.kernel is None:
            raise ValueError('kernel_ridge needs a kernel spec')
        if self.method == "ols" and self.lam0 != 0:
            raise ValueError('ols does not take lam0; use ridge')
        return self


class ModelConfig(BaseModel):
    name: str = Field(..., min_length=1)
    plugin: Literal["hmm", "gaussian", "kernel", "em"] = "hmm"
    feature: Optional[FeatureSpec] = None
    s1: RegressorSpec = Field(default_factory=RegressorSpec)
    s1_xi: Optional[RegressorSpec] = None
    lam: Optional[float] = Field(None, ge=0)
    basis_source: Literal["s1_weights", "p21"] = "s1_weights"
    kernel: Optional[KernelSpec] = None
    n_states: int = Field(default=2, ge=1)

    @model_validator(mode='after')
    def validate_plugin(self):
        if self.plugin != "em" and self.feature is None:
            raise ValueError(f'model {self.name} needs a feature spec')
        if self.plugin == "kernel" and self.kernel is None:
            raise ValueError(f'model {self.name} needs a kernel spec')
        return self


# Experiment schemas
class SplitPolicy(BaseModel):
    n_train: int = Field(default=200, ge=1)
    n_test: int = Field(default=125, ge=1)
    n_splits: int = Field(default=200, ge=1)
    seed: int = 0
    # Train and test on the same sequences
    same_folds: bool = False


class GeneratorSpec(BaseModel):
    system: Literal["bkt", "hmm", "lds", "subsystem_lds"] = "bkt"
    bkt: BktParams = Field(default_factory=BktParams)
    hmm: Optional[HmmParams] = None
    lds: Optional[LdsParams] = None
    n_seqs: int = Field(default=325, ge=1)
    min_len: int = Field(default=5, ge=1)
    max_len: int = Field(default=50, ge=1)
    length: int = Field(default=1000, ge=1)
    seed: int = 0

    @model_validator(mode='after')
    def validate_lengths(self):
        if self.min_len > self.max_len:
            raise ValueError('min_len must not exceed max_len')
        if self.system == "hmm" and self.hmm is None:
            raise ValueError('hmm generator needs hmm params')
        if self.system == "lds" and self.lds is None:
            raise ValueError('lds generator needs lds params')
        return self


class LassoSettings(BaseModel):
    alpha: float = Field(default=0.1, ge=0)
    n_train: int = Field(default=1000, ge=2)
    n_seeds: int = Field(default=10, ge=1)
    n_vectors: int = Field(default=10, ge=1)
    single_subsystem: bool = False
    noiseless: bool = False


class ConvergenceSettings(BaseModel):
    n_list: List[int] = Field(default_factory=lambda: [500, 1000, 2000, 4000, 8000])
    n_seeds: int = Field(default=10, ge=1)
    n_states: int = Field(default=3, ge=1)
    n_symbols: int = Field(default=4, ge=2)
    n_test: int = Field(default=200, ge=1)
    test_len: int = Field(default=50, ge=2)
    lam_per_sample: Optional[float] = Field(default=1e-3, ge=0)
    lam_list: List[float] = Field(default_factory=list)
    include_exact: bool = True


class SamplerSpec(BaseModel):
    kind: Literal["point_mass", "basis_uniform", "sign_cube", "gaussian"] = "basis_uniform"
    dim: int = Field(default=5, ge=1)
    point: Optional[List[float]] = None


class BoundsSettings(BaseModel):
    sampler: SamplerSpec = Field(default_factory=SamplerSpec)
    n_list: List[int] = Field(default_factory=lambda: [100, 1000])
    delta: float = Field(default=0.1, gt=0, lt=1)
    trials: int = Field(default=500, ge=1)
    statistic: Literal["xx", "xy"] = "xx"


def default_bkt_models() -> List["ModelConfig"]:
    binary = {"alphabet_size": 2}
    return [
        ModelConfig(name="spec_hmm", plugin="hmm",
                    feature=FeatureSpec(kind="discrete_indicator", history_len=1, **binary),
                    s1=RegressorSpec(method="ols")),
        ModelConfig(name="feat_hmm", plugin="hmm",
                    feature=FeatureSpec(kind="discrete_joint_history", history_len=4, **binary),
                    s1=RegressorSpec(method="ridge", lam0=1e-3)),
        ModelConfig(name="lr_hmm", plugin="hmm",
                    feature=FeatureSpec(kind="binary_history", history_len=4, **binary),
                    s1=RegressorSpec(method="logistic")),
        ModelConfig(name="em", plugin="em", n_states=2),
    ]


class ExperimentConfig(BaseModel):
    experiment: Literal["bkt", "lasso_subsystems", "convergence", "bounds"] = "bkt"
    generator: GeneratorSpec = Field(default_factory=GeneratorSpec)
    models: List[ModelConfig] = Field(default_factory=default_bkt_models, min_length=1)
    split: SplitPolicy = Field(default_factory=SplitPolicy)
    lasso: LassoSettings = Field(default_factory=LassoSettings)
    convergence: ConvergenceSettings = Field(default_factory=ConvergenceSettings)
    bounds: BoundsSettings = Field(default_factory=BoundsSettings)
    metric: Literal["mae", "rmse"] = "mae"
    output_dir: str = Field(default_factory=lambda: settings.output_dir)
    n_workers: int = Field(default=1, ge=1)
    # Read sequences from this CSV instead of the generator
    data_path: Optional[str] = None

    @field_validator('models')
    @classmethod
    def validate_unique_names(cls, v):
        names = [m.name for m in v]
        if len(set(names)) != len(names):
            raise ValueError('model names must be unique')
        return v

    def config_hash(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode()).hexdigest()


# Bound schemas
class BoundInputs(BaseModel):
    c: float = Field(..., gt=0)
    lam1_x: float = Field(..., gt=0)
    lam1_y: float = Field(default=1.0, gt=0)
    tr_x: float = Field(..., gt=0)
    tr_y: float = Field(default=1.0, gt=0)
    norm_yx: float = Field(default=0.0, ge=0)
    n: float = Field(..., gt=0)
    delta: float = Field(..., gt=0, lt=1)


class BoundResult(BaseModel):
    name: str
    value: float
    intermediates: Dict[str, float] = Field(default_factory=dict)


# Persistence records
class BasisRecord(BaseModel):
    U: List[List[float]]
    singular_values: List[float]


class FittedRegressorRecord(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    method: str
    weights: List[List[float]]
    intercept: List[float]
    residual_cov: List[List[float]]
    n_samples: int
    converged: bool = True


class PredictiveModelRecord(BaseModel):
    W: List[List[float]]
    q1: List[float]
    spec: FeatureSpec
    plugin: Literal["hmm", "gaussian"]
    lam: float
    clamp_eps: float
    intercept: Optional[List[float]] = None
    basis: Optional[BasisRecord] = None
    b_inf: Optional[List[float]] = None
