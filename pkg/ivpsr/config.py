from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field

class Settings(BaseSettings):
    # Discrete states
    clamp_eps: float = Field(default=1e-9, alias="IVPSR_CLAMP_EPS")
    normalizer_floor: float = Field(default=1e-12, alias="IVPSR_NORMALIZER_FLOOR")

    # Linear algebra
    pinv_rcond: float = Field(default=1e-10, alias="IVPSR_PINV_RCOND")
    strict_linear: bool = Field(default=False, alias="IVPSR_STRICT_LINEAR")
    s2_lambda_scale: float = Field(default=1e-4, alias="IVPSR_S2_LAMBDA_SCALE")
    gaussian_jitter: float = Field(default=1e-9, alias="IVPSR_GAUSSIAN_JITTER")
    eig_clip_tol: float = Field(default=1e-8, alias="IVPSR_EIG_CLIP_TOL")
    power_iter_tol: float = Field(default=1e-8, alias="IVPSR_POWER_ITER_TOL")

    # Stage-1 solvers
    logistic_max_iter: int = Field(default=100, alias="IVPSR_LOGISTIC_MAX_ITER")
    logistic_tol: float = Field(default=1e-10, alias="IVPSR_LOGISTIC_TOL")
    logistic_jitter: float = Field(default=1e-8, alias="IVPSR_LOGISTIC_JITTER")
    lasso_max_iter: int = Field(default=10000, alias="IVPSR_LASSO_MAX_ITER")
    lasso_tol: float = Field(default=1e-8, alias="IVPSR_LASSO_TOL")

    # Kernel models
    kernel_max_train: int = Field(default=2000, alias="IVPSR_KERNEL_MAX_TRAIN")
    kbr_max_retries: int = Field(default=3, alias="IVPSR_KBR_MAX_RETRIES")

    # EM baseline
    em_restarts: int = Field(default=5, alias="IVPSR_EM_RESTARTS")
    em_iters: int = Field(default=100, alias="IVPSR_EM_ITERS")

    min_seq_len: int = Field(default=5, alias="IVPSR_MIN_SEQ_LEN")
    output_dir: str = Field(default="results", alias="IVPSR_OUTPUT_DIR")
    log_level: str = Field(default="INFO", alias="IVPSR_LOG_LEVEL")

    model_config = SettingsConfigDict(
        env_file=".env",
        populate_by_name=True,
        extra="forbid"
    )

settings = Settings()
