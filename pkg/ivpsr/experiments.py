"""Experiment drivers: knowledge-tracing comparison, lasso subsystem discovery, convergence and bound checks."""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import json
import logging
import time

import numpy as np
import pandas as pd

from ivpsr import __version__
from ivpsr.config import settings
from ivpsr.errors import ConfigError, PsrError
from ivpsr.features import cross_covariance, extract_triplets, learn_basis
from ivpsr.instantiations import fit_em_hmm
from ivpsr.kernelpsr import KernelPsrModel, kernel_filter_sequence
from ivpsr.oracles import forward_predictive, random_hmm
from ivpsr.regress import fit_lasso, pinv_truncated
from ivpsr.schemas import BoundInputs, ExperimentConfig, FeatureSpec, HmmParams, ModelConfig
from ivpsr.seqdata import (
    ObservationSeq, child_seeds, filter_short, make_rng, make_subsystem_lds, read_sequences,
    sample_bkt_dataset, sample_hmm, sample_lds, seed_value,
)
from ivpsr.theorybounds import (
    check_cov_coverage, convergence_curve, lambda_sweep, median_curve, sampler_population, zeta_xx, zeta_xy,
)
from ivpsr.twostage import PredictiveModel, filter_sequence, fit_predictive_model

logger = logging.getLogger(__name__)

Predictor = Union[PredictiveModel, HmmParams, KernelPsrModel]


# Evaluation
@dataclass
class MaeReport:
    pooled: float
    per_sequence: np.ndarray
    n_steps: int
    n_skipped: int

    @property
    def mean_per_sequence(self) -> float:
        return float(self.per_sequence.mean()) if self.per_sequence.size else float("nan")


def prob_correct(model: Predictor, seq: ObservationSeq) -> np.ndarray:
    """P(o_t = 1 | o_{1:t-1}) for every t, filtering from t = 1"""
    if isinstance(model, HmmParams):
        return forward_predictive(model, seq.steps)[:, 1]
    if isinstance(model, KernelPsrModel):
        return kernel_filter_sequence(model, seq)[:, 1]
    return filter_sequence(model, seq).probabilities()[:, 1]


def evaluate_mae(
    model: Predictor, test: List[ObservationSeq], warmup: Optional[int] = None, metric: str = "mae"
) -> MaeReport:
    """|1[o_t = 1] - P(o_t = 1 | history)| after the warm-up, pooled and per sequence"""
    if warmup is None:
        warmup = model.warmup if isinstance(model, PredictiveModel) else 0
    per_seq, pooled, skipped = [], [], 0
    for s in test:
        if len(s) <= warmup:
            skipped += 1
            continue
        err = np.abs((s.steps == 1).astype(float) - prob_correct(model, s))[warmup:]
        if metric == "rmse":
            err = err ** 2
        per_seq.append(err.mean())
        pooled.append(err)
    if skipped:
        logger.info(f"Skipped {skipped} sequences shorter than the warm-up of {warmup}")
    if not pooled:
        return MaeReport(pooled=float("nan"), per_sequence=np.array([]), n_steps=0, n_skipped=skipped)
    steps = np.concatenate(pooled)
    per_seq = np.array(per_seq)
    pooled_value = float(steps.mean())
    if metric == "rmse":
        pooled_value, per_seq = float(np.sqrt(pooled_value)), np.sqrt(per_seq)
    return MaeReport(pooled=pooled_value, per_sequence=per_seq, n_steps=len(steps), n_skipped=skipped)


# Artifacts
def write_table(df: pd.DataFrame, path: Path, config_hash: str, seed: int) -> None:
    out = df.copy()
    out["config_hash"] = config_hash
    out["seed"] = seed
    out.to_csv(path, index=False)
    logger.info(f"Wrote {path}")


def write_metadata(path: Path, config: ExperimentConfig, extra: Optional[Dict] = None) -> None:
    doc = {"version": __version__, "config_hash": config.config_hash(), "seed": config.generator.seed,
           "config": json.loads(config.model_dump_json())}
    doc.update(extra or {})
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=float))
    logger.info(f"Wrote {path}")


def _output_dir(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# Knowledge-tracing comparison
def experiment_sequences(config: ExperimentConfig) -> List[ObservationSeq]:
    gen = config.generator
    if config.data_path:
        seqs = read_sequences(config.data_path)
    elif gen.system == "bkt":
        seqs = sample_bkt_dataset(gen.bkt, gen.n_seqs, gen.min_len, gen.max_len, gen.seed)
    elif gen.system == "hmm":
        seqs = sample_hmm(gen.hmm, gen.length, gen.n_seqs, gen.seed)
    else:
        raise ConfigError(f"generator {gen.system} does not produce discrete sequences")
    return filter_short(seqs, settings.min_seq_len)


def fit_model(cfg: ModelConfig, train: List[ObservationSeq], seed: int, alphabet_size: int = 2) -> Predictor:
    if cfg.plugin == "em":
        return fit_em_hmm(train, cfg.n_states, seed=seed, alphabet_size=alphabet_size)
    if cfg.plugin == "kernel":
        return KernelPsrModel.fit(train, cfg.feature, cfg.kernel)
    return fit_predictive_model(
        train, cfg.feature, cfg.s1, plugin=cfg.plugin, lam=cfg.lam, s1_xi=cfg.s1_xi,
        basis_source=cfg.basis_source,
    )


def _split_indices(n_seqs: int, config: ExperimentConfig, split_seed) -> Tuple[np.ndarray, np.ndarray]:
    policy = config.split
    if policy.same_folds:
        idx = np.arange(min(policy.n_train, n_seqs))
        return idx, idx
    if policy.n_train + policy.n_test > n_seqs:
        raise ConfigError(f"split needs {policy.n_train + policy.n_test} sequences, have {n_seqs}")
    perm = make_rng(split_seed).permutation(n_seqs)
    return perm[:policy.n_train], perm[policy.n_train:policy.n_train + policy.n_test]


def _run_split(args) -> List[Dict]:
    split, split_seed, config, seqs, warmup = args
    train_idx, test_idx = _split_indices(len(seqs), config, split_seed)
    train = [seqs[i] for i in train_idx]
    test = [seqs[i] for i in test_idx]
    rows = []
    for cfg in config.models:
        row = {"split": split, "model": cfg.name, "mae": np.nan, "mae_per_seq": np.nan,
               "train_time": np.nan, "status": "ok"}
        try:
            start = time.perf_counter()
            model = fit_model(cfg, train, seed_value(split_seed))
            row["train_time"] = time.perf_counter() - start
            report = evaluate_mae(model, test, warmup=warmup, metric=config.metric)
            row["mae"], row["mae_per_seq"] = report.pooled, report.mean_per_sequence
        except (PsrError, np.linalg.LinAlgError, ValueError) as e:
            logger.error(f"Split {split} model {cfg.name} failed: {e}")
            row["status"] = str(e)
        rows.append(row)
    return rows


@dataclass
class ResultTable:
    per_split: pd.DataFrame
    summary: pd.DataFrame
    scatter: Dict[Tuple[str, str], pd.DataFrame] = field(default_factory=dict)
    config_hash: str = ""


def summarize_splits(per_split: pd.DataFrame, model_names: Sequence[str]) -> pd.DataFrame:
    ok = per_split[per_split["status"] == "ok"]
    summary = ok.groupby("model").agg(
        mean_mae=("mae", "mean"), mean_mae_per_seq=("mae_per_seq", "mean"),
        mean_train_time=("train_time", "mean"), n_ok=("mae", "size"),
    ).reindex(list(model_names)).reset_index()
    reference = summary["mean_train_time"].iloc[0]
    summary["relative_time"] = summary["mean_train_time"] / reference
    return summary


def scatter_tables(per_split: pd.DataFrame, model_names: Sequence[str]) -> Dict[Tuple[str, str], pd.DataFrame]:
    """Per-split MAE pairs, dropping any split where either model failed"""
    failed = set(per_split.loc[per_split["status"] != "ok", "split"])
    ok = per_split[~per_split["split"].isin(failed)]
    wide = ok.pivot(index="split", columns="model", values="mae").reindex(columns=list(model_names))
    out = {}
    for a, b in combinations(model_names, 2):
        out[(a, b)] = pd.DataFrame({"split": wide.index, f"mae_{a}": wide[a].values, f"mae_{b}": wide[b].values})
    return out


def run_bkt(config: ExperimentConfig) -> ResultTable:
    """Train every configured model on each random split and score held-out MAE"""
    seqs = experiment_sequences(config)
    names = [m.name for m in config.models]
    warmup = max((m.feature.history_len for m in config.models if m.feature is not None), default=0)
    split_seeds = child_seeds(config.split.seed, config.split.n_splits)
    jobs = [(i, s, config, seqs, warmup) for i, s in enumerate(split_seeds)]
    logger.info(f"Running {len(jobs)} splits over {len(seqs)} sequences with {config.n_workers} workers")
    if config.n_workers > 1:
        with ProcessPoolExecutor(max_workers=config.n_workers) as pool:
            results = list(pool.map(_run_split, jobs))
    else:
        results = [_run_split(job) for job in jobs]
    per_split = pd.DataFrame([row for rows in results for row in rows])
    table = ResultTable(
        per_split=per_split, summary=summarize_splits(per_split, names),
        scatter=scatter_tables(per_split, names), config_hash=config.config_hash(),
    )

    out = _output_dir(config)
    seed = config.split.seed
    write_table(per_split, out / "result_table.csv", table.config_hash, seed)
    for (a, b), df in table.scatter.items():
        write_table(df, out / f"scatter_{a}_vs_{b}.csv", table.config_hash, seed)
    write_metadata(out / "metadata.json", config, {"summary": table.summary.to_dict(orient="records")})
    return table


# Lasso subsystem discovery
def order_by_mean_coordinate(U: np.ndarray) -> np.ndarray:
    """Sort columns by mean coordinate of |u| read as a distribution over coordinates"""
    p = np.abs(U) / np.abs(U).sum(axis=0, keepdims=True)
    centres = (np.arange(1, U.shape[0] + 1)[:, None] * p).sum(axis=0)
    return U[:, np.argsort(centres, kind="stable")]


def block_mass(U: np.ndarray, blocks: Sequence[slice]) -> np.ndarray:
    """Per column: the largest share of absolute mass inside one block"""
    p = np.abs(U) / np.abs(U).sum(axis=0, keepdims=True)
    return np.max([p[b].sum(axis=0) for b in blocks], axis=0)


@dataclass
class LassoReport:
    summary: pd.DataFrame
    vectors: Dict[str, np.ndarray]

    def mean_block_mass(self, basis: str) -> float:
        return float(self.summary.loc[self.summary["basis"] == basis, "mean_block_mass"].mean())

    def mean_noise_mass(self, basis: str) -> float:
        return float(self.summary.loc[self.summary["basis"] == basis, "mean_noise_mass"].mean())


def _lasso_seed(config: ExperimentConfig, seed: int) -> Tuple[List[Dict], Dict[str, np.ndarray]]:
    opts = config.lasso
    n_sub = 1 if opts.single_subsystem else 2
    obs_per, state_dim = 10, 5
    params = make_subsystem_lds(seed, n_subsystems=n_sub, state_dim=state_dim, obs_per_subsystem=obs_per,
                                obs_noise=0.0 if opts.noiseless else 1.0)
    d = params.obs_dim
    spec = FeatureSpec(kind="stacked_window", k=1, history_len=1, obs_dim=d)
    seq = sample_lds(params, opts.n_train + 2, seed + 1)
    data = extract_triplets([seq], spec)
    m = min(opts.n_vectors, d)

    reg = fit_lasso(data.H, data.Psi, opts.alpha)
    if not reg.converged:
        logger.warning(f"Lasso columns not converged: {np.flatnonzero(~reg.column_converged).tolist()}")
    O, T = params.O, params.T
    bases = {
        "covariance": learn_basis(cross_covariance(data), m).U,
        "lasso": learn_basis(reg.weights, m).U,
        "true": learn_basis(O @ T @ pinv_truncated(O), m).U,
    }
    blocks = [slice(i * obs_per, (i + 1) * obs_per) for i in range(n_sub)]
    noise = slice(n_sub * obs_per, d)
    rows = []
    for name, U in bases.items():
        U = order_by_mean_coordinate(U)
        bases[name] = U
        p = np.abs(U) / np.abs(U).sum(axis=0, keepdims=True)
        rows.append({
            "seed": seed, "basis": name,
            "mean_block_mass": float(block_mass(U, blocks).mean()),
            "mean_noise_mass": float(p[noise].sum(axis=0).mean()),
            "lasso_nonconverged": int((~reg.column_converged).sum()),
        })
    return rows, bases


def run_lasso_subsystems(config: ExperimentConfig) -> LassoReport:
    """Compare block structure of covariance-SVD and lasso-weight bases over several seeds"""
    rows, first_vectors = [], None
    for child in child_seeds(config.generator.seed, config.lasso.n_seeds):
        seed_rows, vectors = _lasso_seed(config, seed_value(child))
        rows.extend(seed_rows)
        first_vectors = first_vectors or vectors
    report = LassoReport(summary=pd.DataFrame(rows), vectors=first_vectors)

    out = _output_dir(config)
    config_hash, seed = config.config_hash(), config.generator.seed
    write_table(report.summary, out / "lasso_summary.csv", config_hash, seed)
    for name, U in report.vectors.items():
        df = pd.DataFrame(U, columns=[f"v{j + 1}" for j in range(U.shape[1])])
        df.insert(0, "coordinate", np.arange(1, U.shape[0] + 1))
        write_table(df, out / f"vectors_{name}.csv", config_hash, seed)
    write_metadata(out / "metadata.json", config, {
        "mean_block_mass": {b: report.mean_block_mass(b) for b in ("covariance", "lasso", "true")},
        "mean_noise_mass": {b: report.mean_noise_mass(b) for b in ("covariance", "lasso", "true")},
    })
    return report


# Convergence and bounds
def run_convergence(config: ExperimentConfig) -> pd.DataFrame:
    opts = config.convergence
    params = random_hmm(opts.n_states, opts.n_symbols, config.generator.seed)
    seeds = list(range(config.generator.seed, config.generator.seed + opts.n_seeds))
    cells = convergence_curve(params, opts.n_list, seeds, lam_per_sample=opts.lam_per_sample,
                              include_exact=opts.include_exact, n_test=opts.n_test, test_len=opts.test_len)
    out = _output_dir(config)
    config_hash, seed = config.config_hash(), config.generator.seed
    write_table(cells, out / "convergence_cells.csv", config_hash, seed)
    write_table(median_curve(cells), out / "convergence_curve.csv", config_hash, seed)
    if opts.lam_list:
        sweep = lambda_sweep(params, max(opts.n_list), opts.lam_list, seeds,
                             n_test=opts.n_test, test_len=opts.test_len)
        write_table(sweep, out / "lambda_sweep.csv", config_hash, seed)
    write_metadata(out / "metadata.json", config, {"hmm": json.loads(params.model_dump_json())})
    return cells


def run_bounds(config: ExperimentConfig) -> pd.DataFrame:
    opts = config.bounds
    reports = [
        check_cov_coverage(opts.sampler, n, opts.delta, opts.trials, config.generator.seed, opts.statistic)
        for n in opts.n_list
    ]
    df = pd.DataFrame([r.as_dict() for r in reports])
    pop = sampler_population(opts.sampler)
    zetas = {}
    for n in opts.n_list:
        inputs = BoundInputs(c=pop.c, lam1_x=pop.lam1, lam1_y=pop.lam1, tr_x=pop.trace, tr_y=pop.trace,
                             norm_yx=pop.lam1, n=n, delta=opts.delta)
        zetas[str(n)] = {"zeta_xx": zeta_xx(inputs).model_dump(), "zeta_xy": zeta_xy(inputs).model_dump()}
    out = _output_dir(config)
    write_table(df, out / "bounds_coverage.csv", config.config_hash(), config.generator.seed)
    write_metadata(out / "metadata.json", config, {"bounds": zetas})
    return df


EXPERIMENTS = {
    "bkt": run_bkt,
    "lasso_subsystems": run_lasso_subsystems,
    "convergence": run_convergence,
    "bounds": run_bounds,
}


def run_experiment(config: ExperimentConfig):
    logger.info(f"Running experiment {config.experiment} (config {config.config_hash()[:12]})")
    return EXPERIMENTS[config.experiment](config)
