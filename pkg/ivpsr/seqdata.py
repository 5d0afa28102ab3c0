"""Synthetic dynamical-system generators and sequence I/O."""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar, Union
import logging
import re

import numpy as np
import pandas as pd
from scipy import linalg

from ivpsr.config import settings
from ivpsr.errors import SequenceFormatError, SequenceParseError
from ivpsr.schemas import BktParams, HmmParams, LdsParams

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.SeedSequence]
P = TypeVar("P", HmmParams, LdsParams, BktParams)


def make_rng(seed: SeedLike) -> np.random.Generator:
    """Counter-based generator used for every random draw in the package"""
    return np.random.Generator(np.random.Philox(seed))


def seed_value(seed: SeedLike) -> int:
    """Plain integer for a seed; spawned children map to distinct values"""
    if isinstance(seed, np.random.SeedSequence):
        return int(seed.generate_state(1)[0]) if seed.spawn_key else int(seed.entropy)
    return int(seed)


def child_seeds(seed: int, n: int) -> List[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


@dataclass
class ObservationSeq:
    """One realization: integer symbols (shape (L,)) or real vectors (shape (L, d))"""
    id: str
    steps: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        steps = np.asarray(self.steps)
        if steps.ndim == 1:
            if steps.size and not np.issubdtype(steps.dtype, np.integer):
                raise SequenceFormatError(f"sequence {self.id}: symbols must be integers")
            steps = steps.astype(np.int64)
        elif steps.ndim == 2:
            steps = steps.astype(float)
        else:
            raise SequenceFormatError(f"sequence {self.id}: steps must be 1-D or 2-D")
        if len(steps) < 1:
            raise SequenceFormatError(f"sequence {self.id} is empty")
        self.steps = steps

    @property
    def discrete(self) -> bool:
        return self.steps.ndim == 1

    @property
    def dim(self) -> int:
        return 1 if self.discrete else self.steps.shape[1]

    def __len__(self) -> int:
        return len(self.steps)


# Generators
def _categorical(rng: np.random.Generator, cum: np.ndarray) -> np.ndarray:
    """Draw one index per column of a cumulative column-stochastic matrix"""
    u = rng.random(cum.shape[1])
    idx = (u[None, :] > cum).sum(axis=0)
    return np.minimum(idx, cum.shape[0] - 1)


def sample_hmm(params: HmmParams, length: int, n_seqs: int, seed: SeedLike) -> List[ObservationSeq]:
    """Draw i.i.d. sequences from an HMM, vectorised across sequences"""
    if length < 1 or n_seqs < 1:
        raise ValueError("length and n_seqs must be >= 1")
    rng = make_rng(seed)
    cum_t = np.cumsum(params.T, axis=0)
    cum_o = np.cumsum(params.O, axis=0)
    states = _categorical(rng, np.tile(np.cumsum(params.pi)[:, None], (1, n_seqs)))
    obs = np.empty((n_seqs, length), dtype=np.int64)
    for t in range(length):
        obs[:, t] = _categorical(rng, cum_o[:, states])
        states = _categorical(rng, cum_t[:, states])
    return [
        ObservationSeq(id=f"seq{i}", steps=obs[i], metadata={"seed": seed_value(seed)})
        for i in range(n_seqs)
    ]


def sample_bkt_dataset(
    params: Optional[BktParams] = None,
    n_seqs: int = 325,
    min_len: int = 5,
    max_len: int = 50,
    seed: int = 0,
) -> List[ObservationSeq]:
    """Variable-length knowledge-tracing data, lengths uniform in [min_len, max_len]"""
    params = params or BktParams()
    length_seed, obs_seed = child_seeds(seed, 2)
    lengths = make_rng(length_seed).integers(min_len, max_len + 1, size=n_seqs)
    full = sample_hmm(params.to_hmm(), int(max_len), n_seqs, obs_seed)
    return [
        ObservationSeq(id=s.id, steps=s.steps[:n], metadata={"seed": seed})
        for s, n in zip(full, lengths)
    ]


def _noise_factor(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((cov + cov.T) / 2)
    return v * np.sqrt(np.clip(w, 0.0, None))


def simulate_lds(params: LdsParams, length: int, seed: SeedLike) -> Tuple[np.ndarray, np.ndarray]:
    """Return (states, observations), each with one row per step"""
    rng = make_rng(seed)
    T, O = params.T, params.O
    n, d = params.n_states, params.obs_dim
    f_init = _noise_factor(np.asarray(params.initial_cov, float))
    f_state = _noise_factor(np.asarray(params.state_noise_cov, float))
    f_obs = _noise_factor(np.asarray(params.obs_noise_cov, float))
    s = np.asarray(params.initial_mean, float) + f_init @ rng.standard_normal(n)
    states = np.empty((length, n))
    obs = np.empty((length, d))
    for t in range(length):
        s = T @ s + f_state @ rng.standard_normal(n)
        states[t] = s
        obs[t] = O @ s + f_obs @ rng.standard_normal(d)
    return states, obs


def sample_lds(params: LdsParams, length: int, seed: SeedLike) -> ObservationSeq:
    """s_t = T s_{t-1} + noise, o_t = O s_t + noise, starting from the initial distribution"""
    if length < 1:
        raise ValueError("length must be >= 1")
    metadata: Dict[str, Any] = {"seed": seed_value(seed)}
    radius = float(np.max(np.abs(np.linalg.eigvals(params.T))))
    noisy = np.any(np.asarray(params.state_noise_cov)) or np.any(np.asarray(params.obs_noise_cov))
    if radius >= 1.0 and noisy:
        logger.warning(f"Sampling an LDS with spectral radius {radius:.4f} and nonzero noise")
        metadata["unstable"] = True
    _, obs = simulate_lds(params, length, seed)
    return ObservationSeq(id="lds0", steps=obs, metadata=metadata)


def make_subsystem_lds(
    seed: int,
    n_subsystems: int = 2,
    state_dim: int = 5,
    obs_per_subsystem: int = 10,
    noise_dims: int = 10,
    max_eig: float = 0.95,
    state_noise: float = 0.01,
    obs_noise: float = 1.0,
) -> LdsParams:
    """Independent subsystems, each driving its own block of observation dims, plus white-noise dims"""
    rng = make_rng(seed)
    blocks = []
    for _ in range(n_subsystems):
        a = rng.standard_normal((state_dim, state_dim))
        a *= max_eig / np.max(np.abs(np.linalg.eigvals(a)))
        blocks.append(a)
    T = linalg.block_diag(*blocks)
    n = n_subsystems * state_dim
    d = n_subsystems * obs_per_subsystem + noise_dims
    O = np.zeros((d, n))
    for i in range(n_subsystems):
        rows = slice(i * obs_per_subsystem, (i + 1) * obs_per_subsystem)
        cols = slice(i * state_dim, (i + 1) * state_dim)
        O[rows, cols] = rng.standard_normal((obs_per_subsystem, state_dim))
    Q = state_noise * np.eye(n)
    stationary = linalg.solve_discrete_lyapunov(T, Q)
    stationary = (stationary + stationary.T) / 2
    return LdsParams.from_arrays(T, O, Q, obs_noise * np.eye(d), np.zeros(n), stationary)


def filter_short(seqs: List[ObservationSeq], min_len: Optional[int] = None) -> List[ObservationSeq]:
    min_len = settings.min_seq_len if min_len is None else min_len
    kept = [s for s in seqs if len(s) >= min_len]
    if len(kept) < len(seqs):
        logger.info(f"Discarded {len(seqs) - len(kept)} sequences shorter than {min_len}")
    return kept


# Sequence I/O
_INTEGER = r"[+-]?\d+"


def _data_line(index) -> int:
    """Row index to 1-based file line, counting the header"""
    return int(index) + 2


def _read_frame(path: Union[str, Path]) -> Optional[pd.DataFrame]:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except pd.errors.EmptyDataError:
        return None
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise SequenceParseError(f"malformed CSV: {e}", int(match.group(1)) if match else 0)
    df.columns = [str(c).strip() for c in df.columns]
    return df.fillna("").apply(lambda col: col.str.strip())


def read_sequences(path: Union[str, Path]) -> List[ObservationSeq]:
    """Read the `seq_id,t,obs` / `seq_id,t,obs_1..obs_d` CSV layout"""
    df = _read_frame(path)
    if df is None:
        return []
    header = list(df.columns)
    if header[:2] != ["seq_id", "t"] or len(header) < 3:
        raise SequenceParseError(f"bad header {header}", 1)
    obs_cols = header[2:]
    scalar = obs_cols == ["obs"]
    if not scalar and obs_cols != [f"obs_{i}" for i in range(1, len(obs_cols) + 1)]:
        raise SequenceParseError(f"bad observation columns {obs_cols}", 1)

    df = df[(df != "").any(axis=1)]
    if df.empty:
        return []

    # Report the earliest offending row across all checks
    errors = []
    bad_t = ~df["t"].str.fullmatch(_INTEGER)
    if bad_t.any():
        i = bad_t.idxmax()
        errors.append((i, f"bad time index {df.at[i, 't']!r}"))
    t = pd.to_numeric(df["t"].where(~bad_t, "0")).astype(np.int64)
    expected = df.groupby("seq_id", sort=False).cumcount() + 1
    gap = ~bad_t & (t != expected)
    if gap.any():
        i = gap.idxmax()
        errors.append((i, f"sequence {df.at[i, 'seq_id']}: expected t={expected[i]}, got {t[i]}"))
    values = df[obs_cols].apply(pd.to_numeric, errors="coerce")
    bad_num = values.isna().any(axis=1)
    if bad_num.any():
        i = bad_num.idxmax()
        text = next(c for c, v in zip(df.loc[i, obs_cols], values.loc[i]) if pd.isna(v))
        errors.append((i, f"not a number: {text!r}"))
    if errors:
        i, message = min(errors, key=lambda e: e[0])
        raise SequenceParseError(message, _data_line(i))

    integer = df[obs_cols].apply(lambda col: col.str.fullmatch(_INTEGER))
    seqs = []
    for seq_id, rows in df.groupby("seq_id", sort=False):
        if scalar:
            ints = integer.loc[rows.index, "obs"]
            if ints.all():
                seqs.append(ObservationSeq(id=seq_id, steps=rows["obs"].astype(np.int64).to_numpy()))
                continue
            if ints.any():
                raise SequenceFormatError(f"sequence {seq_id} mixes symbols and real values")
        seqs.append(ObservationSeq(id=seq_id, steps=values.loc[rows.index].to_numpy(dtype=float)))
    logger.info(f"Read {len(seqs)} sequences from {path}")
    return seqs


def write_sequences(seqs: List[ObservationSeq], path: Union[str, Path]) -> None:
    if seqs:
        if len({(s.discrete, s.dim) for s in seqs}) > 1:
            raise SequenceFormatError("all sequences in one file must share observation kind and dimension")
        discrete, dim = seqs[0].discrete, seqs[0].dim
    else:
        discrete, dim = True, 1
    obs_cols = ["obs"] if discrete else [f"obs_{i}" for i in range(1, dim + 1)]
    if seqs:
        steps = np.concatenate([s.steps.reshape(len(s), -1) for s in seqs])
    else:
        steps = np.empty((0, dim), dtype=np.int64)
    frame = pd.DataFrame(steps.astype(np.int64 if discrete else float), columns=obs_cols)
    frame.insert(0, "seq_id", [s.id for s in seqs for _ in range(len(s))])
    frame.insert(1, "t", np.concatenate([np.arange(1, len(s) + 1) for s in seqs]) if seqs else [])
    frame.to_csv(path, index=False, lineterminator="\n")
    logger.info(f"Wrote {len(seqs)} sequences to {path}")


# Parameter documents
def save_params(params: Union[HmmParams, LdsParams, BktParams], path: Union[str, Path]) -> None:
    Path(path).write_text(params.model_dump_json(indent=2))


def load_params(path: Union[str, Path], kind: Type[P]) -> P:
    return kind.model_validate_json(Path(path).read_text())
