import numpy as np
import pytest
from pydantic import ValidationError

from ivpsr.errors import SequenceFormatError, SequenceParseError
from ivpsr.oracles import lyapunov_fixed_point, stationary_distribution
from ivpsr.schemas import BktParams, HmmParams, LdsParams
from ivpsr.seqdata import (
    ObservationSeq, filter_short, load_params, make_subsystem_lds, read_sequences, sample_bkt_dataset,
    sample_hmm, sample_lds, save_params, simulate_lds, write_sequences,
)


def two_state_hmm():
    """Helper: a mixing 2-state, 3-symbol HMM"""
    T = [[0.8, 0.3], [0.2, 0.7]]
    O = [[0.6, 0.1], [0.3, 0.2], [0.1, 0.7]]
    return HmmParams.from_arrays(T, O, [0.5, 0.5])


# Parameter Validation Tests
def test_hmm_params_reject_non_stochastic_columns():
    with pytest.raises(ValidationError):
        HmmParams.from_arrays([[0.9, 0.3], [0.2, 0.7]], [[1.0, 0.0], [0.0, 1.0]], [0.5, 0.5])


def test_hmm_params_reject_negative_initial():
    with pytest.raises(ValidationError):
        HmmParams.from_arrays(np.eye(2), np.eye(2), [1.5, -0.5])


def test_lds_params_reject_non_psd_noise():
    with pytest.raises(ValidationError):
        LdsParams.from_arrays(np.eye(2) * 0.5, np.eye(2), -np.eye(2), np.eye(2), np.zeros(2), np.eye(2))


def test_bkt_to_hmm_layout():
    params = BktParams(p_init_learned=0.4, p_learn=0.2, p_forget=0.05, p_guess=0.25, p_slip=0.1).to_hmm()
    np.testing.assert_allclose(params.T, [[0.8, 0.05], [0.2, 0.95]])
    np.testing.assert_allclose(params.O, [[0.75, 0.1], [0.25, 0.9]])
    np.testing.assert_allclose(params.pi, [0.6, 0.4])


# HMM Sampling Tests
def test_sample_hmm_degenerate_chain():
    O = [[0.0, 1.0], [1.0, 0.0]]
    params = HmmParams.from_arrays(np.eye(2), O, [1.0, 0.0])
    for s in sample_hmm(params, 20, 5, seed=3):
        assert np.all(s.steps == 1)


def test_sample_bkt_forced_dynamics():
    params = BktParams(p_init_learned=0.0, p_learn=1.0, p_forget=0.0, p_guess=0.0, p_slip=0.0).to_hmm()
    for s in sample_hmm(params, 10, 4, seed=1):
        assert s.steps[0] == 0
        assert np.all(s.steps[1:] == 1)


def test_sample_hmm_is_deterministic():
    a = sample_hmm(two_state_hmm(), 30, 4, seed=11)
    b = sample_hmm(two_state_hmm(), 30, 4, seed=11)
    c = sample_hmm(two_state_hmm(), 30, 4, seed=12)
    assert all(np.array_equal(x.steps, y.steps) for x, y in zip(a, b))
    assert not all(np.array_equal(x.steps, y.steps) for x, y in zip(a, c))


def test_sample_hmm_symbol_frequencies_match_stationary():
    params = two_state_hmm()
    pi_star = stationary_distribution(params.T)
    stationary = HmmParams.from_arrays(params.T, params.O, pi_star)
    seqs = sample_hmm(stationary, 1000, 100, seed=5)
    obs = np.concatenate([s.steps for s in seqs])
    freq = np.bincount(obs, minlength=3) / len(obs)
    assert np.max(np.abs(freq - params.O @ pi_star)) < 0.01


def test_sample_hmm_pair_frequencies_match_exact_table():
    params = two_state_hmm()
    pi_star = stationary_distribution(params.T)
    seqs = sample_hmm(HmmParams.from_arrays(params.T, params.O, pi_star), 1000, 200, seed=9)
    counts = np.zeros((3, 3))
    for s in seqs:
        np.add.at(counts, (s.steps[1:], s.steps[:-1]), 1.0)
    P21 = params.O @ params.T @ np.diag(pi_star) @ params.O.T
    assert np.max(np.abs(counts / counts.sum() - P21)) < 0.01


def test_sample_bkt_dataset_lengths_and_ids():
    seqs = sample_bkt_dataset(n_seqs=50, min_len=5, max_len=12, seed=2)
    assert len(seqs) == 50
    assert all(5 <= len(s) <= 12 for s in seqs)
    assert len({s.id for s in seqs}) == 50
    assert all(set(np.unique(s.steps)) <= {0, 1} for s in seqs)


def test_filter_short():
    seqs = [ObservationSeq(id=f"s{n}", steps=np.zeros(n, dtype=int)) for n in (2, 5, 9)]
    assert [s.id for s in filter_short(seqs, 5)] == ["s5", "s9"]


# LDS Tests
def test_simulate_lds_state_covariance_matches_fixed_point():
    T = np.array([[0.7, 0.2], [-0.1, 0.6]])
    Q = 0.1 * np.eye(2)
    Sigma = lyapunov_fixed_point(T, Q)
    params = LdsParams.from_arrays(T, np.eye(2), Q, 0.1 * np.eye(2), np.zeros(2), Sigma)
    states, _ = simulate_lds(params, 100000, seed=4)
    emp = np.cov(states.T, bias=True)
    assert np.linalg.norm(emp - Sigma) / np.linalg.norm(Sigma) < 0.05


def test_sample_lds_flags_unstable_system():
    params = LdsParams.from_arrays(np.eye(1) * 1.01, np.eye(1), np.eye(1), np.eye(1), np.zeros(1), np.eye(1))
    seq = sample_lds(params, 10, seed=0)
    assert seq.metadata["unstable"] is True
    assert seq.steps.shape == (10, 1)


def test_make_subsystem_lds_structure():
    params = make_subsystem_lds(seed=0)
    T, O = params.T, params.O
    assert T.shape == (10, 10)
    assert O.shape == (30, 10)
    np.testing.assert_array_equal(T[:5, 5:], 0.0)
    np.testing.assert_array_equal(T[5:, :5], 0.0)
    for block in (T[:5, :5], T[5:, 5:]):
        assert abs(np.max(np.abs(np.linalg.eigvals(block))) - 0.95) < 1e-9
    np.testing.assert_array_equal(O[20:], 0.0)
    np.testing.assert_array_equal(O[:10, 5:], 0.0)
    np.testing.assert_array_equal(O[10:20, :5], 0.0)
    np.testing.assert_allclose(params.state_noise_cov, 0.01 * np.eye(10))
    np.testing.assert_allclose(params.obs_noise_cov, np.eye(30))


def test_subsystem_blocks_are_uncorrelated():
    seq = sample_lds(make_subsystem_lds(seed=1), 100000, seed=2)
    o = seq.steps
    cross = (o[:, :10] - o[:, :10].mean(0)).T @ (o[:, 10:20] - o[:, 10:20].mean(0)) / len(o)
    assert np.max(np.abs(cross)) < 0.1


# Sequence I/O Tests
def test_read_header_only_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("seq_id,t,obs\n")
    assert read_sequences(path) == []


def test_discrete_sequence_round_trip(tmp_path):
    path = tmp_path / "seqs.csv"
    write_sequences([ObservationSeq(id="a", steps=np.array([0, 1, 1]))], path)
    seqs = read_sequences(path)
    assert len(seqs) == 1
    assert seqs[0].id == "a"
    assert seqs[0].discrete
    np.testing.assert_array_equal(seqs[0].steps, [0, 1, 1])


def test_real_sequence_round_trip(tmp_path):
    path = tmp_path / "real.csv"
    steps = np.random.default_rng(0).standard_normal((7, 30))
    write_sequences([ObservationSeq(id="r", steps=steps)], path)
    seqs = read_sequences(path)
    assert seqs[0].dim == 30
    np.testing.assert_allclose(seqs[0].steps, steps, atol=1e-12, rtol=0)


def test_malformed_row_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("seq_id,t,obs\na,1,0\na,2,zero\n")
    with pytest.raises(SequenceParseError) as exc:
        read_sequences(path)
    assert exc.value.line == 3


def test_blank_lines_keep_reported_line_numbers(tmp_path):
    path = tmp_path / "blank.csv"
    path.write_text("seq_id,t,obs\na,1,0\n\na,2,1\nb,1,x\n")
    with pytest.raises(SequenceParseError) as exc:
        read_sequences(path)
    assert exc.value.line == 5


def test_extra_field_reports_line(tmp_path):
    path = tmp_path / "wide.csv"
    path.write_text("seq_id,t,obs\na,1,0\na,2,1,7\n")
    with pytest.raises(SequenceParseError) as exc:
        read_sequences(path)
    assert exc.value.line == 3


def test_blank_lines_between_rows_are_ignored(tmp_path):
    path = tmp_path / "gaps.csv"
    path.write_text("seq_id,t,obs\na,1,0\n\na,2,1\n\n")
    seqs = read_sequences(path)
    np.testing.assert_array_equal(seqs[0].steps, [0, 1])


def test_time_gap_is_a_parse_error(tmp_path):
    path = tmp_path / "gap.csv"
    path.write_text("seq_id,t,obs\na,1,0\na,3,1\n")
    with pytest.raises(SequenceParseError):
        read_sequences(path)


def test_mixed_kinds_in_one_sequence(tmp_path):
    path = tmp_path / "mixed.csv"
    path.write_text("seq_id,t,obs\na,1,0\na,2,0.5\n")
    with pytest.raises(SequenceFormatError):
        read_sequences(path)


def test_params_round_trip(tmp_path):
    path = tmp_path / "hmm.json"
    save_params(two_state_hmm(), path)
    loaded = load_params(path, HmmParams)
    np.testing.assert_array_equal(loaded.O, two_state_hmm().O)
