import numpy as np
import pytest

from ivpsr.errors import ConditioningError, DegenerateNormalizerError, LayoutError
from ivpsr.features import Basis, learn_basis
from ivpsr.instantiations import (
    GaussianBelief, HmmPlugin, baum_welch, clamp_simplex, fit_em_hmm, gaussian_condition,
    gaussian_extended_from_moments, gaussian_marginalize, hmm_filter, hmm_normalizer, hmm_observation_probs,
    hmm_operators_from_w, hmm_predict, moments_from_gaussian, psd_clip, random_hmm_init, spectral_hmm_tables,
    spectral_hmm_w,
)
from ivpsr.oracles import exact_joint_tables, forward_predictive, kalman_predictive, random_hmm
from ivpsr.schemas import BktParams, FeatureSpec, HmmParams, LdsParams, RegressorSpec
from ivpsr.seqdata import ObservationSeq, sample_bkt_dataset, sample_hmm, sample_lds
from ivpsr.twostage import estimate_initial_state, fit_predictive_model


def full_rank_hmm():
    return HmmParams.from_arrays([[0.75, 0.35], [0.25, 0.65]], [[0.9, 0.3], [0.1, 0.7]], [0.6, 0.4])


def exact_operators(params):
    """Helper: stacked B_x = P_{3,x,1} P_{2,1}^-1 from population tables"""
    tables = exact_joint_tables(params)
    W = tables.P3x1.reshape(-1, params.n_obs) @ np.linalg.inv(tables.P21)
    return W, tables


# Observable Operator Tests
def test_identity_w_splits_into_blocks():
    ops = hmm_operators_from_w(np.eye(4)[:, :2], alphabet_size=2)
    np.testing.assert_array_equal(ops.B[0], np.eye(2))
    np.testing.assert_array_equal(ops.B[1], np.zeros((2, 2)))


def test_operator_blocks_match_tables():
    W, tables = exact_operators(full_rank_hmm())
    ops = hmm_operators_from_w(W, alphabet_size=2)
    for x in range(2):
        np.testing.assert_allclose(ops.B[x], tables.P3x1[x] @ np.linalg.inv(tables.P21), atol=1e-10)


def test_misaligned_w_is_a_layout_error():
    with pytest.raises(LayoutError):
        hmm_operators_from_w(np.zeros((5, 2)))
    with pytest.raises(LayoutError):
        hmm_operators_from_w(np.zeros((6, 2)), alphabet_size=2)


def test_operators_preserve_normalisation_on_exact_states():
    params = full_rank_hmm()
    W, _ = exact_operators(params)
    ops = hmm_operators_from_w(W)
    q = params.O @ params.pi
    for x in (0, 1, 1, 0):
        assert ops.b_inf @ ops.B.sum(axis=0) @ q == pytest.approx(1.0, abs=1e-8)
        q = hmm_filter(ops, q, x)


# Normalizer Tests
def test_full_rank_normalizer_sums_states_to_one():
    tables = exact_joint_tables(full_rank_hmm())
    W_s1a = tables.P21 @ np.diag(1 / tables.P1)
    b_inf = hmm_normalizer(W_s1a, None, tables.P1)
    for q in W_s1a.T:
        assert b_inf @ q == pytest.approx(1.0, abs=1e-10)


def test_single_state_normalizer_is_reciprocal():
    b_inf = hmm_normalizer(np.array([[0.25]]), None, np.array([1.0]))
    np.testing.assert_allclose(b_inf, [4.0])


def test_reduced_rank_normalizer_matches_forward():
    params = HmmParams.from_arrays([[0.7, 0.2], [0.3, 0.8]], [[0.5, 0.1], [0.3, 0.2], [0.2, 0.7]], [0.5, 0.5])
    tables = exact_joint_tables(params)
    basis = learn_basis(tables.P21, 2)
    U = basis.U
    # Reduced-rank observable operators from the population tables
    P21_inv = np.linalg.pinv(U.T @ tables.P21)
    W = np.concatenate([U.T @ tables.P3x1[x] @ P21_inv for x in range(3)])
    b_inf = hmm_normalizer(tables.P21 @ np.diag(1 / tables.P1), basis, tables.P1)
    ops = hmm_operators_from_w(W, basis, b_inf)
    obs = sample_hmm(params, 30, 1, seed=0)[0].steps
    q = U.T @ params.O @ params.pi
    expected = forward_predictive(params, obs)
    for t, x in enumerate(obs):
        np.testing.assert_allclose(hmm_observation_probs(ops, q), expected[t], atol=1e-10)
        q = hmm_filter(ops, q, x)


# Filtering Tests
def test_deterministic_filter_is_one_hot():
    ops = hmm_operators_from_w(np.vstack([[[0.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [0.0, 0.0]]]))
    np.testing.assert_allclose(hmm_filter(ops, np.array([0.5, 0.5]), 0), [0.0, 1.0], atol=1e-8)


def test_degenerate_normalizer_raises():
    ops = hmm_operators_from_w(np.zeros((4, 2)))
    with pytest.raises(DegenerateNormalizerError):
        hmm_filter(ops, np.array([0.5, 0.5]), 1)


def test_hmm_predict_marginalises_symbols():
    W, _ = exact_operators(full_rank_hmm())
    ops = hmm_operators_from_w(W)
    q = np.array([0.4, 0.6])
    np.testing.assert_allclose(hmm_predict(ops, q), ops.B.sum(axis=0) @ q / (ops.B.sum(axis=0) @ q).sum())


def rotated_operators(W, R):
    """Helper: the operators in W expressed in the orthonormal basis R"""
    m = W.shape[1]
    blocks = [R.T @ B @ R for B in W.reshape(-1, m, m)]
    basis = Basis(U=R, singular_values=np.ones(m))
    return hmm_operators_from_w(np.vstack(blocks), basis, R.T @ np.ones(m))


def rotation(theta):
    return np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])


def test_projected_filter_pulls_state_back_to_simplex():
    # B_0 sends (0.5, 0.5) to (4/3, -1/3) after normalisation
    W = np.array([[1.0, 1.0], [-0.5, 0.0], [1.0, 0.0], [0.0, 1.0]])
    R = rotation(0.4)
    q = np.array([0.5, 0.5])
    full = hmm_filter(hmm_operators_from_w(W), q, 0)
    projected = R @ hmm_filter(rotated_operators(W, R), R.T @ q, 0)
    np.testing.assert_allclose(projected, full, atol=1e-8)
    assert projected.min() > 0


def test_projected_filter_leaves_feasible_states_alone():
    W = np.array([[1.0, 1.0], [-0.5, 0.0], [0.6, 0.1], [0.2, 0.9]])
    R = rotation(1.1)
    q = np.array([0.3, 0.7])
    v = W[2:] @ q
    projected = R @ hmm_filter(rotated_operators(W, R), R.T @ q, 1)
    np.testing.assert_allclose(projected, v / v.sum(), atol=1e-12)


def test_hmm_plugin_routes_through_operators():
    W, _ = exact_operators(full_rank_hmm())
    ops = hmm_operators_from_w(W)
    plugin = HmmPlugin(ops)
    q = np.array([0.4, 0.6])
    np.testing.assert_array_equal(plugin.filter(q, 1), hmm_filter(ops, q, 1))
    np.testing.assert_array_equal(plugin.predict(q), hmm_predict(ops, q))
    with pytest.raises(LayoutError):
        plugin.filter(q, 2)


def test_clamp_simplex():
    p = clamp_simplex(np.array([-0.1, 0.6, 0.5]), eps=1e-9)
    assert p.min() > 0
    assert p.sum() == pytest.approx(1.0)


# Gaussian Tests
def test_moments_of_constant_have_zero_cov():
    x = np.array([1.0, -2.0])
    belief = gaussian_extended_from_moments(np.concatenate([x, np.outer(x, x).ravel()]))
    np.testing.assert_allclose(belief.cov, 0.0, atol=1e-12)


def test_population_moments_recover_gaussian():
    mean = np.array([0.5, -1.0, 2.0])
    A = np.random.default_rng(0).standard_normal((3, 3))
    cov = A @ A.T
    belief = gaussian_extended_from_moments(moments_from_gaussian(GaussianBelief(mean=mean, cov=cov)))
    np.testing.assert_allclose(belief.mean, mean, atol=1e-10)
    np.testing.assert_allclose(belief.cov, cov, atol=1e-10)


def test_condition_without_cross_covariance():
    belief = GaussianBelief(mean=np.array([1.0, 2.0, 3.0]), cov=np.diag([1.0, 2.0, 3.0]))
    out = gaussian_condition(belief, np.array([4.0]))
    np.testing.assert_allclose(out.mean, [2.0, 3.0])
    np.testing.assert_allclose(out.cov, np.diag([2.0, 3.0]))


@pytest.mark.parametrize("rho,o", [(0.5, 1.0), (-0.8, 2.0), (0.3, -1.5)])
def test_bivariate_conditioning(rho, o):
    belief = GaussianBelief(mean=np.zeros(2), cov=np.array([[1.0, rho], [rho, 1.0]]))
    out = gaussian_condition(belief, np.array([o]), jitter=0.0)
    np.testing.assert_allclose(out.mean, [rho * o], atol=1e-12)
    np.testing.assert_allclose(out.cov, [[1 - rho ** 2]], atol=1e-12)


def test_marginalize_then_condition_on_nothing():
    belief = GaussianBelief(mean=np.array([1.0, 2.0]), cov=np.array([[2.0, 0.0], [0.0, 5.0]]))
    out = gaussian_condition(gaussian_marginalize(belief, 1), np.array([]))
    np.testing.assert_allclose(out.mean, [2.0])
    np.testing.assert_allclose(out.cov, [[5.0]])


def test_marginalize_matches_kalman_predict():
    T = np.array([[0.8, 0.1], [0.0, 0.7]])
    O = np.eye(2)
    Q, R = 0.1 * np.eye(2), 0.2 * np.eye(2)
    params = LdsParams.from_arrays(T, O, Q, R, [1.0, -1.0], np.eye(2))
    means, covs = kalman_predictive(params, np.zeros((1, 2)), k=2)
    belief = GaussianBelief(mean=means[0], cov=covs[0])
    marginal = gaussian_marginalize(belief, 2)
    # The second window block is O T m with covariance O (T P T^T + Q) O^T + R
    m = T @ np.array([1.0, -1.0])
    P = T @ np.eye(2) @ T.T + Q
    np.testing.assert_allclose(marginal.mean, O @ T @ m, atol=1e-8)
    np.testing.assert_allclose(marginal.cov, O @ (T @ P @ T.T + Q) @ O.T + R, atol=1e-8)


def test_moment_pipeline_covariance_close_to_kalman():
    a, q, r = 0.8, 0.3, 0.4
    stationary = np.array([[q / (1 - a * a)]])
    params = LdsParams.from_arrays([[a]], [[1.0]], [[q]], [[r]], [0.0], stationary)
    spec = FeatureSpec(kind="moment_stacked_window", obs_dim=1, k=2, history_len=1, single_sequence=True)
    q1 = estimate_initial_state([sample_lds(params, 100000, seed=3)], spec)
    belief = gaussian_extended_from_moments(q1)
    _, covs = kalman_predictive(params, np.zeros((1, 1)), k=2)
    assert np.linalg.norm(belief.cov - covs[0]) <= 0.1 * np.linalg.norm(covs[0])



def test_singular_observation_block_raises():
    belief = GaussianBelief(mean=np.zeros(2), cov=np.diag([0.0, 1.0]))
    with pytest.raises(ConditioningError):
        gaussian_condition(belief, np.array([0.0]), jitter=0.0)


def test_psd_clip_removes_negative_eigenvalues():
    cov = np.array([[1.0, 2.0], [2.0, 1.0]])
    clipped = psd_clip(cov)
    assert np.linalg.eigvalsh(clipped).min() >= -1e-12
    np.testing.assert_allclose(clipped, 1.5 * np.ones((2, 2)), atol=1e-12)


# Table Estimator Tests
def test_spectral_tables_match_pipeline_spec_hmm():
    seqs = sample_bkt_dataset(n_seqs=300, seed=4)
    spec = FeatureSpec(kind="discrete_indicator", alphabet_size=2)
    model = fit_predictive_model(seqs, spec, RegressorSpec(method="ols"), lam=0.0)
    W = spectral_hmm_w(spectral_hmm_tables(seqs, 2))
    np.testing.assert_allclose(model.W, W, atol=1e-8)


# EM Tests
def test_em_single_state_emissions_are_frequencies():
    seqs = sample_hmm(HmmParams.from_arrays([[1.0]], [[0.2], [0.5], [0.3]], [1.0]), 50, 20, seed=5)
    params = fit_em_hmm(seqs, 1, n_iters=5, seed=0, n_restarts=1, alphabet_size=3)
    obs = np.concatenate([s.steps for s in seqs])
    np.testing.assert_allclose(params.O[:, 0], np.bincount(obs, minlength=3) / len(obs), atol=1e-12)


def test_em_loglik_monotone():
    seqs = sample_hmm(random_hmm(3, 4, seed=6), 40, 30, seed=7)
    _, history = baum_welch(seqs, random_hmm_init(3, 4, seed=8), n_iters=30)
    diffs = np.diff(history)
    assert np.all(diffs >= -1e-10 * np.abs(np.array(history[:-1])))


def test_em_recovers_bkt_emissions():
    truth = BktParams(p_init_learned=0.3, p_learn=0.1, p_forget=0.05, p_guess=0.2, p_slip=0.1).to_hmm()
    seqs = sample_hmm(truth, 100, 1000, seed=9)
    fitted = fit_em_hmm(seqs, 2, n_iters=200, seed=1, n_restarts=3, alphabet_size=2)
    O = fitted.O
    if abs(O[1, 0] - truth.O[1, 0]) > abs(O[1, 1] - truth.O[1, 0]):
        O = O[:, ::-1]
    np.testing.assert_allclose(O, truth.O, atol=0.05)


def test_em_handles_variable_lengths():
    seqs = [ObservationSeq(id=str(i), steps=np.arange(n) % 2) for i, n in enumerate((3, 7, 12))]
    params = fit_em_hmm(seqs, 2, n_iters=10, seed=0, n_restarts=2)
    assert params.n_states == 2
    np.testing.assert_allclose(params.T.sum(axis=0), 1.0)
