import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mrsae.manifold import BatchEdges, build_knn_graph
from mrsae.sae import (
    AdamState,
    SaeParams,
    TrainConfig,
    TrainedSae,
    TrainingDivergence,
    activation_stats,
    adam_step,
    alive_census,
    decode,
    encode,
    encode_pre,
    load_checkpoint,
    loss_and_gradients,
    manifold_penalty,
    redundancy,
    relu_activate,
    save_checkpoint,
    split_subjects,
    topk_activate,
    train,
    _pairwise_mean_abs_r_loop,
)

from instances import gradient_instance, total_loss
from oracles import central_difference, decode_loop, encode_pre_loop, penalty_loop, topk_loop


def _params(rng, d, m):
    W_dec = rng.standard_normal((d, m))
    W_dec /= np.linalg.norm(W_dec, axis=0)
    return SaeParams(rng.standard_normal((m, d)), rng.standard_normal(m), W_dec, rng.standard_normal(d))


def _hand_model(W_enc, b_enc, activation="relu", k=1, H=None):
    m, d = W_enc.shape
    W_dec = np.zeros((d, m))
    W_dec[0] = 1.0
    p = SaeParams(np.asarray(W_enc, float), np.asarray(b_enc, float), W_dec, np.zeros(d))
    cfg = TrainConfig(activation=activation, k=k, expansion=max(1, m // d))
    alive = (encode(p, H, activation, k) > 0).any(axis=0) if H is not None else np.ones(m, bool)
    return TrainedSae(p, cfg, np.zeros((0, 3)), float("nan"), alive)


# -- forward ------------------------------------------------------------------


def test_identity_encoder_pads():
    p = SaeParams(np.vstack([np.eye(3), np.zeros((3, 3))]), np.zeros(6), np.eye(3, 6), np.zeros(3))
    np.testing.assert_array_equal(encode_pre(p, [1.0, -2.0, 3.0]), [1, -2, 3, 0, 0, 0])


def test_h_equal_bpre_gives_benc(rng):
    p = _params(rng, 4, 8)
    np.testing.assert_allclose(encode_pre(p, p.b_pre), p.b_enc, atol=1e-15)


def test_encode_pre_triple_loop(rng):
    p = _params(rng, 4, 8)
    H = rng.standard_normal((5, 4))
    np.testing.assert_allclose(encode_pre(p, H), encode_pre_loop(p.W_enc, p.b_enc, p.b_pre, H), atol=1e-12)


def test_encode_pre_dimension_check(rng):
    with pytest.raises(ValueError):
        encode_pre(_params(rng, 4, 8), np.zeros(5))


def test_topk_examples():
    np.testing.assert_array_equal(topk_activate([3, -1, 2, 0.5], 2), [3, 0, 2, 0])
    np.testing.assert_array_equal(topk_activate([-3, -1, -2], 2), [0, 0, 0])
    np.testing.assert_array_equal(topk_activate([1, 1, 1], 2), [1, 1, 0])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.sampled_from([-2.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0])),
       st.integers(1, 12))
def test_topk_matches_sorted_oracle(a, k):
    k = min(k, a.size)
    z = topk_activate(a, k)
    np.testing.assert_array_equal(z, topk_loop(a, k))
    assert np.count_nonzero(z) <= k and np.all(z >= 0)


def test_topk_rejects_bad_k():
    with pytest.raises(ValueError):
        topk_activate([1.0, 2.0], 3)


def test_relu_examples(rng):
    np.testing.assert_array_equal(relu_activate([-1, 0, 2]), [0, 0, 2])
    a = np.abs(rng.standard_normal(7))
    np.testing.assert_array_equal(relu_activate(a), a)
    b = rng.standard_normal(9)
    np.testing.assert_array_equal(relu_activate(b), [x if x > 0 else 0.0 for x in b])


def test_decode_cases(rng):
    p = _params(rng, 4, 8)
    np.testing.assert_array_equal(decode(p, np.zeros(8)), p.b_pre)
    e = np.zeros(8)
    e[3] = 1.0
    np.testing.assert_allclose(decode(p, e), p.W_dec[:, 3] + p.b_pre, atol=1e-15)
    Z = rng.standard_normal((3, 8))
    np.testing.assert_allclose(decode(p, Z), decode_loop(p.W_dec, p.b_pre, Z), atol=1e-12)


# -- penalty ------------------------------------------------------------------


def test_penalty_cases(rng):
    A = np.ones((3, 4))
    e = BatchEdges(np.array([0, 1]), np.array([1, 2]), np.array([0.3, 0.9]), np.arange(3))
    assert manifold_penalty(A, A, e) == 0.0
    one = BatchEdges(np.array([0]), np.array([0]), np.array([1.0]), np.arange(1))
    assert manifold_penalty(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]]), one) == 1.0
    A = rng.standard_normal((3, 5))
    An = rng.standard_normal((4, 5))
    e = BatchEdges(np.array([0, 0, 1, 2, 2]), np.array([1, 3, 0, 2, 3]), rng.uniform(0, 1, 5), np.arange(4))
    assert manifold_penalty(A, An, e) == pytest.approx(penalty_loop(A, An, e.source, e.target, e.weight), abs=1e-12)


def test_penalty_without_edges_warns():
    e = BatchEdges(np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0, int))
    with pytest.warns(RuntimeWarning):
        assert manifold_penalty(np.ones((1, 2)), np.ones((1, 2)), e) == 0.0


# -- gradients ----------------------------------------------------------------


@pytest.mark.parametrize("activation", ["topk", "relu"])
@pytest.mark.parametrize("lam", [0.0, 0.5])
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_central_differences(activation, lam, seed):
    p, H_B, H_nbr, edges = gradient_instance(seed, activation=activation)
    _, grads = loss_and_gradients(p, H_B, activation=activation, k=2, lam=lam, H_nbr=H_nbr, edges=edges)
    for name in ("W_enc", "b_enc", "W_dec", "b_pre"):
        fd = central_difference(lambda: total_loss(p, H_B, H_nbr, edges, activation, 2, lam), getattr(p, name))
        err = np.linalg.norm(grads[name] - fd) / max(np.linalg.norm(fd), 1e-12)
        assert err < 1e-4, (name, err)


def test_perfect_autoencoder_is_stationary():
    d = 4
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.standard_normal((d, d)))[0][:, :2]
    H = np.abs(rng.standard_normal((6, 2))) @ basis.T
    p = SaeParams(basis.T.copy(), np.zeros(2), basis.copy(), np.zeros(d))
    loss, g = loss_and_gradients(p, H, activation="topk", k=2)
    assert loss.reconstruction < 1e-25
    assert max(np.linalg.norm(v) for v in g.values()) < 1e-8


def test_equal_preactivations_no_manifold_gradient(rng):
    p, H_B, H_nbr, edges = gradient_instance(0, activation="relu")
    p.W_enc[:] = 0.0
    base = loss_and_gradients(p, H_B, activation="relu", lam=0.0)[1]
    loss, g = loss_and_gradients(p, H_B, activation="relu", lam=3.0, H_nbr=H_nbr, edges=edges)
    assert loss.manifold == 0.0
    for name in g:
        np.testing.assert_array_equal(g[name], base[name])


def test_topk_needs_k(rng):
    with pytest.raises(ValueError, match="needs k"):
        encode(_params(rng, 3, 6), np.zeros((2, 3)), "topk", None)


# -- optimiser ----------------------------------------------------------------


def test_adam_zero_gradient_is_noop(rng):
    p = _params(rng, 3, 6)
    zero = {n: np.zeros_like(a) for n, a in p.blocks().items()}
    q, state = adam_step(AdamState.zeros_like(p), p, zero, 1e-3)
    for n in p.blocks():
        np.testing.assert_allclose(getattr(q, n), getattr(p, n), atol=1e-15)
    assert state.t == 1


def test_adam_first_step_closed_form(rng):
    p = _params(rng, 3, 6)
    g = {n: rng.standard_normal(a.shape) for n, a in p.blocks().items()}
    q, _ = adam_step(AdamState.zeros_like(p), p, g, 1e-3)
    for n in ("W_enc", "b_enc", "b_pre"):
        expected = getattr(p, n) - 1e-3 * g[n] / (np.abs(g[n]) + 1e-8)
        np.testing.assert_allclose(getattr(q, n), expected, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(q.W_dec, axis=0), 1.0, atol=1e-12)


def test_adam_quadratic_bowl_descends():
    # only b_pre carries the objective 0.5 * ||b_pre - c||^2
    c = np.array([1.0, -2.0, 0.5])
    p = SaeParams(np.zeros((3, 3)), np.zeros(3), np.eye(3), np.zeros(3))
    state = AdamState.zeros_like(p)
    losses = []
    for _ in range(10):
        losses.append(0.5 * float(np.sum((p.b_pre - c) ** 2)))
        g = {n: np.zeros_like(a) for n, a in p.blocks().items()}
        g["b_pre"] = p.b_pre - c
        p, state = adam_step(state, p, g, 0.05)
    assert all(b < a for a, b in zip(losses, losses[1:]))


# -- training -----------------------------------------------------------------


def test_training_bit_identical(small_cohort):
    H, cov, _ = small_cohort
    cfg = TrainConfig(k=4, lam=0.1, k_nn=5, epochs=2, batch_size=64, seed=5)
    assert train(H, cfg, subjects=cov.subject_id) == train(H, cfg, subjects=cov.subject_id)


def test_training_split_is_subject_level(small_model, small_cohort):
    _, cov, _ = small_cohort
    tr = {cov.subject_id[i] for i in small_model.train_rows}
    va = {cov.subject_id[i] for i in small_model.val_rows}
    assert tr and va and not (tr & va)


def test_lambda_zero_is_standard_sae(small_cohort):
    H, cov, _ = small_cohort
    cfg = TrainConfig(k=4, lam=0.0, epochs=1, batch_size=64)
    m = train(H, cfg, subjects=cov.subject_id)
    assert m.provenance["variant"] == "standard SAE"
    assert np.all(m.loss_history[:, 1] == 0)


def test_graph_size_mismatch(small_cohort):
    H, cov, _ = small_cohort
    g = build_knn_graph(H.values[:50], 3)
    with pytest.raises(ValueError, match="nodes"):
        train(H, TrainConfig(lam=0.1, epochs=1), graph=g, subjects=cov.subject_id)


def test_divergence_raises(small_cohort):
    H, cov, _ = small_cohort
    with pytest.raises(TrainingDivergence):
        train(H.values * 1e200, TrainConfig(k=4, lam=0.0, epochs=1), subjects=cov.subject_id)


def test_split_deterministic_and_complete():
    subj = [f"s{i // 2}" for i in range(40)]
    a = split_subjects(subj, 0.9, 3)
    b = split_subjects(subj, 0.9, 3)
    np.testing.assert_array_equal(a[0], b[0])
    assert len(a[0]) + len(a[1]) == 40 and len(a[1]) == 4


# -- statistics ---------------------------------------------------------------


def test_dead_by_negative_bias():
    H = np.random.default_rng(0).standard_normal((20, 3))
    W = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    model = _hand_model(W, [-5.0, 0.0], H=H)
    assert 0 not in alive_census(model, H)


def test_k_equals_dsae_all_alive():
    H = np.abs(np.random.default_rng(1).standard_normal((5, 2))) + 0.1
    model = _hand_model(np.ones((4, 2)), np.zeros(4), activation="topk", k=4, H=H)
    np.testing.assert_array_equal(alive_census(model, H), [0, 1, 2, 3])


def test_alive_census_exhaustive():
    H = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0], [2.0, -3.0]])
    W = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    b = np.array([0.0, -2.0, 0.0])
    model = _hand_model(W, b, H=H)
    alive = [j for j in range(3) if any(W[j] @ h + b[j] > 0 for h in H)]
    np.testing.assert_array_equal(alive_census(model, H), alive)


def test_activation_stats_cases():
    H = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]])
    model = _hand_model(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]), [0.0, 0.0, -2.5], H=H)
    st_ = activation_stats(model, H)
    assert st_.frequency[0] == 1.0 and st_.mean_magnitude[0] == 2.5
    assert st_.frequency[1] == 0.0 and st_.mean_magnitude[1] == 0.0 and st_.dead[1]
    # feature 2 fires on rows 3, 4 with values 0.5, 1.5
    assert st_.frequency[2] == 0.5 and st_.mean_magnitude[2] == 1.0


def test_redundancy_identical_features():
    H = np.random.default_rng(2).standard_normal((30, 2))
    model = _hand_model(np.array([[1.0, 0.5], [1.0, 0.5]]), [0.0, 0.0], H=H)
    assert redundancy(model, H).mean_abs_r == pytest.approx(1.0, abs=1e-12)


def test_redundancy_disjoint_indicators():
    # one-hot rows: feature j fires only on row j, so each pair has r = -1/3
    H = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    model = _hand_model(np.eye(2), [0.0, 0.0], H=H)
    assert redundancy(model, H).mean_abs_r == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_redundancy_three_features_loop(rng):
    H = rng.standard_normal((40, 3))
    model = _hand_model(rng.standard_normal((3, 3)), rng.standard_normal(3) * 0.1, H=H)
    Z = encode(model.params, H, "relu")
    assert redundancy(model, H).mean_abs_r == pytest.approx(_pairwise_mean_abs_r_loop(Z), abs=1e-12)


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, small_model):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(small_model, path, provenance={"seed": 1})
    assert load_checkpoint(path) == small_model


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"nonsense")
    with pytest.raises(ValueError, match="checkpoint"):
        load_checkpoint(str(tmp_path / "x.ckpt"))
