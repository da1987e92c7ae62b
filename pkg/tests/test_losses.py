import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mscl import losses
from mscl.dataset import InteractionDataset, TrainingBatch
from mscl.errors import ConfigError, DegenerateVectorError
from mscl.losses import (
    LossConfig,
    compute_loss,
    cosine_sim,
    in_batch_negatives,
    l2_regularization,
    loss_bpr,
    loss_cl,
    loss_icl,
    loss_mcl,
    loss_mscl,
    loss_msbpr,
)

from conftest import central_difference, max_rel_error


def _random_case(rng, n=5, m=3, d=4, num_users=6, num_items=9):
    users = rng.integers(0, num_users, n)
    pos = rng.integers(0, num_items, (n, m))
    neg = rng.integers(0, num_items, n)
    U = rng.normal(size=(num_users, d))
    I = rng.normal(size=(num_items, d))
    return TrainingBatch(users, pos, neg), U, I


def _fd_check(fn, U, I, tol=1e-5):
    out = fn(U, I)
    gu, gi = out.dense(*U.shape[:1], *I.shape[:1])
    nu, ni = central_difference(lambda: fn(U, I).value, [U, I])
    assert max_rel_error(gu, nu) <= tol
    assert max_rel_error(gi, ni) <= tol
    return out


def _dense(out, U, I):
    return out.dense(U.shape[0], I.shape[0])


# -- cosine -------------------------------------------------------------------


def test_cosine_examples():
    v = np.array([0.3, -1.2, 2.0])
    assert cosine_sim(v, v) == pytest.approx(1.0, abs=1e-15)
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert -1.0 <= cosine_sim(v, -v) <= 1.0
    with pytest.raises(DegenerateVectorError):
        cosine_sim([0.0, 0.0], [1.0, 0.0])


# -- BPR ----------------------------------------------------------------------


def test_bpr_equal_scores_is_log2():
    batch = TrainingBatch(np.array([0, 1]), np.array([[0], [1]]), np.array([1, 0]))
    U = np.ones((2, 3))
    I = np.ones((2, 3))
    assert loss_bpr(batch, U, I).value == pytest.approx(math.log(2), abs=1e-15)


def test_bpr_large_margin_goes_to_zero():
    batch = TrainingBatch(np.array([0]), np.array([[0]]), np.array([1]))
    U = np.array([[1.0]])
    assert loss_bpr(batch, U, np.array([[1e3], [-1e3]])).value < 1e-300
    assert math.isfinite(loss_bpr(batch, U, np.array([[-1e3], [1e3]])).value)


def test_bpr_gradient(rng):
    batch, U, I = _random_case(rng, n=4, d=3)
    _fd_check(lambda u, i: loss_bpr(batch, u, i), U, I)


def test_bpr_needs_negatives():
    batch = TrainingBatch(np.array([0]), np.array([[0]]))
    with pytest.raises(ConfigError):
        loss_bpr(batch, np.ones((1, 2)), np.ones((1, 2)))
    with pytest.raises(ConfigError):
        loss_msbpr(batch, np.ones((1, 2)), np.ones((1, 2)), 0.2, 0.5)


# -- in-batch negatives -------------------------------------------------------


def test_negatives_disjoint_rows():
    batch = TrainingBatch(np.array([0, 1]), np.array([[3], [5]]))
    assert in_batch_negatives(batch, 0, 0) == {5}
    assert in_batch_negatives(batch, 0, 1) == {3}


def test_negatives_filter_true_positives():
    ds = InteractionDataset.from_lists([[1, 2], [3]], [[], []])
    batch = TrainingBatch(np.array([0, 0, 1]), np.array([[1], [2], [3]]))
    assert in_batch_negatives(batch, 0, 0, ds) == {3}
    assert in_batch_negatives(batch, 0, 1, ds) == {3}
    assert in_batch_negatives(batch, 0, 0, ds, filter_positives=False) == {2, 3}


def test_negative_set_size_bound(rng):
    n = 2048
    batch = TrainingBatch(rng.integers(0, 500, n), rng.permutation(5000)[:n][:, None])
    sizes = [len(in_batch_negatives(batch, 0, r)) for r in (0, 17, 2047)]
    assert max(sizes) <= n - 1
    assert sizes[0] == n - 1


def test_path_negatives_come_from_their_own_column():
    batch = TrainingBatch(np.array([0, 1]), np.array([[3, 7], [5, 8]]))
    assert in_batch_negatives(batch, 1, 0) == {8}


# -- contrastive family -------------------------------------------------------


def _aligned(num_users, num_items, d=3):
    v = np.array([0.2, -0.7, 1.1])[:d]
    return np.tile(v, (num_users, 1)), np.tile(2.5 * v, (num_items, 1))


@pytest.mark.parametrize("q", [1, 2, 5, 13])
def test_cl_equal_cosines(q):
    n = q + 1
    batch = TrainingBatch(np.arange(n), np.arange(n)[:, None])
    U, I = _aligned(n, n)
    value = loss_cl(batch, U, I, 0.2).value
    assert value == pytest.approx(math.log(q), abs=1e-12)


def test_icl_half_and_alpha_one():
    rng = np.random.default_rng(2)
    batch, U, I = _random_case(rng)
    assert loss_icl(batch, U, I, 0.2, 0.5).value == 0.5 * loss_cl(batch, U, I, 0.2).value
    n = 4
    b = TrainingBatch(np.arange(n), np.arange(n)[:, None])
    Ua, Ia = _aligned(n, n)
    assert loss_icl(b, Ua, Ia, 0.1, 1.0).value == pytest.approx(-10.0, abs=1e-12)
    with pytest.raises(ConfigError):
        loss_icl(batch, U, I, 0.2, 1.5)


def test_mcl_identities(rng):
    batch, U, I = _random_case(rng, n=7, m=3)
    one = TrainingBatch(batch.users, batch.positives[:, :1])
    assert loss_mcl(one, U, I, 0.2).value == loss_cl(one, U, I, 0.2).value
    twice = TrainingBatch(batch.users, np.repeat(batch.positives[:, :1], 2, axis=1))
    assert loss_mcl(twice, U, I, 0.2).value == pytest.approx(2 * loss_cl(one, U, I, 0.2).value,
                                                             abs=1e-12)
    per_path = sum(loss_cl(batch.path(m), U, I, 0.2).value for m in range(3))
    assert loss_mcl(batch, U, I, 0.2).value == pytest.approx(per_path, abs=1e-12)


def test_mscl_identities(rng):
    batch, U, I = _random_case(rng, n=6, m=4)
    one = batch.path(0)
    assert loss_mscl(one, U, I, 0.2, 0.5).value == pytest.approx(
        0.5 * loss_cl(one, U, I, 0.2).value, abs=1e-12)
    assert loss_mscl(batch, U, I, 0.2, 0.5).value == pytest.approx(
        0.5 * loss_mcl(batch, U, I, 0.2).value, abs=1e-12)


def test_identity_gradients_scale(rng):
    batch, U, I = _random_case(rng, n=6, m=1)
    cl = _dense(loss_cl(batch, U, I, 0.2), U, I)
    icl = _dense(loss_icl(batch, U, I, 0.2, 0.5), U, I)
    mscl = _dense(loss_mscl(batch, U, I, 0.2, 0.5), U, I)
    for a, b, c in zip(cl, icl, mscl):
        np.testing.assert_allclose(b, 0.5 * a, rtol=0, atol=1e-12)
        np.testing.assert_allclose(c, 0.5 * a, rtol=0, atol=1e-12)


@pytest.mark.parametrize("name", ["cl", "icl", "mcl", "mscl", "msbpr"])
def test_cosine_losses_scale_invariant(name, rng):
    batch, U, I = _random_case(rng)
    cfg = LossConfig(name, 0.2, 0.6, 3)
    before = compute_loss(cfg, batch, U, I).value
    U2, I2 = U.copy(), I.copy()
    U2[batch.users[0]] *= 7.5
    I2[batch.positives[1, 0]] *= 0.01
    assert compute_loss(cfg, batch, U2, I2).value == pytest.approx(before, abs=1e-10)


def test_bpr_not_scale_invariant(rng):
    batch, U, I = _random_case(rng)
    U2 = U.copy()
    U2[batch.users[0]] *= 7.5
    assert abs(loss_bpr(batch, U2, I).value - loss_bpr(batch, U, I).value) > 1e-6


def test_cl_row_permutation_invariant(rng):
    batch, U, I = _random_case(rng, n=9, m=1, num_items=20)
    perm = rng.permutation(9)
    shuffled = TrainingBatch(batch.users[perm], batch.positives[perm])
    assert loss_cl(shuffled, U, I, 0.2).value == pytest.approx(loss_cl(batch, U, I, 0.2).value,
                                                               abs=1e-12)


def test_small_temperature_is_stable(rng):
    batch, U, I = _random_case(rng, n=8, m=2)
    for name in ("cl", "mscl", "msbpr"):
        out = compute_loss(LossConfig(name, 0.01, 0.5, 2), batch, U, I)
        assert math.isfinite(out.value)
        assert np.all(np.isfinite(out.user_grads)) and np.all(np.isfinite(out.item_grads))


def test_degenerate_vector_raises(rng):
    batch, U, I = _random_case(rng)
    U[batch.users[2]] = 0.0
    with pytest.raises(DegenerateVectorError):
        loss_cl(batch, U, I, 0.2)


def test_rows_without_negatives_are_skipped():
    ds = InteractionDataset.from_lists([[0, 1], [2]], [[], []])
    batch = TrainingBatch(np.array([0, 0, 1]), np.array([[0], [1], [2]]))
    U = np.array([[1.0, 0.0], [0.0, 1.0]])
    I = np.array([[1.0, 1.0], [1.0, -1.0], [0.5, 2.0]])
    out = loss_cl(batch, U, I, 0.5, dataset=ds)
    # rows 0 and 1 only see item 2; row 2 sees items 0 and 1
    assert out.skipped_rows == 0
    ds_all = InteractionDataset.from_lists([[0, 1, 2]], [[]])
    batch_all = TrainingBatch(np.array([0, 0, 0]), np.array([[0], [1], [2]]))
    out = loss_cl(batch_all, U[:1], I, 0.5, dataset=ds_all)
    assert out.skipped_rows == 3
    assert out.value == 0.0


def test_grads_only_for_batch_entities(rng):
    batch, U, I = _random_case(rng, num_users=30, num_items=40)
    out = loss_mscl(batch, U, I, 0.2, 0.5)
    assert set(out.user_ids.tolist()) <= set(batch.users.tolist())
    assert set(out.item_ids.tolist()) <= set(batch.positives.ravel().tolist())
    assert set(out.grads) == {("user", int(u)) for u in out.user_ids} | {
        ("item", int(i)) for i in out.item_ids}


@pytest.mark.parametrize("name,tau,alpha,m", [
    ("cl", 0.2, 0.5, 1), ("icl", 0.2, 0.45, 1), ("mcl", 0.5, 0.5, 3),
    ("mscl", 0.1, 0.6, 5), ("msbpr", 0.2, 0.6, 3),
])
def test_contrastive_gradients(name, tau, alpha, m, rng):
    batch, U, I = _random_case(rng, n=5, m=m, d=4)
    cfg = LossConfig(name, tau, alpha, m)
    _fd_check(lambda u, i: compute_loss(cfg, batch, u, i), U, I)


def test_gradient_with_filtering(rng):
    ds = InteractionDataset.from_lists([rng.choice(9, 4, replace=False) for _ in range(6)],
                                       [[]] * 6, num_items=9)
    users = rng.integers(0, 6, 8)
    pos = np.array([[rng.choice(ds.train_positives[u]) for _ in range(2)] for u in users])
    batch = TrainingBatch(users, pos)
    U, I = rng.normal(size=(6, 3)), rng.normal(size=(9, 3))
    _fd_check(lambda u, i: loss_mscl(batch, u, i, 0.2, 0.4, dataset=ds), U, I)


def test_msbpr_reductions():
    batch = TrainingBatch(np.array([0, 1]), np.array([[0], [1]]), np.array([1, 0]))
    U = np.array([[1.0, 2.0], [-1.0, 0.5]])
    I = U.copy()[::-1] * 3
    same = np.vstack([U[0] * 2, U[0] * 5])
    batch_same = TrainingBatch(np.array([0, 0]), np.array([[0], [1]]), np.array([1, 0]))
    assert loss_msbpr(batch_same, U, same, 0.3, 0.5).value == pytest.approx(math.log(2), abs=1e-15)
    # M = 1, alpha = 0.5, tau = 1 is BPR on halved cosines
    un = U / np.linalg.norm(U, axis=1, keepdims=True) * math.sqrt(0.5)
    In = I / np.linalg.norm(I, axis=1, keepdims=True) * math.sqrt(0.5)
    assert loss_msbpr(batch, U, I, 1.0, 0.5).value == pytest.approx(
        loss_bpr(batch, un, In).value, abs=1e-14)


# -- L2 -----------------------------------------------------------------------


def test_l2_examples(rng):
    batch = TrainingBatch(np.array([0]), np.array([[0]]))
    out = l2_regularization(np.array([[3.0, 4.0]]), np.zeros((1, 2)), batch, 2.0)
    assert out.value == 25.0
    gu, _ = out.dense(1, 1)
    np.testing.assert_array_equal(gu[0], [6.0, 8.0])
    batch, U, I = _random_case(rng)
    zero = l2_regularization(U, I, batch, 0.0)
    assert zero.value == 0.0 and not zero.user_grads.any()


def test_l2_gradient(rng):
    batch, U, I = _random_case(rng, m=3)
    _fd_check(lambda u, i: l2_regularization(u, i, batch, 0.7), U, I, tol=1e-6)


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig("softmax")
    with pytest.raises(ConfigError):
        LossConfig("mscl", temperature=0.0)
    with pytest.raises(ConfigError):
        LossConfig("mscl", positive_weight=-0.1)
    with pytest.raises(ConfigError):
        LossConfig("mscl", num_positives=0)
    assert LossConfig("icl", num_positives=5).paths == 1
    assert LossConfig("mscl", num_positives=5).paths == 5


def test_positive_scale_hook_breaks_gradient(rng, monkeypatch):
    batch, U, I = _random_case(rng, m=1)
    monkeypatch.setattr(losses, "_POSITIVE_GRAD_SCALE", 1.01)
    out = loss_cl(batch, U, I, 0.2)
    gu, gi = out.dense(U.shape[0], I.shape[0])
    nu, ni = central_difference(lambda: loss_cl(batch, U, I, 0.2).value, [U, I])
    assert max(max_rel_error(gu, nu), max_rel_error(gi, ni)) > 1e-4


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), name=st.sampled_from(losses.KINDS),
       n=st.integers(2, 10), m=st.integers(1, 4), d=st.integers(2, 6),
       tau=st.sampled_from([0.1, 0.2, 0.5, 1.0]), alpha=st.floats(0.0, 1.0))
def test_gradients_property(seed, name, n, m, d, tau, alpha):
    rng = np.random.default_rng(seed)
    batch, U, I = _random_case(rng, n=n, m=m, d=d)
    cfg = LossConfig(name, tau, alpha, m)
    _fd_check(lambda u, i: compute_loss(cfg, batch, u, i), U, I)


def test_cached_masks_follow_dataset_and_filter():
    rng = np.random.default_rng(8)
    users = np.array([0, 1, 2, 0])
    pos = np.array([[0, 3], [1, 4], [2, 0], [3, 1]])
    batch = TrainingBatch(users, pos)
    U, I = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    a = InteractionDataset.from_lists([[0, 3], [1, 4, 2], [2, 0]], [[], [], []], num_items=5)
    b = InteractionDataset.from_lists([[0, 3, 1, 2], [1, 4], [2, 0]], [[], [], []], num_items=5)
    cfg = LossConfig("mscl", 0.3, 0.4, 2)
    for ds in (a, b, None, a):
        for filt in (True, False):
            c = LossConfig("mscl", 0.3, 0.4, 2, filter_true_positives=filt)
            cached = compute_loss(c, batch, U, I, ds)
            fresh = compute_loss(c, TrainingBatch(users, pos.copy()), U, I, ds)
            assert cached.value == fresh.value
            np.testing.assert_array_equal(cached.item_grads, fresh.item_grads)
    assert compute_loss(cfg, batch, U, I, a).value != compute_loss(cfg, batch, U, I, b).value
