"""Objectives, assignment, and the count-matrix machinery."""
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import mclkit.autodiff as ad
import mclkit.losses as ls
from mclkit.errors import ConfigurationError, InputError, StateError

RNG = np.random.default_rng(321)


def random_probs(rng, b, m, c):
    logits = rng.normal(size=(b, m, c))
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------

def test_append_auxiliary_basic():
    assert np.array_equal(ls.append_auxiliary(0, 2), [1, 0, 0])
    assert np.array_equal(ls.append_auxiliary(1, 2), [0, 1, 0])


def test_auxiliary_target():
    assert np.array_equal(ls.auxiliary_target(2), [0, 0, 1])


def test_append_auxiliary_range_check():
    with pytest.raises(InputError):
        ls.append_auxiliary(2, 2)
    with pytest.raises(InputError):
        ls.append_auxiliary(-1, 2)


def test_augment_labels_matches_scalar_form():
    y = np.array([0, 2, 1])
    batch = ls.augment_labels(y, 3)
    for j, yj in enumerate(y):
        assert np.array_equal(batch[j], ls.append_auxiliary(int(yj), 3))


def test_aux_kl_is_exactly_neg_log_clamped_aux_probability():
    rng = np.random.default_rng(44)
    for _ in range(50):
        p = rng.dirichlet(np.ones(4))
        val = float(ad.kl_to_onehot(ls.auxiliary_target(3), ad.Tensor(p)))
        assert val == -np.log(np.clip(p[-1], 1e-12, 1.0))


# ---------------------------------------------------------------------------
# ie / oracle
# ---------------------------------------------------------------------------

def test_ie_loss_sums_everything():
    assert float(ls.ie_loss(np.array([[1.0, 2.0], [3.0, 4.0]]))) == 10.0
    assert float(ls.ie_loss(np.zeros((3, 2)))) == 0.0


def test_oracle_loss_row_minima():
    assert ls.oracle_loss(np.array([[1.0, 2.0], [3.0, 0.5]])) == 1.5


def test_oracle_equals_ie_for_single_model():
    col = RNG.uniform(size=(7, 1))
    assert ls.oracle_loss(col) == pytest.approx(float(ls.ie_loss(col)), abs=1e-12)


def test_oracle_never_exceeds_row_means():
    # brute-force row check: min <= mean per row, so oracle <= ie / M
    for _ in range(100):
        mat = RNG.uniform(size=(6, 4))
        assert ls.oracle_loss(mat) <= float(ls.ie_loss(mat)) / mat.shape[1] + 1e-12


# ---------------------------------------------------------------------------
# assign_top_k
# ---------------------------------------------------------------------------

def test_assign_top_k_argmin_row():
    v = ls.assign_top_k(np.array([[0.2, 0.5, 0.9]]), 1)
    assert np.array_equal(v, [[1, 0, 0]])


def test_assign_top_k_k_equals_m_selects_all():
    v = ls.assign_top_k(RNG.uniform(size=(5, 3)), 3)
    assert np.array_equal(v, np.ones((5, 3), dtype=np.int64))


def test_assign_top_k_tie_prefers_smaller_index():
    v = ls.assign_top_k(np.array([[0.5, 0.5, 0.1]]), 2)
    assert np.array_equal(v, [[1, 0, 1]])


def test_assign_top_k_range_check():
    with pytest.raises(ConfigurationError):
        ls.assign_top_k(np.zeros((2, 3)), 0)
    with pytest.raises(ConfigurationError):
        ls.assign_top_k(np.zeros((2, 3)), 4)


def test_assign_top_k_matches_exhaustive_enumeration():
    # oracle: enumerate all C(M, K) subsets and take the cheapest, summing in
    # ascending index order exactly like the masked objective does
    rng = np.random.default_rng(17)
    for _ in range(50):
        m = int(rng.integers(2, 5))
        k = int(rng.integers(1, m + 1))
        mat = rng.uniform(size=(6, m))
        v = ls.assign_top_k(mat, k)
        assert (v.sum(axis=1) == k).all()
        for j in range(6):
            chosen = mat[j][v[j].astype(bool)].sum()
            best = min(
                sum(mat[j][list(comb)]) for comb in itertools.combinations(range(m), k)
            )
            assert chosen == best


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (4, 5), elements=st.floats(0, 100)),
    st.integers(min_value=1, max_value=5),
)
def test_assign_top_k_rows_always_sum_to_k(mat, k):
    assert (ls.assign_top_k(mat, k).sum(axis=1) == k).all()


# ---------------------------------------------------------------------------
# lba
# ---------------------------------------------------------------------------

def test_lba_beta_zero_is_assigned_loss_only():
    probs = random_probs(RNG, 4, 3, 4)
    labels = ls.augment_labels(np.array([0, 1, 2, 0]), 3)
    cfg = ls.PenaltyConfig(beta=0.0, gamma=0.0, k=1)
    loss, v = ls.lba_loss(probs, labels, cfg)
    y = np.array([0, 1, 2, 0])
    ces = -np.log(probs[np.arange(4)[:, None], np.arange(3)[None, :], y[:, None]])
    expected = (ces * v).sum()
    assert float(loss) == pytest.approx(expected, abs=1e-9)


def test_lba_hand_example():
    # B=1, M=2, K=1: losses [-log 0.7, -log 0.1] assign model 0; the other
    # model pays beta * (-log p_aux) with p_aux = 0.7
    probs = np.array([[[0.7, 0.2, 0.1], [0.1, 0.2, 0.7]]])
    labels = ls.augment_labels(np.array([0]), 2)
    beta = 0.75
    loss, v = ls.lba_loss(probs, labels, ls.PenaltyConfig(beta=beta, k=1))
    assert np.array_equal(v, [[1, 0]])
    expected = -math.log(0.7) + beta * -math.log(0.7)
    assert float(loss) == pytest.approx(expected, abs=1e-9)
    assert float(loss) == pytest.approx(0.6241811518927818, abs=1e-9)


def test_lba_perfectly_specialized_is_global_minimum():
    probs = np.array([[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]])
    labels = ls.augment_labels(np.array([0]), 2)
    for beta in (0.0, 0.75, 10.0):
        loss, _ = ls.lba_loss(probs, labels, ls.PenaltyConfig(beta=beta, k=1))
        assert float(loss) == 0.0


def test_lba_rejects_aux_hot_labels():
    probs = random_probs(RNG, 2, 2, 3)
    bad = np.zeros((2, 3))
    bad[:, 2] = 1.0
    with pytest.raises(InputError):
        ls.lba_loss(probs, bad, ls.PenaltyConfig(k=1))


def test_lba_assignment_rows_sum_to_k_every_batch():
    for k in (1, 2, 3):
        probs = random_probs(RNG, 8, 3, 5)
        labels = ls.augment_labels(RNG.integers(0, 4, size=8), 4)
        _, v = ls.lba_loss(probs, labels, ls.PenaltyConfig(k=k))
        assert (v.sum(axis=1) == k).all()


# ---------------------------------------------------------------------------
# counter / specialization
# ---------------------------------------------------------------------------

def test_accumulate_counts_single_example():
    counter = ls.AssignmentCounter.empty(3, 2)
    ls.accumulate_counts(counter, np.array([[0, 1]]), np.array([2]))
    assert counter.counts[2, 1] == 1
    assert counter.counts.sum() == 1


def test_accumulate_counts_k2_increments_two_cells():
    counter = ls.AssignmentCounter.empty(3, 3)
    ls.accumulate_counts(counter, np.array([[1, 0, 1]]), np.array([0]))
    assert counter.counts[0].tolist() == [1, 0, 1]


def test_accumulate_counts_bookkeeping_identity():
    # over a full pass, each class row gains K * (examples of that class)
    rng = np.random.default_rng(5)
    counter = ls.AssignmentCounter.empty(4, 3)
    k = 2
    y = rng.integers(0, 4, size=64)
    for start in range(0, 64, 8):
        batch = y[start : start + 8]
        v = ls.assign_top_k(rng.uniform(size=(8, 3)), k)
        ls.accumulate_counts(counter, v, batch)
    for c in range(4):
        assert counter.counts[c].sum() == k * int((y == c).sum())


def test_accumulate_after_freeze_raises():
    counter = ls.AssignmentCounter.empty(2, 2)
    counter.frozen = True
    with pytest.raises(StateError):
        ls.accumulate_counts(counter, np.array([[1, 0]]), np.array([0]))


def test_fix_specialization_row_argmax():
    counter = ls.AssignmentCounter(counts=np.array([[10, 2], [3, 7]]), epochs_accumulated=1)
    w = ls.fix_specialization(counter, 1)
    assert np.array_equal(w.w, [[1, 0], [0, 1]])
    assert w.frozen


def test_fix_specialization_tie_prefers_smaller_index():
    counter = ls.AssignmentCounter(counts=np.array([[5, 5]]), epochs_accumulated=1)
    assert np.array_equal(ls.fix_specialization(counter, 1).w, [[1, 0]])


def test_fix_specialization_matches_bruteforce_sort():
    rng = np.random.default_rng(23)
    for _ in range(50):
        counts = rng.integers(0, 20, size=(5, 4))
        k = int(rng.integers(1, 5))
        counter = ls.AssignmentCounter(counts=counts, epochs_accumulated=1)
        w = ls.fix_specialization(counter, k)
        for c in range(5):
            expected = sorted(range(4), key=lambda m: (-counts[c, m], m))[:k]
            assert sorted(np.flatnonzero(w.w[c])) == sorted(expected)
        # idempotent: refreezing the same counts yields the same matrix
        assert np.array_equal(ls.fix_specialization(counter, k).w, w.w)


def test_fix_specialization_zero_row_defaults_with_diagnostic(caplog):
    counter = ls.AssignmentCounter(
        counts=np.array([[0, 0, 0], [1, 5, 2]]), epochs_accumulated=1
    )
    with caplog.at_level("WARNING"):
        w = ls.fix_specialization(counter, 2)
    assert np.array_equal(w.w[0], [1, 1, 0])
    assert any("no recorded assignments" in r.message for r in caplog.records)


def test_fix_specialization_empty_counter_raises():
    with pytest.raises(StateError):
        ls.fix_specialization(ls.AssignmentCounter.empty(2, 2), 1)


# ---------------------------------------------------------------------------
# mba
# ---------------------------------------------------------------------------

def _frozen(wmat, k=1):
    return ls.SpecializationMatrix(w=np.asarray(wmat), k=k, frozen=True)


def test_mba_reads_assignment_from_w_not_losses():
    # model 0 has the lowest loss but w routes class 0 to model 1
    probs = np.array([[[0.9, 0.05, 0.05], [0.3, 0.2, 0.5]]])
    labels = ls.augment_labels(np.array([0]), 2)
    w = _frozen([[0, 1], [1, 0]])
    cfg = ls.PenaltyConfig(gamma=0.5)
    loss = ls.mba_loss(probs, labels, w, cfg=cfg)
    expected = -math.log(0.3) + 0.5 * -math.log(0.05)
    assert float(loss) == pytest.approx(expected, abs=1e-9)


def test_mba_hand_example_term_by_term():
    probs = np.array([[[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]]])
    labels = ls.augment_labels(np.array([1]), 2)
    w = _frozen([[1, 0], [0, 1]])
    gamma = 0.75
    loss = ls.mba_loss(probs, labels, w, cfg=ls.PenaltyConfig(gamma=gamma))
    # class 1 -> model 1 gets the ground-truth term, model 0 the aux penalty
    expected = gamma * -math.log(0.1) + -math.log(0.5)
    assert float(loss) == pytest.approx(expected, abs=1e-9)


def test_mba_requires_frozen_matrix():
    probs = random_probs(RNG, 2, 2, 3)
    labels = ls.augment_labels(np.array([0, 1]), 2)
    unfrozen = ls.SpecializationMatrix(w=np.eye(2, dtype=np.int64), k=1, frozen=False)
    with pytest.raises(StateError):
        ls.mba_loss(probs, labels, unfrozen)


def test_mba_gamma_zero_all_ones_w_equals_ie():
    probs = random_probs(RNG, 4, 2, 4)
    labels = ls.augment_labels(np.array([0, 1, 2, 0]), 3)
    w = _frozen(np.ones((3, 2), dtype=np.int64), k=2)
    loss = ls.mba_loss(probs, labels, w, cfg=ls.PenaltyConfig(gamma=0.0, k=2))
    ces = np.stack(
        [[-math.log(probs[j, m, y]) for m in range(2)] for j, y in enumerate([0, 1, 2, 0])]
    )
    assert float(loss) == pytest.approx(float(ls.ie_loss(ces)), abs=1e-9)


def test_mba_assignment_depends_only_on_class_after_freeze():
    w = _frozen([[1, 0], [0, 1]])
    labels = ls.augment_labels(np.array([0, 0, 1]), 2)
    for _ in range(5):
        probs = random_probs(RNG, 3, 2, 3)
        terms, flags = ls.mba_loss_terms(probs, labels, w)
        assert np.array_equal(flags, [[1, 0], [1, 0], [0, 1]])


# ---------------------------------------------------------------------------
# cmcl
# ---------------------------------------------------------------------------

def test_cmcl_uniform_unassigned_pays_nothing():
    probs = np.array([[[1.0, 0.0], [0.5, 0.5]]])
    labels = ls.one_hot(np.array([0]), 2)
    loss, v = ls.cmcl_loss(probs, labels, ls.PenaltyConfig(beta=0.75, k=1))
    assert np.array_equal(v, [[1, 0]])
    assert float(loss) == pytest.approx(0.0, abs=1e-9)


def test_cmcl_beta_zero_reduces_to_smcl():
    probs = random_probs(RNG, 5, 3, 4)
    labels = ls.one_hot(RNG.integers(0, 4, size=5), 4)
    a, va = ls.cmcl_loss(probs, labels, ls.PenaltyConfig(beta=0.0, k=2))
    b, vb = ls.smcl_loss(probs, labels, 2)
    assert np.array_equal(va, vb)
    assert float(a) == pytest.approx(float(b), abs=1e-12)


def test_cmcl_hand_penalty_value():
    probs = np.array([[[1.0, 0.0], [0.75, 0.25]]])
    labels = ls.one_hot(np.array([0]), 2)
    beta = 0.6
    loss, v = ls.cmcl_loss(probs, labels, ls.PenaltyConfig(beta=beta, k=1))
    assert np.array_equal(v, [[1, 0]])
    assert float(loss) == pytest.approx(beta * 0.14384103622589042, abs=1e-9)


# ---------------------------------------------------------------------------
# amcl dispatch
# ---------------------------------------------------------------------------

def test_amcl_dispatch_boundary():
    probs = random_probs(RNG, 3, 2, 4)
    labels = ls.augment_labels(np.array([0, 1, 2]), 3)
    cfg = ls.PenaltyConfig(k=1, t_tau=5)
    w = _frozen([[1, 0], [0, 1], [1, 0]])
    _, _, phase = ls.amcl_objective(5, probs, labels, cfg, specialization=w)
    assert phase == "lba"
    _, _, phase = ls.amcl_objective(6, probs, labels, cfg, specialization=w)
    assert phase == "mba"


def test_amcl_mba_before_freeze_raises():
    probs = random_probs(RNG, 2, 2, 3)
    labels = ls.augment_labels(np.array([0, 1]), 2)
    cfg = ls.PenaltyConfig(k=1, t_tau=0)
    with pytest.raises(StateError):
        ls.amcl_objective(1, probs, labels, cfg)


def test_amcl_lba_branch_matches_lba_loss():
    probs = random_probs(RNG, 4, 3, 5)
    labels = ls.augment_labels(np.array([0, 1, 2, 3]), 4)
    cfg = ls.PenaltyConfig(k=2, t_tau=10)
    a, va, _ = ls.amcl_objective(3, probs, labels, cfg)
    b, vb = ls.lba_loss(probs, labels, cfg)
    assert float(a) == float(b)
    assert np.array_equal(va, vb)


# ---------------------------------------------------------------------------
# reduction identities
# ---------------------------------------------------------------------------

def test_k_equals_m_and_zero_penalties_reduce_to_ie():
    rng = np.random.default_rng(99)
    for _ in range(20):
        b, m, n = 6, 3, 4
        probs = random_probs(rng, b, m, n + 1)
        probs_plain = random_probs(rng, b, m, n)
        y = rng.integers(0, n, size=b)
        aug = ls.augment_labels(y, n)
        plain = ls.one_hot(y, n)
        cfg = ls.PenaltyConfig(beta=0.0, gamma=0.0, k=m)

        ces_aug = np.stack(
            [[float(ad.cross_entropy_onehot(ad.Tensor(probs[j, mm]), aug[j])) for mm in range(m)] for j in range(b)]
        )
        ie_aug = float(ls.ie_loss(ces_aug))
        lba, _ = ls.lba_loss(probs, aug, cfg)
        w = ls.SpecializationMatrix(w=np.ones((n, m), dtype=np.int64), k=m, frozen=True)
        mba = ls.mba_loss(probs, aug, w, cfg=cfg)
        assert abs(float(lba) - ie_aug) <= 1e-9
        assert abs(float(mba) - ie_aug) <= 1e-9

        ces_plain = np.stack(
            [[float(ad.cross_entropy_onehot(ad.Tensor(probs_plain[j, mm]), plain[j])) for mm in range(m)] for j in range(b)]
        )
        ie_plain = float(ls.ie_loss(ces_plain))
        smcl, _ = ls.smcl_loss(probs_plain, plain, m)
        assert abs(float(smcl) - ie_plain) <= 1e-9


def test_smcl_at_k_m_equals_ie_examplewise():
    probs = random_probs(RNG, 4, 2, 3)
    labels = ls.one_hot(np.array([0, 1, 2, 1]), 3)
    smcl, v = ls.smcl_loss(probs, labels, 2)
    ces = np.stack(
        [[-math.log(max(probs[j, m, y], 1e-12)) for m in range(2)] for j, y in enumerate([0, 1, 2, 1])]
    )
    assert np.array_equal(v, np.ones((4, 2), dtype=np.int64))
    assert float(smcl) == pytest.approx(float(ls.ie_loss(ces)), abs=1e-9)


# ---------------------------------------------------------------------------
# gradients of the full objectives
# ---------------------------------------------------------------------------

def _objective_grad_case(kind):
    from gradcheck import check_tensor_grad

    rng = np.random.default_rng(list(kind.encode()))
    b, m, n = 3, 2, 3
    logits = [ad.Tensor(rng.normal(size=(b, n + 1)), op="param") for _ in range(m)]
    labels = ls.augment_labels(rng.integers(0, n, size=b), n)
    cfg = ls.PenaltyConfig(beta=0.7, gamma=0.4, k=1, t_tau=3)
    if kind == "lba":
        build = lambda: ls.lba_loss([ad.softmax(lg) for lg in logits], labels, cfg)[0]
    elif kind == "mba":
        w = ls.SpecializationMatrix(
            w=ls.assign_top_k(rng.uniform(size=(n, m)), 1), k=1, frozen=True
        )
        build = lambda: ls.mba_loss([ad.softmax(lg) for lg in logits], labels, w, cfg=cfg)
    else:
        plain_logits = [ad.Tensor(rng.normal(size=(b, n)), op="param") for _ in range(m)]
        plain = ls.one_hot(rng.integers(0, n, size=b), n)
        build = lambda: ls.cmcl_loss([ad.softmax(lg) for lg in plain_logits], plain, cfg)[0]
        return build, plain_logits
    return build, logits


@pytest.mark.parametrize("kind", ["lba", "mba", "cmcl"])
def test_objective_gradients_match_finite_differences(kind):
    from gradcheck import check_tensor_grad

    build, params = _objective_grad_case(kind)
    check_tensor_grad(build, params)


def test_lba_unassigned_member_gets_only_penalty_gradient():
    rng = np.random.default_rng(3)
    logits = [ad.Tensor(rng.normal(size=(1, 3)), op="param") for _ in range(2)]
    labels = ls.augment_labels(np.array([0]), 2)
    loss, v = ls.lba_loss([ad.softmax(lg) for lg in logits], labels, ls.PenaltyConfig(beta=0.0, k=1))
    loss.backward()
    unassigned = int(np.flatnonzero(v[0] == 0)[0])
    assert np.allclose(logits[unassigned].grad, 0.0)
    assigned = int(np.flatnonzero(v[0] == 1)[0])
    assert not np.allclose(logits[assigned].grad, 0.0)
