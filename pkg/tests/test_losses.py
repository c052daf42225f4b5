import itertools
import math

import numpy as np
import pytest

from xlst import tensor as T
from xlst.errors import (
    DegenerateFrameError,
    InfeasibleAlignmentError,
    LabelError,
    OracleScaleError,
)
from xlst.losses import (
    MixupTargets,
    collapse_path,
    ctc_brute_force,
    ctc_greedy_decode,
    ctc_lattice,
    ctc_loss,
    frame_cross_entropy,
    similarity_loss,
    similarity_loss_masked,
)
from xlst.tensor import Tensor


@pytest.fixture(autouse=True)
def float64_default():
    with T.default_dtype(64):
        yield


# ---------------------------------------------------------------------------
# similarity loss


def test_similarity_identical_embeddings_zero():
    e = np.random.default_rng(0).normal(size=(6, 8))
    value = similarity_loss(Tensor(e), e, reduction="sum")
    assert abs(value.total.item()) < 1e-9
    assert np.all(np.abs(value.per_frame) < 1e-9)


def test_similarity_opposite_embeddings():
    e = np.random.default_rng(1).normal(size=(3, 5))
    value = similarity_loss(Tensor(e), -e, reduction="sum")
    assert value.total.item() == pytest.approx(12.0, abs=1e-9)


def test_similarity_orthogonal_embeddings():
    e = np.zeros((5, 4))
    z = np.zeros((5, 4))
    e[:, 0] = 1.0
    z[:, 1] = 1.0
    value = similarity_loss(Tensor(e), z, reduction="sum")
    assert value.total.item() == pytest.approx(10.0, abs=1e-9)


def test_similarity_rescaling_invariance():
    rng = np.random.default_rng(2)
    e = rng.normal(size=(7, 6))
    z = rng.normal(size=(7, 6))
    base = similarity_loss(Tensor(e), z, reduction="sum").total.item()
    scale_e = rng.uniform(0.1, 9.0, size=(7, 1))
    scale_z = rng.uniform(0.1, 9.0, size=(7, 1))
    assert similarity_loss(Tensor(e * scale_e), z, reduction="sum").total.item() \
        == pytest.approx(base, abs=1e-9)
    assert similarity_loss(Tensor(e), z * scale_z, reduction="sum").total.item() \
        == pytest.approx(base, abs=1e-9)


def test_similarity_per_frame_bounds():
    rng = np.random.default_rng(3)
    for _ in range(20):
        value = similarity_loss(
            Tensor(rng.normal(size=(9, 5))), rng.normal(size=(9, 5)))
        assert np.all(value.per_frame >= 0.0) and np.all(value.per_frame <= 4.0)


def test_similarity_mean_vs_sum():
    rng = np.random.default_rng(4)
    e, z = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    s = similarity_loss(Tensor(e), z, reduction="sum").total.item()
    m = similarity_loss(Tensor(e), z, reduction="mean").total.item()
    assert m == pytest.approx(s / 8.0, rel=1e-12)


def test_similarity_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(5, 6))
    err = T.grad_check(lambda e: similarity_loss(e, z, reduction="sum").total,
                       Tensor(rng.normal(size=(5, 6))), eps=1e-7)
    assert err < 1e-5


def test_similarity_no_gradient_to_target():
    rng = np.random.default_rng(6)
    e = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    z = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    grads = T.backward(similarity_loss(e, z).total)
    assert e in grads and z not in grads


def test_similarity_degenerate_frame_names_index():
    e = np.ones((4, 3))
    e[2] = 0.0
    with pytest.raises(DegenerateFrameError) as exc:
        similarity_loss(Tensor(e), np.ones((4, 3)))
    assert exc.value.frame_index == 2


def test_similarity_masked_ignores_padding():
    rng = np.random.default_rng(7)
    e = rng.normal(size=(2, 5, 4))
    z = e.copy()
    z[0, 3:] = 0.0  # degenerate but padded
    e_pad = e.copy()
    e_pad[0, 3:] = 0.0
    mask = np.ones((2, 5, 1))
    mask[0, 3:] = 0.0
    e_t = Tensor(np.where(mask > 0, e_pad, 1.0))
    value = similarity_loss_masked(e_t, np.where(mask > 0, z, 0.0), mask)
    assert value.total.item() == pytest.approx(0.0, abs=1e-9)


# ---------------------------------------------------------------------------
# frame cross entropy


def test_cross_entropy_uniform_logits():
    loss = frame_cross_entropy(np.zeros((4, 5)), np.array([0, 1, 2, 3]))
    assert loss.item() == pytest.approx(math.log(5.0), rel=1e-9)


def test_cross_entropy_confident_correct():
    logits = np.zeros((3, 4))
    labels = np.array([1, 2, 0])
    logits[np.arange(3), labels] = 30.0
    assert frame_cross_entropy(logits, labels).item() < 1e-9


def test_cross_entropy_mixup_uniform_is_log_c():
    logits = np.zeros((6, 5))
    targets = MixupTargets(labels_a=np.array([0, 1, 2, 3, 4, 0]),
                           labels_b=np.array([4, 3, 2]), weight=0.5)
    assert frame_cross_entropy(logits, targets).item() == pytest.approx(
        math.log(5.0), rel=1e-9)


def test_cross_entropy_mixup_weights_terms_by_beta():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(6, 5))
    la, lb = np.array([0, 1, 2, 3]), np.array([4, 3, 2, 1, 0, 4])
    for beta in (0.0, 0.3, 1.0):
        mixed = frame_cross_entropy(
            logits, MixupTargets(la, lb, beta)).item()
        expect = beta * frame_cross_entropy(logits[:4], la).item() \
            + (1 - beta) * frame_cross_entropy(logits, lb).item()
        assert mixed == pytest.approx(expect, rel=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(LabelError):
        frame_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(9)
    labels = np.array([2, 0, 1, 4, 3])
    err = T.grad_check(lambda t: frame_cross_entropy(t, labels),
                       Tensor(rng.normal(size=(5, 5))))
    assert err < 1e-6


# ---------------------------------------------------------------------------
# CTC


def test_ctc_single_frame_uniform():
    loss = ctc_loss(np.zeros((1, 3)), [1])
    assert loss.item() == pytest.approx(math.log(3.0), rel=1e-10)


def test_ctc_empty_labels_all_blank():
    logits = np.random.default_rng(10).normal(size=(2, 4))
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    expect = -math.log(p[0, 0]) - math.log(p[1, 0])
    assert ctc_loss(logits, []).item() == pytest.approx(expect, rel=1e-9)


def test_ctc_matches_brute_force_small_case():
    rng = np.random.default_rng(11)
    logits = rng.normal(size=(4, 4))
    expect = ctc_brute_force(logits, [1, 2])
    assert ctc_loss(logits, [1, 2]).item() == pytest.approx(expect, abs=1e-10)


def test_ctc_matches_brute_force_randomized():
    rng = np.random.default_rng(12)
    for _ in range(200):
        t_max = int(rng.integers(1, 7))
        vocab = int(rng.integers(1, 5))
        max_len = min(3, t_max)
        lab_len = int(rng.integers(0, max_len + 1))
        labels = rng.integers(1, vocab + 1, size=lab_len)
        logits = rng.normal(size=(t_max, vocab + 1)) * 2.0
        try:
            expect = ctc_brute_force(logits, labels)
        except InfeasibleAlignmentError:
            with pytest.raises(InfeasibleAlignmentError):
                ctc_loss(logits, labels)
            continue
        assert ctc_loss(logits, labels).item() == pytest.approx(expect, abs=1e-10)


def test_ctc_lattice_forward_backward_agree():
    rng = np.random.default_rng(13)
    for _ in range(50):
        t_max = int(rng.integers(2, 9))
        labels = rng.integers(1, 4, size=int(rng.integers(0, min(4, t_max))))
        if len(labels) + int(np.sum(labels[1:] == labels[:-1])) > t_max:
            continue
        logits = rng.normal(size=(t_max, 4))
        z = logits - logits.max(axis=1, keepdims=True)
        lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        lat = ctc_lattice(lp, labels)
        assert lat.log_likelihood_forward == pytest.approx(
            lat.log_likelihood_backward, abs=1e-8)


def test_ctc_gradient_matches_finite_differences():
    rng = np.random.default_rng(14)
    labels = [2, 1, 1]
    logits = Tensor(rng.normal(size=(7, 4)))
    err = T.grad_check(lambda t: ctc_loss(t, labels), logits, eps=1e-6)
    assert err < 1e-5


def test_ctc_infeasible_raises_not_infinity():
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(np.zeros((2, 3)), [1, 1])  # repeat needs a separating blank
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(np.zeros((1, 3)), [1, 2])


def test_ctc_blank_not_allowed_in_labels():
    with pytest.raises(LabelError):
        ctc_loss(np.zeros((3, 3)), [0, 1])


def test_ctc_probability_normalization_tiny():
    # every possible label sequence of length <= T' on tiny instances:
    # probabilities from ctc_loss must sum to 1
    rng = np.random.default_rng(15)
    for t_max, vocab in ((2, 2), (3, 2)):
        logits = rng.normal(size=(t_max, vocab + 1))
        total = 0.0
        for ln in range(t_max + 1):
            for labels in itertools.product(range(1, vocab + 1), repeat=ln):
                try:
                    total += math.exp(-ctc_loss(logits, list(labels)).item())
                except InfeasibleAlignmentError:
                    continue
        assert total == pytest.approx(1.0, abs=1e-6)


def test_brute_force_scale_bound():
    with pytest.raises(OracleScaleError):
        ctc_brute_force(np.zeros((9, 3)), [1])
    with pytest.raises(OracleScaleError):
        ctc_brute_force(np.zeros((4, 7)), [1])


def test_brute_force_infeasible_label():
    with pytest.raises(InfeasibleAlignmentError):
        ctc_brute_force(np.zeros((2, 3)), [1, 1, 2])


def test_brute_force_single_frame_matches_ctc():
    assert ctc_brute_force(np.zeros((1, 3)), [1]) == pytest.approx(
        math.log(3.0), rel=1e-12)


def test_greedy_decode_examples():
    def logits_for(path, vocab_plus_blank=3):
        out = np.zeros((len(path), vocab_plus_blank))
        for t, sym in enumerate(path):
            out[t, sym] = 5.0
        return out

    assert ctc_greedy_decode(logits_for([0, 1, 1, 0, 2])).tolist() == [1, 2]
    assert ctc_greedy_decode(logits_for([0, 0, 0])).tolist() == []
    assert ctc_greedy_decode(logits_for([1, 0, 1])).tolist() == [1, 1]


def test_collapse_path():
    assert collapse_path((1, 1, 0, 1, 2, 2)) == (1, 1, 2)
    assert collapse_path(()) == ()
