import numpy as np
import pytest

from xlst import tensor as T
from xlst.augment import AugmentSpec
from xlst.dataio import CorpusSet, LanguageData, Utterance
from xlst.encoder import EncoderConfig
from xlst.errors import DataError, InputTooShortError
from xlst.finetune import (
    FinetunedModel,
    PerReport,
    edit_distance,
    evaluate_per,
    finetune,
    head_forward,
)
from xlst.synthdata import FamilyConfig, make_language_family, sample_utterance
from xlst.tensor import Tensor
from xlst.trainer import TrainSchedule, supervised_train

TINY_ENC = EncoderConfig(
    input_dim=16, cnn_channels=(4,), transformer_blocks=1, attention_dim=16,
    attention_heads=2, ffn_dim=24, projector_hidden_dim=16,
    projector_output_dim=8, dropout=0.0)


def _head(d, vocab, seed=0):
    rng = np.random.default_rng(seed)
    return {
        "head.w": Tensor(rng.normal(size=(2 * d, vocab + 1)) * 0.1),
        "head.b": Tensor(np.zeros(vocab + 1)),
    }


# ---------------------------------------------------------------------------
# head


def test_head_output_shape():
    head = _head(16, 9)
    with T.default_dtype(64):
        out = head_forward(head, np.random.default_rng(0).normal(size=(10, 16)))
    assert out.shape == (5, 10)


def test_head_drops_odd_final_frame():
    head = _head(16, 9)
    with T.default_dtype(64):
        out = head_forward(head, np.random.default_rng(1).normal(size=(11, 16)))
    assert out.shape == (5, 10)


def test_head_zero_weights_uniform_posterior():
    head = {
        "head.w": Tensor(np.zeros((32, 5))),
        "head.b": Tensor(np.zeros(5)),
    }
    with T.default_dtype(64):
        out = head_forward(head, np.random.default_rng(2).normal(size=(6, 16)))
        probs = T.softmax(out).data
    assert np.allclose(probs, 0.2)


def test_head_too_short():
    with pytest.raises(InputTooShortError):
        head_forward(_head(16, 3), np.zeros((1, 16)))


def test_head_concatenates_successive_pairs():
    d, vocab = 4, 2
    e = np.arange(6 * d, dtype=np.float64).reshape(6, d)
    w = np.random.default_rng(3).normal(size=(2 * d, vocab + 1))
    head = {"head.w": Tensor(w), "head.b": Tensor(np.zeros(vocab + 1))}
    with T.default_dtype(64):
        out = head_forward(head, e).data
    for k in range(3):
        pair = np.concatenate([e[2 * k], e[2 * k + 1]])
        assert np.allclose(out[k], pair @ w)


# ---------------------------------------------------------------------------
# edit distance


def test_edit_distance_identity():
    assert edit_distance("abc", "abc") == (0, 0, 0)


def test_edit_distance_single_deletion():
    assert edit_distance("abc", "ac") == (0, 1, 0)


def test_edit_distance_kitten_sitting():
    s, d, i = edit_distance("kitten", "sitting")
    assert s + d + i == 3

    # independent distance-only DP oracle over random pairs
    def oracle(a, b):
        prev = list(range(len(b) + 1))
        for x in a:
            cur = [prev[0] + 1]
            for j, y in enumerate(b, 1):
                cur.append(min(prev[j - 1] + (x != y), cur[-1] + 1, prev[j] + 1))
            prev = cur
        return prev[-1]

    rng = np.random.default_rng(4)
    for _ in range(200):
        a = rng.integers(0, 4, size=rng.integers(0, 8)).tolist()
        b = rng.integers(0, 4, size=rng.integers(0, 8)).tolist()
        s, d, i = edit_distance(a, b)
        assert s + d + i == oracle(a, b)


def test_edit_distance_properties():
    rng = np.random.default_rng(5)
    seqs = [rng.integers(0, 3, size=rng.integers(0, 7)).tolist() for _ in range(12)]
    for a in seqs:
        assert sum(edit_distance(a, a)) == 0
    for a in seqs:
        for b in seqs:
            assert sum(edit_distance(a, b)) == sum(edit_distance(b, a))
    for a in seqs[:6]:
        for b in seqs[:6]:
            for c in seqs[:6]:
                ab = sum(edit_distance(a, b))
                bc = sum(edit_distance(b, c))
                ac = sum(edit_distance(a, c))
                assert ac <= ab + bc


def test_edit_distance_counts_decompose():
    s, d, i = edit_distance([1, 2, 3], [9, 2, 3, 4])
    assert (s, d, i) == (1, 0, 1)
    s, d, i = edit_distance([], [1, 2])
    assert (s, d, i) == (0, 0, 2)
    s, d, i = edit_distance([1, 2], [])
    assert (s, d, i) == (0, 2, 0)


# ---------------------------------------------------------------------------
# PER evaluation


class OracleModel:
    """Nearest-prototype frame classifier at the embedding frame rate."""

    def __init__(self, spec):
        self.spec = spec

    def frame_logits(self, utt):
        n = utt.num_frames // 2
        frames = utt.features[0: 2 * n: 2]
        d2 = ((frames[:, None, :] - self.spec.prototypes[None, :, :]) ** 2).sum(axis=2)
        logits = np.full((n, self.spec.num_phones + 1), -10.0)
        logits[np.arange(n), d2.argmin(axis=1) + 1] = 10.0
        return logits


class BlankModel:
    def frame_logits(self, utt):
        logits = np.zeros((utt.num_frames // 2, 13))
        logits[:, 0] = 10.0
        return logits


def _test_set(n=40, sigma=0.0, seed=9):
    spec = make_language_family(seed, FamilyConfig(noise_sigma=sigma))[1]
    rng = np.random.default_rng(seed)
    return spec, [sample_utterance(spec, rng, utt_id=f"t{i}") for i in range(n)]


def test_oracle_model_near_zero_per_on_noiseless_data():
    spec, utts = _test_set(sigma=0.0)
    report = evaluate_per(OracleModel(spec), utts)
    assert report.per < 0.02


def test_all_blank_model_is_all_deletions():
    _, utts = _test_set(n=10)
    report = evaluate_per(BlankModel(), utts)
    assert report.per == 1.0
    assert report.substitutions == 0 and report.insertions == 0
    assert report.deletions == report.ref_length


def test_per_pools_counts_not_rates():
    report = PerReport()
    report.add("a", 1, 0, 0, 2)   # per-utt 0.5
    report.add("b", 0, 0, 0, 8)   # per-utt 0.0
    assert report.per == pytest.approx(0.1)  # 1/10 pooled, not mean(0.5, 0)


def test_per_invariant_to_utterance_order():
    spec, utts = _test_set(n=12, sigma=0.3)
    fwd = evaluate_per(OracleModel(spec), utts)
    rev = evaluate_per(OracleModel(spec), list(reversed(utts)))
    assert fwd.per == rev.per
    assert fwd.substitutions == rev.substitutions


def test_empty_reference_and_hypothesis_zero_counts():
    report = PerReport()
    report.add("e", 0, 0, 0, 0)
    assert report.per == 0.0


def test_evaluate_per_rejects_empty_set():
    spec, _ = _test_set(n=1)
    with pytest.raises(DataError):
        evaluate_per(OracleModel(spec), [])


# ---------------------------------------------------------------------------
# fine-tuning


def _pretrained_checkpoint(corpus, specs, epochs=2):
    schedule = TrainSchedule(epochs=epochs, peak_lr=1e-3, warmup=0.2, hold=0.0,
                             decay=0.8)
    spec = AugmentSpec(enable_time_mask=False, enable_freq_mask=False,
                       enable_mixup=False)
    return supervised_train(TINY_ENC, corpus, schedule, spec,
                            num_classes=specs[0].num_phones, seed=1,
                            batch_size=4)


def _labeled_corpus(seed=11, lang=1, n=8, sigma=0.0):
    family = FamilyConfig(noise_sigma=sigma, utt_frames_min=24, utt_frames_max=44)
    specs = make_language_family(seed, family)
    rng = np.random.default_rng(seed)
    utts = [sample_utterance(specs[lang], rng, utt_id=f"f{i}") for i in range(n)]
    return specs, utts


def test_finetune_zero_epochs_is_initialized_head_on_checkpoint():
    specs, utts = _labeled_corpus()
    sup_corpus = CorpusSet(languages=[LanguageData(0, _labeled_corpus(seed=12, lang=0)[1])])
    ck = _pretrained_checkpoint(sup_corpus, specs)
    schedule = TrainSchedule(epochs=0, peak_lr=1e-3, warmup=0.0, hold=0.5, decay=0.5)
    out = finetune(ck, utts, schedule, vocab_size=specs[1].num_phones, seed=5)
    for name, arr in ck.params.items():
        if not name.startswith("head."):
            assert np.array_equal(out.params[name], arr)
    assert out.head_kind == "ctc"
    assert out.params["head.w"].shape == (2 * 8, specs[1].num_phones + 1)


def test_finetune_loss_decreases_on_separable_data():
    specs, utts = _labeled_corpus(sigma=0.0, n=10)
    sup_corpus = CorpusSet(languages=[LanguageData(0, _labeled_corpus(seed=12, lang=0)[1])])
    ck = _pretrained_checkpoint(sup_corpus, specs)
    from xlst.metrics import MetricsWriter
    metrics = MetricsWriter()
    schedule = TrainSchedule(epochs=12, peak_lr=3e-3, warmup=0.1, hold=0.4, decay=0.5)
    finetune(ck, utts, schedule, vocab_size=specs[1].num_phones,
             freeze_encoder=True, seed=5, batch_size=5, metrics=metrics)
    losses = [r["loss"] for r in metrics.records if "loss" in r]
    smooth = np.convolve(losses, np.ones(4) / 4, mode="valid")
    assert smooth[-1] < smooth[0]


def test_finetune_deterministic_same_seed():
    specs, utts = _labeled_corpus(n=6)
    sup_corpus = CorpusSet(languages=[LanguageData(0, _labeled_corpus(seed=12, lang=0)[1])])
    ck = _pretrained_checkpoint(sup_corpus, specs)
    schedule = TrainSchedule(epochs=3, peak_lr=1e-3, warmup=0.2, hold=0.0, decay=0.8)
    runs = []
    for _ in range(2):
        model_ck = finetune(ck, utts, schedule, vocab_size=specs[1].num_phones,
                            seed=7, batch_size=3)
        report = evaluate_per(FinetunedModel.from_checkpoint(model_ck), utts)
        runs.append((model_ck, report.per))
    assert runs[0][0].equals(runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_finetune_skips_infeasible_transcripts():
    specs, utts = _labeled_corpus(n=4)
    # transcript longer than the model's output frames can ever carry
    bad = Utterance(
        utt_id="bad", lang=1,
        features=utts[0].features[:24].copy(),
        frame_labels=utts[0].frame_labels[:24].copy(),
        transcript=np.arange(12, dtype=np.int64) % specs[1].num_phones)
    bad.transcript = np.asarray(
        [i % specs[1].num_phones for i in range(12)], dtype=np.int64)
    sup_corpus = CorpusSet(languages=[LanguageData(0, _labeled_corpus(seed=12, lang=0)[1])])
    ck = _pretrained_checkpoint(sup_corpus, specs)
    schedule = TrainSchedule(epochs=1, peak_lr=1e-3, warmup=0.2, hold=0.0, decay=0.8)
    out = finetune(ck, utts + [bad], schedule, vocab_size=specs[1].num_phones,
                   seed=3, batch_size=5)
    assert out.extra["skipped_too_long"] >= 1


def test_finetune_requires_transcripts():
    specs, utts = _labeled_corpus(n=2)
    utts[0].transcript = None
    sup_corpus = CorpusSet(languages=[LanguageData(0, _labeled_corpus(seed=12, lang=0)[1])])
    ck = _pretrained_checkpoint(sup_corpus, specs)
    schedule = TrainSchedule(epochs=1, peak_lr=1e-3, warmup=0.2, hold=0.0, decay=0.8)
    with pytest.raises(DataError):
        finetune(ck, utts, schedule, vocab_size=specs[1].num_phones)
