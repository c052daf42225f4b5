"""Downstream fine-tuning and evaluation: a linear classifier over pairs of
successive embedding frames, CTC training on non-aligned transcripts, greedy
decoding, and phone-error-rate scoring.

Evaluation is read-only over the model and independent per utterance; error
counts pool additively, so corpus PER is invariant to utterance order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import HEAD_CTC, Checkpoint
from .encoder import EncoderParams, encode_batch, pad_batch
from .errors import ConfigError, DataError, InfeasibleAlignmentError, InputTooShortError
from .losses import ctc_greedy_decode, ctc_loss
from .tensor import Tensor
from .trainer import (
    OptimizerState,
    TrainSchedule,
    _grads_by_name,
    _init_head,
    _sum_terms,
    _to_checkpoint,
    adam_step,
    balanced_batches,
    lr_at,
    rng_for,
    steps_per_epoch,
)
from .dataio import CorpusSet


def head_forward(head: dict, embeddings):
    """Concatenate non-overlapping frame pairs, then map linearly to logits.

    (T', d) embeddings become (T'//2, V+1) logits; an odd final frame is
    dropped. Batched (B, T', d) input is handled the same way per row.
    """
    e = embeddings.frames if hasattr(embeddings, "frames") else embeddings
    if isinstance(e, np.ndarray):
        e = Tensor(e)
    t_axis = e.ndim - 2
    t_len = e.shape[t_axis]
    if t_len < 2:
        raise InputTooShortError(f"need at least 2 embedding frames, got {t_len}")
    half = t_len // 2
    if e.ndim == 2:
        pairs = T.concat([e[0:2 * half:2], e[1:2 * half:2]], axis=-1)
    else:
        pairs = T.concat([e[:, 0:2 * half:2], e[:, 1:2 * half:2]], axis=-1)
    return T.add(T.matmul(pairs, head["head.w"]), head["head.b"])


@dataclass
class FinetunedModel:
    """Encoder plus CTC head in eval mode; the unit evaluate_per consumes."""

    params: EncoderParams
    head: dict
    vocab_size: int

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, dtype=None) -> "FinetunedModel":
        if ck.head_kind != HEAD_CTC:
            raise ConfigError(f"checkpoint head '{ck.head_kind}' is not a CTC head")
        head = ck.head_tensors(requires_grad=False, dtype=dtype)
        vocab = head["head.b"].shape[0] - 1
        return cls(ck.encoder_params(requires_grad=False, dtype=dtype), head, vocab)

    def frame_logits(self, utt) -> np.ndarray:
        dtype = T.get_default_dtype()
        with T.no_grad():
            feats, lengths = pad_batch([utt.features.astype(dtype)], dtype=dtype)
            emb, out_lens = encode_batch(self.params, feats, lengths, train_mode=False)
            logits = head_forward(self.head, emb.data[0, : out_lens[0]])
        return logits.data


# ---------------------------------------------------------------------------
# edit distance and PER


def edit_distance(ref, hyp):
    """Levenshtein counts (substitutions, deletions, insertions), unit costs.

    Ties during backtrace prefer substitution over insertion over deletion.
    """
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            ins = dist[i, j - 1] + 1
            dele = dist[i - 1, j] + 1
            dist[i, j] = min(sub, ins, dele)
    s = d = ins_count = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif j > 0 and dist[i, j] == dist[i, j - 1] + 1:
            ins_count += 1
            j -= 1
        else:
            d += 1
            i -= 1
    return s, d, ins_count


@dataclass
class PerReport:
    """Pooled error counts; corpus PER pools counts, never averages rates."""

    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_length: int = 0
    utterances: list = field(default_factory=list)

    @property
    def per(self) -> float:
        if self.ref_length == 0:
            return 0.0
        return (self.substitutions + self.deletions + self.insertions) / self.ref_length

    def add(self, utt_id, s, d, i, ref_len):
        self.substitutions += s
        self.deletions += d
        self.insertions += i
        self.ref_length += ref_len
        upper = (s + d + i) / ref_len if ref_len else 0.0
        self.utterances.append({
            "utt_id": utt_id, "S": s, "D": d, "I": i,
            "ref_len": ref_len, "per": upper,
        })

    def to_dict(self):
        return {
            "per": self.per,
            "substitutions": self.substitutions,
            "deletions": self.deletions,
            "insertions": self.insertions,
            "ref_length": self.ref_length,
            "utterances": self.utterances,
        }


def evaluate_per(model, test_utts) -> PerReport:
    """Greedy-decode every utterance and pool the error counts.

    `model` is anything with frame_logits(utt) -> (N, V+1); references are
    the transcripts shifted into CTC label space (blank is 0).
    """
    if not test_utts:
        raise DataError("evaluate_per needs a non-empty test set")
    report = PerReport()
    for utt in test_utts:
        if utt.transcript is None:
            raise DataError(f"{utt.utt_id}: no transcript to score against")
        ref = (np.asarray(utt.transcript) + 1).tolist()
        hyp = ctc_greedy_decode(model.frame_logits(utt)).tolist()
        s, d, i = edit_distance(ref, hyp)
        report.add(utt.utt_id, s, d, i, len(ref))
    return report


# ---------------------------------------------------------------------------
# fine-tuning


def finetune(init: Checkpoint, train_utts, schedule: TrainSchedule, *,
             vocab_size, freeze_encoder=False, head_only_frac=0.2, seed=0,
             batch_size=8, metrics=None, checkpoint_dir=None,
             checkpoint_interval=0, resume=None, config_hash="") -> Checkpoint:
    """CTC fine-tuning of a pretrained checkpoint on transcripted utterances.

    The head trains alone for the first head_only_frac of the steps (encoder
    frozen, batch norm in eval mode), then the encoder unfreezes; with
    freeze_encoder=True the encoder stays frozen for the whole run.
    Utterances whose transcript cannot fit the output frames are skipped and
    counted in the checkpoint's extra["skipped_too_long"].
    """
    for utt in train_utts:
        if utt.transcript is None:
            raise DataError(f"{utt.utt_id}: fine-tuning needs transcripts")
    dtype = T.get_default_dtype()
    cfg = init.encoder_config
    corpus = CorpusSet.from_utterances(train_utts, tau=0.0)
    spe = steps_per_epoch(corpus, batch_size)
    total_steps = schedule.epochs * spe
    extra = {"skipped_too_long": 0}

    if resume is not None:
        enc = resume.encoder_params(requires_grad=True, dtype=dtype)
        head = resume.head_tensors(requires_grad=True, dtype=dtype)
        opt = OptimizerState.from_dict(resume.opt)
        start_step = resume.step
        extra.update(resume.extra)
    else:
        enc = init.encoder_params(requires_grad=True, dtype=dtype)
        head = _init_head("head.w", "head.b", 2 * cfg.projector_output_dim,
                          vocab_size + 1, seed, dtype)
        opt = OptimizerState.for_params({**enc.tensors, **head})
        start_step = 0
    trainables_all = {**enc.tensors, **head}

    batches = balanced_batches(corpus, batch_size, rng_for(seed, "data"))
    for _ in range(start_step):
        next(batches)

    head_only_steps = int(math.ceil(head_only_frac * total_steps))
    final = None
    for step in range(start_step, total_steps):
        lr = lr_at(schedule, step + 1, total_steps)
        batch = next(batches)
        encoder_frozen = freeze_encoder or step < head_only_steps
        loss_value, skipped = _ctc_step(
            enc, head, trainables_all, batch, opt, lr,
            encoder_frozen=encoder_frozen, seed=seed, step=step)
        extra["skipped_too_long"] += skipped
        epoch = step // spe
        if metrics is not None:
            metrics.write(step=step + 1, epoch=epoch, lr=lr, loss=loss_value,
                          encoder_frozen=encoder_frozen)
        done = step + 1
        if checkpoint_dir and ((checkpoint_interval and done % checkpoint_interval == 0)
                               or done == total_steps):
            ck = _to_checkpoint("finetuned", cfg, trainables_all, enc.running,
                                HEAD_CTC, opt, None, done, epoch, total_steps,
                                seed, config_hash, extra)
            ck.save(f"{checkpoint_dir}/ckpt_{done:06d}.bin")
            final = ck
    if final is None or final.step != total_steps:
        final = _to_checkpoint("finetuned", cfg, trainables_all, enc.running,
                               HEAD_CTC, opt, None, total_steps,
                               max(0, schedule.epochs - 1), total_steps, seed,
                               config_hash, extra)
    return final


def _ctc_step(enc, head, trainables_all, batch, opt, lr, *, encoder_frozen,
              seed, step):
    dtype = T.get_default_dtype()
    rng_drop = rng_for(seed, "drop", step)
    feats, lengths = pad_batch([u.features.astype(dtype) for u in batch], dtype=dtype)

    if encoder_frozen:
        with T.no_grad():
            emb, out_lens = encode_batch(enc, feats, lengths, train_mode=False)
        emb = Tensor(emb.data)
    else:
        emb, out_lens = encode_batch(enc, feats, lengths, train_mode=True,
                                     rng=rng_drop)
    logits = head_forward(head, emb)

    terms = []
    skipped = 0
    for i, utt in enumerate(batch):
        labels = np.asarray(utt.transcript, dtype=np.int64) + 1
        n_out = int(out_lens[i]) // 2
        try:
            terms.append(ctc_loss(logits[i][:n_out], labels))
        except InfeasibleAlignmentError:
            skipped += 1
    if terms:
        loss = T.mul(_sum_terms(terms), 1.0 / len(terms))
        grads = _grads_by_name(loss, trainables_all)
        adam_step(trainables_all, grads, opt, lr)
        loss_value = float(loss.data)
    else:
        loss_value = float("nan")
    return loss_value, skipped
