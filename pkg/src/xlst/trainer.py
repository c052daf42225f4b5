"""Training engine: twin forward passes, EMA target refinement, Adam, the
warmup/hold/decay schedule, and language-balanced batching.

One trainer owns the main parameters, the EMA target, and the optimizer
state; batch assembly and augmentation are pure and could run ahead, but the
forward/backward/update/EMA sequence of a step is strictly serialized, and
the EMA update always happens after the optimizer step.

All randomness derives from (root seed, purpose tag, step counter), so a
checkpoint needs to store only the seed and the step to resume bit-exactly.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .augment import STAGE_SUPERVISED, STAGE_XLST_MAIN, STAGE_XLST_TARGET, augment, mixup
from .checkpoint import HEAD_FRAME_CLASSIFIER, Checkpoint
from .dataio import CorpusSet
from .encoder import EncoderParams, encode_batch, frame_mask, init_params, pad_batch
from .errors import ConfigError, ContractError, StateError, TrainingDivergenceError
from .losses import MixupTargets, frame_cross_entropy, similarity_loss_masked
from .tensor import Tensor


def rng_for(seed, *tags):
    """Independent deterministic stream for (seed, purpose, counters)."""
    words = [int(seed)]
    for tag in tags:
        if isinstance(tag, str):
            words.append(zlib.crc32(tag.encode("utf-8")))
        else:
            words.append(int(tag))
    return np.random.default_rng(np.random.SeedSequence(words))


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class TrainSchedule:
    """(epochs, peak lr, warmup/hold/decay fractions) learning-rate program."""

    epochs: int
    peak_lr: float
    warmup: float
    hold: float
    decay: float
    decay_floor_ratio: float = 0.01

    def __post_init__(self):
        if self.epochs < 0 or self.peak_lr <= 0:
            raise ConfigError("schedule needs epochs >= 0 and peak_lr > 0")
        if min(self.warmup, self.hold, self.decay) < 0:
            raise ConfigError("schedule fractions must be non-negative")
        if abs(self.warmup + self.hold + self.decay - 1.0) > 1e-9:
            raise ConfigError("warmup + hold + decay must sum to 1")
        if not 0 < self.decay_floor_ratio <= 1:
            raise ConfigError("decay_floor_ratio must lie in (0, 1]")


def lr_at(schedule: TrainSchedule, step, total_steps) -> float:
    """Linear ramp to peak, constant hold, exponential decay to the floor."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    ramp_end = schedule.warmup * total_steps
    hold_end = (schedule.warmup + schedule.hold) * total_steps
    if step < ramp_end:
        return schedule.peak_lr * (step / ramp_end)
    if step <= hold_end or schedule.decay == 0:
        return schedule.peak_lr
    frac = (step - hold_end) / (total_steps - hold_end)
    return schedule.peak_lr * schedule.decay_floor_ratio ** frac


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict) -> "OptimizerState":
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(m=m, v=v)

    def to_dict(self):
        return {"m": self.m, "v": self.v, "step": self.step,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, d):
        return cls(m=dict(d["m"]), v=dict(d["v"]), step=int(d["step"]),
                   beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"])


def adam_step(params: dict, grads: dict, state: OptimizerState, lr) -> None:
    """Bias-corrected Adam update, in place on the parameter tensors."""
    for name in params:
        if name not in state.m:
            raise StateError(f"optimizer state missing parameter '{name}'")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise StateError(f"gradient shape {g.shape} != param shape "
                             f"{p.data.shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(name)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# EMA target


def ema_combine(lam, old, new):
    """The one canonical EMA expression; tests bit-check against it."""
    return lam * old + (1.0 - lam) * new


@dataclass
class EmaState:
    """Target-network parameters refined as a moving average of the main ones."""

    params: EncoderParams
    lam: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise StateError(f"EMA coefficient {self.lam} outside [0, 1]")


def ema_update(ema: EmaState, main: EncoderParams) -> None:
    """theta_o <- lam * theta_o + (1 - lam) * theta, running stats included."""
    if set(ema.params.tensors) != set(main.tensors):
        raise StateError("EMA and main parameter names disagree")
    for name, target in ema.params.tensors.items():
        source = main.tensors[name]
        if target.shape != source.shape:
            raise StateError(f"EMA shape mismatch for '{name}': "
                             f"{target.shape} vs {source.shape}")
        target.data = ema_combine(ema.lam, target.data, source.data)
    for name, value in ema.params.running.items():
        ema.params.running[name] = ema_combine(ema.lam, value, main.running[name])


# ---------------------------------------------------------------------------
# balanced batching


def balanced_batches(corpus: CorpusSet, batch_size, rng):
    """Endless stream of utterance batches with language balancing.

    Each slot first draws a language with probability proportional to
    frames^tau, then pops from that language's shuffled queue; queues
    reshuffle when exhausted, so no utterance repeats within one
    per-language epoch.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    probs = corpus.sampling_probs()
    n_langs = len(corpus.languages)
    orders = [rng.permutation(len(l.utterances)) for l in corpus.languages]
    cursors = [0] * n_langs

    def draw():
        li = int(rng.choice(n_langs, p=probs))
        lang = corpus.languages[li]
        if cursors[li] >= len(orders[li]):
            orders[li] = rng.permutation(len(lang.utterances))
            cursors[li] = 0
        utt = lang.utterances[int(orders[li][cursors[li]])]
        cursors[li] += 1
        return utt

    while True:
        yield [draw() for _ in range(batch_size)]


def steps_per_epoch(corpus: CorpusSet, batch_size) -> int:
    return max(1, math.ceil(corpus.total_utterances / batch_size))


# ---------------------------------------------------------------------------
# supervised pretraining (the initial target producer)


def _init_head(name_w, name_b, in_dim, out_dim, seed, dtype):
    rng = rng_for(seed, "head")
    bound = 1.0 / math.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=(in_dim, out_dim)).astype(dtype)
    return {name_w: Tensor(w, requires_grad=True),
            name_b: Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)}


def _grads_by_name(loss, trainables: dict) -> dict:
    tensor_list = list(trainables.values())
    grad_map = T.backward(loss, params=tensor_list)
    return {name: grad_map[t] for name, t in trainables.items()}


def _to_checkpoint(kind, cfg, trainables, running, head_kind, opt, ema,
                   step, epoch, total_steps, seed, config_hash, extra):
    params = {k: t.data.copy() for k, t in trainables.items()}
    ema_dict = None
    if ema is not None:
        ema_dict = {
            "lam": ema.lam,
            "params": {k: t.data.copy() for k, t in ema.params.tensors.items()},
            "running": {k: v.copy() for k, v in ema.params.running.items()},
        }
    return Checkpoint(
        kind=kind, encoder_config=cfg, params=params,
        running={k: v.copy() for k, v in running.items()},
        head_kind=head_kind, opt=opt.to_dict() if opt else None, ema=ema_dict,
        step=step, epoch=epoch, total_steps=total_steps, root_seed=seed,
        config_hash=config_hash, extra=dict(extra))


def _labels_at_output_rate(utt, out_len):
    # each output frame covers input frames (2k, 2k+1); take the first
    return utt.frame_labels[0: 2 * out_len: 2]


def supervised_train(encoder_cfg, corpus: CorpusSet, schedule: TrainSchedule,
                     augment_spec, *, num_classes, seed=0, batch_size=8,
                     metrics=None, checkpoint_dir=None, checkpoint_interval=0,
                     resume=None, config_hash="") -> Checkpoint:
    """Frame-level cross-entropy pretraining with all three augmenters.

    Every utterance needs frame-aligned labels. Returns encoder parameters
    plus the linear frame classifier that makes this checkpoint usable as an
    initial self-training target producer.
    """
    for lang in corpus.languages:
        for utt in lang.utterances:
            if utt.frame_labels is None:
                raise ConfigError(f"{utt.utt_id}: supervised training needs frame labels")
    dtype = T.get_default_dtype()
    cfg = encoder_cfg
    spe = steps_per_epoch(corpus, batch_size)
    total_steps = schedule.epochs * spe

    if resume is not None:
        enc = resume.encoder_params(requires_grad=True, dtype=dtype)
        head = resume.head_tensors(requires_grad=True, dtype=dtype)
        trainables = {**enc.tensors, **head}
        opt = OptimizerState.from_dict(resume.opt)
        start_step = resume.step
    else:
        enc = init_params(cfg, seed, dtype=dtype)
        head = _init_head("head.w", "head.b", cfg.projector_output_dim,
                          num_classes, seed, dtype)
        trainables = {**enc.tensors, **head}
        opt = OptimizerState.for_params(trainables)
        start_step = 0

    batches = balanced_batches(corpus, batch_size, rng_for(seed, "data"))
    for _ in range(start_step):
        next(batches)

    final = None
    for step in range(start_step, total_steps):
        lr = lr_at(schedule, step + 1, total_steps)
        batch = next(batches)
        loss_value, acc = _supervised_step(
            enc, trainables, batch, augment_spec, opt, lr, seed=seed, step=step)
        epoch = step // spe
        if metrics is not None:
            metrics.write(step=step + 1, epoch=epoch, lr=lr,
                          loss=loss_value, frame_acc=acc)
        done = step + 1
        if checkpoint_dir and ((checkpoint_interval and done % checkpoint_interval == 0)
                               or done == total_steps):
            ck = _to_checkpoint("supervised", cfg, trainables, enc.running,
                                HEAD_FRAME_CLASSIFIER, opt, None, done, epoch,
                                total_steps, seed, config_hash, {})
            ck.save(f"{checkpoint_dir}/ckpt_{done:06d}.bin")
            final = ck
    if final is None or final.step != total_steps:
        final = _to_checkpoint("supervised", cfg, trainables, enc.running,
                               HEAD_FRAME_CLASSIFIER, opt, None, total_steps,
                               max(0, schedule.epochs - 1), total_steps, seed,
                               config_hash, {})
    return final


def _supervised_step(enc, trainables, batch, spec, opt, lr, *, seed, step):
    dtype = T.get_default_dtype()
    rng_aug = rng_for(seed, "aug", step)
    rng_mix = rng_for(seed, "mix", step)
    rng_drop = rng_for(seed, "drop", step)

    views = [augment(u.features.astype(dtype), spec, STAGE_SUPERVISED, rng_aug)[0]
             for u in batch]
    bsz = len(batch)
    use_mixup = spec.enable_mixup and bsz > 1
    if use_mixup:
        shift = int(rng_mix.integers(1, bsz))
        mixed, targets = [], []
        for i, view in enumerate(views):
            j = (i + shift) % bsz
            xm, beta = mixup(view, views[j], spec.mixup_alpha, rng_mix)
            mixed.append(xm)
            la = _labels_at_output_rate(batch[i], batch[i].num_frames // 2)
            lb = _labels_at_output_rate(batch[j], batch[j].num_frames // 2)
            targets.append(MixupTargets(la, lb, beta))
        views = mixed
    else:
        targets = [_labels_at_output_rate(u, u.num_frames // 2) for u in batch]

    feats, lengths = pad_batch(views, dtype=dtype)
    emb, out_lens = encode_batch(enc, feats, lengths, train_mode=True, rng=rng_drop)
    logits = T.add(T.matmul(emb, trainables["head.w"]), trainables["head.b"])

    terms = []
    correct, counted = 0, 0
    for i in range(bsz):
        if isinstance(targets[i], MixupTargets):
            terms.append(frame_cross_entropy(logits[i], targets[i]))
            ref = targets[i].labels_a
        else:
            ref = targets[i]
            terms.append(frame_cross_entropy(logits[i][: len(ref)], ref))
        pred = logits.data[i, : len(ref)].argmax(axis=-1)
        correct += int((pred == ref).sum())
        counted += len(ref)
    loss = T.mul(terms[0] if bsz == 1 else _sum_terms(terms), 1.0 / bsz)
    adam_step(trainables, _grads_by_name(loss, trainables), opt, lr)
    return float(loss.data), correct / max(1, counted)


def _sum_terms(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return acc


def frame_accuracy(params: EncoderParams, head: dict, utts) -> float:
    """Eval-mode frame accuracy of the classifier head on labeled utterances."""
    correct, total = 0, 0
    dtype = T.get_default_dtype()
    with T.no_grad():
        for utt in utts:
            feats, lengths = pad_batch([utt.features.astype(dtype)], dtype=dtype)
            emb, out_lens = encode_batch(params, feats, lengths, train_mode=False)
            logits = emb.data[0, : out_lens[0]] @ head["head.w"].data + head["head.b"].data
            ref = _labels_at_output_rate(utt, int(out_lens[0]))
            correct += int((logits.argmax(axis=-1) == ref).sum())
            total += len(ref)
    return correct / max(1, total)


# ---------------------------------------------------------------------------
# self-training


def xlst_step(main: EncoderParams, trainables: dict, ema: EmaState, batch,
              augment_spec, opt: OptimizerState, lr, *, seed=0, step=0,
              main_train_mode=True) -> float:
    """One self-training step, strictly in this order: target forward (eval,
    clean view), main forward (masked view), similarity loss, backward,
    optimizer step, then EMA update of the target."""
    dtype = T.get_default_dtype()
    rng_aug = rng_for(seed, "aug", step)
    rng_drop = rng_for(seed, "drop", step)

    clean = [u.features.astype(dtype) for u in batch]
    masked = [augment(x, augment_spec, STAGE_XLST_MAIN, rng_aug)[0] for x in clean]
    # identity by contract; kept explicit so the stage rule lives in one place
    clean = [augment(x, augment_spec, STAGE_XLST_TARGET, rng_aug)[0] for x in clean]

    feats_clean, lengths = pad_batch(clean, dtype=dtype)
    with T.no_grad():
        z, out_lens = encode_batch(ema.params, feats_clean, lengths, train_mode=False)
    feats_masked, _ = pad_batch(masked, dtype=dtype)
    e, _ = encode_batch(main, feats_masked, lengths,
                        train_mode=main_train_mode, rng=rng_drop)
    mask = frame_mask(out_lens, e.shape[1], e.dtype.type)
    loss = similarity_loss_masked(e, z.data, mask).total
    adam_step(trainables, _grads_by_name(loss, trainables), opt, lr)
    ema_update(ema, main)
    return float(loss.data)


def collapse_metric(params: EncoderParams, utts, phone_maps) -> float:
    """Mean pairwise cosine between embedding frames of distinct true phones.

    Averaged over all cross-phone frame pairs via per-phone mean unit
    vectors; 1.0 means every phone embeds identically (full collapse).
    """
    dtype = T.get_default_dtype()
    sums, counts = {}, {}
    with T.no_grad():
        for utt in utts:
            feats, lengths = pad_batch([utt.features.astype(dtype)], dtype=dtype)
            emb, out_lens = encode_batch(params, feats, lengths, train_mode=False)
            vecs = emb.data[0, : out_lens[0]]
            vecs = vecs / np.maximum(np.linalg.norm(vecs, axis=1, keepdims=True), 1e-12)
            local = _labels_at_output_rate(utt, int(out_lens[0]))
            labels = phone_maps[utt.lang][local]
            for phone in np.unique(labels):
                sel = vecs[labels == phone]
                sums[phone] = sums.get(phone, 0.0) + sel.sum(axis=0)
                counts[phone] = counts.get(phone, 0) + len(sel)
    total_vec = np.sum([s for s in sums.values()], axis=0)
    total_n = sum(counts.values())
    cross = float(total_vec @ total_vec) - sum(float(s @ s) for s in sums.values())
    pairs = total_n ** 2 - sum(n * n for n in counts.values())
    if pairs <= 0:
        return 0.0
    return cross / pairs


def xlst_pretrain(init: Checkpoint, corpus: CorpusSet, schedule: TrainSchedule,
                  augment_spec, *, lam=0.9999, seed=0, batch_size=8,
                  metrics=None, monitor_utts=None, phone_maps=None,
                  monitor_interval=25, checkpoint_dir=None,
                  checkpoint_interval=0, resume=None,
                  config_hash="") -> Checkpoint:
    """Distill the init checkpoint onto un-annotated data with EMA refinement.

    The main network starts from the target checkpoint's weights (never from
    random parameters). lam=1 freezes the target for the whole run, which is
    the offline regime: reassigning a new target between runs is then the
    caller's loop.
    """
    dtype = T.get_default_dtype()
    cfg = init.encoder_config
    spe = steps_per_epoch(corpus, batch_size)
    total_steps = schedule.epochs * spe
    extra = {"collapse_max": 0.0, "lam": lam}

    if resume is not None:
        main = resume.encoder_params(requires_grad=True, dtype=dtype)
        ema = EmaState(resume.ema_encoder_params(dtype=dtype), resume.ema["lam"])
        opt = OptimizerState.from_dict(resume.opt)
        start_step = resume.step
        extra.update(resume.extra)
    else:
        main = init.encoder_params(requires_grad=True, dtype=dtype)
        ema = EmaState(init.encoder_params(requires_grad=False, dtype=dtype), lam)
        opt = OptimizerState.for_params(main.tensors)
        start_step = 0

    batches = balanced_batches(corpus, batch_size, rng_for(seed, "data"))
    for _ in range(start_step):
        next(batches)

    lang_counts = {}
    final = None
    for step in range(start_step, total_steps):
        lr = lr_at(schedule, step + 1, total_steps)
        batch = next(batches)
        for u in batch:
            lang_counts[u.lang] = lang_counts.get(u.lang, 0) + 1
        loss_value = xlst_step(main, main.tensors, ema, batch, augment_spec,
                               opt, lr, seed=seed, step=step)
        epoch = step // spe
        record = {"step": step + 1, "epoch": epoch, "lr": lr, "loss": loss_value}
        done = step + 1
        if monitor_utts is not None and (
                done % monitor_interval == 0 or done == total_steps):
            cos = collapse_metric(main, monitor_utts, phone_maps)
            extra["collapse_max"] = max(extra["collapse_max"], cos)
            record["collapse_cos"] = cos
        if metrics is not None:
            metrics.write(**record)
            if done % spe == 0:
                metrics.write(event="epoch_sampler", epoch=epoch,
                              lang_counts={str(k): v for k, v in sorted(lang_counts.items())})
                lang_counts = {}
        if checkpoint_dir and ((checkpoint_interval and done % checkpoint_interval == 0)
                               or done == total_steps):
            ck = _to_checkpoint("xlst", cfg, main.tensors, main.running, None,
                                opt, ema, done, epoch, total_steps, seed,
                                config_hash, extra)
            ck.save(f"{checkpoint_dir}/ckpt_{done:06d}.bin")
            final = ck
    if final is None or final.step != total_steps:
        final = _to_checkpoint("xlst", cfg, main.tensors, main.running, None,
                               opt, ema, total_steps, max(0, schedule.epochs - 1),
                               total_steps, seed, config_hash, extra)
    return final
