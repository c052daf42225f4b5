"""Training objectives: embedding similarity, frame cross entropy, CTC.

All losses are pure functions of their inputs and safe to evaluate in
parallel across batch elements. The similarity target is always treated as a
constant: no gradient ever flows toward the network that produced it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import (
    DegenerateFrameError,
    InfeasibleAlignmentError,
    LabelError,
    OracleScaleError,
    ShapeError,
)
from .tensor import Tensor

BLANK = 0
NORM_FLOOR = 1e-12


@dataclass
class SimilarityLossValue:
    """Scalar loss (on the tape) plus the per-frame terms, each in [0, 4]."""

    total: Tensor
    per_frame: np.ndarray


def _embedding_frames(x):
    if hasattr(x, "frames"):
        x = x.frames
    if isinstance(x, np.ndarray):
        x = Tensor(x)
    return x


def _check_norms(arr, mask=None):
    norms = np.sqrt((arr * arr).sum(axis=-1))
    flat_norms = norms.reshape(-1)
    valid = np.ones(flat_norms.shape, dtype=bool) if mask is None \
        else mask.reshape(-1) > 0
    bad = np.flatnonzero(valid & (flat_norms <= NORM_FLOOR))
    if bad.size:
        raise DegenerateFrameError(int(bad[0]), float(flat_norms[bad[0]]))


def similarity_loss(e, z, reduction="mean") -> SimilarityLossValue:
    """Per frame: 2 - 2 cos(e_i, z_i); the squared distance of unit vectors.

    `z` is the target-network output and enters as a constant; gradients flow
    only into `e`. Frames of either side with norm below 1e-12 are refused.
    """
    e = _embedding_frames(e)
    z_data = _embedding_frames(z).data.astype(e.dtype)
    if e.shape != z_data.shape:
        raise ShapeError(f"embedding shapes disagree: {e.shape} vs {z_data.shape}")
    if reduction not in ("sum", "mean"):
        raise ShapeError(f"unknown reduction '{reduction}'")
    _check_norms(e.data)
    _check_norms(z_data)
    per_frame = _cosine_gap(e, z_data)
    total = T.tsum(per_frame) if reduction == "sum" else T.tmean(per_frame)
    return SimilarityLossValue(total=total, per_frame=per_frame.data.copy())


def _cosine_gap(e, z_data):
    dot = T.tsum(T.mul(e, z_data), axis=-1)
    e_norm = T.sqrt(T.tsum(T.mul(e, e), axis=-1))
    z_norm = np.sqrt((z_data * z_data).sum(axis=-1))
    cos = T.div(dot, T.mul(e_norm, z_norm))
    return T.sub(2.0, T.mul(cos, 2.0))


def similarity_loss_masked(e, z_data, mask) -> SimilarityLossValue:
    """Batched mean over the unmasked frames of (B, T, d) embeddings."""
    e = _embedding_frames(e)
    z_data = np.asarray(z_data, dtype=e.dtype)
    frame_mask = mask[..., 0] if mask.ndim == 3 else mask
    _check_norms(e.data, frame_mask)
    _check_norms(z_data, frame_mask)
    # lift padded z frames to a safe norm; their terms are masked out anyway
    z_safe = z_data.copy()
    z_safe[frame_mask == 0] = 1.0
    per_frame = _cosine_gap(e, z_safe)
    count = float(frame_mask.sum())
    total = T.mul(T.tsum(T.mul(per_frame, frame_mask.astype(e.dtype.type))), 1.0 / count)
    return SimilarityLossValue(total=total, per_frame=per_frame.data * frame_mask)


@dataclass(frozen=True)
class MixupTargets:
    """Two label streams with their mixing weight; each stream scores its own
    unpadded frame range."""

    labels_a: np.ndarray
    labels_b: np.ndarray
    weight: float


def frame_cross_entropy(logits, labels):
    """Mean over frames of -log softmax at the target label.

    `labels` is either a per-frame integer array or MixupTargets, in which
    case the loss is weight * CE(labels_a) + (1 - weight) * CE(labels_b).
    """
    if isinstance(logits, np.ndarray):
        logits = Tensor(logits)
    if isinstance(labels, MixupTargets):
        if not 0.0 <= labels.weight <= 1.0:
            raise LabelError(f"mixup weight {labels.weight} outside [0, 1]")
        la, lb = np.asarray(labels.labels_a), np.asarray(labels.labels_b)
        term_a = frame_cross_entropy(logits[: len(la)], la)
        term_b = frame_cross_entropy(logits[: len(lb)], lb)
        return T.add(T.mul(term_a, labels.weight), T.mul(term_b, 1.0 - labels.weight))
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]")
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {logits.shape[0]} frames")
    logp = T.log_softmax(logits, axis=-1)
    picked = T.gather_last(logp, labels[:, None])
    return T.neg(T.tmean(picked))


# ---------------------------------------------------------------------------
# CTC


@dataclass
class CtcLattice:
    """Blank-extended label sequence with its forward/backward tables."""

    extended: np.ndarray       # (S,) symbols, blanks interleaved
    log_alpha: np.ndarray      # (T, S)
    log_beta: np.ndarray       # (T, S)
    log_likelihood_forward: float
    log_likelihood_backward: float


def _validate_ctc(num_frames, labels, vocab_plus_blank):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() >= vocab_plus_blank):
        raise LabelError(
            f"CTC labels must lie in [1, {vocab_plus_blank}), blank 0 is reserved")
    repeats = int(np.sum(labels[1:] == labels[:-1])) if labels.size > 1 else 0
    min_frames = len(labels) + repeats
    if num_frames < min_frames:
        raise InfeasibleAlignmentError(
            f"{len(labels)} labels (with {repeats} repeats) need at least "
            f"{min_frames} frames, got {num_frames}")
    return labels


def _log_softmax_np(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def ctc_lattice(log_probs, labels) -> CtcLattice:
    """Log-space forward-backward over the blank-extended label sequence.

    Both tables include the emission at their own frame, so the two total
    log-likelihoods are directly comparable and the occupancy posterior is
    alpha + beta - emission - total.
    """
    t_max = log_probs.shape[0]
    ext = np.full(2 * len(labels) + 1, BLANK, dtype=np.int64)
    ext[1::2] = labels
    s = len(ext)
    neg_inf = -np.inf

    can_skip = np.zeros(s, dtype=bool)
    can_skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    alpha = np.full((t_max, s), neg_inf)
    alpha[0, 0] = log_probs[0, ext[0]]
    if s > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    step = np.full(s, neg_inf)
    skip = np.full(s, neg_inf)
    for t in range(1, t_max):
        step[1:] = alpha[t - 1, :-1]
        if s > 2:
            skip[2:] = np.where(can_skip[2:], alpha[t - 1, :-2], neg_inf)
        alpha[t] = log_probs[t, ext] + np.logaddexp(
            np.logaddexp(alpha[t - 1], step), skip)

    beta = np.full((t_max, s), neg_inf)
    beta[t_max - 1, s - 1] = log_probs[t_max - 1, ext[s - 1]]
    if s > 1:
        beta[t_max - 1, s - 2] = log_probs[t_max - 1, ext[s - 2]]
    can_skip_fwd = np.zeros(s, dtype=bool)
    if s > 2:
        can_skip_fwd[:-2] = (ext[:-2] != BLANK) & (ext[:-2] != ext[2:])
    step = np.full(s, neg_inf)
    skip = np.full(s, neg_inf)
    for t in range(t_max - 2, -1, -1):
        step[:-1] = beta[t + 1, 1:]
        if s > 2:
            skip[:-2] = np.where(can_skip_fwd[:-2], beta[t + 1, 2:], neg_inf)
        beta[t] = log_probs[t, ext] + np.logaddexp(
            np.logaddexp(beta[t + 1], step), skip)

    fwd = np.logaddexp(alpha[t_max - 1, s - 1],
                       alpha[t_max - 1, s - 2] if s > 1 else neg_inf)
    bwd = np.logaddexp(beta[0, 0], beta[0, 1] if s > 1 else neg_inf)
    return CtcLattice(ext, alpha, beta, float(fwd), float(bwd))


def ctc_loss(logits, labels):
    """-log p(labels | logits) with gradients; blank index is 0.

    Infeasible label/frame combinations raise instead of returning infinity,
    so a silent +inf can never poison a training run.
    """
    if isinstance(logits, np.ndarray):
        logits = Tensor(logits)
    t_max, vocab_plus_blank = logits.shape
    if t_max < 1 or vocab_plus_blank < 2:
        raise ShapeError(f"ctc_loss needs (T>=1, V+1>=2) logits, got {logits.shape}")
    labels = _validate_ctc(t_max, labels, vocab_plus_blank)
    work = logits.data.astype(np.float64)
    log_probs = _log_softmax_np(work)
    lattice = ctc_lattice(log_probs, labels)
    loss = -lattice.log_likelihood_forward

    def vjp(g):
        # occupancy posterior per lattice state, then pooled per vocab entry
        occupancy = (lattice.log_alpha + lattice.log_beta
                     - log_probs[:, lattice.extended]
                     - lattice.log_likelihood_forward)
        pooled = np.full((t_max, vocab_plus_blank), -np.inf)
        for sym in np.unique(lattice.extended):
            cols = occupancy[:, lattice.extended == sym]
            pooled[:, sym] = _logsumexp_rows(cols)
        grad = np.exp(log_probs) - np.exp(pooled)
        return ((g * grad).astype(logits.dtype),)

    return T.custom_op(np.asarray(loss, dtype=logits.dtype), (logits,), vjp)


def _logsumexp_rows(cols):
    m = cols.max(axis=1)
    out = np.full(cols.shape[0], -np.inf)
    finite = m > -np.inf
    out[finite] = m[finite] + np.log(
        np.exp(cols[finite] - m[finite, None]).sum(axis=1))
    return out


def ctc_brute_force(logits, labels, max_frames=8, max_vocab=5):
    """Enumerate every frame-label path; the independence oracle for ctc_loss."""
    if isinstance(logits, Tensor):
        logits = logits.data
    t_max, vocab_plus_blank = logits.shape
    if t_max > max_frames or vocab_plus_blank - 1 > max_vocab:
        raise OracleScaleError(
            f"brute force bounded to {max_frames} frames / {max_vocab} symbols, "
            f"got {t_max} / {vocab_plus_blank - 1}")
    labels = tuple(int(v) for v in labels)
    log_probs = _log_softmax_np(logits.astype(np.float64))
    total = -np.inf
    for path in itertools.product(range(vocab_plus_blank), repeat=t_max):
        if collapse_path(path) != labels:
            continue
        total = np.logaddexp(total, sum(log_probs[t, sym] for t, sym in enumerate(path)))
    if total == -np.inf:
        raise InfeasibleAlignmentError(
            f"no path of {t_max} frames collapses to {list(labels)}")
    return float(-total)


def collapse_path(path) -> tuple:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for sym in path:
        if sym != prev and sym != BLANK:
            out.append(int(sym))
        prev = sym
    return tuple(out)


def ctc_greedy_decode(logits) -> np.ndarray:
    """Best-path decoding: per-frame argmax, collapse repeats, drop blanks."""
    if isinstance(logits, Tensor):
        logits = logits.data
    return np.asarray(collapse_path(logits.argmax(axis=-1)), dtype=np.int64)
