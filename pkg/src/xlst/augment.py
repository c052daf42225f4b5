"""Random sequence augmenter: time-span masks, frequency-span masks, mixup.

All functions are pure in (input, spec, rng): they never touch the input
array and the returned record is sufficient to replay the exact augmentation.
Masked cells are set to 0 (features are normalized, so 0 is the neutral
fill); unmasked cells are bit-identical to the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, InputTooShortError, ShapeError

STAGE_SUPERVISED = "supervised"
STAGE_XLST_MAIN = "xlst_main"
STAGE_XLST_TARGET = "xlst_target"
_STAGES = (STAGE_SUPERVISED, STAGE_XLST_MAIN, STAGE_XLST_TARGET)


@dataclass(frozen=True)
class AugmentSpec:
    """Configuration of one augmenter application.

    Defaults are the full-scale values; desk-scale configs shrink the
    frequency window to fit their feature dimension.
    """

    time_mask_len: int = 10
    time_mask_proportion: float = 0.40
    freq_num_windows: int = 2
    freq_max_width: int = 27
    mixup_alpha: float = 1.0
    enable_time_mask: bool = True
    enable_freq_mask: bool = True
    enable_mixup: bool = True
    rng_seed: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.time_mask_proportion <= 1.0:
            raise ConfigError("time_mask_proportion must lie in [0, 1]")
        if self.time_mask_len < 1:
            raise ConfigError("time_mask_len must be >= 1")
        if self.freq_max_width < 0 or self.freq_num_windows < 0:
            raise ConfigError("frequency mask parameters must be non-negative")
        if self.mixup_alpha <= 0:
            raise ConfigError("mixup_alpha must be > 0")


@dataclass
class AugmentRecord:
    """The randomness actually drawn: enough to replay x -> x' exactly."""

    time_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    freq_bands: tuple = ()            # ((start, width), ...)
    mixup_partner: Optional[str] = None
    mixup_weight: Optional[float] = None

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Replay the recorded masks on a fresh copy of x."""
        out = x.copy()
        out[self.time_indices, :] = 0.0
        for start, width in self.freq_bands:
            out[:, start:start + width] = 0.0
        return out


def time_span_mask(x, length, proportion, rng):
    """Zero n = floor(proportion*T/length) spans; starts drawn without replacement.

    Starts are drawn from {0..T-length} so every span fits whole (spans would
    be truncated at the sequence end otherwise); overlap between spans is
    allowed, so realized coverage is at most the target proportion.
    """
    t = x.shape[0]
    if length > t:
        raise InputTooShortError(f"mask length {length} exceeds sequence length {t}")
    n = int(proportion * t / length)
    n = min(n, t - length + 1)
    if n == 0:
        return x.copy(), np.zeros(0, dtype=np.int64)
    starts = rng.choice(t - length + 1, size=n, replace=False)
    indices = np.unique(
        (starts[:, None] + np.arange(length)[None, :]).reshape(-1)
    )
    indices = indices[indices < t]
    out = x.copy()
    out[indices, :] = 0.0
    return out, indices.astype(np.int64)


def freq_span_mask(x, num_windows, max_width, rng):
    """Zero `num_windows` frequency bands with widths uniform on {0..max_width}."""
    f = x.shape[1]
    if max_width >= f:
        raise ConfigError(f"freq_max_width {max_width} must be < feature dim {f}")
    bands = []
    out = x.copy()
    for _ in range(num_windows):
        width = int(rng.integers(0, max_width + 1))
        start = int(rng.integers(0, f - width + 1)) if width > 0 else 0
        bands.append((start, width))
        out[:, start:start + width] = 0.0
    return out, tuple(bands)


def mixup(x1, x2, alpha, rng):
    """Convex-combine two sequences with a Beta(alpha, alpha) weight.

    The shorter sequence is zero-padded to max(T1, T2); returns the mix and
    the drawn weight so the caller can weight the two loss terms.
    """
    if x1.shape[1] != x2.shape[1]:
        raise ShapeError(f"mixup feature dims disagree: {x1.shape[1]} vs {x2.shape[1]}")
    beta = float(rng.beta(alpha, alpha))
    t = max(x1.shape[0], x2.shape[0])
    mixed = np.zeros((t, x1.shape[1]), dtype=x1.dtype)
    mixed[: x1.shape[0]] += beta * x1
    mixed[: x2.shape[0]] += (1.0 - beta) * x2
    return mixed, beta


def augment(x, spec: AugmentSpec, stage, rng):
    """Apply the stage-appropriate augmenters to one sequence.

    supervised: time + frequency masks (mixup pairs are drawn at batch
    level); xlst_main: time + frequency masks; xlst_target: identity, the
    target network always sees the clean view.
    """
    if stage not in _STAGES:
        raise ConfigError(f"unknown augmentation stage '{stage}'")
    record = AugmentRecord()
    out = x.copy()
    if stage == STAGE_XLST_TARGET:
        return out, record
    if spec.enable_time_mask and spec.time_mask_proportion > 0:
        out, record.time_indices = time_span_mask(
            out, spec.time_mask_len, spec.time_mask_proportion, rng)
    if spec.enable_freq_mask and spec.freq_num_windows > 0:
        out, record.freq_bands = freq_span_mask(
            out, spec.freq_num_windows, spec.freq_max_width, rng)
    return out, record
