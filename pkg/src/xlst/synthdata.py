"""Deterministic synthetic multilingual corpora with known ground truth.

Toy "languages" draw phoneme inventories from a shared pool of acoustic
prototypes; utterances are Markov walks over phonemes emitting prototype
means plus isotropic Gaussian noise. Languages overlap with the
high-resource language 0 by a configurable fraction of their inventory,
which is the mechanism that makes cross-lingual transfer measurable: shared
prototypes are distributionally identical across languages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataio import CorpusSet, Utterance, collapse_repeats, load_corpus, write_corpus
from .errors import ConfigError


@dataclass
class LanguageSpec:
    """Generative description of one toy language."""

    lang: int
    prototype_ids: np.ndarray      # (K,) global pool ids, one per phone
    prototypes: np.ndarray         # (K, F) mean feature vectors
    transition: np.ndarray         # (K, K) row-stochastic, zero diagonal
    duration_min: int
    duration_max: int
    noise_sigma: float
    utt_frames_min: int
    utt_frames_max: int

    @property
    def num_phones(self) -> int:
        return len(self.prototype_ids)

    def validate(self):
        if self.num_phones == 0:
            raise ConfigError("language inventory is empty")
        if self.duration_min < 2:
            raise ConfigError("phone durations must be >= 2 frames to survive downsampling")
        rows = self.transition.sum(axis=1)
        if not np.allclose(rows, 1.0, atol=1e-9):
            raise ConfigError("transition matrix rows must sum to 1")
        return self


@dataclass(frozen=True)
class FamilyConfig:
    """Default desk-scale family: small enough for minutes-scale runs."""

    num_languages: int = 4
    pool_size: int = 40
    phones_per_language: int = 12
    overlap: float = 0.5
    feature_dim: int = 16
    noise_sigma: float = 0.3
    prototype_norm: float = 1.0
    duration_min: int = 3
    duration_max: int = 8
    utt_frames_min: int = 28
    utt_frames_max: int = 56

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError("overlap fraction must lie in [0, 1]")
        if self.pool_size < self.phones_per_language:
            raise ConfigError("prototype pool smaller than a language inventory")
        if self.prototype_norm <= 0:
            raise ConfigError("prototype_norm must be positive")


def make_language_family(global_seed, config: FamilyConfig = FamilyConfig()):
    """Build language 0 (high-resource) plus overlap-sharing low-resource ones.

    Each non-zero language shares ceil(overlap * inventory) prototypes with
    language 0 and draws the rest from the remainder of the pool; everything
    is deterministic in the seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(global_seed), 0x5A17]))
    k = config.phones_per_language
    shared = int(np.ceil(config.overlap * k))
    fresh = k - shared
    if config.pool_size < k + fresh and config.overlap < 1.0:
        raise ConfigError(
            f"pool of {config.pool_size} cannot give {fresh} prototypes outside "
            f"language 0's inventory of {k}")
    # prototypes sit on a sphere of configured radius: random directions with
    # a fixed norm keep every phone equally detectable against the noise
    pool = rng.normal(size=(config.pool_size, config.feature_dim))
    pool *= config.prototype_norm / np.linalg.norm(pool, axis=1, keepdims=True)
    base_ids = rng.choice(config.pool_size, size=k, replace=False)
    remainder = np.setdiff1d(np.arange(config.pool_size), base_ids)

    specs = []
    for lang in range(config.num_languages):
        if lang == 0:
            ids = base_ids.copy()
        else:
            keep = rng.choice(k, size=shared, replace=False)
            extra = rng.choice(len(remainder), size=fresh, replace=False)
            ids = np.concatenate([base_ids[keep], remainder[extra]])
        transition = rng.uniform(0.2, 1.0, size=(k, k))
        np.fill_diagonal(transition, 0.0)
        transition /= transition.sum(axis=1, keepdims=True)
        specs.append(LanguageSpec(
            lang=lang,
            prototype_ids=ids.astype(np.int64),
            prototypes=pool[ids].copy(),
            transition=transition,
            duration_min=config.duration_min,
            duration_max=config.duration_max,
            noise_sigma=config.noise_sigma,
            utt_frames_min=config.utt_frames_min,
            utt_frames_max=config.utt_frames_max,
        ).validate())
    return specs


def sample_utterance(spec: LanguageSpec, rng, utt_id="utt", with_labels=True) -> Utterance:
    """Markov walk over phones; each phone emits its prototype plus noise.

    Segments are never truncated: the walk stops once the target length is
    reached, so every realized duration stays inside [duration_min,
    duration_max] and the total stays within the configured frame bounds.
    """
    hi = spec.utt_frames_max - spec.duration_max + 1
    if hi <= spec.utt_frames_min:
        raise ConfigError("utt_frames_max must exceed utt_frames_min + duration_max")
    target_frames = int(rng.integers(spec.utt_frames_min, hi + 1))
    labels = []
    phone = int(rng.integers(spec.num_phones))
    while len(labels) < target_frames:
        duration = int(rng.integers(spec.duration_min, spec.duration_max + 1))
        labels.extend([phone] * duration)
        phone = int(rng.choice(spec.num_phones, p=spec.transition[phone]))
    labels = np.asarray(labels, dtype=np.int64)
    feats = spec.prototypes[labels].astype(np.float32)
    if spec.noise_sigma > 0:
        feats = feats + rng.normal(
            scale=spec.noise_sigma, size=feats.shape).astype(np.float32)
    utt = Utterance(
        utt_id=utt_id,
        lang=spec.lang,
        features=feats.astype(np.float32),
        frame_labels=labels if with_labels else None,
        transcript=collapse_repeats(labels) if with_labels else None,
    )
    return utt.validate() if with_labels else utt


def nearest_prototype_accuracy(spec: LanguageSpec, rng, num_frames=20_000) -> float:
    """Frame accuracy of the nearest-prototype rule on freshly drawn frames.

    Under isotropic Gaussian noise and uniform phone priors this is the
    Bayes-optimal classifier, so it upper-bounds what any trained frame
    classifier can reach on this language.
    """
    labels = rng.integers(spec.num_phones, size=num_frames)
    frames = spec.prototypes[labels]
    if spec.noise_sigma > 0:
        frames = frames + rng.normal(scale=spec.noise_sigma, size=frames.shape)
    d2 = ((frames[:, None, :] - spec.prototypes[None, :, :]) ** 2).sum(axis=2)
    return float((d2.argmin(axis=1) == labels).mean())


@dataclass(frozen=True)
class BenchmarkConfig:
    """Corpus sizes for the transfer benchmark (documented defaults)."""

    family: FamilyConfig = field(default_factory=FamilyConfig)
    seed: int = 2024
    hires_train: int = 400
    hires_dev: int = 60
    unlabeled_per_language: int = 600
    finetune_per_language: int = 40
    test_per_language: int = 60


# corpus subdirectory names within a benchmark bundle
SET_HIRES_TRAIN = "hires_train"
SET_HIRES_DEV = "hires_dev"
SET_UNLABELED = "unlabeled"
SET_FINETUNE = "finetune"
SET_TEST = "test"


def _gen_set(spec, rng, count, prefix, with_labels):
    return [
        sample_utterance(spec, rng, utt_id=f"{prefix}-{i:05d}", with_labels=with_labels)
        for i in range(count)
    ]


def make_benchmark(config: BenchmarkConfig, out_dir: Optional[str] = None):
    """Generate the full corpus bundle; writes to disk when out_dir is given.

    Layout mirrors the training pipeline's data needs: an annotated
    high-resource train/dev pair for language 0, an un-annotated set per
    language, and tiny labeled fine-tune plus held-out test sets per
    language. Returns {set_name: list[Utterance]} keyed like the on-disk
    subdirectories.
    """
    specs = make_language_family(config.seed, config.family)
    root = np.random.SeedSequence([int(config.seed), 0xDA7A])
    bundle = {}

    def rng_for(tag, lang):
        return np.random.default_rng(np.random.SeedSequence(
            entropy=root.entropy, spawn_key=(tag, lang)))

    bundle[SET_HIRES_TRAIN] = _gen_set(
        specs[0], rng_for(1, 0), config.hires_train, "hi-train", True)
    bundle[SET_HIRES_DEV] = _gen_set(
        specs[0], rng_for(2, 0), config.hires_dev, "hi-dev", True)
    for spec in specs:
        bundle[f"{SET_UNLABELED}_{spec.lang}"] = _gen_set(
            spec, rng_for(3, spec.lang), config.unlabeled_per_language,
            f"un{spec.lang}", False)
        if spec.lang != 0:
            bundle[f"{SET_FINETUNE}_{spec.lang}"] = _gen_set(
                spec, rng_for(4, spec.lang), config.finetune_per_language,
                f"ft{spec.lang}", True)
        bundle[f"{SET_TEST}_{spec.lang}"] = _gen_set(
            spec, rng_for(5, spec.lang), config.test_per_language,
            f"te{spec.lang}", True)

    if out_dir is not None:
        import json
        import os
        for name, utts in bundle.items():
            write_corpus(os.path.join(out_dir, name), utts)
        info = {
            "seed": config.seed,
            "num_languages": config.family.num_languages,
            "phones_per_language": config.family.phones_per_language,
            "feature_dim": config.family.feature_dim,
            "sets": sorted(bundle),
            "prototype_ids": {str(s.lang): s.prototype_ids.tolist() for s in specs},
        }
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "family.json"), "w", encoding="utf-8") as fh:
            json.dump(info, fh, sort_keys=True, indent=1)
    return bundle


def load_family_info(root_dir) -> dict:
    """Read the bundle-level description written by make_benchmark."""
    import json
    import os
    path = os.path.join(root_dir, "family.json")
    if not os.path.exists(path):
        raise ConfigError(f"{root_dir} has no family.json; not a benchmark bundle")
    with open(path, encoding="utf-8") as fh:
        info = json.load(fh)
    info["phone_maps"] = {
        int(lang): np.asarray(ids, dtype=np.int64)
        for lang, ids in info["prototype_ids"].items()
    }
    return info


def load_benchmark_set(root_dir, set_name, languages=None, tau=0.5) -> CorpusSet:
    import os
    utts = load_corpus(os.path.join(root_dir, set_name), languages=languages)
    return CorpusSet.from_utterances(utts, tau=tau)
