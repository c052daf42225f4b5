"""Corpus file format: per-utterance feature containers plus a JSONL manifest.

A corpus directory holds one binary feature file per utterance (same
container format as checkpoints) and a `manifest.jsonl` whose lines carry
(utterance id, language, path, frame count, has_labels). Un-annotated
corpora simply omit the label entries in the feature files.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .container import load_arrays, save_arrays
from .errors import DataError

MANIFEST_NAME = "manifest.jsonl"


@dataclass
class Utterance:
    """One feature sequence with its language tag and optional annotations."""

    utt_id: str
    lang: int
    features: np.ndarray                      # (T, F) float32
    frame_labels: Optional[np.ndarray] = None  # (T,) int64 phone ids
    transcript: Optional[np.ndarray] = None    # (L,) int64, repeats collapsed

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def has_labels(self) -> bool:
        return self.frame_labels is not None

    def validate(self):
        if self.frame_labels is not None:
            if len(self.frame_labels) != self.num_frames:
                raise DataError(f"{self.utt_id}: frame label length mismatch")
            collapsed = collapse_repeats(self.frame_labels)
            if self.transcript is None or not np.array_equal(collapsed, self.transcript):
                raise DataError(f"{self.utt_id}: transcript is not the collapsed frame labels")
        return self


def collapse_repeats(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return labels
    keep = np.ones(labels.size, dtype=bool)
    keep[1:] = labels[1:] != labels[:-1]
    return labels[keep]


def write_utterance(directory, utt: Utterance) -> str:
    entries = {"features": utt.features.astype(np.float32)}
    if utt.frame_labels is not None:
        entries["frame_labels"] = utt.frame_labels.astype(np.int64)
        entries["transcript"] = utt.transcript.astype(np.int64)
    meta = json.dumps({"utt_id": utt.utt_id, "lang": utt.lang}, sort_keys=True)
    entries["meta"] = np.frombuffer(meta.encode("utf-8"), dtype=np.uint8)
    path = os.path.join(directory, f"{utt.utt_id}.bin")
    save_arrays(path, entries)
    return path


def read_utterance(path) -> Utterance:
    entries = load_arrays(path)
    meta = json.loads(bytes(entries["meta"]).decode("utf-8"))
    return Utterance(
        utt_id=meta["utt_id"],
        lang=int(meta["lang"]),
        features=entries["features"],
        frame_labels=entries.get("frame_labels"),
        transcript=entries.get("transcript"),
    )


def write_corpus(directory, utterances: list) -> str:
    """Write utterances plus manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for utt in utterances:
        path = write_utterance(directory, utt)
        lines.append(json.dumps({
            "id": utt.utt_id,
            "lang": utt.lang,
            "path": os.path.basename(path),
            "frames": int(utt.num_frames),
            "has_labels": bool(utt.has_labels),
        }, sort_keys=True))
    manifest = os.path.join(directory, MANIFEST_NAME)
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    return manifest


def read_manifest(directory) -> list:
    manifest = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise DataError(f"no {MANIFEST_NAME} in {directory}")
    records = []
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def load_corpus(directory, languages=None) -> list:
    """Load a corpus into memory, optionally restricted to some language ids."""
    utts = []
    for rec in read_manifest(directory):
        if languages is not None and rec["lang"] not in languages:
            continue
        utt = read_utterance(os.path.join(directory, rec["path"]))
        if utt.num_frames != rec["frames"] or utt.has_labels != rec["has_labels"]:
            raise DataError(f"{rec['id']}: manifest disagrees with feature file")
        utts.append(utt)
    if not utts:
        raise DataError(f"no utterances loaded from {directory}"
                        + (f" for languages {sorted(languages)}" if languages else ""))
    return utts


@dataclass
class LanguageData:
    lang: int
    utterances: list
    frames: int = field(init=False)

    def __post_init__(self):
        self.frames = int(sum(u.num_frames for u in self.utterances))


@dataclass
class CorpusSet:
    """Utterances grouped by language, with the balance exponent tau."""

    languages: list          # list[LanguageData]
    tau: float = 0.5

    def __post_init__(self):
        if self.tau < 0:
            raise DataError("balance exponent tau must be >= 0")
        if not self.languages or any(not l.utterances for l in self.languages):
            raise DataError("every language in a corpus set needs at least one utterance")

    @classmethod
    def from_utterances(cls, utterances, tau=0.5):
        by_lang = {}
        for utt in utterances:
            by_lang.setdefault(utt.lang, []).append(utt)
        langs = [LanguageData(lang, by_lang[lang]) for lang in sorted(by_lang)]
        return cls(languages=langs, tau=tau)

    @property
    def total_utterances(self) -> int:
        return sum(len(l.utterances) for l in self.languages)

    def sampling_probs(self) -> np.ndarray:
        """Language draw probabilities p_l proportional to frame-count^tau."""
        sizes = np.array([l.frames for l in self.languages], dtype=np.float64)
        weights = sizes ** self.tau
        return weights / weights.sum()
