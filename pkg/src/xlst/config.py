"""Strict run configuration: INI sections mirroring each module's options.

Parsing is strict on purpose: an unknown section or key is an error, not a
silently ignored typo. Every run writes its fully resolved configuration
back into the output directory, and the config hash stored in checkpoints
is the sha256 of that resolved text.
"""

from __future__ import annotations

import configparser
import hashlib
import io

from .augment import AugmentSpec
from .encoder import EncoderConfig
from .errors import ConfigError
from .synthdata import BenchmarkConfig, FamilyConfig
from .trainer import TrainSchedule

_REQUIRED = object()


def _bool(text):
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got '{text}'")


def _int_list(text):
    return tuple(int(v.strip()) for v in text.split(",") if v.strip())


# section -> key -> (parser, default); _REQUIRED means the command must set it
_SCHEMA = {
    "run": {
        "seed": (int, 0),
        "precision": (str, "32"),
        "out": (str, ""),
    },
    "family": {
        "languages": (int, 4),
        "pool": (int, 40),
        "phones_per_language": (int, 12),
        "overlap": (float, 0.5),
        "feature_dim": (int, 16),
        "noise_sigma": (float, 0.3),
        "duration_min": (int, 3),
        "duration_max": (int, 8),
        "utt_frames_min": (int, 28),
        "utt_frames_max": (int, 56),
    },
    "sizes": {
        "hires_train": (int, 400),
        "hires_dev": (int, 60),
        "unlabeled_per_language": (int, 600),
        "finetune_per_language": (int, 40),
        "test_per_language": (int, 60),
    },
    "data": {
        "corpus": (str, ""),
        "set": (str, "hires_train"),
        "dev_set": (str, "hires_dev"),
        "languages": (_int_list, ()),
    },
    "encoder": {
        "input_dim": (int, 16),
        "cnn_channels": (_int_list, (8,)),
        "transformer_blocks": (int, 2),
        "attention_dim": (int, 32),
        "attention_heads": (int, 4),
        "ffn_dim": (int, 64),
        "projector_hidden_dim": (int, 32),
        "projector_output_dim": (int, 16),
        "positional_encoding": (_bool, True),
        "dropout": (float, 0.1),
    },
    "augment": {
        "time_mask_len": (int, 10),
        "time_mask_proportion": (float, 0.40),
        "freq_num_windows": (int, 2),
        "freq_max_width": (int, 27),
        "mixup_alpha": (float, 1.0),
        "enable_time_mask": (_bool, True),
        "enable_freq_mask": (_bool, True),
        "enable_mixup": (_bool, True),
    },
    "schedule": {
        "epochs": (int, 10),
        "peak_lr": (float, 1e-3),
        "warmup": (float, 0.2),
        "hold": (float, 0.0),
        "decay": (float, 0.8),
        "decay_floor_ratio": (float, 0.01),
    },
    "train": {
        "batch_size": (int, 8),
        "lambda": (float, 0.9999),
        "tau": (float, 0.5),
        "checkpoint_interval": (int, 0),
        "monitor_interval": (int, 25),
        "monitor_utterances": (int, 24),
    },
    "finetune": {
        "freeze_encoder": (_bool, False),
        "head_only_frac": (float, 0.2),
    },
}

# one experiment file drives every stage, so all commands accept all known
# sections; strictness lives in the per-section key schemas
_ALL_SECTIONS = ("run", "family", "sizes", "data", "encoder", "augment",
                 "schedule", "train", "finetune")
COMMAND_SECTIONS = {
    "synth-data": _ALL_SECTIONS,
    "pretrain-sup": _ALL_SECTIONS,
    "pretrain-xlst": _ALL_SECTIONS,
    "finetune": _ALL_SECTIONS,
    "eval": _ALL_SECTIONS,
}

# keys whose absence must fail, per command
_COMMAND_REQUIRED = {
    "synth-data": (),
    "pretrain-sup": (("data", "corpus"),),
    "pretrain-xlst": (("data", "corpus"),),
    "finetune": (("data", "corpus"),),
    "eval": (("data", "corpus"),),
}


class RunConfig:
    """Typed view over the resolved key/value sections of one run."""

    def __init__(self, command, values, present_sections=()):
        self.command = command
        self.values = values
        self.present_sections = tuple(present_sections)

    def __getitem__(self, section):
        return self.values[section]

    def get(self, section, key):
        return self.values[section][key]

    # -- factories for the module config objects --------------------------

    def encoder_config(self) -> EncoderConfig:
        e = self.values["encoder"]
        return EncoderConfig(
            input_dim=e["input_dim"], cnn_channels=e["cnn_channels"],
            transformer_blocks=e["transformer_blocks"],
            attention_dim=e["attention_dim"],
            attention_heads=e["attention_heads"], ffn_dim=e["ffn_dim"],
            projector_hidden_dim=e["projector_hidden_dim"],
            projector_output_dim=e["projector_output_dim"],
            positional_encoding=e["positional_encoding"], dropout=e["dropout"])

    def augment_spec(self) -> AugmentSpec:
        a = self.values["augment"]
        return AugmentSpec(
            time_mask_len=a["time_mask_len"],
            time_mask_proportion=a["time_mask_proportion"],
            freq_num_windows=a["freq_num_windows"],
            freq_max_width=a["freq_max_width"], mixup_alpha=a["mixup_alpha"],
            enable_time_mask=a["enable_time_mask"],
            enable_freq_mask=a["enable_freq_mask"],
            enable_mixup=a["enable_mixup"])

    def schedule(self) -> TrainSchedule:
        s = self.values["schedule"]
        return TrainSchedule(
            epochs=s["epochs"], peak_lr=s["peak_lr"], warmup=s["warmup"],
            hold=s["hold"], decay=s["decay"],
            decay_floor_ratio=s["decay_floor_ratio"])

    def family_config(self) -> FamilyConfig:
        f = self.values["family"]
        return FamilyConfig(
            num_languages=f["languages"], pool_size=f["pool"],
            phones_per_language=f["phones_per_language"], overlap=f["overlap"],
            feature_dim=f["feature_dim"], noise_sigma=f["noise_sigma"],
            duration_min=f["duration_min"], duration_max=f["duration_max"],
            utt_frames_min=f["utt_frames_min"],
            utt_frames_max=f["utt_frames_max"])

    def benchmark_config(self) -> BenchmarkConfig:
        z = self.values["sizes"]
        return BenchmarkConfig(
            family=self.family_config(), seed=self.values["run"]["seed"],
            hires_train=z["hires_train"], hires_dev=z["hires_dev"],
            unlabeled_per_language=z["unlabeled_per_language"],
            finetune_per_language=z["finetune_per_language"],
            test_per_language=z["test_per_language"])

    # -- serialization -----------------------------------------------------

    def resolved_text(self) -> str:
        parser = configparser.ConfigParser()
        for section in COMMAND_SECTIONS[self.command]:
            parser[section] = {}
            for key, value in self.values[section].items():
                if isinstance(value, tuple):
                    parser[section][key] = ",".join(str(v) for v in value)
                elif isinstance(value, bool):
                    parser[section][key] = "true" if value else "false"
                else:
                    parser[section][key] = repr(value) if isinstance(value, float) else str(value)
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def config_hash(self) -> str:
        return hashlib.sha256(self.resolved_text().encode("utf-8")).hexdigest()


def load_config(path, command, overrides=None) -> RunConfig:
    """Parse and validate one config file for one command.

    `overrides` maps (section, key) to raw string values (from CLI flags)
    applied before validation.
    """
    if command not in COMMAND_SECTIONS:
        raise ConfigError(f"unknown command '{command}'")
    parser = configparser.ConfigParser()
    if path is not None:
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file '{path}' not found or unreadable")
    allowed = COMMAND_SECTIONS[command]
    for section in parser.sections():
        if section not in allowed:
            raise ConfigError(
                f"section [{section}] is not valid for command '{command}' "
                f"(allowed: {', '.join(allowed)})")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")

    raw = {s: dict(parser[s]) if parser.has_section(s) else {} for s in allowed}
    for (section, key), value in (overrides or {}).items():
        if section in raw:
            raw[section][key] = value

    values = {}
    for section in allowed:
        values[section] = {}
        for key, (parse, default) in _SCHEMA[section].items():
            if key in raw[section]:
                try:
                    values[section][key] = parse(raw[section][key])
                except (ValueError, TypeError) as exc:
                    raise ConfigError(
                        f"[{section}] {key}: cannot parse '{raw[section][key]}'") from exc
            elif default is _REQUIRED:
                raise ConfigError(f"[{section}] {key} is required for '{command}'")
            else:
                values[section][key] = default
    for section, key in _COMMAND_REQUIRED[command]:
        if not values[section][key]:
            raise ConfigError(f"[{section}] {key} is required for '{command}'")
    if values["run"]["precision"] not in ("32", "64"):
        raise ConfigError("[run] precision must be 32 or 64")
    if values["run"]["seed"] < 0:
        raise ConfigError("[run] seed must be non-negative")
    return RunConfig(command, values, present_sections=parser.sections())
