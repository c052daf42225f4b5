"""Command-line entry points tying the pipeline together.

Commands: synth-data, pretrain-sup, pretrain-xlst, finetune, eval. Every run
owns one output directory, guarded by a lock file; the fully resolved config
is written there, metrics stream to metrics.jsonl, and the final checkpoint
lands in final.bin. XLST_OUT_ROOT provides a default output root.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .config import load_config
from .dataio import CorpusSet, load_corpus
from .errors import ConfigError, LockError, XlstError
from .finetune import FinetunedModel, evaluate_per, finetune
from .metrics import MetricsWriter
from .synthdata import make_benchmark, load_family_info
from .trainer import supervised_train, xlst_pretrain

OUT_ROOT_ENV = "XLST_OUT_ROOT"
LOCK_NAME = "run.lock"
FINAL_NAME = "final.bin"


@contextlib.contextmanager
def run_lock(out_dir):
    """Exclusive ownership of a run directory for the duration of a command."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, LOCK_NAME)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(
            f"{out_dir} is locked by another run (remove {LOCK_NAME} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(path)


def _resolve_out(args, cfg):
    if args.out:
        return args.out
    if cfg.values["run"]["out"]:
        return cfg.values["run"]["out"]
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        return os.path.join(root, cfg.command)
    raise ConfigError("no output directory: pass --out, set [run] out, "
                      f"or export {OUT_ROOT_ENV}")


def _prepare_run(args, command):
    overrides = {}
    if args.seed is not None:
        overrides[("run", "seed")] = str(args.seed)
    if getattr(args, "precision", None):
        overrides[("run", "precision")] = args.precision
    cfg = load_config(args.config, command, overrides)
    out = _resolve_out(args, cfg)
    return cfg, out


def _write_resolved(cfg, out):
    with open(os.path.join(out, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(cfg.resolved_text())


def _nonzero_languages(info):
    return [lang for lang in range(info["num_languages"]) if lang != 0]


def _check_encoder_matches(cfg, ck):
    """A config's [encoder] must agree with the checkpoint it extends."""
    if "encoder" in cfg.present_sections and cfg.encoder_config() != ck.encoder_config:
        raise ConfigError(
            "[encoder] in the config disagrees with the checkpoint's encoder "
            "architecture; drop the section or fix the mismatch")


def _monitor_probe(corpus_root, langs, per_lang):
    utts = []
    for lang in langs:
        pool = load_corpus(os.path.join(corpus_root, f"test_{lang}"))
        utts.extend(pool[:per_lang])
    return utts


def _report_paths(out, tag):
    return (os.path.join(out, f"per_{tag}.json"),
            os.path.join(out, "report.txt"))


def _write_report(out, tag, payload, summary_lines):
    json_path, txt_path = _report_paths(out, tag)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
    with open(txt_path, "a", encoding="utf-8") as fh:
        fh.write("\n".join(summary_lines) + "\n")
    return json_path


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args):
    cfg, out = _prepare_run(args, "synth-data")
    with run_lock(out):
        _write_resolved(cfg, out)
        bundle = make_benchmark(cfg.benchmark_config(), out)
        total = sum(len(utts) for utts in bundle.values())
        print(f"wrote {total} utterances over {len(bundle)} corpora to {out}")
        for name in sorted(bundle):
            print(f"  {name}: {len(bundle[name])} utterances")
    return 0


def cmd_pretrain_sup(args):
    cfg, out = _prepare_run(args, "pretrain-sup")
    with run_lock(out):
        _write_resolved(cfg, out)
        T.set_default_dtype(cfg.values["run"]["precision"])
        data = cfg.values["data"]
        utts = load_corpus(os.path.join(data["corpus"], data["set"]))
        corpus = CorpusSet.from_utterances(utts, tau=cfg.values["train"]["tau"])
        num_classes = 1 + max(int(u.frame_labels.max())
                              for l in corpus.languages for u in l.utterances)
        resume = Checkpoint.load(args.resume) if args.resume else None
        with MetricsWriter(os.path.join(out, "metrics.jsonl")) as metrics:
            final = supervised_train(
                cfg.encoder_config(), corpus, cfg.schedule(), cfg.augment_spec(),
                num_classes=num_classes, seed=cfg.values["run"]["seed"],
                batch_size=cfg.values["train"]["batch_size"], metrics=metrics,
                checkpoint_dir=out,
                checkpoint_interval=cfg.values["train"]["checkpoint_interval"],
                resume=resume, config_hash=cfg.config_hash())
        final.save(os.path.join(out, FINAL_NAME))
        print(f"supervised checkpoint: {os.path.join(out, FINAL_NAME)}")
    return 0


def cmd_pretrain_xlst(args):
    cfg, out = _prepare_run(args, "pretrain-xlst")
    if not args.init and not args.resume:
        raise ConfigError("pretrain-xlst needs --init (a trained target checkpoint); "
                          "a randomly initialized target is not supported")
    with run_lock(out):
        _write_resolved(cfg, out)
        T.set_default_dtype(cfg.values["run"]["precision"])
        data = cfg.values["data"]
        info = load_family_info(data["corpus"])
        langs = list(data["languages"]) or _nonzero_languages(info)
        utts = []
        for lang in langs:
            utts.extend(load_corpus(os.path.join(data["corpus"], f"unlabeled_{lang}")))
        corpus = CorpusSet.from_utterances(utts, tau=cfg.values["train"]["tau"])
        resume = Checkpoint.load(args.resume) if args.resume else None
        init = Checkpoint.load(args.init) if args.init else resume
        _check_encoder_matches(cfg, init)
        per_lang = max(1, cfg.values["train"]["monitor_utterances"] // len(langs))
        probe = _monitor_probe(data["corpus"], langs, per_lang)
        with MetricsWriter(os.path.join(out, "metrics.jsonl")) as metrics:
            final = xlst_pretrain(
                init, corpus, cfg.schedule(), cfg.augment_spec(),
                lam=cfg.values["train"]["lambda"],
                seed=cfg.values["run"]["seed"],
                batch_size=cfg.values["train"]["batch_size"], metrics=metrics,
                monitor_utts=probe, phone_maps=info["phone_maps"],
                monitor_interval=cfg.values["train"]["monitor_interval"],
                checkpoint_dir=out,
                checkpoint_interval=cfg.values["train"]["checkpoint_interval"],
                resume=resume, config_hash=cfg.config_hash())
        final.save(os.path.join(out, FINAL_NAME))
        print(f"self-trained checkpoint: {os.path.join(out, FINAL_NAME)}")
    return 0


def cmd_finetune(args):
    cfg, out = _prepare_run(args, "finetune")
    if not args.init:
        raise ConfigError("finetune needs --init (a pretrained checkpoint)")
    with run_lock(out):
        _write_resolved(cfg, out)
        T.set_default_dtype(cfg.values["run"]["precision"])
        data = cfg.values["data"]
        info = load_family_info(data["corpus"])
        langs = list(data["languages"]) or _nonzero_languages(info)
        init = Checkpoint.load(args.init)
        _check_encoder_matches(cfg, init)
        vocab = info["phones_per_language"]
        pers = {}
        for lang in langs:
            train_utts = load_corpus(os.path.join(data["corpus"], f"finetune_{lang}"))
            with MetricsWriter(os.path.join(out, f"metrics_lang{lang}.jsonl")) as metrics:
                model_ck = finetune(
                    init, train_utts, cfg.schedule(), vocab_size=vocab,
                    freeze_encoder=cfg.values["finetune"]["freeze_encoder"],
                    head_only_frac=cfg.values["finetune"]["head_only_frac"],
                    seed=cfg.values["run"]["seed"],
                    batch_size=cfg.values["train"]["batch_size"],
                    metrics=metrics, config_hash=cfg.config_hash())
            model_ck.extra["language"] = lang
            model_path = os.path.join(out, f"model_lang{lang}.bin")
            model_ck.save(model_path)
            test_utts = load_corpus(os.path.join(data["corpus"], f"test_{lang}"))
            report = evaluate_per(FinetunedModel.from_checkpoint(model_ck), test_utts)
            pers[lang] = report.per
            _write_report(out, f"lang{lang}", report.to_dict(),
                          [f"language {lang}: PER {report.per:.4f} "
                           f"({len(test_utts)} utterances)"])
            print(f"language {lang}: PER {report.per:.4f} -> {model_path}")
        avg = float(np.mean(list(pers.values())))
        _write_report(out, "avg",
                      {"per_by_language": {str(k): v for k, v in sorted(pers.items())},
                       "average_per": avg},
                      [f"average over {len(pers)} languages: PER {avg:.4f}"])
        print(f"average PER: {avg:.4f}")
    return 0


def cmd_eval(args):
    cfg, out = _prepare_run(args, "eval")
    if not args.init:
        raise ConfigError("eval needs --init (a fine-tuned model checkpoint)")
    with run_lock(out):
        _write_resolved(cfg, out)
        T.set_default_dtype(cfg.values["run"]["precision"])
        data = cfg.values["data"]
        ck = Checkpoint.load(args.init)
        langs = list(data["languages"])
        if not langs:
            if "language" not in ck.extra:
                raise ConfigError("model records no language; set [data] languages")
            langs = [int(ck.extra["language"])]
        model = FinetunedModel.from_checkpoint(ck)
        for lang in langs:
            test_utts = load_corpus(os.path.join(data["corpus"], f"test_{lang}"))
            report = evaluate_per(model, test_utts)
            path = _write_report(out, f"lang{lang}", report.to_dict(),
                                 [f"language {lang}: PER {report.per:.4f} "
                                  f"({len(test_utts)} utterances)"])
            print(f"language {lang}: PER {report.per:.4f} -> {path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xlst",
        description="cross-lingual self-training on synthetic speech-like corpora")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "synth-data": (cmd_synth_data, "generate the synthetic corpus bundle"),
        "pretrain-sup": (cmd_pretrain_sup, "supervised pretraining on the annotated set"),
        "pretrain-xlst": (cmd_pretrain_xlst, "self-training on un-annotated data"),
        "finetune": (cmd_finetune, "CTC fine-tuning plus PER evaluation per language"),
        "eval": (cmd_eval, "evaluate a fine-tuned model on held-out test sets"),
    }
    for name, (fn, help_text) in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the INI config")
        p.add_argument("--out", default=None, help="output directory for this run")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--precision", choices=("32", "64"), default=None,
                       help="override [run] precision")
        if name in ("pretrain-xlst", "finetune", "eval"):
            p.add_argument("--init", default=None,
                           help="checkpoint to initialize from")
        if name in ("pretrain-sup", "pretrain-xlst", "finetune"):
            p.add_argument("--resume", default=None,
                           help="mid-run checkpoint to resume")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except XlstError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
