"""Command-line entry point: corpus generation, stage-wise training, and
evaluation, driven by a JSON config whose defaults expose every
hyperparameter.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

from . import checkpoint as ckpt_mod
from . import corpus as corpus_mod
from . import pipeline
from .corpus import CorpusError, SyntheticSpec
from .localizer import LocalizerConfig, LocalizerModel
from .pipeline import DivergenceError, InferenceConfig, TrainConfig
from .retriever import RetrieverConfig, RetrieverModel

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    synthetic: SyntheticSpec = dataclasses.field(default_factory=SyntheticSpec)
    retriever: RetrieverConfig = dataclasses.field(default_factory=RetrieverConfig)
    localizer: LocalizerConfig = dataclasses.field(default_factory=LocalizerConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    inference: InferenceConfig = dataclasses.field(default_factory=InferenceConfig)

    def to_dict(self):
        return {
            "seed": self.seed,
            "synthetic": dataclasses.asdict(self.synthetic),
            "retriever": dataclasses.asdict(self.retriever),
            "localizer": dataclasses.asdict(self.localizer),
            "train": dataclasses.asdict(self.train),
            "inference": dataclasses.asdict(self.inference),
        }


def _build_section(cls, raw, section):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in config section {section!r}")
        if key in ("moment_len_range", "token_count_range") and value is not None:
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def load_run_config(path=None, seed=None):
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc.msg})")
    known = {"seed", "synthetic", "retriever", "localizer", "train", "inference"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = RunConfig(
        seed=raw.get("seed", 0),
        synthetic=_build_section(SyntheticSpec, raw.get("synthetic", {}), "synthetic"),
        retriever=_build_section(RetrieverConfig, raw.get("retriever", {}), "retriever"),
        localizer=_build_section(LocalizerConfig, raw.get("localizer", {}), "localizer"),
        train=_build_section(TrainConfig, raw.get("train", {}), "train"),
        inference=_build_section(InferenceConfig, raw.get("inference", {}), "inference"),
    )
    if seed is not None:
        cfg.seed = seed
        cfg.synthetic.seed = seed
    cfg.train.seed = cfg.seed
    try:
        cfg.retriever.validate()
        cfg.train.validate()
        cfg.inference.validate()
        cfg.synthetic.validate()
    except (ValueError, CorpusError) as exc:
        raise ConfigError(str(exc))
    return cfg


def _write_loss_csv(path, curve):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss"])
        for epoch, split, value in curve:
            writer.writerow([epoch, split, repr(float(value))])


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    cfg = load_run_config(args.config, seed=args.seed)
    spec = cfg.synthetic
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    # val/test reuse the generating process with offset seeds and fewer
    # queries per video; dimensions and corpus size stay identical
    variants = {
        "train": spec,
        "val": dataclasses.replace(spec, seed=spec.seed + 1001, queries_per_video=min(2, spec.queries_per_video)),
        "test": dataclasses.replace(spec, seed=spec.seed + 2002, queries_per_video=min(2, spec.queries_per_video)),
    }
    for split in SPLITS:
        corpus = corpus_mod.generate(variants[split], split=split)
        corpus_mod.save(corpus, os.path.join(args.out, split))
        if split == "train":
            ratio = corpus_mod.span_ratio(corpus)
            print(f"generated {len(corpus.videos)} videos x {spec.clips_per_video} clips, "
                  f"{len(corpus.queries)} queries, mean span ratio {ratio:.3f} "
                  f"(target {spec.target_span_ratio:.3f}), seed {spec.seed}")
    return 0


def _load_split(corpus_dir, split):
    path = os.path.join(corpus_dir, split)
    if not os.path.isdir(path):
        return None
    return corpus_mod.load(path)


def _require_split(corpus_dir, split):
    corpus = _load_split(corpus_dir, split)
    if corpus is None:
        raise CorpusError(f"missing corpus split directory: {os.path.join(corpus_dir, split)}")
    return corpus


def cmd_train(args):
    cfg = load_run_config(args.config, seed=args.seed)
    if args.pooling is not None:
        cfg.retriever.pooling = args.pooling
        cfg.retriever.validate()
    train_corpus = _require_split(args.corpus, "train")
    val_corpus = _load_split(args.corpus, "val")

    if args.stage == "retriever":
        model, curve = pipeline.train_retriever(
            train_corpus, cfg.train, model_config=cfg.retriever, val_corpus=val_corpus)
        arrays = ckpt_mod.merge_namespaces(retriever={n: t.data for n, t in model.params.items()})
        ckpt_mod.save_checkpoint(args.ckpt, arrays)
        print(f"retriever checkpoint written to {args.ckpt}")
    else:
        if not os.path.exists(args.ckpt):
            raise CorpusError(
                f"localizer stage needs a retriever checkpoint at {args.ckpt} for hard-negative mining; "
                "run --stage retriever first")
        arrays = ckpt_mod.load_checkpoint(args.ckpt)
        retr_state = ckpt_mod.split_namespace(arrays, "retriever")
        if not retr_state:
            raise CorpusError(
                f"{args.ckpt} holds no retriever weights; hard-negative mining requires a trained retriever")
        retr = RetrieverModel(train_corpus.d_txt, train_corpus.d_img, train_corpus.d_sub,
                              cfg.retriever, seed=cfg.train.seed)
        retr.params.load_state_dict(retr_state)
        model, curve, _ = pipeline.train_localizer(
            train_corpus, retr, cfg.train, cfg.inference, model_config=cfg.localizer)
        merged = dict(arrays)
        merged.update(ckpt_mod.merge_namespaces(localizer={n: t.data for n, t in model.params.items()}))
        ckpt_mod.save_checkpoint(args.ckpt, merged)
        print(f"localizer checkpoint appended to {args.ckpt}")

    if args.loss_csv:
        _write_loss_csv(args.loss_csv, curve)
    return 0


def cmd_eval(args):
    cfg = load_run_config(args.config, seed=args.seed)
    corpus = _require_split(args.corpus, args.split)
    try:
        arrays = ckpt_mod.load_checkpoint(args.ckpt)
    except FileNotFoundError:
        raise CorpusError(f"checkpoint not found: {args.ckpt}")
    retr_state = ckpt_mod.split_namespace(arrays, "retriever")
    if not retr_state:
        raise CorpusError(f"{args.ckpt} holds no retriever weights")
    retr = RetrieverModel(corpus.d_txt, corpus.d_img, corpus.d_sub, cfg.retriever, seed=cfg.train.seed)
    retr.params.load_state_dict(retr_state)
    loc = None
    if args.task in ("svmr", "vcmr"):
        loc_state = ckpt_mod.split_namespace(arrays, "localizer")
        if not loc_state:
            raise CorpusError(f"{args.ckpt} holds no localizer weights; train --stage localizer first")
        loc = LocalizerModel(corpus.d_txt, corpus.d_img, corpus.d_sub, cfg.localizer, seed=cfg.train.seed + 1)
        loc.params.load_state_dict(loc_state)

    report = pipeline.evaluate_pipeline(retr, loc, corpus, cfg.inference, tasks=(args.task,))
    values = getattr(report, args.task)
    print(f"{args.task.upper()} metrics on split {args.split!r}:")
    for key in sorted(values):
        print(f"  {key:>16}: {values[key]:6.2f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vcmr", description="Synthetic video-corpus moment retrieval: generate, train, evaluate.")
    parser.add_argument("--dump-defaults", action="store_true",
                        help="print the full default run config as JSON and exit")
    sub = parser.add_subparsers(dest="command")

    p_gen = sub.add_parser("gen", help="generate a synthetic corpus (train/val/test splits)")
    p_gen.add_argument("--config", default=None)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train one pipeline stage")
    p_train.add_argument("--stage", choices=("retriever", "localizer"), required=True)
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--corpus", required=True)
    p_train.add_argument("--ckpt", required=True)
    p_train.add_argument("--loss-csv", default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--pooling", choices=("modality_specific", "mean", "max"), default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="run inference and report metrics")
    p_eval.add_argument("--task", choices=("vr", "svmr", "vcmr"), required=True)
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--corpus", required=True)
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--split", default="test", choices=SPLITS)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_defaults:
        print(json.dumps(RunConfig().to_dict(), indent=2, sort_keys=True))
        return 0
    if not getattr(args, "command", None):
        parser.print_help()
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, ckpt_mod.CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
