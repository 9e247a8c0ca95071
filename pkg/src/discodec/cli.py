"""Command-line surface for corpus generation, training, and evaluation.

Exit codes: 0 success, 1 usage error, 2 data or model error.  Every
subcommand reads an ExperimentConfig (``--config``, defaults apply without
one) and archives the resolved configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import autodiff as ad
from . import lm as lmmod
from . import metrics
from . import pipeline
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, archive_config, load_config
from .synth import build_corpus


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="discodec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, help="override the step's seed")
        p.add_argument("--out", required=True, help="output directory or file")

    common(sub.add_parser("gen-data", help="materialize the corpus manifest"))
    common(sub.add_parser("train-codec", help="train the codec"))

    p = sub.add_parser("train-lm", help="train the token model")
    common(p)
    p.add_argument("--codes", required=True, help="code corpus file")

    p = sub.add_parser("encode", help="encode utterances to a code corpus")
    common(p)
    p.add_argument("--codec", required=True, help="codec checkpoint")
    p.add_argument("--split", choices=("train", "heldout", "all"),
                   default="train")

    p = sub.add_parser("decode", help="decode one code row back to features")
    common(p)
    p.add_argument("--codec", required=True)
    p.add_argument("--codes", required=True)
    p.add_argument("--index", type=int, required=True, help="row in the code file")
    p.add_argument("--ref", type=int, default=None,
                   help="utterance id providing the speaker (default: the row's own)")

    p = sub.add_parser("convert", help="voice conversion between two utterances")
    common(p)
    p.add_argument("--codec", required=True)
    p.add_argument("--source", type=int, required=True, help="content utterance id")
    p.add_argument("--target", type=int, required=True, help="speaker utterance id")

    p = sub.add_parser("tts", help="generate codes from a prompt and decode them")
    common(p)
    p.add_argument("--codec", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--mode", choices=("text", "speech", "text-ref"),
                   default="text")
    p.add_argument("--text", help="comma-separated symbol ids to synthesize")
    p.add_argument("--utterance", type=int,
                   help="take the target text from this utterance id")
    p.add_argument("--ref", type=int,
                   help="reference utterance id (speech and text-ref modes)")
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--top-k", type=int, default=32)
    p.add_argument("--max-new", type=int, default=288)

    p = sub.add_parser("eval", help="run the metric batteries into a report")
    common(p)
    p.add_argument("--codec", required=True)
    p.add_argument("--lm", help="no-reference token model checkpoint")
    p.add_argument("--lm-ref", help="reference-variant checkpoint")

    p = sub.add_parser("stats", help="MUSHRA ingestion and paired t-tests")
    common(p)
    p.add_argument("--scores", required=True, help="listening-test CSV")
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig.default()
    if args.seed is None:
        return cfg
    return _override_seed(cfg, args.command, args.seed)


def _override_seed(cfg: ExperimentConfig, command: str, seed: int):
    if command == "gen-data":
        return dataclasses.replace(cfg, corpus=dataclasses.replace(
            cfg.corpus, seed=seed))
    if command == "train-codec":
        return dataclasses.replace(cfg, codec=dataclasses.replace(
            cfg.codec, seed=seed))
    if command == "train-lm":
        return dataclasses.replace(cfg, lm_training=dataclasses.replace(
            cfg.lm_training, seed=seed))
    return dataclasses.replace(cfg, eval=dataclasses.replace(
        cfg.eval, seed=seed))


def _out_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _features_table(feats: np.ndarray, path: str, grid: np.ndarray = None):
    table = {"features": np.asarray(feats, np.float32)}
    if grid is not None:
        table["grid"] = grid.astype(np.float32)
    save_checkpoint(table, path)


def _cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = _out_dir(args.out)
    corpus = build_corpus(cfg.corpus)
    pipeline.write_manifest(corpus, os.path.join(out, "corpus.json"))
    archive_config(cfg, os.path.join(out, "config.json"))
    print(f"wrote manifest for {len(corpus.utterances)} utterances to {out}")
    return 0


def _cmd_train_codec(args) -> int:
    cfg = _load(args)
    out = _out_dir(args.out)
    corpus = build_corpus(cfg.corpus)
    _, records = pipeline.run_train_codec(cfg, corpus, out)
    archive_config(cfg, os.path.join(out, "config.json"))
    print(f"codec trained for {cfg.codec.steps} steps, "
          f"final loss {records[-1]['total']:.4f}")
    return 0


def _cmd_encode(args) -> int:
    cfg = _load(args)
    corpus = build_corpus(cfg.corpus)
    codec = pipeline.load_codec(cfg, args.codec)
    split = {"train": corpus.train_speaker_ids,
             "heldout": corpus.heldout_speaker_ids,
             "all": None}[args.split]
    rows = pipeline.encode_corpus(corpus, codec, split)
    pipeline.save_code_corpus(rows, args.out)
    print(f"encoded {len(rows)} utterances to {args.out}")
    return 0


def _cmd_train_lm(args) -> int:
    cfg = _load(args)
    out = _out_dir(args.out)
    corpus = build_corpus(cfg.corpus)
    rows = pipeline.load_code_corpus(
        args.codes, corpus if cfg.lm_model.use_reference else None)
    _, records = pipeline.run_train_lm(cfg, rows, out)
    archive_config(cfg, os.path.join(out, "config.json"))
    variant = "reference" if cfg.lm_model.use_reference else "no-reference"
    print(f"{variant} token model trained for {cfg.lm_training.steps} steps, "
          f"final loss {records[-1]['loss']:.4f}")
    return 0


def _cmd_decode(args) -> int:
    cfg = _load(args)
    corpus = build_corpus(cfg.corpus)
    codec = pipeline.load_codec(cfg, args.codec)
    rows = pipeline.load_code_corpus(args.codes, corpus)
    if not 0 <= args.index < len(rows):
        raise ValueError(f"row {args.index} outside the code file "
                         f"(has {len(rows)} rows)")
    row = rows[args.index]
    ref_feats = (corpus.features(args.ref) if args.ref is not None
                 else row.features)
    feats = codec.decode_codes(row.grid, codec.speaker_embedding(ref_feats))
    _features_table(feats, args.out)
    print(f"decoded {len(feats)} frames to {args.out}")
    return 0


def _cmd_convert(args) -> int:
    cfg = _load(args)
    corpus = build_corpus(cfg.corpus)
    codec = pipeline.load_codec(cfg, args.codec)
    for idx in (args.source, args.target):
        if not 0 <= idx < len(corpus.utterances):
            raise ValueError(f"utterance {idx} outside the corpus")
    feats = codec.convert_voice(corpus.features(args.source),
                                corpus.features(args.target))
    _features_table(feats, args.out)
    print(f"converted {len(feats)} frames to {args.out}")
    return 0


def _cmd_tts(args) -> int:
    cfg = _load(args)
    corpus = build_corpus(cfg.corpus)
    codec = pipeline.load_codec(cfg, args.codec)
    model = pipeline.load_lm(cfg.lm_model, args.lm)
    if (args.text is None) == (args.utterance is None):
        raise UsageError("tts: give exactly one of --text or --utterance")
    if args.text is not None:
        try:
            text = tuple(int(t) for t in args.text.split(","))
        except ValueError:
            raise UsageError(f"tts: --text must be comma-separated integers, "
                             f"got {args.text!r}") from None
    else:
        text = tuple(corpus.utterances[args.utterance].content)
    if args.mode in ("speech", "text-ref") and args.ref is None:
        raise UsageError(f"tts: --ref is required in {args.mode} mode")
    ref_emb = None
    if args.mode == "text":
        prompt = lmmod.PromptSequence(mode="text", text=text)
    elif args.mode == "speech":
        ref_feats = corpus.features(args.ref)
        prompt = lmmod.PromptSequence(
            mode="speech", text=text,
            ref_text=tuple(corpus.utterances[args.ref].content),
            ref_codes=codec.encode_utterance(ref_feats))
    else:
        if model.reference is None:
            raise ValueError("tts: --lm checkpoint has no reference encoder; "
                             "text-ref mode needs the reference variant")
        ref_feats = corpus.features(args.ref)
        with ad.no_grad():
            ref_emb = model.reference(ref_feats)
        prompt = lmmod.PromptSequence(mode="text-with-reference", text=text,
                                      ref_features=ref_feats)
    tokens, slot = lmmod.build_prompt(prompt, cfg.lm_model)
    gen = lmmod.sample(model, tokens, temperature=args.temperature,
                       top_k=args.top_k, seed=cfg.eval.seed,
                       max_new=args.max_new, ref_emb=ref_emb, ref_slot=slot)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        grid = lmmod.unflatten_tokens(gen, cfg.lm_model.num_books,
                                      cfg.lm_model.book_size)
    speaker_src = args.ref if args.ref is not None else args.utterance
    if speaker_src is None:
        raise UsageError("tts: text mode with --text needs --ref to pick "
                         "the voice")
    emb = codec.speaker_embedding(corpus.features(speaker_src))
    if len(grid) == 0:
        raise ValueError("tts: the model produced no full frame")
    feats = codec.decode_codes(grid, emb)
    _features_table(feats, args.out, grid=grid)
    print(f"generated {len(grid)} frames to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load(args)
    out = _out_dir(args.out)
    corpus = build_corpus(cfg.corpus)
    codec = pipeline.load_codec(cfg, args.codec)
    lm_nr = pipeline.load_lm(cfg.lm_model, args.lm) if args.lm else None
    lm_r = None
    if args.lm_ref:
        ref_cfg = dataclasses.replace(cfg.lm_model, use_reference=True)
        lm_r = pipeline.load_lm(ref_cfg, args.lm_ref)
    report = pipeline.evaluate(cfg, corpus, codec, lm_nr, lm_r)
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as f:
        f.write(report.render_text())
    with open(os.path.join(out, "report.jsonl"), "w", encoding="utf-8") as f:
        f.write(report.render_jsonl())
    archive_config(cfg, os.path.join(out, "config.json"))
    print(report.render_text(), end="")
    return 0


def _cmd_stats(args) -> int:
    out = _out_dir(args.out)
    table = metrics.mushra_ingest(args.scores)
    report = metrics.EvalReport()
    for system in sorted(table):
        report.rows.append(metrics.SystemRow(system, {
            "mean_score": float(np.mean(table[system]))}))
    systems = sorted(table)
    for i, a in enumerate(systems):
        for b in systems[i + 1:]:
            try:
                t, p = metrics.paired_ttest(table[a], table[b])
                report.pairs.append(metrics.PairStat(a, b, "mushra", t, p))
            except ValueError as e:
                report.pairs.append(metrics.PairStat(
                    a, b, "mushra", 0.0, 1.0, note=f"no difference ({e})"))
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as f:
        f.write(report.render_text())
    with open(os.path.join(out, "report.jsonl"), "w", encoding="utf-8") as f:
        f.write(report.render_jsonl())
    print(report.render_text(), end="")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-codec": _cmd_train_codec,
    "train-lm": _cmd_train_lm,
    "encode": _cmd_encode,
    "decode": _cmd_decode,
    "convert": _cmd_convert,
    "tts": _cmd_tts,
    "eval": _cmd_eval,
    "stats": _cmd_stats,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as e:
        print(f"{args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
