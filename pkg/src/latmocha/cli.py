"""Command line front end.

Subcommands: gen-data, train, eval-latency, decode, plot. Exit codes:
0 success, 1 usage error, 2 data or format error, 3 numerical failure.
The optional --config file is JSON with "data", "model", "train",
"objective", and "decode" sections; every field has a desk-scale default.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import CorpusFormatError, gen_lookahead_task, gen_segmental_task, read_jsonl, write_jsonl
from .decode import (
    beam_stream_decode,
    export_alpha_heatmap,
    export_latency_histogram,
    greedy_stream_decode,
)
from .metrics import LatencyReport, measure_latency
from .model import DecoderConfig, EncoderConfig, ModelConfig
from .objectives import ObjectiveConfig
from .training import (
    CheckpointError,
    NumericalError,
    TrainConfig,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

TRAIN_MODES = ("baseline", "mtl-ce", "pt-ce", "decot", "minlt", "decot-minlt")


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    parser = _Parser(prog="latmocha", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, ckpt=False, out=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--data", required=data, help="corpus or input file")
        p.add_argument("--ckpt", required=ckpt, help="checkpoint path")
        p.add_argument("--out", required=out, help="output path")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus (JSONL)")
    common(p, out=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p, data=True, ckpt=True)
    p.add_argument("--mode", choices=TRAIN_MODES, default="baseline")
    p.add_argument("--warm-start", help="checkpoint to initialize from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-latency", help="emit the latency report for a corpus")
    common(p, data=True, ckpt=True)
    p.set_defaults(func=cmd_eval_latency)

    p = sub.add_parser("decode", help="decode a corpus and print transcripts")
    common(p, data=True, ckpt=True)
    p.add_argument("--beam", type=int, default=8)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("plot", help="turn a latency report or trace CSV into an SVG")
    common(p, data=True, out=True)
    p.set_defaults(func=cmd_plot)
    return parser


def load_config(path):
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CorpusFormatError(f"config {path} must hold a JSON object")
    return cfg


def build_model_config(cfg, corpus, mode):
    """Fill a ModelConfig from the config file, inferring sizes from the data."""
    enc_d = dict(cfg.get("model", {}).get("encoder", {}))
    dec_d = dict(cfg.get("model", {}).get("decoder", {}))
    model_d = cfg.get("model", {})
    stack = enc_d.get("stack_factor", 3)
    feat_dim = corpus[0].frames.shape[1]
    vocab = dec_d.get("vocab") or int(max(u.tokens.max() for u in corpus)) + 1
    align_vocab = 0
    if mode in ("mtl-ce", "pt-ce"):
        align_vocab = enc_d.get("align_vocab") or int(max(u.align.max() for u in corpus)) + 1
    encoder = EncoderConfig(
        input_dim=feat_dim * stack,
        layers=enc_d.get("layers", 2),
        hidden=enc_d.get("hidden", 64),
        stack_factor=stack,
        mtl_branch=(mode == "mtl-ce"),
        ce_head=(mode == "pt-ce"),
        bottleneck_dim=enc_d.get("bottleneck_dim", 0),
        align_vocab=align_vocab,
        dropout=enc_d.get("dropout", 0.1),
    )
    decoder = DecoderConfig(
        vocab=vocab,
        layers=dec_d.get("layers", 1),
        hidden=dec_d.get("hidden", 64),
        embed_dim=dec_d.get("embed_dim", 32),
        label_smoothing=dec_d.get("label_smoothing", 0.2),
        dropout=dec_d.get("dropout", 0.1),
    )
    return ModelConfig(
        encoder=encoder,
        decoder=decoder,
        attention_dim=model_d.get("attention_dim", 32),
        chunk_width=model_d.get("chunk_width", 4),
        conv_kernel=model_d.get("conv_kernel", 5),
        noise_std=model_d.get("noise_std", 1.0),
        clip_eps=model_d.get("clip_eps", 1e-6),
        fire_bias_init=model_d.get("fire_bias_init", -4.0),
    )


def build_objective(cfg, mode):
    d = cfg.get("objective", {})
    return ObjectiveConfig(
        mode=mode,
        lambda_ce=d.get("lambda_ce", 0.5),
        lambda_qua=d.get("lambda_qua", 1.0),
        lambda_minlt=d.get("lambda_minlt", 1.0),
        delta=d.get("delta", 8),
        quantity=d.get("quantity"),
        minlt_zero_target=d.get("minlt_zero_target", False),
    )


def build_train_config(cfg, model_cfg, objective, args):
    d = cfg.get("train", {})
    return TrainConfig(
        model=model_cfg,
        objective=objective,
        lr=d.get("lr", 2e-3),
        batch_size=d.get("batch_size", 32),
        epochs=d.get("epochs", 15),
        grad_clip=d.get("grad_clip", 5.0),
        seed=args.seed,
        warm_start=args.warm_start,
        holdout_fraction=d.get("holdout_fraction", 0.1),
        eval_latency=d.get("eval_latency", True),
        stage1_patience=d.get("stage1_patience", 3),
        stage1_rel_improvement=d.get("stage1_rel_improvement", 1e-3),
    )


def cmd_gen_data(args):
    d = load_config(args.config).get("data", {})
    task = d.get("task", "lookahead")
    kwargs = dict(
        n=d.get("n", 2000),
        vocab=d.get("vocab", 16),
        durations=tuple(d.get("durations", (4, 8))),
        noise_std=d.get("noise_std", 0.1),
        seed=args.seed,
        segments=tuple(d.get("segments", (3, 8))),
        stack_factor=d.get("stack_factor", 3),
    )
    if task == "lookahead":
        corpus = gen_lookahead_task(lookshift=d.get("lookshift", 1), **kwargs)
    elif task == "segmental":
        corpus = gen_segmental_task(**kwargs)
    else:
        raise CorpusFormatError(f"unknown data task {task!r}")
    write_jsonl(args.out, corpus)
    print(f"wrote {len(corpus)} utterances to {args.out}")
    return 0


def _print_history(history):
    for rec in history:
        parts = [f"epoch {rec['epoch']:3d}", f"loss {rec['loss']:.4f}"]
        if rec.get("eval_ce") is not None:
            parts.append(f"eval_ce {rec['eval_ce']:.4f}")
        if rec.get("token_acc") is not None:
            parts.append(f"acc {rec['token_acc']:.3f}")
        if rec.get("latency_median") is not None:
            parts.append(f"lat_med {rec['latency_median']:.2f}")
        if rec.get("skipped"):
            parts.append(f"skipped {rec['skipped']}")
        print("  ".join(parts))


def cmd_train(args):
    cfg = load_config(args.config)
    corpus = read_jsonl(args.data)
    if not corpus:
        raise CorpusFormatError(f"{args.data} holds no utterances")
    model_cfg = build_model_config(cfg, corpus, args.mode)

    if args.mode == "pt-ce":
        stage1 = build_train_config(cfg, model_cfg, build_objective(cfg, "pt-ce-stage1"), args)
        stage1 = replace(stage1, epochs=cfg.get("train", {}).get("stage1_epochs", stage1.epochs))
        print("stage 1: framewise CE pre-training")
        res1 = train(stage1, corpus, log_path=args.out)
        _print_history(res1.history)
        stage2 = build_train_config(cfg, model_cfg, build_objective(cfg, "pt-ce-stage2"), args)
        stage2 = replace(stage2, warm_start=None)
        print("stage 2: attention training on the pre-trained encoder")
        result = train(stage2, corpus, model=res1.model, log_path=args.out)
        objective = stage2.objective
    else:
        mode = "decot+minlt" if args.mode == "decot-minlt" else args.mode
        tc = build_train_config(cfg, model_cfg, build_objective(cfg, mode), args)
        result = train(tc, corpus, log_path=args.out)
        objective = tc.objective

    _print_history(result.history)
    if result.warm_start_report:
        rep = result.warm_start_report
        print(f"warm start: {len(rep['loaded'])} loaded, "
              f"{len(rep['missing'])} missing, {len(rep['unexpected'])} unexpected")
    save_checkpoint(args.ckpt, result.model, moments=result.moments,
                    step=result.steps, objective=objective)
    print(f"checkpoint written to {args.ckpt}")
    return 0


def cmd_eval_latency(args):
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    corpus = read_jsonl(args.data)
    report = measure_latency(model, corpus)
    text = report.to_text()
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_decode(args):
    cfg = load_config(args.config)
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    corpus = read_jsonl(args.data)
    max_len = cfg.get("decode", {}).get("max_len", 100)
    lines = []
    for utt in corpus:
        if args.beam <= 1:
            hyp, _ = greedy_stream_decode(model, utt.frames, max_len=max_len)
        else:
            hyp = beam_stream_decode(model, utt.frames, beam=args.beam,
                                     max_len=max_len)[0]
        lines.append(f"{utt.id}\t{' '.join(str(t) for t in hyp.transcript)}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


def _read_trace_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise CorpusFormatError(f"{path}: trace CSV needs a header and rows")
    try:
        matrix = np.array([[float(v) for v in row] for row in rows[1:]])
    except ValueError as exc:
        raise CorpusFormatError(f"{path}: non-numeric trace value: {exc}") from exc
    return matrix


def cmd_plot(args):
    text = Path(args.data).read_text()
    if text.startswith("avg:"):
        export_latency_histogram(LatencyReport.from_text(text), args.out)
    elif "," in text.splitlines()[0]:
        export_alpha_heatmap(_read_trace_csv(args.data), args.out)
    else:
        raise CorpusFormatError(f"{args.data}: neither a latency report nor a trace CSV")
    print(f"figure written to {args.out}")
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusFormatError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
