"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime failure or divergence.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from pathlib import Path

from .data import MIN_DOC_LEN, SYNTH_PRESETS, Corpus, build_corpus, eval_sentences, synth_directional_corpus
from .diagnostics import format_grid, sentence_group_maps, similarity_curve, triangle_percentage
from .errors import ConfigError, DivergenceError, InputError, ShapeError
from .experiments import compare_objectives
from .gradcheck import model_grad_check
from .model import load_checkpoint
from .relpos import KINDS, extra_param_count
from .training import TrainConfig, load_config, train

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _add_corpus_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--corpus", type=Path, help="UTF-8 text, blank-line separated documents")
    g.add_argument("--synth", choices=SYNTH_PRESETS, help="synthetic directional corpus preset")
    p.add_argument("--vocab-cap", type=int, default=8000)
    p.add_argument("--min-doc-len", type=int, default=MIN_DOC_LEN)
    p.add_argument("--synth-size", type=int, default=2000)
    p.add_argument("--synth-length", type=int, default=32)
    p.add_argument("--corpus-seed", type=int, default=0, help="seed for synthetic corpus generation")


def _load_corpus(args) -> Corpus:
    if args.corpus is not None:
        try:
            text = args.corpus.read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read corpus: {exc}") from exc
        return build_corpus(text, args.vocab_cap, args.min_doc_len)
    return synth_directional_corpus(args.synth, args.synth_size, args.corpus_seed, length=args.synth_length)


def _train_config(args) -> TrainConfig:
    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.config is not None:
        return load_config(args.config, overrides)
    return TrainConfig.from_dict(overrides)


def cmd_pretrain(args) -> int:
    cfg = _train_config(args)
    corpus = _load_corpus(args)
    result = train(cfg, corpus, args.out, resume_from=args.resume)
    last = result.metrics[-1] if result.metrics else {}
    print(json.dumps({"checkpoints": len(result.checkpoints), "final": last}, sort_keys=True))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    worst = 0.0
    for kind in args.kinds:
        for objective in ("mlm", "mth"):
            errs = model_grad_check(kind, objective, args.seed or 0, group_count=args.groups,
                                    max_coords=args.max_coords)
            err = max(errs.values())
            worst = max(worst, err)
            print(f"{kind:9s} {objective:4s} max_rel_err={err:.3e}")
    ok = worst < GRAD_TOL
    print(f"{'PASS' if ok else 'FAIL'} worst={worst:.3e} tol={GRAD_TOL:.0e}")
    return EXIT_OK if ok else EXIT_RUNTIME


def _checkpoint_paths(pattern: str) -> list[str]:
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise InputError(f"no checkpoints match {pattern!r}")
    return paths


def cmd_similarity(args) -> int:
    corpus = _load_corpus(args)
    paths = _checkpoint_paths(args.checkpoints)
    max_len = load_checkpoint(paths[0]).config.max_len
    reports = similarity_curve(paths, eval_sentences(corpus, max_len), args.sample_size,
                               args.seed or 0, args.weight_space)
    lines = [r.to_json() for r in reports]
    if args.out:
        Path(args.out).write_text("".join(line + "\n" for line in lines))
    for line in lines:
        print(line)
    return EXIT_OK


def cmd_triangle(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.config.group_count != 2:
        raise ConfigError(f"triangle needs a checkpoint with group_count=2, got {ckpt.config.group_count}")
    corpus = _load_corpus(args)
    sentences = eval_sentences(corpus, ckpt.config.max_len)
    if args.limit:
        sentences = sentences[: args.limit]
    report = triangle_percentage(sentences, ckpt.config, ckpt.params, args.t, args.ms, args.literal_ms)
    if args.dump_maps:
        out = Path(args.dump_maps)
        out.mkdir(parents=True, exist_ok=True)
        pairs, _ = sentence_group_maps(sentences[: args.dump_count], ckpt.config, ckpt.params, args.ms)
        for i, maps in enumerate(pairs):
            for g, amp in enumerate(maps):
                (out / f"sentence{i:04d}_group{g + 1}.txt").write_text(format_grid(amp))
    print(report.to_json())
    return EXIT_OK


def cmd_param_count(args) -> int:
    if args.config is not None:
        cfg = load_config(args.config, _parse_overrides(args.set))
        mcfg = cfg.model_config(cfg.vocab_size or 1)
        per_group = extra_param_count(mcfg.encoding, mcfg.head_dim, mcfg.r_s, mcfg.r_a, mcfg.d_model)
        copies = mcfg.group_count * (1 if mcfg.share_across_layers else mcfg.n_layers)
        print(per_group * copies)
        return EXIT_OK
    if args.kind is None or args.d is None:
        raise UsageError("param-count needs --config or both --kind and --d")
    print(extra_param_count(args.kind, args.d, args.r_s, args.r_a, args.D))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _train_config(args)
    corpus = _load_corpus(args)
    sentences = eval_sentences(corpus, cfg.model_config(corpus.vocab_size).max_len)
    records = compare_objectives(cfg, corpus, args.out, args.seeds, sentences, args.sample_size)
    for r in records:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def cmd_synth_corpus(args) -> int:
    corpus = synth_directional_corpus(args.preset, args.size, args.seed or 0, length=args.length)
    Path(args.out).write_text(corpus.to_text(), encoding="utf-8")
    print(f"wrote {len(corpus)} documents to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ddrplab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_seed(p):
        p.add_argument("--seed", type=int, default=None)
        return p

    def with_config(p):
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return p

    p = with_config(with_seed(sub.add_parser("pretrain", help="train one model")))
    _add_corpus_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = with_seed(sub.add_parser("grad-check", help="finite-difference check of the full model"))
    p.add_argument("--kinds", nargs="+", choices=KINDS, default=list(KINDS))
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--max-coords", type=int, default=6)
    p.set_defaults(func=cmd_grad_check)

    p = with_seed(sub.add_parser("similarity", help="f(S), f(H) over a checkpoint series"))
    _add_corpus_args(p)
    p.add_argument("--checkpoints", required=True, help="glob, e.g. 'run/ckpt_*.npz'")
    p.add_argument("--sample-size", type=int, default=5000)
    p.add_argument("--weight-space", choices=("pre_softmax", "post_softmax"), default="pre_softmax")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_similarity)

    p = with_seed(sub.add_parser("triangle", help="up-down triangle percentage of a two-group model"))
    _add_corpus_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--t", type=float, default=0.4)
    p.add_argument("--ms", type=int, default=64)
    p.add_argument("--literal-ms", action="store_true", help="divide masses by ms instead of the sentence length")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--dump-maps", default=None, help="directory for per-sentence group maps")
    p.add_argument("--dump-count", type=int, default=10)
    p.set_defaults(func=cmd_triangle)

    p = with_config(sub.add_parser("param-count", help="extra position parameters of an encoding"))
    p.add_argument("--kind", choices=KINDS, default=None)
    p.add_argument("--d", type=int, default=None, help="per-head dimension")
    p.add_argument("--r-s", type=int, default=64)
    p.add_argument("--r-a", type=int, default=512)
    p.add_argument("--D", type=int, default=768, help="model width (absolute, tupe)")
    p.set_defaults(func=cmd_param_count)

    p = with_config(with_seed(sub.add_parser("compare", help="paired MLM/MTH runs with shared seeds")))
    _add_corpus_args(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--sample-size", type=int, default=5000)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_compare)

    p = with_seed(sub.add_parser("synth-corpus", help="write a synthetic corpus as text"))
    p.add_argument("--preset", choices=SYNTH_PRESETS, required=True)
    p.add_argument("--size", type=int, default=2000)
    p.add_argument("--length", type=int, default=32)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth_corpus)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (InputError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
