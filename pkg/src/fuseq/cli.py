"""Command-line harness.

Subcommands:
  make-model   write a seeded random LSQW model file
  bench        run one workload and emit a JSON profile report
  compare      fused-vs-naive speedup table over (batch, seq-len) buckets

Exit codes: 0 success, 2 usage error, 3 model/format error, 4 capacity
error.
"""

from __future__ import annotations

import argparse
import sys

from .bench import BenchSettings, dump_report, render_compare_table, run_bench, run_compare
from .errors import CapacityError, ConsistencyError, FormatError, InputError, ParameterError
from .model import ModelConfig, make_random_weights
from .weights_io import load_weights, save_weights

PRESETS = {
    "tiny": dict(num_encoder_layers=2, num_decoder_layers=2, d_model=64, d_ff=128,
                 num_heads=4, vocab_size=512, max_batch=4, max_seq_len=64, max_beam_size=4),
    "small": dict(num_encoder_layers=4, num_decoder_layers=4, d_model=128, d_ff=512,
                  num_heads=8, vocab_size=4096, max_batch=8, max_seq_len=64, max_beam_size=4),
    "base": dict(num_encoder_layers=6, num_decoder_layers=6, d_model=512, d_ff=2048,
                 num_heads=8, vocab_size=32000, max_batch=8, max_seq_len=64, max_beam_size=4),
}


def _add_bench_flags(p: argparse.ArgumentParser):
    p.add_argument("--model", required=True, help="LSQW model file")
    p.add_argument("--engine", choices=["fused", "naive"], default="fused")
    p.add_argument("--task", choices=["translate", "generate", "classify"],
                   default="translate")
    p.add_argument("--decode", choices=["beam", "diverse", "topk", "topp", "greedy"],
                   default="beam")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seq-len", type=int, default=16)
    p.add_argument("--beam-size", type=int, default=4)
    p.add_argument("--diversity-groups", type=int, default=2)
    p.add_argument("--diversity-penalty", type=float, default=0.5)
    p.add_argument("--topk", type=int, default=32)
    p.add_argument("--topp", type=float, default=0.75)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--out", default=None, help="write the JSON report here instead of stdout")
    p.add_argument("--profile", action="store_true",
                   help="include per-kind pass counts in the report")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fuseq",
                                 description="CPU transformer inference engine harness")
    sub = ap.add_subparsers(dest="command", required=True)

    mm = sub.add_parser("make-model", help="write a seeded random model file")
    mm.add_argument("--out", required=True)
    mm.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    mm.add_argument("--seed", type=int, default=0)
    mm.add_argument("--fp16", action="store_true", help="store float16 payloads")
    for flag, key in [("--enc-layers", "num_encoder_layers"),
                      ("--dec-layers", "num_decoder_layers"),
                      ("--d-model", "d_model"), ("--d-ff", "d_ff"),
                      ("--heads", "num_heads"), ("--vocab", "vocab_size"),
                      ("--max-batch", "max_batch"), ("--max-seq-len", "max_seq_len"),
                      ("--max-beam", "max_beam_size")]:
        mm.add_argument(flag, dest=key, type=int, default=None)
    mm.add_argument("--activation", choices=["none", "relu", "gelu"], default=None)

    b = sub.add_parser("bench", help="run one workload, emit a profile report")
    _add_bench_flags(b)
    b.add_argument("--parallel-sessions", type=int, default=1,
                   help="run N independent sessions on independent arenas")

    c = sub.add_parser("compare", help="fused vs naive speedup per bucket")
    _add_bench_flags(c)
    c.add_argument("--buckets", default=None,
                   help="comma list of BATCHxSEQ buckets, e.g. 1x16,8x32")
    return ap


def _settings_from_args(args) -> BenchSettings:
    return BenchSettings(
        engine=getattr(args, "engine", "fused"),
        task=args.task, decode=args.decode, batch=args.batch, seq_len=args.seq_len,
        beam_size=args.beam_size, diversity_groups=args.diversity_groups,
        diversity_penalty=args.diversity_penalty, topk=args.topk, topp=args.topp,
        max_steps=args.max_steps, seed=args.seed, reps=args.reps, warmup=args.warmup,
        parallel_sessions=getattr(args, "parallel_sessions", 1),
        profile=args.profile,
    )


def _cmd_make_model(args) -> int:
    fields = dict(PRESETS[args.preset])
    for key in list(fields):
        override = getattr(args, key, None)
        if override is not None:
            fields[key] = override
    if args.activation is not None:
        fields["activation"] = args.activation
    config = ModelConfig(**fields)
    weights = make_random_weights(config, seed=args.seed)
    save_weights(args.out, config, weights, fp16=args.fp16)
    print(f"wrote {args.out} ({config.num_encoder_layers}+{config.num_decoder_layers} "
          f"layers, d={config.d_model}, vocab={config.vocab_size})")
    return 0


def _parse_buckets(spec: str | None, args) -> list[tuple[int, int]]:
    if not spec:
        return [(args.batch, args.seq_len)]
    out = []
    for part in spec.split(","):
        b, s = part.lower().split("x")
        out.append((int(b), int(s)))
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "make-model":
            return _cmd_make_model(args)
        config, weights = load_weights(args.model)
        settings = _settings_from_args(args)
        if args.command == "bench":
            report = run_bench(config, weights, settings)
            dump_report(report, args.out)
            return 0
        if args.command == "compare":
            result = run_compare(config, weights, settings,
                                 _parse_buckets(args.buckets, args))
            dump_report(result, args.out)
            print(render_compare_table(result), file=sys.stderr)
            return 0
        return 2
    except (FormatError, ConsistencyError) as e:
        print(f"model error: {e}", file=sys.stderr)
        return 3
    except CapacityError as e:
        print(f"capacity error: {e}", file=sys.stderr)
        return 4
    except (ParameterError, InputError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"model error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
