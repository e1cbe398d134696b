#!/usr/bin/env python3
"""Fused-vs-naive speedup across (batch, seq_len) buckets.

Runs the same seeded translation workload on both engines for every
bucket and prints the bucketed speedup table, the style used to compare
engines at different request shapes. Outputs also land in a JSON file.

Usage:
    python scripts/speedup_grid.py [--width 256] [--vocab 32000] \
        [--buckets 1x16,8x32,8x64] [--steps 16] [--out speedup.json]
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from fuseq.bench import BenchSettings, render_compare_table, run_compare
from fuseq.model import ModelConfig, make_random_weights


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--width", type=int, default=256, help="d_model (d_ff = 4x)")
    ap.add_argument("--layers", type=int, default=6)
    ap.add_argument("--vocab", type=int, default=32000)
    ap.add_argument("--beam", type=int, default=4)
    ap.add_argument("--steps", type=int, default=16)
    ap.add_argument("--buckets", default="1x16,2x32,8x32,8x64")
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    buckets = []
    for part in args.buckets.split(","):
        b, s = part.lower().split("x")
        buckets.append((int(b), int(s)))
    max_batch = max(b for b, _ in buckets)
    max_seq = max(max(s for _, s in buckets), args.steps + 1)

    config = ModelConfig(num_encoder_layers=args.layers, num_decoder_layers=args.layers,
                         d_model=args.width, d_ff=4 * args.width, num_heads=8,
                         vocab_size=args.vocab, max_batch=max_batch,
                         max_seq_len=max_seq, max_beam_size=args.beam)
    print(f"model: {args.layers}+{args.layers} layers, d={args.width}, "
          f"vocab={args.vocab}, beam={args.beam}, {args.steps} decode steps",
          file=sys.stderr)
    weights = make_random_weights(config, seed=args.seed)
    settings = BenchSettings(task="translate", decode="beam", beam_size=args.beam,
                             max_steps=args.steps, seed=args.seed, reps=args.reps,
                             warmup=1)
    result = run_compare(config, weights, settings, buckets)
    print(render_compare_table(result))
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2) + "\n")
        print(f"wrote {args.out}", file=sys.stderr)


if __name__ == "__main__":
    main()
