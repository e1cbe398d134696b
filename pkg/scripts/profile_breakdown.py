#!/usr/bin/env python3
"""Latency breakdown into GEMM / cache refreshing / other for both engines.

The GEMM share is the efficiency indicator: the fused engine should spend
most of its time in matrix multiplies, the framework-style engine in
everything else.

Usage:
    python scripts/profile_breakdown.py [--width 256] [--batch 8] [--seq 32]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from fuseq.bench import BenchSettings, run_bench
from fuseq.model import ModelConfig, make_random_weights


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--width", type=int, default=256)
    ap.add_argument("--layers", type=int, default=6)
    ap.add_argument("--vocab", type=int, default=32000)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--seq", type=int, default=32)
    ap.add_argument("--beam", type=int, default=4)
    ap.add_argument("--steps", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    config = ModelConfig(num_encoder_layers=args.layers, num_decoder_layers=args.layers,
                         d_model=args.width, d_ff=4 * args.width, num_heads=8,
                         vocab_size=args.vocab, max_batch=args.batch,
                         max_seq_len=max(args.seq, args.steps + 1), max_beam_size=args.beam)
    weights = make_random_weights(config, seed=args.seed)

    print(f"{'engine':>7} {'total ms':>10} {'gemm':>7} {'cache':>7} {'other':>7}   counters")
    for engine in ("fused", "naive"):
        settings = BenchSettings(engine=engine, task="translate", decode="beam",
                                 batch=args.batch, seq_len=args.seq,
                                 beam_size=args.beam, max_steps=args.steps,
                                 seed=args.seed, reps=3, warmup=1)
        r = run_bench(config, weights, settings)
        p = r["proportions"]
        c = r["counters"]
        print(f"{engine:>7} {r['total_ms']:>10.1f} {p['gemm']*100:>6.1f}% "
              f"{p['cache_refresh']*100:>6.1f}% {p['other']*100:>6.1f}%   "
              f"gemm_calls={c['gemm_calls']} fused={c['fused_passes']} "
              f"naive={c['naive_passes']}")


if __name__ == "__main__":
    main()
