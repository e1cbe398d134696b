#!/usr/bin/env python3
"""Print the static memory plan for a model configuration: arena size,
unshared baseline, sharing ratio, and per-buffer assignments.

Usage:
    python scripts/plan_report.py [--width 512] [--full]
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from fuseq.memory_plan import build_plan
from fuseq.model import ModelConfig, plan_intermediates


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--width", type=int, default=512)
    ap.add_argument("--layers", type=int, default=6)
    ap.add_argument("--vocab", type=int, default=32000)
    ap.add_argument("--max-batch", type=int, default=8)
    ap.add_argument("--max-seq-len", type=int, default=64)
    ap.add_argument("--max-beam", type=int, default=4)
    ap.add_argument("--full", action="store_true", help="dump every assignment")
    args = ap.parse_args()

    config = ModelConfig(num_encoder_layers=args.layers, num_decoder_layers=args.layers,
                         d_model=args.width, d_ff=4 * args.width, num_heads=8,
                         vocab_size=args.vocab, max_batch=args.max_batch,
                         max_seq_len=args.max_seq_len, max_beam_size=args.max_beam)
    plan = build_plan(plan_intermediates(config))
    rep = plan.report()
    print(f"intermediates: {len(rep['assignments'])}")
    print(f"arena:         {rep['arena_bytes'] / 1e6:10.2f} MB")
    print(f"unshared:      {rep['no_share_bytes'] / 1e6:10.2f} MB")
    print(f"sharing ratio: {rep['sharing_ratio']:10.3f}")
    if args.full:
        print(json.dumps(rep, indent=2))


if __name__ == "__main__":
    main()
