"""Converter command line.

    lsqw-convert export --checkpoint ck.pt --out model.lsqw [--fp16-storage]
    lsqw-convert make-toy --out model.lsqw --seed 0 [--d-model 32 ...]
"""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, export, make_toy_model
from .torch_model import ConvConfig


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lsqw-convert")
    sub = ap.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("export", help="map a checkpoint into an LSQW file")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--out", required=True)
    ex.add_argument("--fp16-storage", action="store_true")

    mt = sub.add_parser("make-toy", help="seeded toy checkpoint + export + reference logits")
    mt.add_argument("--out", required=True)
    mt.add_argument("--seed", type=int, default=0)
    mt.add_argument("--fp16-storage", action="store_true")
    mt.add_argument("--enc-layers", type=int, default=2)
    mt.add_argument("--dec-layers", type=int, default=2)
    mt.add_argument("--d-model", type=int, default=32)
    mt.add_argument("--d-ff", type=int, default=64)
    mt.add_argument("--heads", type=int, default=4)
    mt.add_argument("--vocab", type=int, default=101)
    mt.add_argument("--max-seq-len", type=int, default=32)
    mt.add_argument("--activation", choices=["none", "relu", "gelu"], default="relu")
    mt.add_argument("--n-inputs", type=int, default=4)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            manifest = export(args.checkpoint, args.out, fp16_storage=args.fp16_storage)
            print(f"wrote {args.out} (sha256 {manifest.checksum[:12]}...), manifest alongside")
            return 0
        config = ConvConfig(num_encoder_layers=args.enc_layers,
                            num_decoder_layers=args.dec_layers,
                            d_model=args.d_model, d_ff=args.d_ff, num_heads=args.heads,
                            vocab_size=args.vocab, max_seq_len=args.max_seq_len,
                            activation=args.activation)
        manifest = make_toy_model(config, args.seed, args.out,
                                  n_inputs=args.n_inputs,
                                  fp16_storage=args.fp16_storage)
        print(f"wrote {args.out} + checkpoint + reference logits "
              f"(sha256 {manifest.checksum[:12]}...)")
        return 0
    except ExportError as e:
        print(f"export error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
