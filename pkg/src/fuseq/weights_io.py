"""LSQW weight file format.

Layout, all little-endian:

    bytes 0..3    magic ``LSQW``
    bytes 4..7    u32 format version (currently 1)
    bytes 8..15   u64 header length in bytes
    header        canonical JSON (sorted keys, no whitespace), utf-8:
                  {"config": {...}, "storage_dtype": "f4"|"f2",
                   "tensors": [[name, [dims...]], ...]}
    payload       raw tensor bytes in manifest order, each contiguous
                  row-major, dtype per ``storage_dtype``

``f2`` files store float16 payloads; loading widens them to float32 once,
so the compute path never touches half precision. Saving is byte-stable:
save -> load -> save reproduces the identical file.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, FormatError
from .model import ModelConfig, ModelWeights, EncoderLayerWeights, DecoderLayerWeights, _ENC_FIELDS, _DEC_FIELDS

MAGIC = b"LSQW"
VERSION = 1


def save_weights(path, config: ModelConfig, weights: ModelWeights, *, fp16: bool = False):
    weights.validate(config)
    storage = "f2" if fp16 else "f4"
    names, arrays = [], []
    for name, arr in weights.named_tensors(config):
        names.append([name, list(arr.shape)])
        arrays.append(arr)
    header = {
        "config": config.to_dict(),
        "storage_dtype": storage,
        "tensors": names,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(VERSION).tobytes())
        f.write(np.uint64(len(blob)).tobytes())
        f.write(blob)
        for arr in arrays:
            out = arr.astype(np.float16) if fp16 else arr
            f.write(np.ascontiguousarray(out).tobytes())


def load_weights(path) -> tuple[ModelConfig, ModelWeights]:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError("file too short for an LSQW header")
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version = int(np.frombuffer(raw[4:8], np.uint32)[0])
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    hlen = int(np.frombuffer(raw[8:16], np.uint64)[0])
    if 16 + hlen > len(raw):
        raise FormatError("truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unparseable header: {e}") from None
    for key in ("config", "storage_dtype", "tensors"):
        if key not in header:
            raise FormatError(f"header missing {key!r}")
    if header["storage_dtype"] not in ("f4", "f2"):
        raise FormatError(f"unknown storage dtype {header['storage_dtype']!r}")
    try:
        config = ModelConfig(**header["config"])
    except (TypeError, ConsistencyError) as e:
        raise FormatError(f"bad config in header: {e}") from None

    dtype = np.dtype("<f2") if header["storage_dtype"] == "f2" else np.dtype("<f4")
    offset = 16 + hlen
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        if not (isinstance(entry, list) and len(entry) == 2):
            raise FormatError(f"malformed tensor manifest entry {entry!r}")
        name, shape = entry[0], tuple(int(s) for s in entry[1])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw):
            raise FormatError(f"payload truncated at tensor {name!r}")
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype=dtype).reshape(shape)
        # widening cast happens here, once, at load
        tensors[name] = np.ascontiguousarray(arr, dtype=np.float32)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes after payload")

    weights = _assemble(config, tensors)
    weights.validate(config)
    return config, weights


def _assemble(config: ModelConfig, tensors: dict[str, np.ndarray]) -> ModelWeights:
    def take(name):
        if name not in tensors:
            raise ConsistencyError(f"weight file missing tensor {name!r}")
        return tensors.pop(name)

    emb = take("token_embedding")
    out_proj = None if config.tie_output else take("output_projection")
    enc = []
    for i in range(config.num_encoder_layers):
        enc.append(EncoderLayerWeights(**{f: take(f"encoder.{i}.{f}") for f in _ENC_FIELDS}))
    dec = []
    for i in range(config.num_decoder_layers):
        dec.append(DecoderLayerWeights(**{f: take(f"decoder.{i}.{f}") for f in _DEC_FIELDS}))
    if tensors:
        raise ConsistencyError(f"unexpected tensors in file: {sorted(tensors)}")
    return ModelWeights(token_embedding=emb, encoder=enc, decoder=dec,
                        output_projection=out_proj)
