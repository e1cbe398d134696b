"""Checkpoint export into the LSQW engine weight format.

The converter owns the tensor-name mapping for exactly one checkpoint
layout, the one produced by :mod:`lsqw_converter.torch_model` (a plain
``{"config": ..., "state_dict": ...}`` torch file). Unknown or missing
tensors abort the export before any bytes are written; nothing ever
writes a partial file.

The LSQW writer here is an independent reimplementation of the format
from its documentation (magic ``LSQW``, u32 version 1, u64 header
length, canonical-JSON header with config / storage dtype / ordered
tensor manifest, then raw little-endian row-major payloads). Torch's
``nn.Linear`` stores ``[out, in]`` weights and computes ``x @ W.T``; the
engine stores ``[in, out]`` and computes ``x @ W``, so projection
matrices transpose on the way out.

Reference logits for cross-validation are written as an LSQR file:
magic ``LSQR``, u32 version 1, u32 n_inputs, u32 src_len, u32 tgt_len,
u32 vocab, then ``src`` int64 [n, src_len], ``tgt`` int64 [n, tgt_len],
``logits`` float32 [n, tgt_len, vocab], all little-endian row-major.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .torch_model import ConvConfig, make_seeded_model

MAGIC = b"LSQW"
VERSION = 1
REF_MAGIC = b"LSQR"
REF_VERSION = 1

_ENC_FIELDS = ["w_qkv", "b_qkv", "w_out", "b_out", "ln1_gamma", "ln1_beta",
               "w_ff1", "b_ff1", "w_ff2", "b_ff2", "ln2_gamma", "ln2_beta"]
_DEC_FIELDS = ["w_qkv", "b_qkv", "w_self_out", "b_self_out", "ln1_gamma", "ln1_beta",
               "w_cross_q", "b_cross_q", "w_cross_k", "b_cross_k", "w_cross_v", "b_cross_v",
               "w_cross_out", "b_cross_out", "ln2_gamma", "ln2_beta",
               "w_ff1", "b_ff1", "w_ff2", "b_ff2", "ln3_gamma", "ln3_beta"]


class ExportError(Exception):
    """The checkpoint cannot be mapped onto the engine layout."""


@dataclass
class ExportManifest:
    source: str
    mapping: dict[str, str]     # engine tensor name -> checkpoint key
    config: dict
    checksum: str               # sha256 of the written LSQW file

    def to_json(self) -> str:
        return json.dumps({"source": self.source, "mapping": self.mapping,
                           "config": self.config, "checksum": self.checksum},
                          sort_keys=True, indent=2)


def tensor_mapping(config: ConvConfig) -> list[tuple[str, str, bool]]:
    """(engine_name, checkpoint_key, transpose) triples in the canonical
    LSQW payload order."""
    out = [("token_embedding", "embed.weight", False)]
    if not config.tie_output:
        out.append(("output_projection", "output.weight", False))
    enc = {"w_qkv": ("qkv.weight", True), "b_qkv": ("qkv.bias", False),
           "w_out": ("out.weight", True), "b_out": ("out.bias", False),
           "ln1_gamma": ("norm1.weight", False), "ln1_beta": ("norm1.bias", False),
           "w_ff1": ("ff1.weight", True), "b_ff1": ("ff1.bias", False),
           "w_ff2": ("ff2.weight", True), "b_ff2": ("ff2.bias", False),
           "ln2_gamma": ("norm2.weight", False), "ln2_beta": ("norm2.bias", False)}
    dec = {"w_qkv": ("self_qkv.weight", True), "b_qkv": ("self_qkv.bias", False),
           "w_self_out": ("self_out.weight", True), "b_self_out": ("self_out.bias", False),
           "ln1_gamma": ("norm1.weight", False), "ln1_beta": ("norm1.bias", False),
           "w_cross_q": ("cross_q.weight", True), "b_cross_q": ("cross_q.bias", False),
           "w_cross_k": ("cross_k.weight", True), "b_cross_k": ("cross_k.bias", False),
           "w_cross_v": ("cross_v.weight", True), "b_cross_v": ("cross_v.bias", False),
           "w_cross_out": ("cross_out.weight", True), "b_cross_out": ("cross_out.bias", False),
           "ln2_gamma": ("norm2.weight", False), "ln2_beta": ("norm2.bias", False),
           "w_ff1": ("ff1.weight", True), "b_ff1": ("ff1.bias", False),
           "w_ff2": ("ff2.weight", True), "b_ff2": ("ff2.bias", False),
           "ln3_gamma": ("norm3.weight", False), "ln3_beta": ("norm3.bias", False)}
    for i in range(config.num_encoder_layers):
        for f in _ENC_FIELDS:
            key, tr = enc[f]
            out.append((f"encoder.{i}.{f}", f"encoder.{i}.{key}", tr))
    for i in range(config.num_decoder_layers):
        for f in _DEC_FIELDS:
            key, tr = dec[f]
            out.append((f"decoder.{i}.{f}", f"decoder.{i}.{key}", tr))
    return out


def _write_lsqw(path, config: ConvConfig, tensors: list[tuple[str, np.ndarray]],
                fp16: bool) -> str:
    header = {
        "config": config.to_dict(),
        "storage_dtype": "f2" if fp16 else "f4",
        "tensors": [[name, list(arr.shape)] for name, arr in tensors],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += np.uint32(VERSION).tobytes()
    out += np.uint64(len(blob)).tobytes()
    out += blob
    for _, arr in tensors:
        payload = arr.astype(np.float16) if fp16 else arr
        out += np.ascontiguousarray(payload).tobytes()
    data = bytes(out)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[ConvConfig, dict[str, torch.Tensor]]:
    ck = torch.load(path, map_location="cpu", weights_only=True)
    if not (isinstance(ck, dict) and "config" in ck and "state_dict" in ck):
        raise ExportError("checkpoint must be a dict with 'config' and 'state_dict'")
    try:
        config = ConvConfig(**ck["config"])
    except TypeError as e:
        raise ExportError(f"unsupported config layout: {e}") from None
    return config, ck["state_dict"]


def export(checkpoint_path, out_path, *, fp16_storage: bool = False) -> ExportManifest:
    """Map a checkpoint onto the engine layout and write LSQW + manifest.

    Fails before writing anything if a required tensor is missing, has the
    wrong shape, or the checkpoint carries tensors the mapping does not
    know (exotic layouts are rejected, not guessed).
    """
    config, state = load_checkpoint(checkpoint_path)
    mapping = tensor_mapping(config)

    missing = [key for _, key, _ in mapping if key not in state]
    if missing:
        raise ExportError(f"checkpoint is missing required tensors: {missing}")
    known = {key for _, key, _ in mapping}
    extra = sorted(set(state) - known)
    if extra:
        raise ExportError(f"checkpoint carries unmapped tensors: {extra}")

    tensors: list[tuple[str, np.ndarray]] = []
    for name, key, transpose in mapping:
        t = state[key].detach().cpu().to(torch.float32).numpy()
        if transpose:
            t = np.ascontiguousarray(t.T)
        if not np.isfinite(t).all():
            raise ExportError(f"{key}: non-finite values")
        tensors.append((name, t))

    checksum = _write_lsqw(out_path, config, tensors, fp16_storage)
    # identifier, not a filesystem path: keeps manifests reproducible
    manifest = ExportManifest(source=Path(checkpoint_path).name,
                              mapping={n: k for n, k, _ in mapping},
                              config=config.to_dict(), checksum=checksum)
    Path(str(out_path) + ".manifest.json").write_text(manifest.to_json() + "\n")
    return manifest


# ---------------------------------------------------------------------------
# reference logits container
# ---------------------------------------------------------------------------

def write_reference_logits(path, src: np.ndarray, tgt: np.ndarray, logits: np.ndarray):
    n, s = src.shape
    t = tgt.shape[1]
    v = logits.shape[2]
    out = bytearray()
    out += REF_MAGIC
    for x in (REF_VERSION, n, s, t, v):
        out += np.uint32(x).tobytes()
    out += src.astype("<i8").tobytes()
    out += tgt.astype("<i8").tobytes()
    out += logits.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_reference_logits(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != REF_MAGIC:
        raise ExportError(f"bad reference magic {raw[:4]!r}")
    ver, n, s, t, v = (int(x) for x in np.frombuffer(raw[4:24], "<u4"))
    if ver != REF_VERSION:
        raise ExportError(f"unsupported reference version {ver}")
    off = 24
    src = np.frombuffer(raw[off:off + n * s * 8], "<i8").reshape(n, s)
    off += n * s * 8
    tgt = np.frombuffer(raw[off:off + n * t * 8], "<i8").reshape(n, t)
    off += n * t * 8
    logits = np.frombuffer(raw[off:off + n * t * v * 4], "<f4").reshape(n, t, v)
    if off + n * t * v * 4 != len(raw):
        raise ExportError("reference file length mismatch")
    return src, tgt, logits


def make_toy_model(config: ConvConfig, seed: int, out_path, *, n_inputs: int = 4,
                   src_len: int = 6, tgt_len: int = 5,
                   fp16_storage: bool = False) -> ExportManifest:
    """Deterministic seeded checkpoint + LSQW export + reference logits.

    Writes ``<out>`` (LSQW), ``<out>.manifest.json``, ``<out>.ckpt.pt``
    (the torch checkpoint) and ``<out>.ref.lsqr`` (teacher-forced logits
    for ``n_inputs`` seeded input pairs).
    """
    model = make_seeded_model(config, seed)
    ckpt_path = str(out_path) + ".ckpt.pt"
    torch.save({"config": config.to_dict(), "state_dict": model.state_dict()}, ckpt_path)

    manifest = export(ckpt_path, out_path, fp16_storage=fp16_storage)

    rng = np.random.default_rng(seed)
    lo = min(3, config.vocab_size - 1)
    src = rng.integers(lo, config.vocab_size, size=(n_inputs, src_len))
    tgt = rng.integers(lo, config.vocab_size, size=(n_inputs, tgt_len))
    tgt[:, 0] = 1  # decoding starts from a BOS-style token
    with torch.no_grad():
        logits = model.forced_logits(torch.from_numpy(src), torch.from_numpy(tgt))
    write_reference_logits(str(out_path) + ".ref.lsqr", src, tgt,
                           logits.numpy().astype(np.float32))
    return manifest
