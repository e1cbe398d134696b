"""Transformer encoder/decoder assembled from GEMM plus fused kernels.

Layer structure (reconstructed, post-layer-norm ordering of the original
encoder-decoder transformer): an encoder layer runs exactly six GEMMs
(packed QKV projection, attention scores, attention context, attention
output projection, and the two FFN matrices) and six fused passes, one of
each :class:`~fuseq.ops.FusedPassKind`. The attention context GEMM writes
through a strided view directly into merged [rows, d_model] layout, so no
separate head-merge pass exists on the fused path. A decoder layer adds
cross-attention (10 GEMMs, 10 fused passes); its per-step self-attention
is incremental over a ping-pong KV cache and needs no explicit causal
mask.

Positional encodings are sinusoidal and the output projection is tied to
the token embedding unless ``tie_output`` is false. Both choices are
engine defaults, not claims about any particular trained checkpoint.

Every intermediate of a max-shape request is enumerated by
:func:`plan_intermediates` with its lifetime in the static op order; the
fused path acquires all buffers from the resulting arena plan, while the
naive path mirrors eager-framework execution with fresh arrays per op.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import CapacityError, ConsistencyError, DimensionError, InputError
from .memory_plan import Arena, IntermediateSpec
from .ops import FusedPassKind
from .tensor import OpCounters, Timers, as_array, gemm, gemm_batched
from . import kernels

F32 = np.float32
I64 = np.int64


@dataclass(frozen=True)
class ModelConfig:
    num_encoder_layers: int
    num_decoder_layers: int
    d_model: int
    d_ff: int
    num_heads: int
    vocab_size: int
    max_batch: int
    max_seq_len: int
    max_beam_size: int
    activation: str = "relu"
    tie_output: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ConsistencyError(f"d_model {self.d_model} not divisible by heads {self.num_heads}")
        if self.vocab_size < 2:
            raise ConsistencyError("vocab_size must be at least 2")
        for name in ("max_batch", "max_seq_len", "max_beam_size", "num_heads",
                     "d_model", "d_ff"):
            if getattr(self, name) < 1:
                raise ConsistencyError(f"{name} must be >= 1")
        if self.num_encoder_layers < 1 or self.num_decoder_layers < 0:
            raise ConsistencyError("need >= 1 encoder layer and >= 0 decoder layers")
        if self.activation not in ("none", "relu", "gelu"):
            raise ConsistencyError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    @property
    def max_rows(self) -> int:
        return self.max_batch * self.max_beam_size

    def to_dict(self) -> dict:
        return {
            "num_encoder_layers": self.num_encoder_layers,
            "num_decoder_layers": self.num_decoder_layers,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "num_heads": self.num_heads,
            "vocab_size": self.vocab_size,
            "max_batch": self.max_batch,
            "max_seq_len": self.max_seq_len,
            "max_beam_size": self.max_beam_size,
            "activation": self.activation,
            "tie_output": self.tie_output,
            "ln_eps": self.ln_eps,
        }


@dataclass
class EncoderLayerWeights:
    w_qkv: np.ndarray      # [d, 3d]
    b_qkv: np.ndarray      # [3d]
    w_out: np.ndarray      # [d, d]
    b_out: np.ndarray      # [d]
    ln1_gamma: np.ndarray  # [d]
    ln1_beta: np.ndarray
    w_ff1: np.ndarray      # [d, d_ff]
    b_ff1: np.ndarray
    w_ff2: np.ndarray      # [d_ff, d]
    b_ff2: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray


@dataclass
class DecoderLayerWeights:
    w_qkv: np.ndarray
    b_qkv: np.ndarray
    w_self_out: np.ndarray
    b_self_out: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    w_cross_q: np.ndarray  # [d, d]
    b_cross_q: np.ndarray
    w_cross_k: np.ndarray
    b_cross_k: np.ndarray
    w_cross_v: np.ndarray
    b_cross_v: np.ndarray
    w_cross_out: np.ndarray
    b_cross_out: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray
    ln3_gamma: np.ndarray
    ln3_beta: np.ndarray


_ENC_FIELDS = ["w_qkv", "b_qkv", "w_out", "b_out", "ln1_gamma", "ln1_beta",
               "w_ff1", "b_ff1", "w_ff2", "b_ff2", "ln2_gamma", "ln2_beta"]
_DEC_FIELDS = ["w_qkv", "b_qkv", "w_self_out", "b_self_out", "ln1_gamma", "ln1_beta",
               "w_cross_q", "b_cross_q", "w_cross_k", "b_cross_k", "w_cross_v", "b_cross_v",
               "w_cross_out", "b_cross_out", "ln2_gamma", "ln2_beta",
               "w_ff1", "b_ff1", "w_ff2", "b_ff2", "ln3_gamma", "ln3_beta"]


@dataclass
class ModelWeights:
    token_embedding: np.ndarray            # [vocab, d]
    encoder: list[EncoderLayerWeights]
    decoder: list[DecoderLayerWeights]
    output_projection: np.ndarray | None = None  # [vocab, d] when untied

    def named_tensors(self, config: ModelConfig):
        """Canonical (name, array) order; the weight file payload order."""
        yield "token_embedding", self.token_embedding
        if not config.tie_output:
            yield "output_projection", self.output_projection
        for i, lw in enumerate(self.encoder):
            for f in _ENC_FIELDS:
                yield f"encoder.{i}.{f}", getattr(lw, f)
        for i, lw in enumerate(self.decoder):
            for f in _DEC_FIELDS:
                yield f"decoder.{i}.{f}", getattr(lw, f)

    def expected_shapes(self, config: ModelConfig) -> dict[str, tuple[int, ...]]:
        d, ff, v = config.d_model, config.d_ff, config.vocab_size
        shapes: dict[str, tuple[int, ...]] = {"token_embedding": (v, d)}
        if not config.tie_output:
            shapes["output_projection"] = (v, d)
        enc = {"w_qkv": (d, 3 * d), "b_qkv": (3 * d,), "w_out": (d, d), "b_out": (d,),
               "ln1_gamma": (d,), "ln1_beta": (d,), "w_ff1": (d, ff), "b_ff1": (ff,),
               "w_ff2": (ff, d), "b_ff2": (d,), "ln2_gamma": (d,), "ln2_beta": (d,)}
        dec = {"w_qkv": (d, 3 * d), "b_qkv": (3 * d,), "w_self_out": (d, d), "b_self_out": (d,),
               "ln1_gamma": (d,), "ln1_beta": (d,),
               "w_cross_q": (d, d), "b_cross_q": (d,), "w_cross_k": (d, d), "b_cross_k": (d,),
               "w_cross_v": (d, d), "b_cross_v": (d,), "w_cross_out": (d, d), "b_cross_out": (d,),
               "ln2_gamma": (d,), "ln2_beta": (d,),
               "w_ff1": (d, ff), "b_ff1": (ff,), "w_ff2": (ff, d), "b_ff2": (d,),
               "ln3_gamma": (d,), "ln3_beta": (d,)}
        for i in range(config.num_encoder_layers):
            for f, s in enc.items():
                shapes[f"encoder.{i}.{f}"] = s
        for i in range(config.num_decoder_layers):
            for f, s in dec.items():
                shapes[f"decoder.{i}.{f}"] = s
        return shapes

    def validate(self, config: ModelConfig):
        if len(self.encoder) != config.num_encoder_layers:
            raise ConsistencyError(f"{len(self.encoder)} encoder layers, config says "
                                   f"{config.num_encoder_layers}")
        if len(self.decoder) != config.num_decoder_layers:
            raise ConsistencyError(f"{len(self.decoder)} decoder layers, config says "
                                   f"{config.num_decoder_layers}")
        if config.tie_output and self.output_projection is not None:
            raise ConsistencyError("tie_output set but a separate output projection is present")
        if not config.tie_output and self.output_projection is None:
            raise ConsistencyError("untied config requires an output projection")
        expected = self.expected_shapes(config)
        for name, arr in self.named_tensors(config):
            want = expected[name]
            if arr.shape != want:
                raise ConsistencyError(f"{name}: shape {arr.shape}, expected {want}")
            if arr.dtype != np.float32:
                raise ConsistencyError(f"{name}: dtype {arr.dtype}, engine computes in float32")
            if not np.isfinite(arr).all():
                raise ConsistencyError(f"{name}: contains non-finite values")

    def output_matrix(self, config: ModelConfig) -> np.ndarray:
        return self.token_embedding if config.tie_output else self.output_projection


def make_random_weights(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """Seeded random initialization for benchmarks and tests."""
    rng = np.random.default_rng(seed)

    def mat(m, n):
        std = math.sqrt(2.0 / (m + n))
        return rng.normal(0.0, std, size=(m, n)).astype(F32)

    def vec(n, std=0.02):
        return rng.normal(0.0, std, size=n).astype(F32)

    d, ff = config.d_model, config.d_ff

    def enc_layer():
        return EncoderLayerWeights(
            w_qkv=mat(d, 3 * d), b_qkv=vec(3 * d),
            w_out=mat(d, d), b_out=vec(d),
            ln1_gamma=np.ones(d, F32), ln1_beta=np.zeros(d, F32),
            w_ff1=mat(d, ff), b_ff1=vec(ff),
            w_ff2=mat(ff, d), b_ff2=vec(d),
            ln2_gamma=np.ones(d, F32), ln2_beta=np.zeros(d, F32),
        )

    def dec_layer():
        return DecoderLayerWeights(
            w_qkv=mat(d, 3 * d), b_qkv=vec(3 * d),
            w_self_out=mat(d, d), b_self_out=vec(d),
            ln1_gamma=np.ones(d, F32), ln1_beta=np.zeros(d, F32),
            w_cross_q=mat(d, d), b_cross_q=vec(d),
            w_cross_k=mat(d, d), b_cross_k=vec(d),
            w_cross_v=mat(d, d), b_cross_v=vec(d),
            w_cross_out=mat(d, d), b_cross_out=vec(d),
            ln2_gamma=np.ones(d, F32), ln2_beta=np.zeros(d, F32),
            w_ff1=mat(d, ff), b_ff1=vec(ff),
            w_ff2=mat(ff, d), b_ff2=vec(d),
            ln3_gamma=np.ones(d, F32), ln3_beta=np.zeros(d, F32),
        )

    emb = rng.normal(0.0, 1.0 / math.sqrt(d), size=(config.vocab_size, d)).astype(F32)
    out_proj = None if config.tie_output else \
        rng.normal(0.0, 1.0 / math.sqrt(d), size=(config.vocab_size, d)).astype(F32)
    return ModelWeights(
        token_embedding=emb,
        encoder=[enc_layer() for _ in range(config.num_encoder_layers)],
        decoder=[dec_layer() for _ in range(config.num_decoder_layers)],
        output_projection=out_proj,
    )


def sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx = np.arange(0, d, 2, dtype=np.float64)[None, :]
    ang = pos / np.power(10000.0, idx / d)
    pe = np.zeros((max_len, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, : d // 2])
    return pe.astype(F32)


def lengths_mask(lengths, seq: int) -> np.ndarray:
    """[batch, seq] additive mask: 0 for valid positions, -inf for padding."""
    lengths = np.asarray(lengths, dtype=I64)
    m = np.zeros((lengths.shape[0], seq), dtype=F32)
    m[np.arange(seq)[None, :] >= lengths[:, None]] = -np.inf
    return m


# ---------------------------------------------------------------------------
# buffer providers
# ---------------------------------------------------------------------------

class HeapBuffers:
    """Fresh numpy allocations; used for standalone op calls and tests."""

    def get(self, name: str, shape, dtype=np.float32) -> np.ndarray:
        return np.empty(shape, dtype=dtype)


class ArenaBuffers:
    """Views into a planned arena; the zero-allocation inference path."""

    def __init__(self, arena: Arena):
        self.arena = arena

    def get(self, name: str, shape, dtype=np.float32) -> np.ndarray:
        return self.arena.acquire(name, shape, dtype).data


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def encoder_layer_forward(x, layer: EncoderLayerWeights, config: ModelConfig,
                          mask=None, batch: int = 1, *, prefix: str = "enc.l0",
                          buffers=None, counters: OpCounters | None = None,
                          timers: Timers | None = None) -> np.ndarray:
    """One fused encoder layer: 6 GEMMs + 6 fused passes, exactly."""
    X = as_array(x)
    n, d = X.shape
    if n % batch:
        raise DimensionError(f"{n} rows not divisible by batch {batch}")
    seq = n // batch
    if batch > config.max_batch or seq > config.max_seq_len:
        raise CapacityError(f"batch {batch} x seq {seq} exceeds configured maxima")
    h, hd = config.num_heads, config.head_dim
    bufs = buffers if buffers is not None else HeapBuffers()

    qkv = bufs.get(f"{prefix}.qkv", (n, 3 * d))
    gemm(X, layer.w_qkv, qkv, counters=counters, timers=timers)
    q4 = bufs.get(f"{prefix}.q", (batch, h, seq, hd))
    k4 = bufs.get(f"{prefix}.k", (batch, h, seq, hd))
    v4 = bufs.get(f"{prefix}.v", (batch, h, seq, hd))
    ops.fused_qkv_bias_reshape(qkv, layer.b_qkv, batch, seq, h, q4, k4, v4,
                               counters=counters)

    scores = bufs.get(f"{prefix}.scores", (batch, h, seq, seq))
    gemm_batched(q4, k4, scores, transpose_b=True, counters=counters, timers=timers)
    ops.fused_attention_softmax(scores, 1.0 / math.sqrt(hd), mask, out=scores,
                                counters=counters)

    ctx = bufs.get(f"{prefix}.ctx", (n, d))
    ctx4 = ctx.reshape(batch, seq, h, hd).transpose(0, 2, 1, 3)
    gemm_batched(scores, v4, ctx4, counters=counters, timers=timers)

    attn = bufs.get(f"{prefix}.attn_out", (n, d))
    gemm(ctx, layer.w_out, attn, counters=counters, timers=timers)
    res1 = bufs.get(f"{prefix}.res1", (n, d))
    ops.fused_bias_residual_activation(attn, layer.b_out, residual=X, activation="none",
                                       out=res1, counters=counters,
                                       kind=FusedPassKind.ATTN_OUTPUT_BIAS_RESIDUAL.value)
    norm1 = bufs.get(f"{prefix}.norm1", (n, d))
    ops.fused_layer_norm(res1, layer.ln1_gamma, layer.ln1_beta, config.ln_eps, out=norm1,
                         counters=counters)

    ffn_h = bufs.get(f"{prefix}.ffn_h", (n, config.d_ff))
    gemm(norm1, layer.w_ff1, ffn_h, counters=counters, timers=timers)
    ops.fused_bias_residual_activation(ffn_h, layer.b_ff1, None, config.activation,
                                       out=ffn_h, counters=counters,
                                       kind=FusedPassKind.FFN_BIAS_ACTIVATION.value)
    ffn_out = bufs.get(f"{prefix}.ffn_out", (n, d))
    gemm(ffn_h, layer.w_ff2, ffn_out, counters=counters, timers=timers)

    out = bufs.get(f"{prefix}.out", (n, d))
    ops.fused_bias_residual_layer_norm(ffn_out, layer.b_ff2, norm1,
                                       layer.ln2_gamma, layer.ln2_beta, config.ln_eps,
                                       out=out, counters=counters)
    return out


def naive_encoder_layer_forward(x, layer: EncoderLayerWeights, config: ModelConfig,
                                mask=None, batch: int = 1, *,
                                counters: OpCounters | None = None,
                                timers: Timers | None = None) -> np.ndarray:
    """Framework-style encoder layer: same 6 GEMMs, 27 separate passes
    (26 without a mask), every result a fresh array."""
    X = as_array(x)
    n, d = X.shape
    seq = n // batch
    h, hd = config.num_heads, config.head_dim

    qkv = np.empty((n, 3 * d), F32)
    gemm(X, layer.w_qkv, qkv, counters=counters, timers=timers)
    q4, k4, v4 = ops.naive_qkv_bias_reshape(qkv, layer.b_qkv, batch, seq, h,
                                            counters=counters)
    scores = np.empty((batch, h, seq, seq), F32)
    gemm_batched(q4.data, k4.data, scores, transpose_b=True, counters=counters, timers=timers)
    probs = ops.naive_attention_softmax(scores, 1.0 / math.sqrt(hd), mask, counters=counters)
    ctx4 = np.empty((batch, h, seq, hd), F32)
    gemm_batched(probs.data, v4.data, ctx4, counters=counters, timers=timers)
    ctx = ops.naive_merge_heads(ctx4, counters=counters)
    attn = np.empty((n, d), F32)
    gemm(ctx.data, layer.w_out, attn, counters=counters, timers=timers)
    res1 = ops.naive_bias_residual_activation(attn, layer.b_out, residual=X,
                                              activation="none", counters=counters)
    norm1 = ops.naive_layer_norm(res1, layer.ln1_gamma, layer.ln1_beta, config.ln_eps,
                                 counters=counters)
    ffn_h = np.empty((n, config.d_ff), F32)
    gemm(norm1.data, layer.w_ff1, ffn_h, counters=counters, timers=timers)
    act = ops.naive_bias_residual_activation(ffn_h, layer.b_ff1, None, config.activation,
                                             counters=counters)
    ffn_out = np.empty((n, d), F32)
    gemm(act.data, layer.w_ff2, ffn_out, counters=counters, timers=timers)
    out = ops.naive_bias_residual_layer_norm(ffn_out, layer.b_ff2, norm1,
                                             layer.ln2_gamma, layer.ln2_beta,
                                             config.ln_eps, counters=counters)
    return out.data


def _check_tokens(tokens: np.ndarray, config: ModelConfig):
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise InputError(f"token id out of range [0, {config.vocab_size})")


def encode(tokens, weights: ModelWeights, config: ModelConfig, lengths=None, *,
           engine: str = "fused", buffers=None, positions=None,
           counters: OpCounters | None = None, timers: Timers | None = None) -> np.ndarray:
    """Stacked encoder over embedded + positional inputs.

    Returns the encoder memory, [batch*seq, d_model].
    """
    T = np.asarray(tokens, dtype=I64)
    if T.ndim != 2:
        raise InputError(f"tokens must be [batch, seq], got {T.shape}")
    batch, seq = T.shape
    if batch > config.max_batch or seq > config.max_seq_len:
        raise CapacityError(f"batch {batch} x seq {seq} exceeds configured maxima")
    _check_tokens(T, config)
    pos = positions if positions is not None else sinusoidal_positions(config.max_seq_len, config.d_model)
    mask = None
    if lengths is not None:
        mask = lengths_mask(lengths, seq)
    scale = math.sqrt(config.d_model)

    if engine == "fused":
        bufs = buffers if buffers is not None else HeapBuffers()
        x = bufs.get("enc.x", (batch * seq, config.d_model))
        ops.fused_embed(T.reshape(-1), weights.token_embedding, scale, pos, 0, seq,
                        out=x, counters=counters)
        if mask is not None:
            m = bufs.get("enc.mask", (batch, seq))
            m[:] = mask
            mask = m
        for i, lw in enumerate(weights.encoder):
            x = encoder_layer_forward(x, lw, config, mask, batch, prefix=f"enc.l{i}",
                                      buffers=bufs, counters=counters, timers=timers)
        return x
    x = ops.naive_embed(T.reshape(-1), weights.token_embedding, scale, pos, 0, seq,
                        counters=counters).data
    for lw in weights.encoder:
        x = naive_encoder_layer_forward(x, lw, config, mask, batch,
                                        counters=counters, timers=timers)
    return x


# ---------------------------------------------------------------------------
# decoder with KV cache
# ---------------------------------------------------------------------------

class KVCache:
    """Per-layer self-attention K/V at max sequence length, ping-pong
    buffered so a beam-reorder gather never reads and writes the same
    storage. ``current_len`` grows by exactly one per decode step."""

    def __init__(self, config: ModelConfig, rows: int, buffers, prefix: str = "dec.cache"):
        if rows > config.max_rows:
            raise CapacityError(f"{rows} rows exceed max batch*beam {config.max_rows}")
        h, hd, s = config.num_heads, config.head_dim, config.max_seq_len
        self.max_seq_len = s
        self.current_len = 0
        self.slot = 0
        self._k = []
        self._v = []
        for layer in range(config.num_decoder_layers):
            self._k.append((buffers.get(f"{prefix}.l{layer}.k0", (rows, h, s, hd)),
                            buffers.get(f"{prefix}.l{layer}.k1", (rows, h, s, hd))))
            self._v.append((buffers.get(f"{prefix}.l{layer}.v0", (rows, h, s, hd)),
                            buffers.get(f"{prefix}.l{layer}.v1", (rows, h, s, hd))))
        self._pending_gather = False
        self._parents: np.ndarray | None = None

    def k(self, layer: int) -> np.ndarray:
        return self._k[layer][self.slot ^ 1 if self._pending_gather else self.slot]

    def v(self, layer: int) -> np.ndarray:
        return self._v[layer][self.slot ^ 1 if self._pending_gather else self.slot]

    def begin_step(self, parents=None):
        if self.current_len >= self.max_seq_len:
            raise CapacityError(f"KV cache full at {self.current_len} positions")
        if parents is not None:
            p = np.asarray(parents, dtype=I64)
            if not np.array_equal(p, np.arange(p.shape[0])):
                self._parents = p
                self._pending_gather = True
                return
        self._parents = None
        self._pending_gather = False

    def write(self, layer: int, new_k, new_v, timers: Timers | None = None):
        """Cache refresh: append this step's K/V (gathering parent rows
        first when the beams were reordered)."""
        t0 = time.perf_counter()
        nk, nv = as_array(new_k), as_array(new_v)
        if self._pending_gather:
            src_k, dst_k = self._k[layer][self.slot], self._k[layer][self.slot ^ 1]
            src_v, dst_v = self._v[layer][self.slot], self._v[layer][self.slot ^ 1]
            kernels.kv_gather_append_kernel(src_k, src_v, nk, nv, self._parents,
                                            self.current_len, dst_k, dst_v)
        else:
            kernels.kv_append_kernel(nk, nv, self.current_len,
                                     self._k[layer][self.slot], self._v[layer][self.slot])
        if timers is not None:
            timers.add("cache_refresh", time.perf_counter() - t0)

    def end_step(self):
        if self._pending_gather:
            self.slot ^= 1
            self._pending_gather = False
        self.current_len += 1


def build_cross_kv(memory, weights: ModelWeights, config: ModelConfig, batch: int, seq: int,
                   *, buffers=None, counters=None, timers=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Project encoder memory into per-layer cross-attention K/V once per
    request (whole-request lifetime)."""
    bufs = buffers if buffers is not None else HeapBuffers()
    h = config.num_heads
    out = []
    for i, lw in enumerate(weights.decoder):
        ck_lin = bufs.get(f"dec.l{i}.ck_lin", (batch * seq, config.d_model))
        gemm(memory, lw.w_cross_k, ck_lin, counters=counters, timers=timers)
        ck4 = bufs.get(f"dec.l{i}.ck", (batch, h, seq, config.head_dim))
        ops.fused_bias_reshape_heads(ck_lin, lw.b_cross_k, batch, seq, h, out=ck4,
                                     counters=counters)
        cv_lin = bufs.get(f"dec.l{i}.cv_lin", (batch * seq, config.d_model))
        gemm(memory, lw.w_cross_v, cv_lin, counters=counters, timers=timers)
        cv4 = bufs.get(f"dec.l{i}.cv", (batch, h, seq, config.head_dim))
        ops.fused_bias_reshape_heads(cv_lin, lw.b_cross_v, batch, seq, h, out=cv4,
                                     counters=counters)
        out.append((ck4, cv4))
    return out


def decode_step(last_tokens, cache: KVCache, cross_kv, enc_mask, weights: ModelWeights,
                config: ModelConfig, batch: int, beam: int, *, parents=None,
                buffers=None, positions=None, counters: OpCounters | None = None,
                timers: Timers | None = None) -> np.ndarray:
    """One incremental decoder step over all batch*beam rows.

    Only the new position's K/V are computed; the cache is extended by one
    position (reordered by ``parents`` first when given). Returns
    next-token logits [batch*beam, vocab].
    """
    T = np.asarray(last_tokens, dtype=I64)
    rows = T.shape[0]
    if rows != batch * beam:
        raise DimensionError(f"{rows} rows != batch {batch} x beam {beam}")
    _check_tokens(T, config)
    bufs = buffers if buffers is not None else HeapBuffers()
    pos = positions if positions is not None else sinusoidal_positions(config.max_seq_len, config.d_model)
    h, hd, d = config.num_heads, config.head_dim, config.d_model
    enc_seq = cross_kv[0][0].shape[2] if cross_kv else 0

    cache.begin_step(parents)
    x = bufs.get("dec.x", (rows, d))
    ops.fused_embed(T, weights.token_embedding, math.sqrt(d), pos, cache.current_len, 1,
                    out=x, counters=counters)

    for i, lw in enumerate(weights.decoder):
        # self attention, incremental (causality is implicit in the cache)
        sqkv = bufs.get(f"dec.l{i}.sqkv", (rows, 3 * d))
        gemm(x, lw.w_qkv, sqkv, counters=counters, timers=timers)
        q4 = bufs.get(f"dec.l{i}.q", (rows, h, 1, hd))
        kn = bufs.get(f"dec.l{i}.k_new", (rows, h, 1, hd))
        vn = bufs.get(f"dec.l{i}.v_new", (rows, h, 1, hd))
        ops.fused_qkv_bias_reshape(sqkv, lw.b_qkv, rows, 1, h, q4, kn, vn, counters=counters)
        cache.write(i, kn, vn, timers=timers)
        cur = cache.current_len + 1
        kc = cache.k(i)[:, :, :cur]
        vc = cache.v(i)[:, :, :cur]
        sscores = bufs.get(f"dec.l{i}.sscores", (rows, h, 1, config.max_seq_len))[:, :, :, :cur]
        gemm_batched(q4, kc, sscores, transpose_b=True, counters=counters, timers=timers)
        ops.fused_attention_softmax(sscores, 1.0 / math.sqrt(hd), None, out=sscores,
                                    counters=counters)
        sctx = bufs.get(f"dec.l{i}.sctx", (rows, d))
        sctx4 = sctx.reshape(rows, 1, h, hd).transpose(0, 2, 1, 3)
        gemm_batched(sscores, vc, sctx4, counters=counters, timers=timers)
        sattn = bufs.get(f"dec.l{i}.sattn", (rows, d))
        gemm(sctx, lw.w_self_out, sattn, counters=counters, timers=timers)
        sres = bufs.get(f"dec.l{i}.sres", (rows, d))
        ops.fused_bias_residual_activation(sattn, lw.b_self_out, x, "none", out=sres,
                                           counters=counters,
                                           kind=FusedPassKind.ATTN_OUTPUT_BIAS_RESIDUAL.value)
        snorm = bufs.get(f"dec.l{i}.snorm", (rows, d))
        ops.fused_layer_norm(sres, lw.ln1_gamma, lw.ln1_beta, config.ln_eps, out=snorm,
                             counters=counters)

        # cross attention over the encoder memory
        cq = bufs.get(f"dec.l{i}.cq", (rows, d))
        gemm(snorm, lw.w_cross_q, cq, counters=counters, timers=timers)
        cq4 = bufs.get(f"dec.l{i}.cq4", (batch, h, beam, hd))
        ops.fused_bias_reshape_heads(cq, lw.b_cross_q, batch, beam, h, out=cq4,
                                     counters=counters)
        cscores = bufs.get(f"dec.l{i}.cscores", (batch, h, beam, enc_seq))
        gemm_batched(cq4, cross_kv[i][0], cscores, transpose_b=True, counters=counters,
                     timers=timers)
        ops.fused_attention_softmax(cscores, 1.0 / math.sqrt(hd), enc_mask, out=cscores,
                                    counters=counters)
        cctx = bufs.get(f"dec.l{i}.cctx", (rows, d))
        cctx4 = cctx.reshape(batch, beam, h, hd).transpose(0, 2, 1, 3)
        gemm_batched(cscores, cross_kv[i][1], cctx4, counters=counters, timers=timers)
        cattn = bufs.get(f"dec.l{i}.cattn", (rows, d))
        gemm(cctx, lw.w_cross_out, cattn, counters=counters, timers=timers)
        cres = bufs.get(f"dec.l{i}.cres", (rows, d))
        ops.fused_bias_residual_activation(cattn, lw.b_cross_out, snorm, "none", out=cres,
                                           counters=counters,
                                           kind=FusedPassKind.ATTN_OUTPUT_BIAS_RESIDUAL.value)
        cnorm = bufs.get(f"dec.l{i}.cnorm", (rows, d))
        ops.fused_layer_norm(cres, lw.ln2_gamma, lw.ln2_beta, config.ln_eps, out=cnorm,
                             counters=counters)

        ffn_h = bufs.get(f"dec.l{i}.ffn_h", (rows, config.d_ff))
        gemm(cnorm, lw.w_ff1, ffn_h, counters=counters, timers=timers)
        ops.fused_bias_residual_activation(ffn_h, lw.b_ff1, None, config.activation,
                                           out=ffn_h, counters=counters,
                                           kind=FusedPassKind.FFN_BIAS_ACTIVATION.value)
        ffn_out = bufs.get(f"dec.l{i}.ffn_out", (rows, d))
        gemm(ffn_h, lw.w_ff2, ffn_out, counters=counters, timers=timers)
        x = bufs.get(f"dec.l{i}.out", (rows, d))
        ops.fused_bias_residual_layer_norm(ffn_out, lw.b_ff2, cnorm, lw.ln3_gamma,
                                           lw.ln3_beta, config.ln_eps, out=x,
                                           counters=counters)

    logits = bufs.get("dec.logits", (rows, config.vocab_size))
    gemm(x, weights.output_matrix(config), logits, transpose_b=True,
         counters=counters, timers=timers)
    cache.end_step()
    return logits


# ---------------------------------------------------------------------------
# naive decoder (framework-style: fresh arrays, concat-grown caches)
# ---------------------------------------------------------------------------

class NaiveKVCache:
    """Eager-framework cache idiom: concatenate a fresh, larger cache every
    step; gather rows with fancy indexing on reorder."""

    def __init__(self, num_layers: int):
        self._k: list[np.ndarray | None] = [None] * num_layers
        self._v: list[np.ndarray | None] = [None] * num_layers
        self.current_len = 0

    def reorder(self, parents, timers: Timers | None = None):
        t0 = time.perf_counter()
        p = np.asarray(parents, dtype=I64)
        if not np.array_equal(p, np.arange(p.shape[0])):
            for i in range(len(self._k)):
                if self._k[i] is not None:
                    self._k[i] = self._k[i][p]
                    self._v[i] = self._v[i][p]
        if timers is not None:
            timers.add("cache_refresh", time.perf_counter() - t0)

    def append(self, layer: int, new_k: np.ndarray, new_v: np.ndarray,
               timers: Timers | None = None):
        t0 = time.perf_counter()
        if self._k[layer] is None:
            self._k[layer] = new_k.copy()
            self._v[layer] = new_v.copy()
        else:
            self._k[layer] = np.concatenate([self._k[layer], new_k], axis=2)
            self._v[layer] = np.concatenate([self._v[layer], new_v], axis=2)
        if timers is not None:
            timers.add("cache_refresh", time.perf_counter() - t0)

    def k(self, layer: int) -> np.ndarray:
        return self._k[layer]

    def v(self, layer: int) -> np.ndarray:
        return self._v[layer]


def naive_decode_step(last_tokens, cache: NaiveKVCache, cross_kv, enc_mask,
                      weights: ModelWeights, config: ModelConfig, batch: int, beam: int, *,
                      parents=None, positions=None, counters: OpCounters | None = None,
                      timers: Timers | None = None) -> np.ndarray:
    T = np.asarray(last_tokens, dtype=I64)
    rows = T.shape[0]
    _check_tokens(T, config)
    pos = positions if positions is not None else sinusoidal_positions(config.max_seq_len, config.d_model)
    h, hd, d = config.num_heads, config.head_dim, config.d_model
    if cache.current_len >= config.max_seq_len:
        raise CapacityError(f"KV cache full at {cache.current_len} positions")
    if parents is not None:
        cache.reorder(parents, timers)

    x = ops.naive_embed(T, weights.token_embedding, math.sqrt(d), pos,
                        cache.current_len, 1, counters=counters).data
    for i, lw in enumerate(weights.decoder):
        sqkv = np.empty((rows, 3 * d), F32)
        gemm(x, lw.w_qkv, sqkv, counters=counters, timers=timers)
        q4, kn, vn = ops.naive_qkv_bias_reshape(sqkv, lw.b_qkv, rows, 1, h, counters=counters)
        cache.append(i, kn.data, vn.data, timers)
        kc, vc = cache.k(i), cache.v(i)
        cur = kc.shape[2]
        sscores = np.empty((rows, h, 1, cur), F32)
        gemm_batched(q4.data, kc, sscores, transpose_b=True, counters=counters, timers=timers)
        sprobs = ops.naive_attention_softmax(sscores, 1.0 / math.sqrt(hd), None,
                                             counters=counters)
        sctx4 = np.empty((rows, h, 1, hd), F32)
        gemm_batched(sprobs.data, vc, sctx4, counters=counters, timers=timers)
        sctx = ops.naive_merge_heads(sctx4, counters=counters)
        sattn = np.empty((rows, d), F32)
        gemm(sctx.data, lw.w_self_out, sattn, counters=counters, timers=timers)
        sres = ops.naive_bias_residual_activation(sattn, lw.b_self_out, x, "none",
                                                  counters=counters)
        snorm = ops.naive_layer_norm(sres, lw.ln1_gamma, lw.ln1_beta, config.ln_eps,
                                     counters=counters).data

        cq = np.empty((rows, d), F32)
        gemm(snorm, lw.w_cross_q, cq, counters=counters, timers=timers)
        cq4 = ops.naive_bias_reshape_heads(cq, lw.b_cross_q, batch, beam, h,
                                           counters=counters)
        enc_seq = cross_kv[i][0].shape[2]
        cscores = np.empty((batch, h, beam, enc_seq), F32)
        gemm_batched(cq4.data, cross_kv[i][0], cscores, transpose_b=True,
                     counters=counters, timers=timers)
        cprobs = ops.naive_attention_softmax(cscores, 1.0 / math.sqrt(hd), enc_mask,
                                             counters=counters)
        cctx4 = np.empty((batch, h, beam, hd), F32)
        gemm_batched(cprobs.data, cross_kv[i][1], cctx4, counters=counters, timers=timers)
        cctx = ops.naive_merge_heads(cctx4, counters=counters)
        cattn = np.empty((rows, d), F32)
        gemm(cctx.data, lw.w_cross_out, cattn, counters=counters, timers=timers)
        cres = ops.naive_bias_residual_activation(cattn, lw.b_cross_out, snorm, "none",
                                                  counters=counters)
        cnorm = ops.naive_layer_norm(cres, lw.ln2_gamma, lw.ln2_beta, config.ln_eps,
                                     counters=counters).data

        ffn_h = np.empty((rows, config.d_ff), F32)
        gemm(cnorm, lw.w_ff1, ffn_h, counters=counters, timers=timers)
        act = ops.naive_bias_residual_activation(ffn_h, lw.b_ff1, None, config.activation,
                                                 counters=counters)
        ffn_out = np.empty((rows, d), F32)
        gemm(act.data, lw.w_ff2, ffn_out, counters=counters, timers=timers)
        x = ops.naive_bias_residual_layer_norm(ffn_out, lw.b_ff2, cnorm, lw.ln3_gamma,
                                               lw.ln3_beta, config.ln_eps,
                                               counters=counters).data

    logits = np.empty((rows, config.vocab_size), F32)
    gemm(x, weights.output_matrix(config), logits, transpose_b=True,
         counters=counters, timers=timers)
    cache.current_len += 1
    return logits


def naive_build_cross_kv(memory, weights: ModelWeights, config: ModelConfig,
                         batch: int, seq: int, *, counters=None, timers=None):
    h = config.num_heads
    out = []
    for lw in weights.decoder:
        ck_lin = np.empty((batch * seq, config.d_model), F32)
        gemm(memory, lw.w_cross_k, ck_lin, counters=counters, timers=timers)
        ck4 = ops.naive_bias_reshape_heads(ck_lin, lw.b_cross_k, batch, seq, h,
                                           counters=counters)
        cv_lin = np.empty((batch * seq, config.d_model), F32)
        gemm(memory, lw.w_cross_v, cv_lin, counters=counters, timers=timers)
        cv4 = ops.naive_bias_reshape_heads(cv_lin, lw.b_cross_v, batch, seq, h,
                                           counters=counters)
        out.append((ck4.data, cv4.data))
    return out


# ---------------------------------------------------------------------------
# static intermediate enumeration for the memory plan
# ---------------------------------------------------------------------------

def plan_intermediates(config: ModelConfig) -> list[IntermediateSpec]:
    """Every intermediate of one max-shape request with its lifetime in the
    static op order: embed, encoder layers, cross-K/V setup, one decode
    step (steps reuse the same buffers each iteration), output logits and
    retrieve buffers. Whole-request buffers (mask, encoder memory, cross
    K/V, the KV cache ping-pong pair) extend to the terminal step and are
    therefore never shared."""
    B, S = config.max_batch, config.max_seq_len
    R = config.max_rows
    d, ff, h, hd, V = config.d_model, config.d_ff, config.num_heads, config.head_dim, config.vocab_size
    L, D = config.num_encoder_layers, config.num_decoder_layers
    f4 = 4
    specs: list[IntermediateSpec] = []

    def add(name, elems, first, last):
        # sizes rounded to the alignment quantum so first-fit never pads
        nbytes = (int(elems) * f4 + 63) // 64 * 64
        specs.append(IntermediateSpec(name, nbytes, first, last))

    enc_base = 1
    setup_base = enc_base + 12 * L
    dec_base = setup_base + 4 * D
    logits_step = dec_base + 1 + 21 * D
    retrieve_step = logits_step + 1
    end = retrieve_step + 1

    add("enc.mask", B * S, 0, end)
    # enc.x feeds layer 0's QKV GEMM and its attention residual
    add("enc.x", B * S * d, 0, enc_base + 6)
    for i in range(L):
        base = enc_base + 12 * i
        add(f"enc.l{i}.qkv", B * S * 3 * d, base, base + 1)
        add(f"enc.l{i}.q", B * S * d, base + 1, base + 2)
        add(f"enc.l{i}.k", B * S * d, base + 1, base + 2)
        add(f"enc.l{i}.v", B * S * d, base + 1, base + 4)
        add(f"enc.l{i}.scores", B * h * S * S, base + 2, base + 4)
        add(f"enc.l{i}.ctx", B * S * d, base + 4, base + 5)
        add(f"enc.l{i}.attn_out", B * S * d, base + 5, base + 6)
        add(f"enc.l{i}.res1", B * S * d, base + 6, base + 7)
        add(f"enc.l{i}.norm1", B * S * d, base + 7, base + 11)
        add(f"enc.l{i}.ffn_h", B * S * ff, base + 8, base + 10)
        add(f"enc.l{i}.ffn_out", B * S * d, base + 10, base + 11)
        # the layer output is read by the next layer's QKV GEMM and its
        # residual pass; the last layer's output is the encoder memory
        last = end if i == L - 1 else base + 12 + 6
        add(f"enc.l{i}.out", B * S * d, base + 11, last)

    for i in range(D):
        base = setup_base + 4 * i
        add(f"dec.l{i}.ck_lin", B * S * d, base, base + 1)
        add(f"dec.l{i}.ck", B * S * d, base + 1, end)
        add(f"dec.l{i}.cv_lin", B * S * d, base + 2, base + 3)
        add(f"dec.l{i}.cv", B * S * d, base + 3, end)
        for nm in ("k0", "k1", "v0", "v1"):
            add(f"dec.cache.l{i}.{nm}", R * S * d, base, end)

    add("dec.x", R * d, dec_base, dec_base + 1 + 7)
    for i in range(D):
        lb = dec_base + 1 + 21 * i
        add(f"dec.l{i}.sqkv", R * 3 * d, lb, lb + 1)
        add(f"dec.l{i}.q", R * d, lb + 1, lb + 3)
        add(f"dec.l{i}.k_new", R * d, lb + 1, lb + 2)
        add(f"dec.l{i}.v_new", R * d, lb + 1, lb + 2)
        add(f"dec.l{i}.sscores", R * h * S, lb + 3, lb + 5)
        add(f"dec.l{i}.sctx", R * d, lb + 5, lb + 6)
        add(f"dec.l{i}.sattn", R * d, lb + 6, lb + 7)
        add(f"dec.l{i}.sres", R * d, lb + 7, lb + 8)
        add(f"dec.l{i}.snorm", R * d, lb + 8, lb + 15)
        add(f"dec.l{i}.cq", R * d, lb + 9, lb + 10)
        add(f"dec.l{i}.cq4", R * d, lb + 10, lb + 11)
        add(f"dec.l{i}.cscores", B * h * config.max_beam_size * S, lb + 11, lb + 13)
        add(f"dec.l{i}.cctx", R * d, lb + 13, lb + 14)
        add(f"dec.l{i}.cattn", R * d, lb + 14, lb + 15)
        add(f"dec.l{i}.cres", R * d, lb + 15, lb + 16)
        add(f"dec.l{i}.cnorm", R * d, lb + 16, lb + 20)
        add(f"dec.l{i}.ffn_h", R * ff, lb + 17, lb + 19)
        add(f"dec.l{i}.ffn_out", R * d, lb + 19, lb + 20)
        last = logits_step if i == D - 1 else lb + 21 + 7
        add(f"dec.l{i}.out", R * d, lb + 20, last)

    # classification pools the first position instead of decoding
    add("cls.pooled", B * d, dec_base, logits_step)
    add("dec.logits", R * V, logits_step, retrieve_step)
    # retrieve outputs are consumed by the host before the next step starts
    add("retrieve.group_max", R * V, retrieve_step, retrieve_step)
    add("retrieve.threshold", R, retrieve_step, retrieve_step)
    add("retrieve.lse", 2 * R, retrieve_step, retrieve_step)  # float64
    add("retrieve.cand_idx", R * V, retrieve_step, retrieve_step)
    return specs
